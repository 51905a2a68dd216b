use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_serve::cost_model::{fit_profile, load_profile, models_to_json, ProfilePhase};
use hybrid_serve::error::{ConfigError, FitError};
use hybrid_serve::experiment::{format_comparison, run_cell, sweep, CellResult, ExperimentConfig};
use hybrid_serve::metrics::{self, ExportFormat, MetricsReport};
use hybrid_serve::scheduler::SchedulerKind;
use hybrid_serve::workload::{format_length_stats, generate_trace, length_stats, load_trace};

#[derive(Parser)]
#[command(name = "hybrid-serve", version, about = "Simulate RT/BE request scheduling on one LLM engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit prefill, decode and swap latency models to a profile CSV.
    Fit {
        /// CSV with header `phase,l_n,l_a,latency_us`.
        #[arg(long)]
        profile: PathBuf,
        /// Output model JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a trace for one RT rate and print its length statistics.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output trace CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one (scheduler, rate) cell and write its event log and metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "packing")]
        scheduler: SchedulerKind,
        /// Replay this trace instead of generating one.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Sweep rates x schedulers and write a comparison table and plot data.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of schedulers to run.
        #[arg(long, value_delimiter = ',')]
        schedulers: Option<Vec<SchedulerKind>>,
    },
    /// Print a saved metrics JSON, optionally converting it to CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon_s: Option<f64>,
    /// RT arrival rate; for `compare` it replaces the sweep list.
    #[arg(long)]
    rate: Option<f64>,
    /// Output root; falls back to HYBRID_SERVE_OUT, then the config value.
    #[arg(long, env = "HYBRID_SERVE_OUT")]
    out_dir: Option<PathBuf>,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

const EXIT_INPUT: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_SIM: u8 = 4;

fn fail(code: u8) -> impl Fn(&dyn std::fmt::Display) -> Failure {
    move |e| Failure { code, msg: e.to_string() }
}

fn config_failure(e: ConfigError) -> Failure {
    fail(EXIT_INPUT)(&e)
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(config_failure)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(h) = self.horizon_s {
            cfg.horizon_s = h;
        }
        if let Some(r) = self.rate {
            cfg.rates = vec![r];
        }
        if let Some(d) = &self.out_dir {
            cfg.output_dir = d.clone();
        }
        cfg.validate().map_err(config_failure)?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: EXIT_INPUT,
        msg: format!("cannot create {}: {e}", dir.display()),
    })
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| Failure {
        code: EXIT_INPUT,
        msg: format!("cannot write {}: {e}", path.display()),
    })
}

fn cmd_fit(profile: &Path, out: &Path) -> Result<(), Failure> {
    let code = |e: &FitError| match e {
        FitError::Io { .. } => EXIT_INPUT,
        _ => EXIT_MODEL,
    };
    let samples = load_profile(profile).map_err(|e| fail(code(&e))(&e))?;
    let (models, has_swap) = fit_profile(&samples).map_err(|e| fail(code(&e))(&e))?;
    write_file(out, &models_to_json(&models))?;
    println!("{:<8} {:>7} {:>14} {:>14}", "phase", "samples", "mean_rel_err", "max_rel_err");
    for phase in [ProfilePhase::Prefill, ProfilePhase::Decode, ProfilePhase::Swap] {
        let errs: Vec<f64> = samples
            .iter()
            .filter(|s| s.phase == phase)
            .map(|s| (s.predicted(&models) - s.latency_us).abs() / s.latency_us.abs().max(1.0))
            .collect();
        if errs.is_empty() {
            continue;
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let max = errs.iter().fold(0.0f64, |m, &e| m.max(e));
        println!("{:<8} {:>7} {:>14.3e} {:>14.3e}", format!("{phase:?}").to_lowercase(), errs.len(), mean, max);
    }
    if !has_swap {
        println!("note: profile has no swap rows; swap model set to zero");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gen(common: &Common, out: &Path) -> Result<(), Failure> {
    let cfg = common.load()?;
    let trace = generate_trace(&cfg.workload_spec(cfg.rates[0])).map_err(|e| fail(EXIT_INPUT)(&e))?;
    trace.save(out).map_err(|e| fail(EXIT_INPUT)(&e))?;
    print!("{}", format_length_stats(&length_stats(&trace)));
    println!("wrote {} requests to {}", trace.len(), out.display());
    Ok(())
}

fn write_cell(dir: &Path, cell: &CellResult) -> Result<(), Failure> {
    create_dir(dir)?;
    write_file(&dir.join("events.jsonl"), &cell.log.to_jsonl())?;
    write_file(&dir.join("digest.txt"), &format!("{}\n", cell.digest()))?;
    export(&cell.report, ExportFormat::Json, &dir.join("metrics.json"))?;
    export(&cell.report, ExportFormat::Csv, &dir.join("metrics.csv"))
}

fn export(report: &MetricsReport, format: ExportFormat, path: &Path) -> Result<(), Failure> {
    metrics::export(report, format, path).map_err(|e| fail(EXIT_INPUT)(&e))
}

fn cell_dir(root: &Path, scheduler: SchedulerKind, rate: f64) -> PathBuf {
    root.join(format!("{}_rate{rate}", scheduler.as_str()))
}

fn cmd_simulate(common: &Common, scheduler: SchedulerKind, trace_path: Option<&Path>) -> Result<(), Failure> {
    let cfg = common.load()?;
    let rate = cfg.rates[0];
    let trace = match trace_path {
        Some(p) => load_trace(p),
        None => generate_trace(&cfg.workload_spec(rate)),
    }
    .map_err(|e| fail(EXIT_INPUT)(&e))?;
    let cell = run_cell(&cfg.sim_config(scheduler), rate, &trace).map_err(|e| fail(EXIT_SIM)(&e))?;
    let dir = cell_dir(&cfg.output_dir, scheduler, rate);
    write_cell(&dir, &cell)?;
    print!("{}", format_comparison(std::slice::from_ref(&cell)));
    println!("iterations {}", cell.log.records.len());
    println!("digest {}", cell.digest());
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_compare(common: &Common, schedulers: Option<&[SchedulerKind]>) -> Result<(), Failure> {
    let mut cfg = common.load()?;
    if let Some(s) = schedulers {
        cfg.schedulers = s.to_vec();
    }
    let cells = sweep(&cfg).map_err(|e| fail(EXIT_SIM)(&e))?;
    let root = &cfg.output_dir;
    create_dir(root)?;
    let mut digests = String::new();
    for c in &cells {
        write_cell(&cell_dir(root, c.scheduler, c.rate), c)?;
        digests.push_str(&format!("{}\t{}\t{}\n", c.scheduler.as_str(), c.rate, c.digest()));
    }
    let table = format_comparison(&cells);
    write_file(&root.join("comparison.txt"), &table)?;
    write_file(&root.join("digests.tsv"), &digests)?;
    let points: Vec<_> = cells
        .iter()
        .map(|c| (c.scheduler.as_str().to_string(), c.rate, c.report.aggregate.clone()))
        .collect();
    metrics::write_plot_data(&root.join("plots"), &points).map_err(|e| fail(EXIT_INPUT)(&e))?;
    print!("{table}");
    println!("wrote {}", root.display());
    Ok(())
}

fn cmd_report(path: &Path, csv: Option<&Path>) -> Result<(), Failure> {
    let report = metrics::load_json(path).map_err(|e| fail(EXIT_INPUT)(&e))?;
    let a = &report.aggregate;
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!("rt requests           {} ({} finished)", a.rt_requests, a.rt_finished);
    println!("norm latency (us/tok) {}", show(a.mean_normalized_latency_us));
    println!("ttft attainment       {}", show(a.ttft_attainment));
    println!("tpot attainment       {}", show(a.tpot_attainment));
    println!("be throughput (req/s) {:.4}", a.be_throughput_rps);
    println!("be throughput (tok/s) {:.2}", a.be_throughput_tps);
    if let Some(out) = csv {
        export(&report, ExportFormat::Csv, out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Fit { profile, out } => cmd_fit(profile, out),
        Cmd::Gen { common, out } => cmd_gen(common, out),
        Cmd::Simulate {
            common,
            scheduler,
            trace,
        } => cmd_simulate(common, *scheduler, trace.as_deref()),
        Cmd::Compare { common, schedulers } => cmd_compare(common, schedulers.as_deref()),
        Cmd::Report { metrics, csv } => cmd_report(metrics, csv.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
