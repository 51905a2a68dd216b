//! Experiment configuration and rate × scheduler sweeps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost_model::{load_models, CostModels};
use crate::error::{ConfigError, SimError};
use crate::metrics::MetricsReport;
use crate::request::SloConfig;
use crate::scheduler::{BaselineParams, SchedulerKind};
use crate::sim::{self, EventLog, SimConfig};
use crate::workload::{generate_trace, RtLengthSource, Trace, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub rt_lengths: RtLengthSource,
    pub be_prompt_range: [u32; 2],
    pub be_output_range: [u32; 2],
    pub be_wave_size: u32,
    pub be_waves: u32,
    #[serde(default)]
    pub max_rt_requests: Option<usize>,
    pub max_len: u32,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let w = WorkloadSpec::default();
        Self {
            rt_lengths: w.rt_lengths,
            be_prompt_range: w.be_prompt_range,
            be_output_range: w.be_output_range,
            be_wave_size: w.be_wave_size,
            be_waves: w.be_waves,
            max_rt_requests: w.max_rt_requests,
            max_len: w.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSection {
    pub num_blocks: u32,
    pub slots_per_block: u32,
    pub bidirectional: bool,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self {
            num_blocks: 1024,
            slots_per_block: 16,
            bidirectional: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    pub b_base: u32,
    pub b_max: u32,
    /// Batch cap of the FCFS and round-robin baselines.
    pub baseline_cap: u32,
    #[serde(default)]
    pub baseline_max_batched_tokens: Option<u32>,
    pub t_avg_decay: f64,
    pub overhead_us: u64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            b_base: 128,
            b_max: 2048,
            baseline_cap: 128,
            baseline_max_batched_tokens: None,
            t_avg_decay: 0.9,
            overhead_us: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub horizon_s: f64,
    pub schedulers: Vec<SchedulerKind>,
    /// RT arrival rates (requests/s) to sweep.
    pub rates: Vec<f64>,
    pub output_dir: PathBuf,
    /// Fitted model JSON; overrides `models` when set.
    #[serde(default)]
    pub models_file: Option<PathBuf>,
    pub models: CostModels,
    pub slo: SloConfig,
    pub pool: PoolSection,
    pub workload: WorkloadSection,
    pub scheduler: SchedulerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            horizon_s: 600.0,
            schedulers: SchedulerKind::ALL.to_vec(),
            rates: vec![2.0, 6.0, 10.0],
            output_dir: PathBuf::from("out"),
            models_file: None,
            models: CostModels::default(),
            slo: SloConfig::default(),
            pool: PoolSection::default(),
            workload: WorkloadSection::default(),
            scheduler: SchedulerSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML. Relative file paths are resolved against `base_dir`, and a
    /// model file is loaded immediately.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        if let Some(p) = cfg.models_file.as_mut() {
            resolve(p);
        }
        if let RtLengthSource::File { path } = &mut cfg.workload.rt_lengths {
            resolve(path);
            if !path.is_file() {
                return Err(ConfigError::Invalid(format!("length file {} does not exist", path.display())));
            }
        }
        if let Some(p) = &cfg.models_file {
            cfg.models = load_models(p).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schedulers.is_empty() {
            return bad("at least one scheduler is required".into());
        }
        if self.rates.is_empty() {
            return bad("at least one rate is required".into());
        }
        if !(self.horizon_s.is_finite() && self.horizon_s > 0.0) {
            return bad(format!("horizon_s must be positive, got {}", self.horizon_s));
        }
        for r in &self.rates {
            self.workload_spec(*r).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.sim_config(self.schedulers[0])
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn horizon_us(&self) -> u64 {
        (self.horizon_s * 1e6).round() as u64
    }

    pub fn workload_spec(&self, rate: f64) -> WorkloadSpec {
        let w = &self.workload;
        WorkloadSpec {
            rt_rate: rate,
            rt_lengths: w.rt_lengths.clone(),
            be_prompt_range: w.be_prompt_range,
            be_output_range: w.be_output_range,
            be_wave_size: w.be_wave_size,
            be_waves: w.be_waves,
            duration_s: self.horizon_s,
            max_rt_requests: w.max_rt_requests,
            max_len: w.max_len,
            seed: self.seed,
        }
    }

    pub fn sim_config(&self, scheduler: SchedulerKind) -> SimConfig {
        let s = &self.scheduler;
        SimConfig {
            scheduler,
            slo: self.slo,
            num_blocks: self.pool.num_blocks,
            slots_per_block: self.pool.slots_per_block,
            bidirectional: self.pool.bidirectional,
            models: self.models,
            horizon_us: self.horizon_us(),
            seed: self.seed,
            b_base: s.b_base,
            b_max: s.b_max,
            baseline: BaselineParams {
                cap: s.baseline_cap,
                max_batched_tokens: s.baseline_max_batched_tokens,
            },
            t_avg_decay: s.t_avg_decay,
            overhead_us: s.overhead_us,
            diagnostics: false,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub scheduler: SchedulerKind,
    pub rate: f64,
    pub log: EventLog,
    pub report: MetricsReport,
}

impl CellResult {
    pub fn digest(&self) -> String {
        self.log.digest()
    }
}

pub fn run_cell(cfg: &SimConfig, rate: f64, trace: &Trace) -> Result<CellResult, SimError> {
    let (log, report) = sim::run(cfg, trace)?;
    Ok(CellResult {
        scheduler: cfg.scheduler,
        rate,
        log,
        report,
    })
}

/// Runs every (rate, scheduler) cell. All schedulers at one rate share the
/// same trace. Cells run on separate threads; results come back in
/// (rate, scheduler) order of the config.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<CellResult>, SimError> {
    let traces = cfg
        .rates
        .iter()
        .map(|&r| generate_trace(&cfg.workload_spec(r)).map_err(|e| SimError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(f64, &Trace, SimConfig)> = cfg
        .rates
        .iter()
        .zip(&traces)
        .flat_map(|(&rate, trace)| cfg.schedulers.iter().map(move |&k| (rate, trace, cfg.sim_config(k))))
        .collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(rate, trace, sc)| s.spawn(move || run_cell(sc, *rate, trace)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    })
}

fn opt(v: Option<f64>, scale: f64, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.*}", digits, x * scale))
}

pub fn format_comparison(cells: &[CellResult]) -> String {
    let mut out = format!(
        "{:>6} {:<12} {:>14} {:>9} {:>9} {:>9} {:>10} {:>9} {:>7}\n",
        "rate", "scheduler", "norm_lat_ms", "ttft_att", "tpot_att", "be_rps", "be_tps", "rt_done", "drops"
    );
    for c in cells {
        let a = &c.report.aggregate;
        out.push_str(&format!(
            "{:>6} {:<12} {:>14} {:>9} {:>9} {:>9.3} {:>10.1} {:>9} {:>7}\n",
            c.rate,
            c.scheduler.as_str(),
            opt(a.mean_normalized_latency_us, 1e-3, 3),
            opt(a.ttft_attainment, 1.0, 3),
            opt(a.tpot_attainment, 1.0, 3),
            a.be_throughput_rps,
            a.be_throughput_tps,
            format!("{}/{}", a.rt_finished, a.rt_requests),
            a.drops
        ));
    }
    out
}
