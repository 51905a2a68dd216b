//! Trace synthesis and trace CSV I/O.
//!
//! RT requests arrive as a Poisson process with lengths drawn from a bundled
//! length sample (or a lognormal fit). BE requests are submitted in waves; a
//! wave is released when every request of the previous wave has finished, so
//! its arrival time is only known once the simulation runs.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::WorkloadError;
use crate::request::{Request, RequestClass, RequestId};

const SHAREGPT_LENGTHS: &str = include_str!("../data/sharegpt_lengths.csv");
const LMSYS_LENGTHS: &str = include_str!("../data/lmsys_lengths.csv");

const STREAM_ARRIVALS: u64 = 0;
const STREAM_RT_LENGTHS: u64 = 1;
const STREAM_BE_LENGTHS: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RtLengthSource {
    /// Bundled chat-style length sample (long prompts).
    Sharegpt,
    /// Bundled chat-style length sample (short prompts).
    Lmsys,
    /// CSV with header `prompt_len,output_len`.
    File { path: PathBuf },
    Lognormal {
        prompt_mu: f64,
        prompt_sigma: f64,
        output_mu: f64,
        output_sigma: f64,
    },
}

impl RtLengthSource {
    /// Lognormal with the moments of the bundled `sharegpt` sample.
    pub fn sharegpt_lognormal() -> Self {
        RtLengthSource::Lognormal {
            prompt_mu: 4.9813,
            prompt_sigma: 0.9221,
            output_mu: 5.0788,
            output_sigma: 0.8925,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// RT arrivals per second.
    pub rt_rate: f64,
    pub rt_lengths: RtLengthSource,
    pub be_prompt_range: [u32; 2],
    pub be_output_range: [u32; 2],
    /// Requests per BE wave.
    pub be_wave_size: u32,
    /// Number of BE waves in the trace.
    pub be_waves: u32,
    pub duration_s: f64,
    /// Optional cap on the number of RT requests.
    pub max_rt_requests: Option<usize>,
    /// Lengths are clipped to this many tokens.
    pub max_len: u32,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            rt_rate: 6.0,
            rt_lengths: RtLengthSource::Sharegpt,
            be_prompt_range: [512, 1024],
            be_output_range: [32, 128],
            be_wave_size: 32,
            be_waves: 400,
            duration_s: 600.0,
            max_rt_requests: None,
            max_len: 2048,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidSpec(m));
        if !(self.rt_rate.is_finite() && self.rt_rate > 0.0) {
            return bad(format!("rt_rate must be positive, got {}", self.rt_rate));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        for (name, [lo, hi]) in [("be_prompt_range", self.be_prompt_range), ("be_output_range", self.be_output_range)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} must satisfy 1 <= lo <= hi, got [{lo}, {hi}]"));
            }
        }
        if self.be_waves > 0 && self.be_wave_size == 0 {
            return bad("be_wave_size must be positive when be_waves > 0".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if let RtLengthSource::Lognormal {
            prompt_sigma,
            output_sigma,
            ..
        } = self.rt_lengths
        {
            if !(prompt_sigma >= 0.0 && output_sigma >= 0.0) {
                return bad("lognormal sigmas must be nonnegative".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arrival {
    At(u64),
    /// Released when the previous wave completes; wave 0 is released at time 0.
    Wave(u32),
}

impl fmt::Display for Arrival {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arrival::At(t) => write!(f, "{t}"),
            Arrival::Wave(k) => write!(f, "wave:{k}"),
        }
    }
}

impl FromStr for Arrival {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(k) = s.strip_prefix("wave:") {
            k.parse().map(Arrival::Wave).map_err(|e| format!("bad wave index '{k}': {e}"))
        } else {
            s.parse().map(Arrival::At).map_err(|e| format!("bad arrival '{s}': {e}"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub arrival: Arrival,
    pub class: RequestClass,
    pub prompt_len: u32,
    pub output_len: u32,
}

/// Requests in id order: entry `i` becomes request `i`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, class: RequestClass) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }

    /// Requests in their initial state. Wave members get arrival 0 until released.
    pub fn to_requests(&self, group_size: u32) -> Vec<Request> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let arrival = match e.arrival {
                    Arrival::At(t) => t,
                    Arrival::Wave(_) => 0,
                };
                Request::new(i as RequestId, e.class, arrival, e.prompt_len, e.output_len, group_size)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let mut last_rt = 0;
        for (i, e) in self.entries.iter().enumerate() {
            let line = i + 2;
            if e.prompt_len == 0 || e.output_len == 0 {
                return Err(WorkloadError::Parse {
                    line,
                    msg: "prompt_len and output_len must be at least 1".into(),
                });
            }
            if e.class == RequestClass::Rt {
                match e.arrival {
                    Arrival::At(t) if t < last_rt => {
                        return Err(WorkloadError::Parse {
                            line,
                            msg: format!("RT arrival {t} is earlier than the previous RT arrival {last_rt}"),
                        })
                    }
                    Arrival::At(t) => last_rt = t,
                    Arrival::Wave(_) => {
                        return Err(WorkloadError::Parse {
                            line,
                            msg: "RT requests need a numeric arrival time".into(),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("arrival_us,class,prompt_len,output_len\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.arrival, e.class.as_str(), e.prompt_len, e.output_len));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), WorkloadError> {
        let io = |source| WorkloadError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_csv_string().as_bytes()).map_err(io)
    }
}

pub fn read_trace(text: &str) -> Result<Trace, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| WorkloadError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let expected = ["arrival_us", "class", "prompt_len", "output_len"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(WorkloadError::Parse {
            line: 1,
            msg: format!("expected header '{}'", expected.join(",")),
        });
    }
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| WorkloadError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| WorkloadError::Parse { line, msg };
        let arrival: Arrival = rec[0].parse().map_err(err)?;
        let class: RequestClass = rec[1].parse().map_err(|e: String| err(e))?;
        let prompt_len: u32 = rec[2].parse().map_err(|e| err(format!("bad prompt_len '{}': {e}", &rec[2])))?;
        let output_len: u32 = rec[3].parse().map_err(|e| err(format!("bad output_len '{}': {e}", &rec[3])))?;
        if prompt_len == 0 || output_len == 0 {
            return Err(err("prompt_len and output_len must be at least 1".into()));
        }
        entries.push(TraceEntry {
            arrival,
            class,
            prompt_len,
            output_len,
        });
    }
    let trace = Trace { entries };
    trace.validate()?;
    Ok(trace)
}

pub fn load_trace(path: &Path) -> Result<Trace, WorkloadError> {
    let text = fs::read_to_string(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace(&text)
}

fn parse_length_pairs(text: &str, origin: &str) -> Result<Vec<(u32, u32)>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let err = |msg: String| WorkloadError::Parse {
            line,
            msg: format!("{origin}: {msg}"),
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 2 {
            return Err(err(format!("expected 2 fields, got {}", rec.len())));
        }
        let p: u32 = rec[0].parse().map_err(|e| err(format!("bad prompt_len: {e}")))?;
        let o: u32 = rec[1].parse().map_err(|e| err(format!("bad output_len: {e}")))?;
        if p == 0 || o == 0 {
            return Err(err("lengths must be at least 1".into()));
        }
        out.push((p, o));
    }
    if out.is_empty() {
        return Err(WorkloadError::InvalidSpec(format!("{origin}: length file has no rows")));
    }
    Ok(out)
}

enum LengthSampler {
    Empirical(Vec<(u32, u32)>),
    Lognormal(LogNormal<f64>, LogNormal<f64>),
}

impl LengthSampler {
    fn new(src: &RtLengthSource) -> Result<Self, WorkloadError> {
        Ok(match src {
            RtLengthSource::Sharegpt => LengthSampler::Empirical(parse_length_pairs(SHAREGPT_LENGTHS, "sharegpt")?),
            RtLengthSource::Lmsys => LengthSampler::Empirical(parse_length_pairs(LMSYS_LENGTHS, "lmsys")?),
            RtLengthSource::File { path } => {
                let text = fs::read_to_string(path).map_err(|source| WorkloadError::Io {
                    path: path.clone(),
                    source,
                })?;
                LengthSampler::Empirical(parse_length_pairs(&text, &path.display().to_string())?)
            }
            &RtLengthSource::Lognormal {
                prompt_mu,
                prompt_sigma,
                output_mu,
                output_sigma,
            } => {
                let ln = |mu, sigma| LogNormal::new(mu, sigma).map_err(|e| WorkloadError::InvalidSpec(e.to_string()));
                LengthSampler::Lognormal(ln(prompt_mu, prompt_sigma)?, ln(output_mu, output_sigma)?)
            }
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng, max_len: u32) -> (u32, u32) {
        let (p, o) = match self {
            LengthSampler::Empirical(pairs) => pairs[rng.random_range(0..pairs.len())],
            LengthSampler::Lognormal(p, o) => {
                let round = |x: f64| x.round().clamp(1.0, f64::from(u32::MAX)) as u32;
                (round(p.sample(rng)), round(o.sample(rng)))
            }
        };
        (p.clamp(1, max_len), o.clamp(1, max_len))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Builds a trace: wave 0, then RT requests in arrival order, then waves 1.. .
pub fn generate_trace(spec: &WorkloadSpec) -> Result<Trace, WorkloadError> {
    spec.validate()?;
    let sampler = LengthSampler::new(&spec.rt_lengths)?;
    let mut arrivals = stream(spec.seed, STREAM_ARRIVALS);
    let mut rt_lengths = stream(spec.seed, STREAM_RT_LENGTHS);
    let mut be_lengths = stream(spec.seed, STREAM_BE_LENGTHS);

    let horizon_us = spec.duration_s * 1e6;
    let gap = Exp::new(spec.rt_rate / 1e6).map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
    let mut rt = Vec::new();
    let mut t = 0.0f64;
    loop {
        t += gap.sample(&mut arrivals);
        if t >= horizon_us || spec.max_rt_requests.is_some_and(|m| rt.len() >= m) {
            break;
        }
        let (prompt_len, output_len) = sampler.sample(&mut rt_lengths, spec.max_len);
        rt.push(TraceEntry {
            arrival: Arrival::At(t.floor() as u64),
            class: RequestClass::Rt,
            prompt_len,
            output_len,
        });
    }

    let [plo, phi] = spec.be_prompt_range;
    let [olo, ohi] = spec.be_output_range;
    let mut wave = |k: u32| -> Vec<TraceEntry> {
        (0..spec.be_wave_size)
            .map(|_| TraceEntry {
                arrival: Arrival::Wave(k),
                class: RequestClass::Be,
                prompt_len: be_lengths.random_range(plo..=phi).min(spec.max_len),
                output_len: be_lengths.random_range(olo..=ohi).min(spec.max_len),
            })
            .collect()
    };

    let mut entries = Vec::new();
    if spec.be_waves > 0 {
        entries.extend(wave(0));
    }
    entries.extend(rt);
    for k in 1..spec.be_waves {
        entries.extend(wave(k));
    }
    Ok(Trace { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub class: RequestClass,
    pub count: usize,
    pub prompt_mean: f64,
    pub prompt_std: f64,
    pub output_mean: f64,
    pub output_std: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Per-class prompt/output length statistics (population standard deviation).
pub fn length_stats(trace: &Trace) -> Vec<LengthStats> {
    [RequestClass::Rt, RequestClass::Be]
        .into_iter()
        .map(|class| {
            let rows = trace.entries.iter().filter(move |e| e.class == class);
            let (prompt_mean, prompt_std) = mean_std(rows.clone().map(|e| f64::from(e.prompt_len)));
            let (output_mean, output_std) = mean_std(rows.clone().map(|e| f64::from(e.output_len)));
            LengthStats {
                class,
                count: rows.count(),
                prompt_mean,
                prompt_std,
                output_mean,
                output_std,
            }
        })
        .collect()
}

pub fn format_length_stats(stats: &[LengthStats]) -> String {
    let mut out = format!(
        "{:<6} {:>7} {:>12} {:>12} {:>12} {:>12}\n",
        "type", "count", "avg_prompt", "std_prompt", "avg_output", "std_output"
    );
    for s in stats {
        out.push_str(&format!(
            "{:<6} {:>7} {:>12.2} {:>12.2} {:>12.2} {:>12.2}\n",
            s.class.as_str(),
            s.count,
            s.prompt_mean,
            s.prompt_std,
            s.output_mean,
            s.output_std
        ));
    }
    out
}
