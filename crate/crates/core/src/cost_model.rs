//! Linear iteration-latency and swap-time models.
//!
//! A phase model predicts `alpha0 * N + alpha1 * X + beta` where `N` is the
//! total number of new tokens of the phase's batch entries and `X` is the sum
//! of `L^n_i * L^a_i` over those entries. Prefill entries attend only to their
//! own tokens, so for them `L^a_i = L^n_i`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::FitError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta: f64,
}

impl LatencyModel {
    pub fn eval(&self, tokens: f64, cross: f64) -> f64 {
        self.alpha0 * tokens + self.alpha1 * cross + self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapModel {
    pub per_block: f64,
    pub fixed: f64,
}

impl SwapModel {
    pub const ZERO: SwapModel = SwapModel {
        per_block: 0.0,
        fixed: 0.0,
    };

    /// Transfer time of `blocks` blocks; no transfer costs nothing.
    pub fn eval(&self, blocks: u64) -> f64 {
        if blocks == 0 {
            0.0
        } else {
            self.per_block * blocks as f64 + self.fixed
        }
    }
}

/// The full set of models used to cost a candidate batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModels {
    pub prefill: LatencyModel,
    pub decode: LatencyModel,
    pub swap: SwapModel,
}

impl Default for CostModels {
    fn default() -> Self {
        Self {
            prefill: LatencyModel {
                alpha0: 35.0,
                alpha1: 0.02,
                beta: 8_000.0,
            },
            decode: LatencyModel {
                alpha0: 25.0,
                alpha1: 0.004,
                beta: 12_000.0,
            },
            swap: SwapModel {
                per_block: 150.0,
                fixed: 500.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryPhase {
    Prefill,
    Decode,
}

/// One request's contribution to an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub phase: EntryPhase,
    pub l_n: u32,
    pub l_a: u32,
}

impl BatchEntry {
    pub fn prefill(l_n: u32) -> Self {
        Self {
            phase: EntryPhase::Prefill,
            l_n,
            l_a: l_n,
        }
    }

    pub fn decode(l_a: u32) -> Self {
        Self {
            phase: EntryPhase::Decode,
            l_n: 1,
            l_a,
        }
    }
}

/// Summed batch features; adding entries one by one is exact integer arithmetic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchFeatures {
    pub prefill_entries: u32,
    pub prefill_tokens: u64,
    pub prefill_cross: u64,
    pub decode_entries: u32,
    pub decode_tokens: u64,
    pub decode_cross: u64,
    pub swap_blocks: u64,
}

impl BatchFeatures {
    pub fn add(&mut self, e: BatchEntry) {
        let cross = u64::from(e.l_n) * u64::from(e.l_a);
        match e.phase {
            EntryPhase::Prefill => {
                self.prefill_entries += 1;
                self.prefill_tokens += u64::from(e.l_n);
                self.prefill_cross += cross;
            }
            EntryPhase::Decode => {
                self.decode_entries += 1;
                self.decode_tokens += u64::from(e.l_n);
                self.decode_cross += cross;
            }
        }
    }

    pub fn with(mut self, e: BatchEntry, swap_blocks: u32) -> Self {
        self.add(e);
        self.swap_blocks += u64::from(swap_blocks);
        self
    }

    pub fn entries(&self) -> u32 {
        self.prefill_entries + self.decode_entries
    }
}

impl CostModels {
    pub fn exec_time(&self, f: &BatchFeatures) -> f64 {
        let mut t = 0.0;
        if f.prefill_entries > 0 {
            t += self.prefill.eval(f.prefill_tokens as f64, f.prefill_cross as f64);
        }
        if f.decode_entries > 0 {
            t += self.decode.eval(f.decode_tokens as f64, f.decode_cross as f64);
        }
        t
    }

    /// Predicted iteration time: compute and swap overlap, so the longer one wins.
    pub fn predict(&self, f: &BatchFeatures) -> u64 {
        if f.entries() == 0 && f.swap_blocks == 0 {
            return 0;
        }
        let t = self.exec_time(f).max(self.swap.eval(f.swap_blocks));
        round_half_up(t)
    }
}

pub fn round_half_up(x: f64) -> u64 {
    if x <= 0.0 {
        0
    } else {
        (x + 0.5).floor() as u64
    }
}

pub fn predict_iteration(batch: &[BatchEntry], m_cpu_total: u32, models: &CostModels) -> u64 {
    let mut f = BatchFeatures::default();
    for &e in batch {
        f.add(e);
    }
    f.swap_blocks = u64::from(m_cpu_total);
    models.predict(&f)
}

/// Exponential moving average of iteration time; `prev == 0` means uninitialized.
pub fn update_t_avg(prev: u64, observed: u64, decay: f64) -> u64 {
    if prev == 0 {
        return observed;
    }
    round_half_up(decay * prev as f64 + (1.0 - decay) * observed as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfilePhase {
    Prefill,
    Decode,
    Swap,
}

/// One profiled measurement. For swap rows `l_n` is the number of blocks and `l_a` is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub phase: ProfilePhase,
    pub l_n: f64,
    pub l_a: f64,
    pub latency_us: f64,
}

impl ProfileSample {
    /// Latency the given models predict for this sample.
    pub fn predicted(&self, models: &CostModels) -> f64 {
        match self.phase {
            ProfilePhase::Prefill => models.prefill.eval(self.l_n, self.l_n * self.l_a),
            ProfilePhase::Decode => models.decode.eval(self.l_n, self.l_n * self.l_a),
            ProfilePhase::Swap if self.l_n > 0.0 => models.swap.per_block * self.l_n + models.swap.fixed,
            ProfilePhase::Swap => 0.0,
        }
    }
}

/// Weighted least squares on columns `cols`; weights are 1/max(y,1) so the
/// fit minimizes relative rather than absolute error.
fn weighted_lstsq(cols: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>, FitError> {
    let n = y.len();
    let p = cols.len();
    if n < p {
        return Err(FitError::TooFewSamples { needed: p, got: n });
    }
    let scales: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    if scales.contains(&0.0) {
        return Err(FitError::RankDeficient);
    }
    let w: Vec<f64> = y.iter().map(|&v| 1.0 / v.abs().max(1.0)).collect();
    let a = DMatrix::from_fn(n, p, |i, j| cols[j][i] / scales[j] * w[i]);
    let b = DVector::from_fn(n, |i, _| y[i] * w[i]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin / smax < 1e-9 {
        return Err(FitError::RankDeficient);
    }
    let x = svd.solve(&b, 0.0).map_err(|_| FitError::RankDeficient)?;
    Ok((0..p).map(|j| x[j] / scales[j]).collect())
}

pub fn fit_latency(samples: &[ProfileSample]) -> Result<LatencyModel, FitError> {
    if samples.len() < 3 {
        return Err(FitError::TooFewSamples {
            needed: 3,
            got: samples.len(),
        });
    }
    let tokens: Vec<f64> = samples.iter().map(|s| s.l_n).collect();
    let cross: Vec<f64> = samples.iter().map(|s| s.l_n * s.l_a).collect();
    let ones = vec![1.0; samples.len()];
    let y: Vec<f64> = samples.iter().map(|s| s.latency_us).collect();
    // Constant latency leaves the slope columns free; detect it up front so the
    // documented degenerate case yields a pure intercept instead of an error.
    if y.iter().all(|&v| v == y[0]) && distinct_rows(&tokens, &cross) >= 3 {
        return Ok(LatencyModel {
            alpha0: 0.0,
            alpha1: 0.0,
            beta: y[0].max(0.0),
        });
    }
    let x = weighted_lstsq(&[tokens, cross, ones], &y)?;
    Ok(LatencyModel {
        alpha0: x[0].max(0.0),
        alpha1: x[1].max(0.0),
        beta: x[2].max(0.0),
    })
}

fn distinct_rows(a: &[f64], b: &[f64]) -> usize {
    let mut rows: Vec<(u64, u64)> = a.iter().zip(b).map(|(x, y)| (x.to_bits(), y.to_bits())).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

pub fn fit_swap(samples: &[ProfileSample]) -> Result<SwapModel, FitError> {
    if samples.len() < 2 {
        return Err(FitError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let blocks: Vec<f64> = samples.iter().map(|s| s.l_n).collect();
    let ones = vec![1.0; samples.len()];
    let y: Vec<f64> = samples.iter().map(|s| s.latency_us).collect();
    let x = weighted_lstsq(&[blocks, ones], &y)?;
    Ok(SwapModel {
        per_block: x[0].max(0.0),
        fixed: x[1].max(0.0),
    })
}

/// Fits all models from a mixed profile. A profile without swap rows yields a zero swap model.
pub fn fit_profile(samples: &[ProfileSample]) -> Result<(CostModels, bool), FitError> {
    let pick = |p: ProfilePhase| samples.iter().copied().filter(|s| s.phase == p).collect::<Vec<_>>();
    let prefill = fit_latency(&pick(ProfilePhase::Prefill))?;
    let decode = fit_latency(&pick(ProfilePhase::Decode))?;
    let swap_rows = pick(ProfilePhase::Swap);
    let has_swap = !swap_rows.is_empty();
    let swap = if has_swap { fit_swap(&swap_rows)? } else { SwapModel::ZERO };
    Ok((CostModels { prefill, decode, swap }, has_swap))
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    phase: String,
    l_n: f64,
    l_a: f64,
    latency_us: f64,
}

pub fn read_profile<R: Read>(reader: R) -> Result<Vec<ProfileSample>, FitError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| FitError::BadSample { line: 1, msg: e.to_string() })?
        .clone();
    let expected = ["phase", "l_n", "l_a", "latency_us"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(FitError::BadSample {
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ProfileRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| FitError::BadSample { line, msg: e.to_string() })?;
        let phase = match row.phase.to_ascii_lowercase().as_str() {
            "prefill" => ProfilePhase::Prefill,
            "decode" => ProfilePhase::Decode,
            "swap" => ProfilePhase::Swap,
            other => {
                return Err(FitError::BadSample {
                    line,
                    msg: format!("unknown phase '{other}'"),
                })
            }
        };
        let vals = [row.l_n, row.l_a, row.latency_us];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FitError::BadSample {
                line,
                msg: "values must be finite and nonnegative".into(),
            });
        }
        if phase == ProfilePhase::Prefill && row.l_a < row.l_n {
            return Err(FitError::BadSample {
                line,
                msg: "prefill rows need l_a >= l_n".into(),
            });
        }
        out.push(ProfileSample {
            phase,
            l_n: row.l_n,
            l_a: row.l_a,
            latency_us: row.latency_us,
        });
    }
    Ok(out)
}

pub fn load_profile(path: &Path) -> Result<Vec<ProfileSample>, FitError> {
    let f = std::fs::File::open(path).map_err(|source| FitError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_profile(f)
}

pub fn write_profile<W: Write>(writer: W, samples: &[ProfileSample]) -> Result<(), FitError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        let phase = match s.phase {
            ProfilePhase::Prefill => "prefill",
            ProfilePhase::Decode => "decode",
            ProfilePhase::Swap => "swap",
        };
        w.serialize(ProfileRow {
            phase: phase.into(),
            l_n: s.l_n,
            l_a: s.l_a,
            latency_us: s.latency_us,
        })
        .map_err(|e| FitError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| FitError::Format(e.to_string()))
}

pub fn models_to_json(models: &CostModels) -> String {
    serde_json::to_string_pretty(models).expect("models serialize")
}

pub fn models_from_json(s: &str) -> Result<CostModels, FitError> {
    serde_json::from_str(s).map_err(|e| FitError::Format(e.to_string()))
}

pub fn load_models(path: &Path) -> Result<CostModels, FitError> {
    let s = std::fs::read_to_string(path).map_err(|source| FitError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    models_from_json(&s)
}

/// Sequence lengths 1, 2, 4, ... up to `max_len`.
pub fn calibration_grid(max_len: u32) -> Vec<u32> {
    std::iter::successors(Some(1u32), |&x| x.checked_mul(2))
        .take_while(|&x| x <= max_len)
        .collect()
}

/// Builds a synthetic profile from known models. Prefill rows use single
/// sequences of grid length; decode rows use `batch` sequences of grid
/// context; swap rows use grid block counts. Each latency is multiplied by
/// `1 + noise * u` with `u` uniform in [-1, 1].
pub fn synthesize_profile<R: Rng>(models: &CostModels, max_len: u32, noise: f64, rng: &mut R) -> Vec<ProfileSample> {
    let grid = calibration_grid(max_len);
    let mut out = Vec::new();
    let jitter = |v: f64, rng: &mut R| {
        if noise > 0.0 {
            v * (1.0 + noise * rng.random_range(-1.0..=1.0))
        } else {
            v
        }
    };
    for &l in &grid {
        let l = f64::from(l);
        let y = models.prefill.eval(l, l * l);
        out.push(ProfileSample {
            phase: ProfilePhase::Prefill,
            l_n: l,
            l_a: l,
            latency_us: jitter(y, rng),
        });
    }
    for &batch in &[1u32, 8, 32, 128] {
        for &ctx in &grid {
            let n = f64::from(batch);
            let cross = n * f64::from(ctx);
            let y = models.decode.eval(n, cross);
            out.push(ProfileSample {
                phase: ProfilePhase::Decode,
                l_n: n,
                l_a: f64::from(ctx),
                latency_us: jitter(y, rng),
            });
        }
    }
    for &b in &grid {
        let y = models.swap.eval(u64::from(b));
        out.push(ProfileSample {
            phase: ProfilePhase::Swap,
            l_n: f64::from(b),
            l_a: 0.0,
            latency_us: jitter(y, rng),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn models(decode: LatencyModel, swap: SwapModel) -> CostModels {
        CostModels {
            prefill: LatencyModel {
                alpha0: 1.0,
                alpha1: 0.0,
                beta: 0.0,
            },
            decode,
            swap,
        }
    }

    const DEC: LatencyModel = LatencyModel {
        alpha0: 10.0,
        alpha1: 1.0,
        beta: 50.0,
    };

    #[test]
    fn test_empty_batch_costs_nothing() {
        assert_eq!(predict_iteration(&[], 0, &CostModels::default()), 0);
    }

    #[test]
    fn test_single_decode_hand_evaluated() {
        let m = models(DEC, SwapModel::ZERO);
        assert_eq!(predict_iteration(&[BatchEntry::decode(100)], 0, &m), 160);
    }

    #[test]
    fn test_swap_dominates_when_longer() {
        let m = models(
            DEC,
            SwapModel {
                per_block: 20.0,
                fixed: 0.0,
            },
        );
        assert_eq!(predict_iteration(&[BatchEntry::decode(100)], 10, &m), 200);
    }

    #[test]
    fn test_t_avg_updates() {
        assert_eq!(update_t_avg(100, 100, 0.9), 100);
        assert_eq!(update_t_avg(0, 80, 0.9), 80);
        assert_eq!(update_t_avg(100, 200, 0.9), 110);
    }

    #[test]
    fn test_fit_recovers_noiseless_model() {
        let truth = LatencyModel {
            alpha0: 2.0,
            alpha1: 0.001,
            beta: 500.0,
        };
        let samples: Vec<_> = calibration_grid(2048)
            .into_iter()
            .flat_map(|l| [(f64::from(l), f64::from(l)), (f64::from(l), 4.0 * f64::from(l))])
            .map(|(n, a)| ProfileSample {
                phase: ProfilePhase::Decode,
                l_n: n,
                l_a: a,
                latency_us: truth.eval(n, n * a),
            })
            .collect();
        let fit = fit_latency(&samples).unwrap();
        for (got, want) in [(fit.alpha0, 2.0), (fit.alpha1, 0.001), (fit.beta, 500.0)] {
            assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn test_fit_identical_samples_is_rank_deficient() {
        let s = ProfileSample {
            phase: ProfilePhase::Decode,
            l_n: 4.0,
            l_a: 8.0,
            latency_us: 100.0,
        };
        assert!(fit_latency(&[s, s]).is_err());
        assert!(matches!(fit_latency(&[s, s, s]), Err(FitError::RankDeficient)));
    }

    #[test]
    fn test_fit_constant_latency() {
        let samples: Vec<_> = [(1.0, 1.0), (2.0, 5.0), (4.0, 4.0), (8.0, 100.0)]
            .iter()
            .map(|&(n, a)| ProfileSample {
                phase: ProfilePhase::Prefill,
                l_n: n,
                l_a: a,
                latency_us: 100.0,
            })
            .collect();
        let m = fit_latency(&samples).unwrap();
        assert_eq!((m.alpha0, m.alpha1, m.beta), (0.0, 0.0, 100.0));
    }

    #[test]
    fn test_fit_idempotent_on_own_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = CostModels::default();
        let (fit, has_swap) = fit_profile(&synthesize_profile(&truth, 2048, 0.0, &mut rng)).unwrap();
        assert!(has_swap);
        let (refit, _) = fit_profile(&synthesize_profile(&fit, 2048, 0.0, &mut rng)).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * b.abs().max(1e-12);
        assert!(close(refit.decode.alpha1, fit.decode.alpha1));
        assert!(close(refit.prefill.beta, fit.prefill.beta));
        assert!(close(refit.swap.per_block, fit.swap.per_block));
    }

    #[test]
    fn test_profile_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = synthesize_profile(&CostModels::default(), 64, 0.05, &mut rng);
        let mut buf = Vec::new();
        write_profile(&mut buf, &samples).unwrap();
        assert!(buf.starts_with(b"phase,l_n,l_a,latency_us\n"));
        let back = read_profile(&buf[..]).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn test_profile_rejects_bad_phase() {
        let csv = "phase,l_n,l_a,latency_us\nwarmup,1,1,5\n";
        assert!(matches!(read_profile(csv.as_bytes()), Err(FitError::BadSample { line: 2, .. })));
    }

    #[test]
    fn test_models_json_round_trip() {
        let m = CostModels::default();
        let s = models_to_json(&m);
        assert!(s.contains("\"per_block\""));
        assert_eq!(models_from_json(&s).unwrap(), m);
    }

    #[test]
    fn test_calibration_grid_powers_of_two() {
        assert_eq!(calibration_grid(20), vec![1, 2, 4, 8, 16]);
    }

    fn entry() -> impl Strategy<Value = BatchEntry> {
        (any::<bool>(), 1u32..4096, 1u32..4096).prop_map(|(p, n, a)| {
            if p {
                BatchEntry::prefill(n)
            } else {
                BatchEntry::decode(a)
            }
        })
    }

    proptest! {
        #[test]
        fn prop_predict_monotone(batch in proptest::collection::vec(entry(), 1..20), idx in 0usize..20,
                                 dn in 0u32..64, da in 0u32..64, m in 0u32..100, dm in 0u32..10) {
            let models = CostModels::default();
            let base = predict_iteration(&batch, m, &models);
            let mut grown = batch.clone();
            let i = idx % grown.len();
            match grown[i].phase {
                EntryPhase::Prefill => { grown[i].l_n += dn; grown[i].l_a = grown[i].l_n; }
                EntryPhase::Decode => grown[i].l_a += da,
            }
            prop_assert!(predict_iteration(&grown, m, &models) >= base);
            prop_assert!(predict_iteration(&batch, m + dm, &models) >= base);
        }

        #[test]
        fn prop_exec_is_sum_of_phases(batch in proptest::collection::vec(entry(), 0..20)) {
            let models = CostModels { swap: SwapModel::ZERO, ..CostModels::default() };
            let (pre, dec): (Vec<_>, Vec<_>) = batch.iter().partition(|e| e.phase == EntryPhase::Prefill);
            let mut fp = BatchFeatures::default();
            pre.iter().for_each(|&e| fp.add(e));
            let mut fd = BatchFeatures::default();
            dec.iter().for_each(|&e| fd.add(e));
            let mut fa = BatchFeatures::default();
            batch.iter().for_each(|&e| fa.add(e));
            let sum = models.exec_time(&fp) + models.exec_time(&fd);
            prop_assert!((models.exec_time(&fa) - sum).abs() < 1e-6 * sum.max(1.0));
        }
    }
}
