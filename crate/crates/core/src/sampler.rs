//! Simulated measurement data: binomial projection noise around exact trace
//! values, per-shot ensemble draws, and round-parallel execution.
//!
//! Every random stream is a ChaCha generator keyed by `(master seed, setting
//! id)` with the time index as stream number, so results do not depend on
//! execution order or thread count.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::planner::{MeasurementSetting, RoundSchedule};
use crate::sim_exact::sign_correction;

/// Hoeffding count `ceil(2 / eps^2 ln(2 / delta))`.
pub fn shots_needed(epsilon: f64, delta: f64) -> Result<u64> {
    if !(epsilon > 0.0 && epsilon <= 2.0) {
        return Err(Error::Domain(format!("precision {epsilon} outside (0, 2]")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!(
            "failure probability {delta} outside (0, 1)"
        )));
    }
    let n = 2.0 / (epsilon * epsilon) * (2.0 / delta).ln();
    // guard against 0.5000000001-style rounding noise at exact integers
    let r = n.round();
    Ok(if (n - r).abs() < 1e-9 * n.max(1.0) {
        r as u64
    } else {
        n.ceil() as u64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    pub setting_id: u64,
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    /// Zero for exact-mean (noise-free) traces.
    pub shots_per_time: u64,
    pub seed: u64,
    /// Per-time means of the shot batches, when batching was requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub batch_means: Vec<Vec<f64>>,
}

impl TimeTrace {
    /// Plug-in standard deviation of each mean, `sqrt((1 - B^2) / S)`.
    pub fn mean_sd(&self) -> Vec<f64> {
        if self.shots_per_time == 0 {
            return vec![0.0; self.means.len()];
        }
        let s = self.shots_per_time as f64;
        self.means
            .iter()
            .map(|b| ((1.0 - b * b).max(0.0) / s).sqrt())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotConfig {
    /// Shots per time point; zero selects exact means.
    pub shots: u64,
    /// Shot batches per time point, kept for median-of-means fits.
    #[serde(default = "one")]
    pub batches: usize,
    pub master_seed: u64,
}

fn one() -> usize {
    1
}

impl ShotConfig {
    pub fn new(shots: u64, master_seed: u64) -> Self {
        Self {
            shots,
            batches: 1,
            master_seed,
        }
    }

    pub fn exact() -> Self {
        Self::new(0, 0)
    }
}

/// Seed of the streams belonging to one setting.
pub fn setting_seed(master_seed: u64, setting_id: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(setting_id.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Generator for time index `time_index` of a setting seeded with `seed`.
pub fn stream_rng(seed: u64, time_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(time_index as u64);
    rng
}

fn check_value(v: f64, setting_id: u64, t: f64) -> Result<f64> {
    if !v.is_finite() || v.abs() > 1.0 + 1e-9 {
        return Err(Error::OutOfRange {
            what: format!("setting {setting_id:016x} at t = {t}"),
            value: v,
        });
    }
    Ok(v.clamp(-1.0, 1.0))
}

fn check_times(times: &[f64], n_values: usize) -> Result<()> {
    if times.len() != n_values {
        return Err(Error::Domain(format!(
            "{} times but {n_values} values",
            times.len()
        )));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("times must be strictly increasing".into()));
    }
    Ok(())
}

/// Mean of `shots` outcomes `+-1` with expectation `value`, split into batches.
fn binomial_means(value: f64, shots: u64, batches: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let p = (1.0 + value) / 2.0;
    let batches = batches.max(1) as u64;
    let base = shots / batches;
    let mut total = 0u64;
    let mut per_batch = Vec::new();
    for k in 0..batches {
        let n = base + u64::from(k < shots % batches);
        let ones = Binomial::new(n, p)
            .expect("probability validated")
            .sample(rng);
        total += ones;
        if batches > 1 {
            per_batch.push(2.0 * ones as f64 / n as f64 - 1.0);
        }
    }
    (2.0 * total as f64 / shots as f64 - 1.0, per_batch)
}

/// Sample a trace around the exact values `exact[i] = B(times[i])` of
/// `setting`. The Pauli-gate sign correction is applied to the data.
pub fn sample_trace(
    exact: &[f64],
    setting: &MeasurementSetting,
    times: &[f64],
    cfg: &ShotConfig,
) -> Result<TimeTrace> {
    sample_values(exact, setting.id, sign_correction(setting), times, cfg)
}

/// Sample `+-1` outcomes with expectations `exact` for an arbitrary stream
/// identifier, multiplying the data by `sign`.
pub fn sample_values(
    exact: &[f64],
    id: u64,
    sign: f64,
    times: &[f64],
    cfg: &ShotConfig,
) -> Result<TimeTrace> {
    check_times(times, exact.len())?;
    let seed = setting_seed(cfg.master_seed, id);
    let mut means = Vec::with_capacity(times.len());
    let mut batch_means = Vec::new();
    for (i, (&v, &t)) in exact.iter().zip(times).enumerate() {
        let v = check_value(v, id, t)?;
        if cfg.shots == 0 {
            means.push(sign * v);
            continue;
        }
        let mut rng = stream_rng(seed, i);
        let (m, b) = binomial_means(v, cfg.shots, cfg.batches, &mut rng);
        means.push(sign * m);
        if !b.is_empty() {
            batch_means.push(b.into_iter().map(|x| sign * x).collect());
        }
    }
    Ok(TimeTrace {
        setting_id: id,
        times: times.to_vec(),
        means,
        shots_per_time: cfg.shots,
        seed,
        batch_means,
    })
}

/// Gaussian parameter draws `lambda + B z` with `B B^T = Sigma`.
#[derive(Clone, Debug)]
pub struct ParameterSampler {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
}

impl ParameterSampler {
    pub fn new(mean: &[f64], factor: DMatrix<f64>) -> Result<Self> {
        if factor.nrows() != mean.len() {
            return Err(Error::Domain("factor rows differ from mean length".into()));
        }
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            factor,
        })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.factor.ncols(), |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        (&self.mean + &self.factor * z).iter().copied().collect()
    }
}

/// Literal ensemble sampling: every shot draws fresh parameters and one
/// projective outcome with expectation `member(params, t)`.
pub fn sample_ensemble_trace(
    params: &ParameterSampler,
    member: impl Fn(&[f64], f64) -> Result<f64>,
    setting: &MeasurementSetting,
    times: &[f64],
    cfg: &ShotConfig,
) -> Result<TimeTrace> {
    check_times(times, times.len())?;
    let sign = sign_correction(setting);
    let seed = setting_seed(cfg.master_seed, setting.id);
    let mut means = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let mut rng = stream_rng(seed, i);
        let mut sum = 0i64;
        for _ in 0..cfg.shots {
            let lam = params.draw(&mut rng);
            let v = check_value(member(&lam, t)?, setting.id, t)?;
            let up = rng.random::<f64>() < (1.0 + v) / 2.0;
            sum += if up { 1 } else { -1 };
        }
        means.push(sign * sum as f64 / cfg.shots.max(1) as f64);
    }
    Ok(TimeTrace {
        setting_id: setting.id,
        times: times.to_vec(),
        means,
        shots_per_time: cfg.shots,
        seed,
        batch_means: Vec::new(),
    })
}

/// Execute `settings` round by round; within a round all settings run in
/// parallel. `exact` evaluates `B` on the time grid. Output is sorted by
/// setting id. Settings without a round are run after the schedule.
pub fn run_schedule<F>(
    schedule: &RoundSchedule,
    settings: &[MeasurementSetting],
    exact: F,
    times: &[f64],
    cfg: &ShotConfig,
) -> Result<Vec<TimeTrace>>
where
    F: Fn(&MeasurementSetting) -> Result<Vec<f64>> + Sync,
{
    let by_id: BTreeMap<u64, &MeasurementSetting> = settings.iter().map(|s| (s.id, s)).collect();
    let mut rounds: Vec<Vec<u64>> = schedule
        .rounds
        .iter()
        .map(|r| {
            r.iter()
                .flat_map(|g| g.setting_ids.iter().copied())
                .collect()
        })
        .collect();
    let scheduled: std::collections::BTreeSet<u64> = rounds.iter().flatten().copied().collect();
    let rest: Vec<u64> = by_id
        .keys()
        .copied()
        .filter(|id| !scheduled.contains(id))
        .collect();
    if !rest.is_empty() {
        rounds.push(rest);
    }
    let mut out: BTreeMap<u64, TimeTrace> = BTreeMap::new();
    let mut failures = Vec::new();
    for round in rounds {
        let results: Vec<(u64, Result<TimeTrace>)> = round
            .par_iter()
            .filter(|id| !out.contains_key(id))
            .map(|id| {
                let r = match by_id.get(id) {
                    Some(s) => exact(s).and_then(|v| sample_trace(&v, s, times, cfg)),
                    None => Err(Error::Config(format!(
                        "schedule names unknown setting {id:016x}"
                    ))),
                };
                (*id, r)
            })
            .collect();
        for (id, r) in results {
            match r {
                Ok(t) => {
                    out.insert(id, t);
                }
                Err(e) => failures.push(format!("{id:016x}: {e}")),
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Domain(format!(
            "{} setting(s) failed: {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    Ok(out.into_values().collect())
}

/// Comment line carrying the schema version and config hash.
pub fn provenance_line(schema_version: u32, config_hash: &str) -> String {
    format!("# schema_version={schema_version} config_hash={config_hash}")
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    setting_id: String,
    t: f64,
    mean: f64,
    shots: u64,
    seed: u64,
}

/// Write traces as CSV rows `(setting_id, t, mean, shots, seed)` after a
/// provenance comment line.
pub fn write_traces_csv<W: Write>(
    mut w: W,
    traces: &[TimeTrace],
    schema_version: u32,
    config_hash: &str,
) -> Result<()> {
    writeln!(w, "{}", provenance_line(schema_version, config_hash))?;
    let mut csv = csv::Writer::from_writer(w);
    for tr in traces {
        for (t, m) in tr.times.iter().zip(&tr.means) {
            csv.serialize(TraceRow {
                setting_id: format!("{:016x}", tr.setting_id),
                t: *t,
                mean: *m,
                shots: tr.shots_per_time,
                seed: tr.seed,
            })?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Read traces written by [`write_traces_csv`]; batch means are not stored.
pub fn read_traces_csv<R: BufRead>(r: R) -> Result<Vec<TimeTrace>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let mut out: BTreeMap<u64, TimeTrace> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: TraceRow = row?;
        let id =
            u64::from_str_radix(&row.setting_id, 16).map_err(|e| Error::Parse(e.to_string()))?;
        let tr = out.entry(id).or_insert_with(|| TimeTrace {
            setting_id: id,
            times: Vec::new(),
            means: Vec::new(),
            shots_per_time: row.shots,
            seed: row.seed,
            batch_means: Vec::new(),
        });
        tr.times.push(row.t);
        tr.means.push(row.mean);
    }
    Ok(out.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pauli::{Axis, PauliString};
    use crate::planner::{hamiltonian_setting, RegionGroup, WSpec};

    fn setting() -> MeasurementSetting {
        hamiltonian_setting(0, &PauliString::single(0, Axis::Z))
    }

    #[test]
    fn hoeffding_counts() {
        assert_eq!(shots_needed(0.1, 0.05).unwrap(), 738);
        assert_eq!(shots_needed(2.0, 2.0 / std::f64::consts::E).unwrap(), 1);
        // ceil(20000 ln 40) = ceil(73777.59)
        assert_eq!(shots_needed(0.01, 0.05).unwrap(), 73778);
        assert!(shots_needed(0.0, 0.1).is_err());
        assert!(shots_needed(0.1, 1.0).is_err());
    }

    #[test]
    fn degenerate_and_centered() {
        let s = setting();
        let cfg = ShotConfig::new(1000, 7);
        let tr = sample_trace(&[1.0, -1.0], &s, &[0.1, 0.2], &cfg).unwrap();
        assert_eq!(tr.means, vec![1.0, -1.0]);
        let cfg = ShotConfig::new(1_000_000, 3);
        let tr = sample_trace(&[0.0], &s, &[0.1], &cfg).unwrap();
        assert!(tr.means[0].abs() <= 0.005);
    }

    #[test]
    fn bernoulli_variance() {
        let s = setting();
        let b = 0.6;
        let shots = 400;
        let vals: Vec<f64> = (0..100)
            .map(|seed| {
                sample_trace(&[b], &s, &[0.1], &ShotConfig::new(shots, seed))
                    .unwrap()
                    .means[0]
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / 100.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0;
        let want = (1.0 - b * b) / shots as f64;
        assert!((var / want - 1.0).abs() < 0.4, "var {var} vs {want}");
    }

    #[test]
    fn out_of_range_aborts() {
        let r = sample_trace(&[1.5], &setting(), &[0.1], &ShotConfig::new(10, 0));
        assert!(matches!(r, Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn sign_correction_flips_trace() {
        let mut s = setting();
        let cfg = ShotConfig::new(5000, 11);
        let plain = sample_trace(&[0.3, 0.2], &s, &[0.1, 0.2], &cfg).unwrap();
        // a Pauli gate anticommuting with the X input
        s.w = WSpec::SinglePauli {
            site: 0,
            axis: Axis::Z,
        };
        let flipped = sample_trace(&[0.3, 0.2], &s, &[0.1, 0.2], &cfg).unwrap();
        for (a, b) in plain.means.iter().zip(&flipped.means) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn schedule_determinism() {
        let mut settings: Vec<MeasurementSetting> = (0..4)
            .map(|k| hamiltonian_setting(k, &PauliString::single(k, Axis::Z)))
            .collect();
        let groups: Vec<RegionGroup> = settings
            .iter()
            .map(|s| RegionGroup {
                label: String::new(),
                region: s.region.clone(),
                setting_ids: vec![s.id],
            })
            .collect();
        let sched = crate::planner::schedule(groups.clone());
        let exact = |s: &MeasurementSetting| Ok(vec![0.1 * (s.id % 7) as f64, 0.2]);
        let cfg = ShotConfig::new(1000, 5);
        let a = run_schedule(&sched, &settings, exact, &[0.1, 0.2], &cfg).unwrap();
        let seq: Vec<TimeTrace> = {
            let mut v: Vec<TimeTrace> = settings
                .iter()
                .map(|s| sample_trace(&exact(s).unwrap(), s, &[0.1, 0.2], &cfg).unwrap())
                .collect();
            v.sort_by_key(|t| t.setting_id);
            v
        };
        assert_eq!(a, seq);
        let mut rev = groups;
        rev.reverse();
        settings.reverse();
        let b = run_schedule(
            &RoundSchedule { rounds: vec![rev] },
            &settings,
            exact,
            &[0.1, 0.2],
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(
            run_schedule(&RoundSchedule::default(), &[], exact, &[0.1], &cfg)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn ensemble_draws_center_on_mean() {
        let factor = DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.3, 0.5]);
        let ps = ParameterSampler::new(&[0.8, 0.2], factor).unwrap();
        let mut rng = stream_rng(9, 0);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let d = ps.draw(&mut rng);
            sum[0] += d[0];
            sum[1] += d[1];
        }
        let sd = [0.7f64, (0.09f64 + 0.25).sqrt()];
        for k in 0..2 {
            let z = (sum[k] / n as f64 - [0.8, 0.2][k]) / (sd[k] / (n as f64).sqrt());
            assert!(z.abs() < 4.0, "z = {z}");
        }
    }

    #[test]
    fn csv_roundtrip() {
        let tr = sample_trace(
            &[0.3, 0.1],
            &setting(),
            &[0.1, 0.2],
            &ShotConfig::new(100, 1),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_traces_csv(&mut buf, std::slice::from_ref(&tr), 1, "abc").unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# schema_version=1 config_hash=abc"));
        let back = read_traces_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![tr]);
    }
}
