//! Workload profiling: the latency curve L(n) and accuracy-proxy curve A(n)
//! over a grid of kept-token counts, plus detection of non-linear latency
//! steps along the grid.
//!
//! Latency is wall-clock around whole forward passes (warmup runs discarded,
//! median and IQR over timed repetitions). Timing assumes a quiet process:
//! callers must not run concurrent work while a measurement is in flight.
//! Accuracy uses a random-removal proxy: tokens are dropped at random after
//! the first encoder block, with no inattentive token, and top-1 accuracy is
//! averaged over seeded trials. Everything except the wall-clock numbers is
//! bit-reproducible from the seeds.

use std::path::Path;
use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::manifest;
use crate::model::{embed_tokens, TokenInput, TokenReducer, ViTModel};
use crate::pruning::{KeepSubset, SchedulePruner};
use crate::rng::SplitMix64;
use crate::scheduler;
use crate::tensor::Tensor;

pub const DEFAULT_REPS: usize = 100;
pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_TRIALS: usize = 8;

/// Latency inputs come from this fixed seed so repeated profiles of one
/// model time identical work regardless of the profile's proxy seed.
const LATENCY_INPUT_SEED: u64 = 0x4C4154;

/// What a grid point's latency measurement actually runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasureMode {
    /// Full-size input, pruned down to n at the schedule layer: the latency
    /// of the configuration that would ship.
    #[serde(rename = "deployed-prune")]
    DeployedPrune,
    /// Input constructed with n tokens outright, no pruning hook.
    #[serde(rename = "raw-token-count")]
    RawTokenCount,
}

impl std::fmt::Display for MeasureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MeasureMode::DeployedPrune => "deployed-prune",
            MeasureMode::RawTokenCount => "raw-token-count",
        })
    }
}

impl std::str::FromStr for MeasureMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "deployed-prune" => Ok(MeasureMode::DeployedPrune),
            "raw-token-count" => Ok(MeasureMode::RawTokenCount),
            other => Err(format!(
                "unknown mode '{other}' (expected deployed-prune or raw-token-count)"
            )),
        }
    }
}

/// One latency measurement. Invariants: median > 0, iqr >= 0, reps >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    pub n_keep: usize,
    pub median_us: f64,
    pub iqr_us: f64,
    pub reps: usize,
    pub warmup: usize,
}

/// One profile row as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub n: usize,
    pub median_us: f64,
    pub iqr_us: f64,
    pub reps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// The measured workload curves for one model on one device. Independent of
/// the utility weight alpha; scheduling consumes this read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadProfile {
    pub schema_version: u32,
    pub model_hash: String,
    pub num_tokens: usize,
    pub num_special_tokens: usize,
    pub depth: usize,
    pub device_label: String,
    pub mode: MeasureMode,
    pub stride: usize,
    pub seed: u64,
    pub warmup: usize,
    pub grid: Vec<GridPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != manifest::SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported profile schema_version {}",
                self.schema_version
            )));
        }
        if self.grid.is_empty() {
            return Err(Error::Validation("profile grid is empty".into()));
        }
        if self.stride == 0 {
            return Err(Error::Validation("profile stride must be positive".into()));
        }
        let lo = self.num_special_tokens + 1;
        let mut prev = 0usize;
        for row in &self.grid {
            if row.n < lo || row.n > self.num_tokens {
                return Err(Error::Validation(format!(
                    "grid point n={} outside [{lo}, {}]",
                    row.n, self.num_tokens
                )));
            }
            if row.n <= prev {
                return Err(Error::Validation(format!(
                    "grid n values must be strictly increasing at n={}",
                    row.n
                )));
            }
            prev = row.n;
            if !row.median_us.is_finite()
                || row.median_us <= 0.0
                || !row.iqr_us.is_finite()
                || row.iqr_us < 0.0
                || row.reps == 0
            {
                return Err(Error::Validation(format!(
                    "grid point n={} has invalid statistics",
                    row.n
                )));
            }
            if let Some(a) = row.accuracy {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Validation(format!(
                        "grid point n={} has accuracy {a} outside [0, 1]",
                        row.n
                    )));
                }
            }
        }
        Ok(())
    }

    /// True when every grid row carries an accuracy value.
    pub fn has_accuracy(&self) -> bool {
        self.grid.iter().all(|g| g.accuracy.is_some())
    }
}

/// Load and validate a profile JSON file.
pub fn load_profile(path: &Path) -> Result<WorkloadProfile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let profile: WorkloadProfile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    profile.validate()?;
    Ok(profile)
}

/// CSV projection of a profile: one row per grid point, empty accuracy cell
/// when the profile is latency-only.
pub fn profile_csv(profile: &WorkloadProfile) -> String {
    let mut out = String::from("n,median_us,iqr_us,accuracy\n");
    for row in &profile.grid {
        let acc = row.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{acc}\n",
            row.n, row.median_us, row.iqr_us
        ));
    }
    out
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    // Inclusive interpolation: position p * (len - 1), linear between ranks.
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        v[lo]
    } else {
        v[lo] + frac * (v[lo + 1] - v[lo])
    }
}

/// Median and IQR. Even-count median is the mean of the central pair; the
/// IQR interpolates quartiles inclusively.
pub fn latency_stats(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Measurement("no latency samples collected".into()));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let median = if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    };
    let iqr = quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25);
    Ok((median, iqr))
}

fn check_n_keep(model: &ViTModel, n_keep: usize) -> Result<()> {
    let cfg = model.config();
    let lo = cfg.num_special_tokens + 1;
    if n_keep < lo || n_keep > cfg.num_tokens {
        return Err(Error::Validation(format!(
            "n_keep {n_keep} outside [{lo}, {}]",
            cfg.num_tokens
        )));
    }
    Ok(())
}

/// Time forward passes at one kept-token count. Runs `warmup` untimed
/// passes, then `reps` timed ones on a fixed seeded input.
pub fn measure_latency(
    model: &ViTModel,
    n_keep: usize,
    mode: MeasureMode,
    reps: usize,
    warmup: usize,
) -> Result<LatencySample> {
    if reps == 0 {
        return Err(Error::Validation("reps must be at least 1".into()));
    }
    check_n_keep(model, n_keep)?;
    let cfg = model.config();
    let input_tokens = match mode {
        MeasureMode::DeployedPrune => cfg.num_tokens,
        MeasureMode::RawTokenCount => n_keep,
    };
    let input = embed_tokens(
        TokenInput::Synthetic {
            seed: LATENCY_INPUT_SEED,
            batch: 1,
            tokens: input_tokens,
        },
        cfg,
    )?;
    let pruner;
    let hook: Option<&dyn TokenReducer> = match mode {
        MeasureMode::DeployedPrune if n_keep < cfg.num_tokens => {
            pruner = SchedulePruner {
                layer_index: scheduler::prune_layer_for_depth(cfg.depth)?,
                r: cfg.num_tokens - n_keep,
                special_count: cfg.num_special_tokens,
            };
            Some(&pruner)
        }
        _ => None,
    };
    let run = |_: usize| -> Result<std::time::Duration> {
        let started = Instant::now();
        let out = model
            .forward(&input, hook)
            .map_err(|e| Error::Measurement(format!("forward failed during timing: {e}")))?;
        let elapsed = started.elapsed();
        std::hint::black_box(out);
        Ok(elapsed)
    };
    for i in 0..warmup {
        run(i)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for i in 0..reps {
        samples.push(run(i)?.as_secs_f64() * 1e6);
    }
    let (median_us, iqr_us) = latency_stats(&samples)?;
    if !median_us.is_finite() || median_us <= 0.0 {
        return Err(Error::Measurement(
            "median latency is zero; clock resolution too coarse".into(),
        ));
    }
    Ok(LatencySample {
        n_keep,
        median_us,
        iqr_us,
        reps,
        warmup,
    })
}

/// Anything that classifies a token matrix while keeping only a subset of
/// token rows from the removal point on. The real encoder implements it; a
/// deterministic rule-based stand-in suffices for harness tests.
pub trait ProxyModel: Sync {
    fn token_count(&self) -> usize;
    fn special_count(&self) -> usize;
    /// Top-1 class for one [tokens, dim] sample. `kept` is strictly
    /// ascending and starts with the full special prefix; None keeps all.
    fn predict(&self, tokens: &Tensor, kept: Option<&[usize]>) -> Result<usize>;
}

fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ProxyModel for ViTModel {
    fn token_count(&self) -> usize {
        self.config().num_tokens
    }

    fn special_count(&self) -> usize {
        self.config().num_special_tokens
    }

    fn predict(&self, tokens: &Tensor, kept: Option<&[usize]>) -> Result<usize> {
        let shape = tokens.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "proxy sample must be [tokens, dim], got {shape:?}"
            )));
        }
        let batched = tokens.clone().reshape(vec![1, shape[0], shape[1]])?;
        // Removal happens inside the block after the first, so the first
        // block processes every token before anything is dropped.
        let layer_index = 1.min(self.config().depth - 1);
        let subset;
        let hook: Option<&dyn TokenReducer> = match kept {
            Some(k) if k.len() < shape[0] => {
                subset = KeepSubset {
                    layer_index,
                    kept: k.to_vec(),
                };
                Some(&subset)
            }
            _ => None,
        };
        let logits = self.forward(&batched, hook)?;
        Ok(argmax_row(logits.row(0)))
    }
}

/// First `k` elements of a seeded shuffle of `lo..hi`, returned sorted.
fn sample_indices(rng: &mut SplitMix64, lo: usize, hi: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (lo..hi).collect();
    for i in 0..k {
        let j = i + rng.next_index(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

fn proxy_kept(
    n: usize,
    special: usize,
    n_keep: usize,
    seed: u64,
    s: usize,
    t: usize,
) -> Vec<usize> {
    let mut rng = SplitMix64::substream(seed, s as u64, t as u64);
    let mut kept: Vec<usize> = (0..special).collect();
    kept.extend(sample_indices(&mut rng, special, n, n_keep - special));
    kept
}

/// Random-removal accuracy proxy: average top-1 accuracy over `trials`
/// seeded removal draws per sample. At n_keep == token count nothing is
/// removed and the result equals baseline accuracy exactly.
pub fn measure_accuracy_proxy<P: ProxyModel + ?Sized>(
    model: &P,
    dataset: &Dataset,
    n_keep: usize,
    seed: u64,
    trials: usize,
) -> Result<f64> {
    let n = model.token_count();
    let special = model.special_count();
    if trials == 0 {
        return Err(Error::Validation("trials must be at least 1".into()));
    }
    if n_keep < special + 1 || n_keep > n {
        return Err(Error::Validation(format!(
            "n_keep {n_keep} outside [{}, {n}]",
            special + 1
        )));
    }
    if dataset.num_tokens() != n {
        return Err(Error::Validation(format!(
            "dataset samples have {} tokens but the model expects {n}",
            dataset.num_tokens()
        )));
    }

    let sample_correct = |s: usize| -> Result<usize> {
        let (tokens, label) = dataset.sample(s);
        if n_keep == n {
            // Identity removal; one evaluation stands for every trial.
            let hit = model.predict(tokens, None)? == label;
            return Ok(if hit { trials } else { 0 });
        }
        let mut correct = 0;
        for t in 0..trials {
            let kept = proxy_kept(n, special, n_keep, seed, s, t);
            if model.predict(tokens, Some(&kept))? == label {
                correct += 1;
            }
        }
        Ok(correct)
    };

    #[cfg(feature = "parallel")]
    let counts: Result<Vec<usize>> = (0..dataset.len())
        .into_par_iter()
        .map(sample_correct)
        .collect();
    #[cfg(not(feature = "parallel"))]
    let counts: Result<Vec<usize>> = (0..dataset.len()).map(sample_correct).collect();

    let correct: usize = counts?.iter().sum();
    Ok(correct as f64 / (dataset.len() * trials) as f64)
}

/// Kept-token grid: n_min, then every stride-th count, with n_max appended
/// when the stride does not land on it. Both endpoints always present.
pub fn grid_points(n_min: usize, n_max: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Validation("stride must be at least 1".into()));
    }
    if n_min > n_max {
        return Err(Error::Validation(format!(
            "n_min {n_min} exceeds n_max {n_max}"
        )));
    }
    let mut grid: Vec<usize> = (n_min..=n_max).step_by(stride).collect();
    if *grid.last().expect("non-empty by construction") != n_max {
        grid.push(n_max);
    }
    Ok(grid)
}

/// Measurement knobs for one profiling run.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub n_min: usize,
    pub n_max: usize,
    pub stride: usize,
    pub mode: MeasureMode,
    pub reps: usize,
    pub warmup: usize,
    pub trials: usize,
    pub seed: u64,
    pub device_label: String,
}

/// Measure the full profile. Accuracy is measured only when a dataset is
/// supplied; a latency-only profile can be merged with a stored accuracy
/// curve later (accuracy needs measuring once, latency once per device).
pub fn profile_grid(
    model: &ViTModel,
    dataset: Option<&Dataset>,
    spec: &GridSpec,
) -> Result<WorkloadProfile> {
    let cfg = model.config();
    check_n_keep(model, spec.n_min)?;
    check_n_keep(model, spec.n_max)?;
    let grid = grid_points(spec.n_min, spec.n_max, spec.stride)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &n in &grid {
        let lat = measure_latency(model, n, spec.mode, spec.reps, spec.warmup)?;
        let accuracy = match dataset {
            Some(ds) => Some(measure_accuracy_proxy(
                model,
                ds,
                n,
                spec.seed,
                spec.trials,
            )?),
            None => None,
        };
        rows.push(GridPoint {
            n,
            median_us: lat.median_us,
            iqr_us: lat.iqr_us,
            reps: lat.reps,
            accuracy,
        });
    }
    let profile = WorkloadProfile {
        schema_version: manifest::SCHEMA_VERSION,
        model_hash: model.weights_hash(),
        num_tokens: cfg.num_tokens,
        num_special_tokens: cfg.num_special_tokens,
        depth: cfg.depth,
        device_label: spec.device_label.clone(),
        mode: spec.mode,
        stride: spec.stride,
        seed: spec.seed,
        warmup: spec.warmup,
        grid: rows,
        manifest_hash: None,
    };
    profile.validate()?;
    Ok(profile)
}

/// Fill a latency profile's accuracy column from a previously measured
/// profile of the same model over the same grid.
pub fn merge_profiles(
    latency: &WorkloadProfile,
    accuracy_source: &WorkloadProfile,
) -> Result<WorkloadProfile> {
    latency.validate()?;
    accuracy_source.validate()?;
    if latency.model_hash != accuracy_source.model_hash {
        return Err(Error::Validation(format!(
            "model hashes differ: {} vs {}",
            latency.model_hash, accuracy_source.model_hash
        )));
    }
    let a: Vec<usize> = latency.grid.iter().map(|g| g.n).collect();
    let b: Vec<usize> = accuracy_source.grid.iter().map(|g| g.n).collect();
    if a != b {
        return Err(Error::Validation(format!("grids differ: {a:?} vs {b:?}")));
    }
    if !accuracy_source.has_accuracy() {
        return Err(Error::Validation(
            "accuracy source profile has latency-only rows".into(),
        ));
    }
    let mut merged = latency.clone();
    for (row, src) in merged.grid.iter_mut().zip(&accuracy_source.grid) {
        row.accuracy = src.accuracy;
    }
    merged.manifest_hash = None;
    Ok(merged)
}

/// One disproportionate latency change between adjacent grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStep {
    pub n_from: usize,
    pub n_to: usize,
    /// Signed relative change (L_to - L_from) / L_from.
    pub jump_fraction: f64,
}

/// Adjacent grid pairs whose relative latency change reaches the threshold.
/// Signed: latency can drop as the workload grows.
pub fn detect_nonlinearities(
    profile: &WorkloadProfile,
    relative_threshold: f64,
) -> Result<Vec<LatencyStep>> {
    if !relative_threshold.is_finite() || relative_threshold <= 0.0 {
        return Err(Error::Validation(format!(
            "relative threshold must be finite and positive, got {relative_threshold}"
        )));
    }
    profile.validate()?;
    let mut steps = Vec::new();
    for pair in profile.grid.windows(2) {
        let jump = (pair[1].median_us - pair[0].median_us) / pair[0].median_us;
        if jump.abs() >= relative_threshold {
            steps.push(LatencyStep {
                n_from: pair[0].n,
                n_to: pair[1].n,
                jump_fraction: jump,
            });
        }
    }
    Ok(steps)
}
