//! Offline schedule selection.
//!
//! Both measured curves are normalized to [0, 1] utilities: accuracy by its
//! grid maximum, latency as one minus the fraction of the slowest point. The
//! kept-token count maximizes the convex combination
//! `alpha * U_A(n) + (1 - alpha) * U_L(n)` over the measured grid only;
//! interpolating between grid points would assign utilities to latencies
//! nobody measured, which the non-linear latency curves make unsafe. Ties go
//! to the larger n (keeping more tokens is the accuracy-safe choice). The
//! prune count R is the initial token count minus the chosen n, applied at a
//! single layer a quarter of the way into the encoder.
//!
//! Utilities are computed in f64 so reports round-trip within 1e-9.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest;
use crate::profiler::WorkloadProfile;

/// Single pruning layer placement: one quarter of the depth, rounded half
/// up, clamped to [1, depth - 1] so pruning never lands on the first or
/// past the last layer. Indices are 0-based: prune inside this layer, after
/// its attention.
pub fn prune_layer_for_depth(depth: usize) -> Result<usize> {
    if depth < 2 {
        return Err(Error::Validation(format!(
            "depth {depth} too shallow to place a pruning layer"
        )));
    }
    let rounded = (0.25 * depth as f64 + 0.5).floor() as usize;
    Ok(rounded.clamp(1, depth - 1))
}

fn accuracies(profile: &WorkloadProfile) -> Result<Vec<f64>> {
    profile
        .grid
        .iter()
        .map(|row| {
            row.accuracy.ok_or_else(|| {
                Error::Validation(format!(
                    "grid point n={} has no accuracy; profile is latency-only",
                    row.n
                ))
            })
        })
        .collect()
}

/// U_A(n) = A(n) / max A(n). The best-accuracy point gets exactly 1.
pub fn utility_accuracy(profile: &WorkloadProfile) -> Result<Vec<f64>> {
    let acc = accuracies(profile)?;
    let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max <= 0.0 {
        return Err(Error::Validation(
            "degenerate profile: maximum accuracy is not positive".into(),
        ));
    }
    Ok(acc.iter().map(|a| a / max).collect())
}

/// U_L(n) = 1 - L(n) / max L(n). The slowest point gets exactly 0.
pub fn utility_latency(profile: &WorkloadProfile) -> Result<Vec<f64>> {
    let max = profile
        .grid
        .iter()
        .map(|row| row.median_us)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max <= 0.0 {
        return Err(Error::Validation(
            "degenerate profile: maximum latency is not positive".into(),
        ));
    }
    Ok(profile
        .grid
        .iter()
        .map(|row| 1.0 - row.median_us / max)
        .collect())
}

/// One grid point's utilities in the schedule's trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityPoint {
    pub n: usize,
    pub u_a: f64,
    pub u_l: f64,
    pub u: f64,
}

/// The offline pruning decision for one model-device pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSchedule {
    pub schema_version: u32,
    pub alpha: f64,
    /// Initial token count.
    #[serde(rename = "N")]
    pub num_tokens: usize,
    /// Informative tokens kept past the pruning layer.
    pub n_keep: usize,
    /// Tokens pruned: N - n_keep.
    #[serde(rename = "R")]
    pub r: usize,
    /// 0-based encoder layer that applies the prune, after its attention.
    pub prune_layer: usize,
    /// Fingerprint of the profile the schedule was derived from.
    pub profile_hash: String,
    pub utility_trace: Vec<UtilityPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
}

impl PruningSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != manifest::SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported schedule schema_version {}",
                self.schema_version
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.n_keep > self.num_tokens || self.r != self.num_tokens - self.n_keep {
            return Err(Error::Validation(format!(
                "inconsistent counts: N={}, n_keep={}, R={}",
                self.num_tokens, self.n_keep, self.r
            )));
        }
        if self.utility_trace.is_empty() {
            return Err(Error::Validation(
                "schedule has an empty utility trace".into(),
            ));
        }
        Ok(())
    }
}

/// Canonical content hash of a profile, independent of file formatting.
pub fn profile_fingerprint(profile: &WorkloadProfile) -> Result<String> {
    let bytes = serde_json::to_vec(profile)
        .map_err(|e| Error::Validation(format!("profile not serializable: {e}")))?;
    Ok(manifest::sha256_hex(&bytes))
}

/// Load and validate a schedule JSON file.
pub fn load_schedule(path: &Path) -> Result<PruningSchedule> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schedule: PruningSchedule = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    schedule.validate()?;
    Ok(schedule)
}

/// Solve for the schedule: argmax of the combined utility over the grid,
/// ties toward the larger n. `depth` must match the profiled model; pass
/// `prune_layer` to override the quarter-depth placement.
pub fn select_schedule(
    profile: &WorkloadProfile,
    alpha: f64,
    depth: usize,
    prune_layer: Option<usize>,
) -> Result<PruningSchedule> {
    profile.validate()?;
    if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
    }
    if depth != profile.depth {
        return Err(Error::Validation(format!(
            "profile was measured at depth {} but the model has depth {depth}",
            profile.depth
        )));
    }
    let layer = match prune_layer {
        Some(l) => {
            if l >= depth {
                return Err(Error::Validation(format!(
                    "prune layer {l} out of range for depth {depth}"
                )));
            }
            l
        }
        None => prune_layer_for_depth(depth)?,
    };
    let u_a = utility_accuracy(profile)?;
    let u_l = utility_latency(profile)?;
    let mut trace = Vec::with_capacity(profile.grid.len());
    let mut best = 0usize;
    for (i, row) in profile.grid.iter().enumerate() {
        let u = alpha * u_a[i] + (1.0 - alpha) * u_l[i];
        trace.push(UtilityPoint {
            n: row.n,
            u_a: u_a[i],
            u_l: u_l[i],
            u,
        });
        // >= moves ties to the later (larger-n) grid point.
        if u >= trace[best].u {
            best = i;
        }
    }
    let n_keep = profile.grid[best].n;
    let schedule = PruningSchedule {
        schema_version: manifest::SCHEMA_VERSION,
        alpha,
        num_tokens: profile.num_tokens,
        n_keep,
        r: profile.num_tokens - n_keep,
        prune_layer: layer,
        profile_hash: profile_fingerprint(profile)?,
        utility_trace: trace,
        manifest_hash: None,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Plot-ready CSV of the three curves (latency, accuracy, utility) with the
/// chosen optimum marked. Refuses a profile the schedule was not built from.
pub fn schedule_report(schedule: &PruningSchedule, profile: &WorkloadProfile) -> Result<String> {
    schedule.validate()?;
    profile.validate()?;
    let fingerprint = profile_fingerprint(profile)?;
    if fingerprint != schedule.profile_hash {
        return Err(Error::Validation(format!(
            "profile fingerprint {fingerprint} does not match the schedule's {}",
            schedule.profile_hash
        )));
    }
    if schedule.utility_trace.len() != profile.grid.len() {
        return Err(Error::Validation(
            "utility trace and profile grid have different lengths".into(),
        ));
    }
    let mut out = String::from("n,median_us,accuracy,u_a,u_l,u,optimum\n");
    for (row, point) in profile.grid.iter().zip(&schedule.utility_trace) {
        if row.n != point.n {
            return Err(Error::Validation(format!(
                "trace n={} does not match grid n={}",
                point.n, row.n
            )));
        }
        let accuracy = row
            .accuracy
            .ok_or_else(|| Error::Validation(format!("grid point n={} has no accuracy", row.n)))?;
        let optimum = u8::from(row.n == schedule.n_keep);
        out.push_str(&format!(
            "{},{},{accuracy},{},{},{},{optimum}\n",
            row.n, row.median_us, point.u_a, point.u_l, point.u
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiler::{GridPoint, MeasureMode};
    use crate::rng::SplitMix64;

    fn profile_from(points: &[(usize, f64, f64)]) -> WorkloadProfile {
        WorkloadProfile {
            schema_version: 1,
            model_hash: "test".into(),
            num_tokens: points.last().unwrap().0,
            num_special_tokens: 0,
            depth: 12,
            device_label: "unit".into(),
            mode: MeasureMode::RawTokenCount,
            stride: 1,
            seed: 0,
            warmup: 0,
            grid: points
                .iter()
                .map(|&(n, median_us, accuracy)| GridPoint {
                    n,
                    median_us,
                    iqr_us: 0.0,
                    reps: 1,
                    accuracy: Some(accuracy),
                })
                .collect(),
            manifest_hash: None,
        }
    }

    fn random_profile(rng: &mut SplitMix64, len: usize) -> WorkloadProfile {
        let mut n = 1usize;
        let points: Vec<(usize, f64, f64)> = (0..len)
            .map(|_| {
                n += 1 + rng.next_index(4);
                let latency = 10.0 + 990.0 * rng.next_f32() as f64;
                let accuracy = 0.05 + 0.95 * rng.next_f32() as f64;
                (n, latency, accuracy)
            })
            .collect();
        profile_from(&points)
    }

    /// Independent argmax: compute the max utility, then take the largest n
    /// attaining it. Different algorithm from the scan under test.
    fn oracle_n_keep(profile: &WorkloadProfile, alpha: f64) -> usize {
        let u_a = utility_accuracy(profile).unwrap();
        let u_l = utility_latency(profile).unwrap();
        let u: Vec<f64> = u_a
            .iter()
            .zip(&u_l)
            .map(|(a, l)| alpha * a + (1.0 - alpha) * l)
            .collect();
        let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        profile
            .grid
            .iter()
            .zip(&u)
            .filter(|(_, &v)| v == max)
            .map(|(row, _)| row.n)
            .max()
            .unwrap()
    }

    #[test]
    fn quarter_depth_placement() {
        assert_eq!(prune_layer_for_depth(40).unwrap(), 10);
        assert_eq!(prune_layer_for_depth(12).unwrap(), 3);
        assert_eq!(prune_layer_for_depth(2).unwrap(), 1);
        assert_eq!(prune_layer_for_depth(3).unwrap(), 1);
        assert_eq!(prune_layer_for_depth(4).unwrap(), 1);
        assert_eq!(prune_layer_for_depth(6).unwrap(), 2);
        assert!(prune_layer_for_depth(1).is_err());
    }

    #[test]
    fn accuracy_utility_normalizes_by_the_maximum() {
        let p = profile_from(&[(1, 1.0, 0.2), (2, 1.0, 0.4), (3, 1.0, 0.8)]);
        assert_eq!(utility_accuracy(&p).unwrap(), vec![0.25, 0.5, 1.0]);
        let constant = profile_from(&[(1, 1.0, 0.7), (2, 1.0, 0.7)]);
        assert_eq!(utility_accuracy(&constant).unwrap(), vec![1.0, 1.0]);

        let mut latency_only = p.clone();
        latency_only.grid[1].accuracy = None;
        let err = utility_accuracy(&latency_only).unwrap_err().to_string();
        assert!(err.contains("n=2"), "{err}");

        let zero = profile_from(&[(1, 1.0, 0.0), (2, 1.0, 0.0)]);
        assert!(utility_accuracy(&zero).is_err());
    }

    #[test]
    fn latency_utility_zeroes_the_slowest_point() {
        let p = profile_from(&[(1, 50.0, 1.0), (2, 100.0, 1.0)]);
        assert_eq!(utility_latency(&p).unwrap(), vec![0.5, 0.0]);
        let constant = profile_from(&[(1, 80.0, 1.0), (2, 80.0, 1.0)]);
        assert_eq!(utility_latency(&constant).unwrap(), vec![0.0, 0.0]);
        let increasing = profile_from(&[(1, 10.0, 1.0), (2, 20.0, 1.0), (3, 30.0, 1.0)]);
        let u = utility_latency(&increasing).unwrap();
        assert!(u[0] > u[1] && u[1] > u[2]);
    }

    #[test]
    fn tie_goes_to_the_larger_n() {
        // Equal accuracy everywhere; latency equal at the two fast points.
        let p = profile_from(&[(64, 10.0, 1.0), (128, 10.0, 1.0), (256, 100.0, 1.0)]);
        let s = select_schedule(&p, 0.5, 12, None).unwrap();
        assert_eq!(s.n_keep, 128);
        assert_eq!(s.r, 128);
        let u: Vec<f64> = s.utility_trace.iter().map(|t| t.u).collect();
        assert_eq!(u, vec![0.95, 0.95, 0.5]);
    }

    #[test]
    fn alpha_one_with_rising_accuracy_keeps_everything() {
        let p = profile_from(&[(2, 10.0, 0.5), (5, 20.0, 0.7), (8, 30.0, 0.9)]);
        let s = select_schedule(&p, 1.0, 12, None).unwrap();
        assert_eq!(s.n_keep, 8);
        assert_eq!(s.r, 0);
    }

    #[test]
    fn alpha_zero_with_rising_latency_keeps_the_minimum() {
        let p = profile_from(&[(2, 10.0, 0.5), (5, 20.0, 0.7), (8, 30.0, 0.9)]);
        let s = select_schedule(&p, 0.0, 12, None).unwrap();
        assert_eq!(s.n_keep, 2);
        assert_eq!(s.r, 6);
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_profiles() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..20 {
            let len = 16 + rng.next_index(48);
            let profile = random_profile(&mut rng, len);
            for _ in 0..10 {
                let alpha = rng.next_f32() as f64;
                let s = select_schedule(&profile, alpha, 12, None).unwrap();
                assert_eq!(s.n_keep, oracle_n_keep(&profile, alpha));
            }
        }
    }

    #[test]
    fn trace_utilities_hit_their_normalization_anchors() {
        let mut rng = SplitMix64::new(22);
        let profile = random_profile(&mut rng, 32);
        let s = select_schedule(&profile, 0.3, 12, None).unwrap();
        let max_ua = s
            .utility_trace
            .iter()
            .map(|t| t.u_a)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_ul = s
            .utility_trace
            .iter()
            .map(|t| t.u_l)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(max_ua, 1.0); // x / x is exactly 1
        assert_eq!(min_ul, 0.0); // 1 - x / x is exactly 0
    }

    #[test]
    fn rescaling_either_curve_keeps_the_argmax() {
        let mut rng = SplitMix64::new(23);
        for _ in 0..10 {
            let profile = random_profile(&mut rng, 24);
            let alpha = rng.next_f32() as f64;
            let base = select_schedule(&profile, alpha, 12, None).unwrap().n_keep;
            for c in [0.1, 3.0, 1e4] {
                let mut scaled_l = profile.clone();
                for row in &mut scaled_l.grid {
                    row.median_us *= c;
                }
                assert_eq!(
                    select_schedule(&scaled_l, alpha, 12, None).unwrap().n_keep,
                    base
                );
            }
            // Accuracy values must stay within [0, 1] to pass validation, so
            // only shrink them.
            let mut scaled_a = profile.clone();
            for row in &mut scaled_a.grid {
                row.accuracy = row.accuracy.map(|a| a * 0.1);
            }
            assert_eq!(
                select_schedule(&scaled_a, alpha, 12, None).unwrap().n_keep,
                base
            );
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let p = profile_from(&[(2, 10.0, 0.5), (5, 20.0, 0.7)]);
        assert!(select_schedule(&p, 1.5, 12, None).is_err());
        assert!(select_schedule(&p, f64::NAN, 12, None).is_err());
        assert!(select_schedule(&p, 0.5, 9, None).is_err()); // depth mismatch
        assert!(select_schedule(&p, 0.5, 12, Some(12)).is_err());
        assert!(select_schedule(&p, 0.5, 12, Some(0)).is_ok()); // explicit override
    }

    #[test]
    fn schedule_round_trips_with_wire_names() {
        let p = profile_from(&[(2, 10.0, 0.5), (5, 20.0, 0.7)]);
        let s = select_schedule(&p, 0.5, 12, None).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"N\":") && text.contains("\"R\":"), "{text}");
        let back: PruningSchedule = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn report_reproduces_the_combined_utility() {
        let mut rng = SplitMix64::new(24);
        let profile = random_profile(&mut rng, 12);
        let alpha = 0.5;
        let s = select_schedule(&profile, alpha, 12, None).unwrap();
        let csv = schedule_report(&s, &profile).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "n,median_us,accuracy,u_a,u_l,u,optimum"
        );
        let mut optima = 0;
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 7);
            let u_a: f64 = cells[3].parse().unwrap();
            let u_l: f64 = cells[4].parse().unwrap();
            let u: f64 = cells[5].parse().unwrap();
            assert!((u - (alpha * u_a + (1.0 - alpha) * u_l)).abs() < 1e-9);
            if cells[6] == "1" {
                optima += 1;
                assert_eq!(cells[0].parse::<usize>().unwrap(), s.n_keep);
            }
        }
        assert_eq!(optima, 1);

        // A different profile must be refused by fingerprint.
        let other = random_profile(&mut rng, 12);
        assert!(schedule_report(&s, &other).is_err());
    }
}
