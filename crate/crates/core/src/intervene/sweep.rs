use serde::{Deserialize, Serialize};

use super::{evaluate_samples, InterventionPlan};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ShiftRows};
use crate::numerics::derive_seed;
use crate::probes::{select_heads, split_train, ProbeBank, StandardTaps};
use crate::shift::estimate_specific;
use crate::synth::{Dataset, Sample};

const TUNING_SALT: u64 = 0x7C4E;
const REFERENCE_HEADS: f64 = 1024.0;

/// `{50, 100, ..., 300}` scaled by `heads / 1024`, rounded, clamped to
/// `1..=heads`, deduplicated.
pub fn k_grid(total_heads: usize) -> (Vec<usize>, usize) {
    let ratio = total_heads as f64 / REFERENCE_HEADS;
    let scale = |k: f64| ((k * ratio).round() as usize).clamp(1, total_heads.max(1));
    let mut ks: Vec<usize> = (1..=6).map(|i| scale(50.0 * f64::from(i))).collect();
    ks.dedup();
    let anchor = 100.0 * ratio;
    let first = *ks
        .iter()
        .min_by(|a, b| {
            (**a as f64 - anchor)
                .abs()
                .total_cmp(&(**b as f64 - anchor).abs())
                .then(a.cmp(b))
        })
        .expect("grid is never empty");
    (ks, first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
    /// K held fixed while sweeping α.
    pub stage1_k: usize,
    pub tune_fraction: f64,
    pub split_seed: u64,
    pub shift_rows: ShiftRows,
    /// Also evaluate every (α, K) pair.
    pub full_grid: bool,
}

impl SweepConfig {
    pub fn for_heads(total_heads: usize) -> Self {
        let (ks, stage1_k) = k_grid(total_heads);
        Self {
            alphas: (1..=9).map(|i| 0.5 * f64::from(i)).collect(),
            ks,
            stage1_k,
            tune_fraction: 0.2,
            split_seed: 0,
            shift_rows: ShiftRows::All,
            full_grid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub stage: String,
    pub alpha: f64,
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub alpha_star: f64,
    pub k_star: usize,
    pub tuning_samples: usize,
    pub points: Vec<GridPoint>,
}

impl SweepResult {
    /// `stage,alpha,k,accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,alpha,k,accuracy\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.stage, p.alpha, p.k, p.accuracy));
        }
        out
    }
}

/// `true` for samples in the tuning split (a `fraction` of them).
pub fn tuning_split(sample_ids: &[u64], split_seed: u64, fraction: f64) -> Vec<bool> {
    split_train(sample_ids, derive_seed(split_seed, TUNING_SALT), fraction)
}

/// Two-stage search on the tuning split: α at fixed K first, then K at
/// the best α. Ties keep the smaller value.
pub fn sweep(
    model: &ModelBundle,
    dataset: &Dataset,
    taps: &StandardTaps,
    probes: &ProbeBank,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if cfg.alphas.is_empty() || cfg.ks.is_empty() {
        return Err(Error::Input("sweep grids must not be empty".into()));
    }
    let target = dataset.world().target_language.clone();
    let shifts = estimate_specific(taps, &target)?;
    let ids: Vec<u64> = dataset.samples.iter().map(|s| s.id).collect();
    let tune = tuning_split(&ids, cfg.split_seed, cfg.tune_fraction);
    let tuning: Vec<&Sample> = dataset.samples.iter().zip(&tune).filter(|(_, t)| **t).map(|(s, _)| s).collect();
    if tuning.is_empty() {
        return Err(Error::Input("tuning split is empty".into()));
    }
    let mut alphas = cfg.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    let mut ks = cfg.ks.clone();
    ks.sort_unstable();

    let score = |alpha: f64, k: usize| -> Result<f64> {
        let heads = select_heads(probes, k)?;
        let plan = InterventionPlan::new(&heads, &shifts, alpha, cfg.shift_rows)?;
        let report = evaluate_samples(model, dataset, &tuning, &[target.as_str()], Some(&plan))?;
        Ok(report.accuracy(&target).unwrap_or(0.0))
    };

    let mut points = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for &a in &alphas {
        let acc = score(a, cfg.stage1_k)?;
        points.push(GridPoint {
            stage: "alpha".into(),
            alpha: a,
            k: cfg.stage1_k,
            accuracy: acc,
        });
        if best.map_or(true, |(_, b)| acc > b) {
            best = Some((a, acc));
        }
    }
    let (alpha_star, _) = best.expect("alphas non-empty");

    let mut best_k: Option<(usize, f64)> = None;
    for &k in &ks {
        let cached = points.iter().find(|p| p.k == k && p.alpha == alpha_star).map(|p| p.accuracy);
        let acc = match cached {
            Some(a) => a,
            None => score(alpha_star, k)?,
        };
        points.push(GridPoint {
            stage: "k".into(),
            alpha: alpha_star,
            k,
            accuracy: acc,
        });
        if best_k.map_or(true, |(_, b)| acc > b) {
            best_k = Some((k, acc));
        }
    }
    let (k_star, _) = best_k.expect("ks non-empty");

    if cfg.full_grid {
        for &a in &alphas {
            for &k in &ks {
                let cached = points.iter().find(|p| p.k == k && p.alpha == a).map(|p| p.accuracy);
                let acc = match cached {
                    Some(x) => x,
                    None => score(a, k)?,
                };
                points.push(GridPoint {
                    stage: "grid".into(),
                    alpha: a,
                    k,
                    accuracy: acc,
                });
            }
        }
    }
    Ok(SweepResult {
        alpha_star,
        k_star,
        tuning_samples: tuning.len(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_for_64_heads() {
        let (ks, first) = k_grid(64);
        assert_eq!(ks, vec![3, 6, 9, 13, 16, 19]);
        assert_eq!(first, 6);
    }

    #[test]
    fn full_size_grid_is_unscaled() {
        let (ks, first) = k_grid(1024);
        assert_eq!(ks, vec![50, 100, 150, 200, 250, 300]);
        assert_eq!(first, 100);
    }

    #[test]
    fn alpha_grid() {
        let c = SweepConfig::for_heads(64);
        assert_eq!(c.alphas, vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5]);
    }
}
