use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::taps::MaskedTaps;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, mix64};
use crate::synth::ENGLISH;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    #[default]
    Logistic,
    Hinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub loss: Loss,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            learning_rate: 0.1,
            iterations: 500,
            loss: Loss::Logistic,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

/// Linear classifier on standardized features; `+1` means English.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
}

impl Probe {
    /// `⟨(x - mean) / std, w⟩ + bias`.
    pub fn score(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "feature has length {}, probe expects {}",
                x.len(),
                self.weights.len()
            )));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Probe(format!("standardization std {s} is not positive")));
        }
        let mut s = self.bias;
        for (((&v, &w), &m), &sd) in x.iter().zip(&self.weights).zip(&self.mean).zip(&self.std) {
            s += w * ((f64::from(v) - m) / sd);
        }
        Ok(s)
    }

    /// `+1` (English) when the score is strictly positive, else `-1`.
    pub fn predict(&self, x: &[f32]) -> Result<i8> {
        Ok(if self.score(x)? > 0.0 { 1 } else { -1 })
    }

    /// Standardization folded into raw-feature weights and bias.
    pub fn folded(&self) -> (Vec<f64>, f64) {
        let w: Vec<f64> = self.weights.iter().zip(&self.std).map(|(w, s)| w / s).collect();
        let b = self.bias - w.iter().zip(&self.mean).map(|(w, m)| w * m).sum::<f64>();
        (w, b)
    }
}

/// Deterministic train/test assignment: samples ranked by a seeded hash
/// of their id, the lowest `round(fraction · n)` go to training.
pub fn split_train(sample_ids: &[u64], split_seed: u64, fraction: f64) -> Vec<bool> {
    let mut ranked: Vec<(u64, u64, usize)> = sample_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (mix64(derive_seed(split_seed, id)), id, i))
        .collect();
    ranked.sort_unstable();
    let n_train = (fraction * sample_ids.len() as f64).round() as usize;
    let mut out = vec![false; sample_ids.len()];
    for &(_, _, i) in ranked.iter().take(n_train) {
        out[i] = true;
    }
    out
}

/// Fit one probe by full-batch gradient descent from zero.
pub fn train_probe(
    layer: usize,
    head: usize,
    rows: &[&[f32]],
    labels: &[f64],
    is_train: &[bool],
    cfg: &ProbeConfig,
) -> Result<Probe> {
    if rows.len() != labels.len() || rows.len() != is_train.len() {
        return Err(Error::Shape("rows, labels and split disagree in length".into()));
    }
    let d = rows.first().map_or(0, |r| r.len());
    let train: Vec<usize> = (0..rows.len()).filter(|&i| is_train[i]).collect();
    let pos = train.iter().filter(|&&i| labels[i] > 0.0).count();
    if pos == 0 || pos == train.len() {
        return Err(Error::DegenerateData(format!(
            "head ({layer}, {head}): training split has a single class"
        )));
    }
    let n = train.len() as f64;
    let mut mean = vec![0f64; d];
    for &i in &train {
        for (m, &v) in mean.iter_mut().zip(rows[i]) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0f64; d];
    for &i in &train {
        for ((s, &v), m) in std.iter_mut().zip(rows[i]).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n).sqrt().max(1e-6));

    let z: Vec<f64> = rows
        .iter()
        .flat_map(|r| {
            r.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((&v, m), s)| (f64::from(v) - m) / s)
        })
        .collect();
    let mut w = vec![0f64; d];
    let mut b = 0f64;
    let mut grad = vec![0f64; d];
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0f64;
        for &i in &train {
            let zi = &z[i * d..(i + 1) * d];
            let y = labels[i];
            let s = b + zi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let g = match cfg.loss {
                Loss::Logistic => -y / (1.0 + (y * s).exp()),
                Loss::Hinge => {
                    if y * s < 1.0 {
                        -y
                    } else {
                        0.0
                    }
                }
            };
            if g != 0.0 {
                for (gw, &v) in grad.iter_mut().zip(zi) {
                    *gw += g * v;
                }
                grad_b += g;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= cfg.learning_rate * (gj / n + cfg.lambda * *wj);
        }
        b -= cfg.learning_rate * grad_b / n;
    }

    let mut probe = Probe {
        layer,
        head,
        weights: w,
        bias: b,
        mean,
        std,
        train_acc: 0.0,
        test_acc: 0.0,
    };
    let (mut hits, mut total) = ([0usize; 2], [0usize; 2]);
    for (i, r) in rows.iter().enumerate() {
        let side = usize::from(!is_train[i]);
        total[side] += 1;
        if f64::from(probe.predict(r)?) == labels[i] {
            hits[side] += 1;
        }
    }
    if total[1] == 0 {
        return Err(Error::DegenerateData("test split is empty".into()));
    }
    probe.train_acc = hits[0] as f64 / total[0] as f64;
    probe.test_acc = hits[1] as f64 / total[1] as f64;
    Ok(probe)
}

/// Probes for every head of the grid, in `(layer, head)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeBank {
    pub layers: usize,
    pub heads: usize,
    pub config: ProbeConfig,
    pub probes: Vec<Probe>,
}

impl ProbeBank {
    pub fn get(&self, layer: usize, head: usize) -> Option<&Probe> {
        self.probes.iter().find(|p| p.layer == layer && p.head == head)
    }
}

/// Train one probe per head on English (`+1`) versus every other
/// language (`-1`), pooled over one or more tap tables. Both languages of
/// a sample always land on the same side of the split.
pub fn train_all(tapsets: &[&MaskedTaps], cfg: &ProbeConfig) -> Result<ProbeBank> {
    let first = tapsets
        .first()
        .ok_or_else(|| Error::Input("no tap tables to train on".into()))?;
    let (layers, heads, d) = (first.layout().layers, first.layout().heads, first.layout().head_dim);
    for t in tapsets {
        let l = t.layout();
        if (l.layers, l.heads, l.head_dim) != (layers, heads, d) {
            return Err(Error::Input("tap tables come from different head grids".into()));
        }
        if l.language_index(ENGLISH).is_none() || l.languages.len() < 2 {
            return Err(Error::Input("tap tables need English and at least one target".into()));
        }
    }
    let mut labels = Vec::new();
    let mut is_train = Vec::new();
    for t in tapsets {
        let split = split_train(t.sample_ids(), cfg.split_seed, cfg.train_fraction);
        for &train in &split {
            for lang in t.languages() {
                labels.push(if lang == ENGLISH { 1.0 } else { -1.0 });
                is_train.push(train);
            }
        }
    }
    let grid: Vec<(usize, usize)> = (0..layers).flat_map(|l| (0..heads).map(move |h| (l, h))).collect();
    let probes = grid
        .par_iter()
        .map(|&(l, h)| {
            let mut rows: Vec<&[f32]> = Vec::with_capacity(labels.len());
            for t in tapsets {
                for s in 0..t.sample_ids().len() {
                    for lang in 0..t.languages().len() {
                        rows.push(t.row(s, lang, l, h));
                    }
                }
            }
            train_probe(l, h, &rows, &labels, &is_train, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeBank {
        layers,
        heads,
        config: cfg.clone(),
        probes,
    })
}
