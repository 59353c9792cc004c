//! Diagnostics: bounding-box attention ratio, probe-hyperplane
//! projections with density curves, head-accuracy heatmaps and the logit
//! lens grid. CSV writers live next to each report; SVG renderers are in
//! [`svg`].

mod attention;
mod density;
pub mod svg;

pub use attention::{ab_from_rows, ab_profile, attention_in_bbox, AbProfile};
pub use density::{kde, kde_grid, silverman_bandwidth, trapezoid};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, lens_logits, ForwardTrace, ModelBundle};
use crate::probes::{MaskedTaps, Probe, ProbeBank};
use crate::synth::ENGLISH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub layer: usize,
    pub head: usize,
    /// Free-form label, e.g. `baseline` or `intervened`.
    pub tag: String,
    pub sample_ids: Vec<u64>,
    /// Per language, one projection per sample in `sample_ids` order.
    pub projections: BTreeMap<String, Vec<f64>>,
}

impl ProjectionReport {
    pub fn mean(&self, language: &str) -> Option<f64> {
        let v = self.projections.get(language)?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `|mean_en − mean_other|` for the first non-English language.
    pub fn mean_gap(&self) -> Option<f64> {
        let other = self.projections.keys().find(|k| *k != ENGLISH)?;
        Some((self.mean(ENGLISH)? - self.mean(other)?).abs())
    }

    /// Density curves on a shared grid spanning every language.
    pub fn densities(&self, points: usize, bandwidth: Option<f64>) -> Result<DensityCurves> {
        let all: Vec<f64> = self.projections.values().flatten().copied().collect();
        let mut widths = BTreeMap::new();
        for (lang, v) in &self.projections {
            let h = match bandwidth {
                Some(h) => h,
                None => silverman_bandwidth(v)?,
            };
            widths.insert(lang.clone(), h);
        }
        let widest = widths.values().copied().fold(0.0, f64::max);
        let grid = kde_grid(&all, widest, points)?;
        let mut curves = BTreeMap::new();
        for (lang, v) in &self.projections {
            curves.insert(lang.clone(), kde(v, &grid, Some(widths[lang]))?);
        }
        Ok(DensityCurves {
            grid,
            bandwidths: widths,
            curves,
        })
    }

    /// `tag,layer,head,language,id,projection`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tag,layer,head,language,id,projection\n");
        for (lang, v) in &self.projections {
            for (id, p) in self.sample_ids.iter().zip(v) {
                out.push_str(&format!("{},{},{},{lang},{id},{p}\n", self.tag, self.layer, self.head));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurves {
    pub grid: Vec<f64>,
    pub bandwidths: BTreeMap<String, f64>,
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl DensityCurves {
    /// `language,x,density`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,x,density\n");
        for (lang, ys) in &self.curves {
            for (x, y) in self.grid.iter().zip(ys) {
                out.push_str(&format!("{lang},{x},{y}\n"));
            }
        }
        out
    }
}

/// Signed distance of every masked feature to the probe's hyperplane,
/// `⟨standardized x, w⟩ + bias`, per sample and language.
pub fn hyperplane_projection(taps: &MaskedTaps, probe: &Probe, tag: &str) -> Result<ProjectionReport> {
    let layout = taps.layout();
    if probe.layer >= layout.layers || probe.head >= layout.heads {
        return Err(Error::Input(format!(
            "probe head ({}, {}) outside the tap grid",
            probe.layer, probe.head
        )));
    }
    let mut projections = BTreeMap::new();
    for (li, lang) in layout.languages.iter().enumerate() {
        let v = (0..layout.sample_ids.len())
            .map(|s| probe.score(taps.row(s, li, probe.layer, probe.head)))
            .collect::<Result<Vec<_>>>()?;
        projections.insert(lang.clone(), v);
    }
    Ok(ProjectionReport {
        layer: probe.layer,
        head: probe.head,
        tag: tag.to_string(),
        sample_ids: layout.sample_ids.clone(),
        projections,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub layers: usize,
    pub heads: usize,
    /// `values[layer][head]`.
    pub values: Vec<Vec<f64>>,
    /// Each row of `values` sorted descending.
    pub sorted: Vec<Vec<f64>>,
}

impl Heatmap {
    /// `layer,head,accuracy,sorted_accuracy`; the last column is the
    /// row-sorted value at the same column index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,accuracy,sorted_accuracy\n");
        for l in 0..self.layers {
            for h in 0..self.heads {
                out.push_str(&format!("{l},{h},{},{}\n", self.values[l][h], self.sorted[l][h]));
            }
        }
        out
    }
}

/// Probe test accuracy on the full `L × H` grid plus the row-sorted view.
pub fn head_accuracy_heatmap(bank: &ProbeBank) -> Result<Heatmap> {
    let mut values = vec![vec![f64::NAN; bank.heads]; bank.layers];
    for p in &bank.probes {
        if p.layer < bank.layers && p.head < bank.heads {
            values[p.layer][p.head] = p.test_acc;
        }
    }
    for (l, row) in values.iter().enumerate() {
        if let Some(h) = row.iter().position(|v| v.is_nan()) {
            return Err(Error::Input(format!("probe bank has no probe for head ({l}, {h})")));
        }
    }
    let sorted = values
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.sort_by(|a, b| b.total_cmp(a));
            r
        })
        .collect();
    Ok(Heatmap {
        layers: bank.layers,
        heads: bank.heads,
        values,
        sorted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensCell {
    pub layer: usize,
    /// 1-based.
    pub position: usize,
    pub token: usize,
    pub score: f32,
    /// Lens logit of the final predicted token at this cell.
    pub contribution: f32,
}

/// Top-1 lens token at every `(layer, position)`, for `X^0 ..= X^L`.
pub fn logit_lens_grid(model: &ModelBundle, trace: &ForwardTrace) -> Result<Vec<LensCell>> {
    let predicted = argmax(&trace.logits);
    let mut cells = Vec::new();
    for layer in 0..trace.hidden.len() {
        for position in 1..=trace.seq_len() {
            let logits = lens_logits(model, trace, layer, position)?;
            let token = argmax(&logits);
            cells.push(LensCell {
                layer,
                position,
                token,
                score: logits[token],
                contribution: logits[predicted],
            });
        }
    }
    Ok(cells)
}

/// `layer,position,token,score,contribution`
pub fn lens_csv(cells: &[LensCell]) -> String {
    let mut out = String::from("layer,position,token,score,contribution\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.layer, c.position, c.token, c.score, c.contribution
        ));
    }
    out
}
