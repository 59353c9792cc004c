use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::InterventionPlan;
use crate::model::{forward, ForwardTrace, ModelBundle, SequenceInput};
use crate::synth::{Dataset, Label, Sample, ENGLISH};

/// Validated bbox, ascending.
fn check_bbox(bbox: &[usize], n_patches: usize) -> Result<Vec<usize>> {
    if bbox.is_empty() {
        return Err(Error::Input("bounding box is empty".into()));
    }
    if let Some(p) = bbox.iter().find(|&&p| p == 0 || p > n_patches) {
        return Err(Error::Input(format!("bbox position {p} outside 1..={n_patches}")));
    }
    let mut sorted = bbox.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input("bbox lists a patch twice".into()));
    }
    Ok(sorted)
}

/// `A_b` from the last-row weights of every head of one layer.
///
/// `(n / (H·|B|)) · Σ_h (Σ_{j∈B} w_h[j] / Σ_{j≤n} w_h[j])`, with 1-based
/// bbox positions into the first `n_patches` columns.
pub fn ab_from_rows(rows: &[&[f32]], n_patches: usize, bbox: &[usize]) -> Result<f64> {
    let bbox = check_bbox(bbox, n_patches)?;
    if rows.is_empty() {
        return Err(Error::Input("no attention rows".into()));
    }
    let mut total = 0f64;
    for row in rows {
        if row.len() < n_patches {
            return Err(Error::Shape(format!(
                "attention row has {} columns, fewer than {n_patches} patches",
                row.len()
            )));
        }
        let visual: f64 = row[..n_patches].iter().map(|&w| f64::from(w)).sum();
        if !(visual > 0.0) {
            return Err(Error::DegenerateData("no attention mass on visual positions".into()));
        }
        let inside: f64 = bbox.iter().map(|&j| f64::from(row[j - 1])).sum();
        total += inside / visual;
    }
    Ok(n_patches as f64 * total / (rows.len() * bbox.len()) as f64)
}

/// `A_b` of one layer of a recorded trace.
pub fn attention_in_bbox(trace: &ForwardTrace, bbox: &[usize], layer: usize) -> Result<f64> {
    if layer >= trace.layers() {
        return Err(Error::Input(format!("layer {layer} >= {}", trace.layers())));
    }
    let rows: Vec<&[f32]> = (0..trace.heads_per_layer)
        .map(|h| trace.head(layer, h).weights.as_slice())
        .collect();
    ab_from_rows(&rows, trace.n_patches, bbox)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbProfile {
    pub layers: usize,
    pub samples: usize,
    /// Per language, `A_b` per layer (unweighted mean over samples).
    pub ab: BTreeMap<String, Vec<f64>>,
    /// `(A_b^tgt − A_b^en) / A_b^en` per layer, when a target is present.
    pub change_rate: Vec<Option<f64>>,
    pub target: Option<String>,
    pub plan_hash: Option<String>,
}

impl AbProfile {
    /// `layer,<language>...,change_rate`
    pub fn to_csv(&self) -> String {
        let langs: Vec<&String> = self.ab.keys().collect();
        let mut out = String::from("layer");
        for l in &langs {
            out.push_str(&format!(",{l}"));
        }
        out.push_str(",change_rate\n");
        for layer in 0..self.layers {
            out.push_str(&layer.to_string());
            for l in &langs {
                out.push_str(&format!(",{}", self.ab[*l][layer]));
            }
            match self.change_rate[layer] {
                Some(c) => out.push_str(&format!(",{c}\n")),
                None => out.push_str(",\n"),
            }
        }
        out
    }
}

/// Average `A_b` per layer over the positive samples, asking about the
/// object that is drawn, for each language. The plan, if any, touches
/// non-English runs only.
pub fn ab_profile(
    model: &ModelBundle,
    dataset: &Dataset,
    languages: &[&str],
    plan: Option<&InterventionPlan>,
) -> Result<AbProfile> {
    let world = dataset.world();
    if &world.model != model.config() {
        return Err(Error::Input("dataset world does not match the model config".into()));
    }
    let hook = match plan {
        Some(p) => {
            p.validate(model)?;
            Some(p.hook())
        }
        None => None,
    };
    let mut positives: Vec<&Sample> = dataset.samples.iter().filter(|s| s.label == Label::Yes).collect();
    positives.sort_by_key(|s| s.id);
    if positives.is_empty() {
        return Err(Error::DegenerateData("no positive samples".into()));
    }
    let layers = model.config().layers;
    let mut ab = BTreeMap::new();
    for lang in languages {
        if *lang != ENGLISH && *lang != world.target_language {
            return Err(Error::Input(format!("language {lang} is not part of this world")));
        }
        let h = if *lang == ENGLISH { None } else { hook.as_ref() };
        let per_sample: Vec<Vec<f64>> = positives
            .par_iter()
            .map(|s| {
                let input = SequenceInput::new(s.patches(world), s.query(lang).to_vec(), *lang);
                let trace = forward(model, &input, h)?;
                (0..layers).map(|l| attention_in_bbox(&trace, &s.bbox, l)).collect()
            })
            .collect::<Result<_>>()?;
        let mut mean = vec![0f64; layers];
        for row in &per_sample {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= per_sample.len() as f64);
        ab.insert(lang.to_string(), mean);
    }
    let target = languages.iter().find(|l| **l != ENGLISH).map(|l| l.to_string());
    let change_rate = (0..layers)
        .map(|l| {
            let en = ab.get(ENGLISH)?[l];
            let tgt = ab.get(target.as_ref()?)?[l];
            (en > 0.0).then(|| (tgt - en) / en)
        })
        .collect();
    Ok(AbProfile {
        layers,
        samples: positives.len(),
        ab,
        change_rate,
        target,
        plan_hash: plan.map(InterventionPlan::content_hash),
    })
}
