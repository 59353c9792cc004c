//! Inference-time intervention: plans, evaluation on the presence task,
//! and the two-stage α/K sweep.

mod sweep;

pub use sweep::{k_grid, sweep, tuning_split, GridPoint, SweepConfig, SweepResult};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{f32_exact, sha256_hex, to_json_bytes};
use crate::error::{Error, Result};
use crate::model::{argmax, forward, ForwardTrace, InterventionHook, ModelBundle, SequenceInput, ShiftRows};
use crate::probes::HeadSet;
use crate::shift::{ShiftMode, ShiftSet};
use crate::synth::{Dataset, Label, Sample, ENGLISH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanShift {
    pub layer: usize,
    pub head: usize,
    #[serde(with = "f32_exact")]
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub target_language: String,
    pub estimated_on: Vec<String>,
    pub mode: ShiftMode,
    pub alpha: f64,
    pub shift_rows: ShiftRows,
    pub head_set: HeadSet,
    pub shifts: Vec<PlanShift>,
}

impl InterventionPlan {
    /// Plan for every head in `head_set`, taking vectors from `shifts`.
    pub fn new(head_set: &HeadSet, shifts: &ShiftSet, alpha: f64, shift_rows: ShiftRows) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::Plan(format!("alpha {alpha} is not finite")));
        }
        let target = match shifts.meta.targets.as_slice() {
            [one] => one.clone(),
            many => many.join("+"),
        };
        let mut ordered = head_set.pairs();
        ordered.sort_unstable();
        let vectors = ordered
            .into_iter()
            .map(|(layer, head)| {
                shifts
                    .get(layer, head)
                    .map(|v| PlanShift {
                        layer,
                        head,
                        vector: v.to_vec(),
                    })
                    .ok_or_else(|| Error::Plan(format!("no shift vector for selected head ({layer}, {head})")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            target_language: target,
            estimated_on: shifts.meta.estimated_on.clone(),
            mode: shifts.meta.mode,
            alpha,
            shift_rows,
            head_set: head_set.clone(),
            shifts: vectors,
        })
    }

    pub fn hook(&self) -> InterventionHook {
        let mut hook = InterventionHook::new(self.alpha, self.shift_rows);
        for s in &self.shifts {
            hook.insert(s.layer, s.head, s.vector.clone());
        }
        hook
    }

    /// Same heads and vectors, applied to another language.
    pub fn retarget_mono(&self, language: &str) -> Result<Self> {
        if language == ENGLISH {
            return Err(Error::Plan("cannot retarget a plan to English".into()));
        }
        let mut out = self.clone();
        if language != self.target_language {
            if self.mode != ShiftMode::Specific {
                return Err(Error::Plan("only pair-specific plans can be retargeted".into()));
            }
            out.mode = ShiftMode::Mono;
            out.target_language = language.to_string();
        }
        Ok(out)
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.alpha = alpha;
        out
    }

    pub fn validate(&self, model: &ModelBundle) -> Result<()> {
        let c = model.config();
        for h in &self.head_set.heads {
            if h.layer >= c.layers || h.head >= c.heads {
                return Err(Error::Plan(format!("head ({}, {}) outside the model grid", h.layer, h.head)));
            }
            if !self.shifts.iter().any(|s| s.layer == h.layer && s.head == h.head) {
                return Err(Error::Plan(format!("no shift vector for selected head ({}, {})", h.layer, h.head)));
            }
        }
        for s in &self.shifts {
            if s.vector.len() != c.head_dim {
                return Err(Error::Plan(format!("shift for ({}, {}) has the wrong length", s.layer, s.head)));
            }
        }
        if !self.alpha.is_finite() {
            return Err(Error::Plan("alpha is not finite".into()));
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&to_json_bytes(self))
    }
}

/// Forward pass with the plan's shifts applied.
pub fn intervened_forward(model: &ModelBundle, input: &SequenceInput, plan: &InterventionPlan) -> Result<ForwardTrace> {
    plan.validate(model)?;
    forward(model, input, Some(&plan.hook()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: u64,
    pub language: String,
    pub label: Label,
    pub predicted: Label,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSummary {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: BTreeMap<String, LanguageSummary>,
    pub plan_hash: Option<String>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn accuracy(&self, language: &str) -> Option<f64> {
        self.summary.get(language).map(|s| s.accuracy)
    }

    /// Per-sample CSV: `id,language,label,prediction,correct`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,language,label,prediction,correct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id,
                r.language,
                label_name(r.label),
                label_name(r.predicted),
                u8::from(r.correct)
            ));
        }
        out
    }
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Yes => "yes",
        Label::No => "no",
    }
}

/// Predicted answer: argmax over the yes and no logits (yes on ties).
pub fn predict(logits: &[f32], yes: usize, no: usize) -> Label {
    if argmax(&[logits[yes], logits[no]]) == 0 {
        Label::Yes
    } else {
        Label::No
    }
}

/// Presence-task accuracy over `samples` for each language. The plan,
/// if any, is applied to non-English queries only.
pub fn evaluate_samples(
    model: &ModelBundle,
    dataset: &Dataset,
    samples: &[&Sample],
    languages: &[&str],
    plan: Option<&InterventionPlan>,
) -> Result<EvalReport> {
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
    for lang in languages {
        if *lang != ENGLISH && *lang != world.target_language {
            return Err(Error::Input(format!("language {lang} is not part of this world")));
        }
        if let Some(p) = plan {
            if *lang != ENGLISH && p.target_language != *lang {
                return Err(Error::Plan(format!(
                    "plan targets {}, evaluation language is {lang}",
                    p.target_language
                )));
            }
        }
    }
    let vocab = world.vocab();
    let mut ordered: Vec<&Sample> = samples.to_vec();
    ordered.sort_by_key(|s| s.id);
    let mut rows = Vec::with_capacity(ordered.len() * languages.len());
    for lang in languages {
        let h = if *lang == ENGLISH { None } else { hook.as_ref() };
        let part: Vec<EvalRow> = ordered
            .par_iter()
            .map(|s| {
                let input = SequenceInput::new(s.patches(world), s.query(lang).to_vec(), *lang);
                let trace = forward(model, &input, h)?;
                let predicted = predict(&trace.logits, vocab.yes(), vocab.no());
                Ok(EvalRow {
                    id: s.id,
                    language: lang.to_string(),
                    label: s.label,
                    predicted,
                    correct: predicted == s.label,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(part);
    }
    let mut summary = BTreeMap::new();
    for lang in languages {
        let (mut correct, mut total) = (0, 0);
        for r in rows.iter().filter(|r| r.language == *lang) {
            total += 1;
            correct += usize::from(r.correct);
        }
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        summary.insert(lang.to_string(), LanguageSummary { correct, total, accuracy });
    }
    Ok(EvalReport {
        summary,
        plan_hash: plan.map(InterventionPlan::content_hash),
        alpha: plan.map(|p| p.alpha),
        k: plan.map(|p| p.head_set.k),
        rows,
    })
}

/// [`evaluate_samples`] over the whole dataset.
pub fn evaluate(
    model: &ModelBundle,
    dataset: &Dataset,
    languages: &[&str],
    plan: Option<&InterventionPlan>,
) -> Result<EvalReport> {
    let all: Vec<&Sample> = dataset.samples.iter().collect();
    evaluate_samples(model, dataset, &all, languages, plan)
}
