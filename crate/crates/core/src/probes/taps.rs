use std::ops::Deref;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, ArtifactHeader, ArtifactKind, Provenance};
use crate::error::{Error, Result};
use crate::model::{forward, InterventionHook, ModelBundle, SequenceInput};
use crate::numerics::{f32s_to_le_bytes, le_bytes_to_f32s};
use crate::synth::{Dataset, CAPTION_PROMPT, ENGLISH};

/// Shape and ordering of a tap table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapLayout {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub languages: Vec<String>,
    /// Ascending.
    pub sample_ids: Vec<u64>,
}

impl TapLayout {
    fn rows(&self) -> usize {
        self.sample_ids.len() * self.languages.len() * self.layers * self.heads
    }

    pub fn language_index(&self, language: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == language)
    }
}

/// Last-row vectors for every (sample, language, layer, head), in that
/// nesting order.
#[derive(Debug, Clone, PartialEq)]
pub struct TapTable {
    layout: TapLayout,
    values: Vec<f32>,
}

impl TapTable {
    pub fn new(layout: TapLayout, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.rows() * layout.head_dim {
            return Err(Error::Shape(format!(
                "tap table needs {} values, got {}",
                layout.rows() * layout.head_dim,
                values.len()
            )));
        }
        if !layout.sample_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Input("tap sample ids must be strictly ascending".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &TapLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.layout.sample_ids
    }

    pub fn languages(&self) -> &[String] {
        &self.layout.languages
    }

    pub fn row(&self, sample: usize, language: usize, layer: usize, head: usize) -> &[f32] {
        let l = &self.layout;
        let idx = ((sample * l.languages.len() + language) * l.layers + layer) * l.heads + head;
        &self.values[idx * l.head_dim..(idx + 1) * l.head_dim]
    }

    /// Rows of the first `count` samples only.
    pub fn prefix(&self, count: usize) -> Self {
        let l = &self.layout;
        let count = count.min(l.sample_ids.len());
        let per_sample = l.languages.len() * l.layers * l.heads * l.head_dim;
        let mut layout = l.clone();
        layout.sample_ids.truncate(count);
        Self {
            layout,
            values: self.values[..count * per_sample].to_vec(),
        }
    }
}

/// Masked-row features `Ô[e]`; what probes consume.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTaps(pub TapTable);

/// Standard last-row outputs `O[e]`; what shift estimation consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardTaps(pub TapTable);

impl Deref for MaskedTaps {
    type Target = TapTable;
    fn deref(&self) -> &TapTable {
        &self.0
    }
}

impl Deref for StandardTaps {
    type Target = TapTable;
    fn deref(&self) -> &TapTable {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    pub masked: MaskedTaps,
    pub standard: StandardTaps,
}

impl TapSet {
    pub fn layout(&self) -> &TapLayout {
        self.masked.layout()
    }

    pub fn prefix(&self, count: usize) -> Self {
        Self {
            masked: MaskedTaps(self.masked.prefix(count)),
            standard: StandardTaps(self.standard.prefix(count)),
        }
    }
}

/// Run the caption prompt for every sample and language and record the
/// last-row outputs of all heads. A hook, if given, is applied to
/// non-English runs only.
pub fn extract_features(
    model: &ModelBundle,
    dataset: &Dataset,
    languages: &[&str],
    hook: Option<&InterventionHook>,
) -> Result<TapSet> {
    let world = dataset.world();
    if &world.model != model.config() {
        return Err(Error::Input("dataset world does not match the model config".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for lang in languages {
        if *lang != ENGLISH && *lang != world.target_language {
            return Err(Error::Input(format!(
                "language {lang} is neither {ENGLISH} nor the world target {}",
                world.target_language
            )));
        }
        if !seen.insert(*lang) {
            return Err(Error::Input(format!("language {lang} listed twice")));
        }
    }
    let vocab = world.vocab();
    let prompts: Vec<Vec<usize>> = languages
        .iter()
        .map(|l| vocab.localize(&CAPTION_PROMPT, l))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    order.sort_by_key(|&i| dataset.samples[i].id);
    let c = model.config();
    let per_language = c.layers * c.heads * c.head_dim;

    let rows: Vec<(Vec<f32>, Vec<f32>)> = order
        .par_iter()
        .map(|&i| {
            let sample = &dataset.samples[i];
            let patches = sample.patches(world);
            let mut masked = Vec::with_capacity(per_language * languages.len());
            let mut standard = Vec::with_capacity(per_language * languages.len());
            for (lang, prompt) in languages.iter().zip(&prompts) {
                let input = SequenceInput::new(patches.clone(), prompt.clone(), *lang);
                let h = if *lang == ENGLISH { None } else { hook };
                let trace = forward(model, &input, h)?;
                for tap in &trace.heads {
                    masked.extend_from_slice(&tap.masked_output);
                    standard.extend_from_slice(&tap.output);
                }
            }
            Ok((masked, standard))
        })
        .collect::<Result<_>>()?;

    let layout = TapLayout {
        layers: c.layers,
        heads: c.heads,
        head_dim: c.head_dim,
        languages: languages.iter().map(|s| s.to_string()).collect(),
        sample_ids: order.iter().map(|&i| dataset.samples[i].id).collect(),
    };
    let (masked, standard): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(TapSet {
        masked: MaskedTaps(TapTable::new(layout.clone(), masked.concat())?),
        standard: StandardTaps(TapTable::new(layout, standard.concat())?),
    })
}

/// Binary container: masked table then standard table.
pub fn save_taps(path: &Path, taps: &TapSet, provenance: Provenance) -> Result<()> {
    let mut blob = f32s_to_le_bytes(taps.masked.values());
    blob.extend(f32s_to_le_bytes(taps.standard.values()));
    let header = ArtifactHeader::new(ArtifactKind::Taps, provenance);
    artifact::save_binary(path, &header, taps.layout(), &blob)
}

pub fn load_taps(path: &Path) -> Result<(ArtifactHeader, TapSet)> {
    let (header, layout, blob): (_, TapLayout, _) = artifact::load_binary(path, ArtifactKind::Taps)?;
    let values = le_bytes_to_f32s(&blob)?;
    let half = layout.rows() * layout.head_dim;
    if values.len() != 2 * half {
        return Err(Error::Format(format!("{}: tap payload size mismatch", path.display())));
    }
    let fmt = |e: Error| Error::Format(format!("{}: {e}", path.display()));
    let masked = TapTable::new(layout.clone(), values[..half].to_vec()).map_err(fmt)?;
    let standard = TapTable::new(layout, values[half..].to_vec()).map_err(fmt)?;
    Ok((
        header,
        TapSet {
            masked: MaskedTaps(masked),
            standard: StandardTaps(standard),
        },
    ))
}
