//! Language shift vectors: the mean difference between English and
//! target-language last-row attention outputs on the same images.
//!
//! Estimation reads only standard outputs ([`StandardTaps`]); masked
//! features are for probes. Sums run in 64 bits in ascending sample-id
//! order (and, when pooling, ascending target-language order), so
//! results do not depend on input order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, ArtifactHeader, ArtifactKind, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{f32s_to_le_bytes, le_bytes_to_f32s};
use crate::probes::StandardTaps;
use crate::synth::ENGLISH;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    #[default]
    Specific,
    Multi,
    Mono,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMeta {
    pub mode: ShiftMode,
    pub english: String,
    /// Languages the shifts are meant for.
    pub targets: Vec<String>,
    /// Languages the shifts were estimated from.
    pub estimated_on: Vec<String>,
    /// Number of (sample, target) pairs averaged.
    pub pairs: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// `(layer, head)` keys, ascending, matching the payload order.
    pub keys: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSet {
    pub meta: ShiftMeta,
    vectors: BTreeMap<(usize, usize), Vec<f32>>,
}

impl ShiftSet {
    pub fn get(&self, layer: usize, head: usize) -> Option<&[f32]> {
        self.vectors.get(&(layer, head)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<f32>)> {
        self.vectors.iter()
    }

    pub fn mode(&self) -> ShiftMode {
        self.meta.mode
    }

    pub fn payload_bytes(&self) -> Vec<u8> {
        let flat: Vec<f32> = self.vectors.values().flatten().copied().collect();
        f32s_to_le_bytes(&flat)
    }

    pub fn encode(&self, provenance: Provenance) -> Vec<u8> {
        let header = ArtifactHeader::new(ArtifactKind::Shifts, provenance);
        artifact::encode_binary(&header, &self.meta, &self.payload_bytes())
    }
}

pub fn save_shifts(path: &Path, shifts: &ShiftSet, provenance: Provenance) -> Result<()> {
    artifact::write_bytes(path, &shifts.encode(provenance))
}

pub fn load_shifts(path: &Path) -> Result<(ArtifactHeader, ShiftSet)> {
    let (header, meta, blob): (_, ShiftMeta, _) = artifact::load_binary(path, ArtifactKind::Shifts)?;
    let values = le_bytes_to_f32s(&blob)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if values.len() != meta.keys.len() * meta.head_dim {
        return Err(bad("shift payload size mismatch"));
    }
    if !meta.keys.windows(2).all(|w| w[0] < w[1]) {
        return Err(bad("shift keys are not ascending"));
    }
    if meta.keys.iter().any(|&(l, h)| l >= meta.layers || h >= meta.heads) {
        return Err(bad("shift key outside the head grid"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite shift entries"));
    }
    let vectors = meta
        .keys
        .iter()
        .zip(values.chunks_exact(meta.head_dim.max(1)))
        .map(|(&k, v)| (k, v.to_vec()))
        .collect();
    Ok((header, ShiftSet { meta, vectors }))
}

/// Running 64-bit sums of `en - tgt` per head.
struct Accumulator {
    layers: usize,
    heads: usize,
    head_dim: usize,
    sums: Vec<f64>,
    pairs: usize,
}

impl Accumulator {
    fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            layers,
            heads,
            head_dim,
            sums: vec![0.0; layers * heads * head_dim],
            pairs: 0,
        }
    }

    fn add(&mut self, taps: &StandardTaps, target: &str) -> Result<()> {
        let l = taps.layout();
        if (l.layers, l.heads, l.head_dim) != (self.layers, self.heads, self.head_dim) {
            return Err(Error::Input("tap tables come from different head grids".into()));
        }
        let en = l
            .language_index(ENGLISH)
            .ok_or_else(|| Error::Input("tap table has no English records".into()))?;
        let tgt = l
            .language_index(target)
            .ok_or_else(|| Error::Input(format!("tap table has no {target} records to pair with English")))?;
        let ids = taps.sample_ids();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| ids[i]);
        for s in order {
            for layer in 0..self.layers {
                for head in 0..self.heads {
                    let a = taps.row(s, en, layer, head);
                    let b = taps.row(s, tgt, layer, head);
                    let base = (layer * self.heads + head) * self.head_dim;
                    for (j, (x, y)) in a.iter().zip(b).enumerate() {
                        self.sums[base + j] += f64::from(*x) - f64::from(*y);
                    }
                }
            }
        }
        self.pairs += taps.sample_ids().len();
        Ok(())
    }

    fn finish(self, mode: ShiftMode, targets: Vec<String>) -> Result<ShiftSet> {
        if self.pairs == 0 {
            return Err(Error::Input("no paired samples to average".into()));
        }
        let n = self.pairs as f64;
        let mut vectors = BTreeMap::new();
        for layer in 0..self.layers {
            for head in 0..self.heads {
                let base = (layer * self.heads + head) * self.head_dim;
                let v = self.sums[base..base + self.head_dim]
                    .iter()
                    .map(|s| (s / n) as f32)
                    .collect();
                vectors.insert((layer, head), v);
            }
        }
        Ok(ShiftSet {
            meta: ShiftMeta {
                mode,
                english: ENGLISH.into(),
                estimated_on: targets.clone(),
                targets,
                pairs: self.pairs,
                layers: self.layers,
                heads: self.heads,
                head_dim: self.head_dim,
                keys: vectors.keys().copied().collect(),
            },
            vectors,
        })
    }
}

/// Mean of `O_en[e] - O_tgt[e]` over every sample, for every head.
pub fn estimate_specific(taps: &StandardTaps, target: &str) -> Result<ShiftSet> {
    if target == ENGLISH {
        return Err(Error::Input("target language must differ from English".into()));
    }
    let l = taps.layout();
    let mut acc = Accumulator::new(l.layers, l.heads, l.head_dim);
    acc.add(taps, target)?;
    acc.finish(ShiftMode::Specific, vec![target.to_string()])
}

/// Pooled mean over every (sample, target) pair of several tap tables.
///
/// Each table pairs English with one or more targets; a pool with a
/// single target degenerates to [`estimate_specific`].
pub fn estimate_multi(tapsets: &[&StandardTaps]) -> Result<ShiftSet> {
    let mut pairs: Vec<(String, &StandardTaps)> = Vec::new();
    for t in tapsets {
        for lang in t.languages() {
            if lang != ENGLISH {
                pairs.push((lang.clone(), t));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Input("empty pool: no non-English records".into()));
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Input("a target language appears in more than one tap table".into()));
    }
    if pairs.len() == 1 {
        return estimate_specific(pairs[0].1, &pairs[0].0);
    }
    let l = pairs[0].1.layout();
    let mut acc = Accumulator::new(l.layers, l.heads, l.head_dim);
    for (lang, t) in &pairs {
        acc.add(t, lang)?;
    }
    acc.finish(ShiftMode::Multi, pairs.into_iter().map(|p| p.0).collect())
}

/// Reuse a pair-specific shift set for another language, unchanged.
pub fn retarget_mono(shifts: &ShiftSet, language: &str) -> Result<ShiftSet> {
    if shifts.meta.mode != ShiftMode::Specific {
        return Err(Error::Input("only pair-specific shifts can be retargeted".into()));
    }
    if language == ENGLISH {
        return Err(Error::Input("cannot retarget shifts to English".into()));
    }
    let mut out = shifts.clone();
    if shifts.meta.targets.iter().any(|t| t == language) {
        return Ok(out);
    }
    out.meta.mode = ShiftMode::Mono;
    out.meta.targets = vec![language.to_string()];
    Ok(out)
}

/// Build a shift set directly from vectors (tests, hand-made plans).
pub fn from_vectors(
    mode: ShiftMode,
    targets: Vec<String>,
    layers: usize,
    heads: usize,
    head_dim: usize,
    vectors: BTreeMap<(usize, usize), Vec<f32>>,
) -> Result<ShiftSet> {
    for (&(l, h), v) in &vectors {
        if l >= layers || h >= heads || v.len() != head_dim || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!("invalid shift vector for ({l}, {h})")));
        }
    }
    Ok(ShiftSet {
        meta: ShiftMeta {
            mode,
            english: ENGLISH.into(),
            estimated_on: targets.clone(),
            targets,
            pairs: 0,
            layers,
            heads,
            head_dim,
            keys: vectors.keys().copied().collect(),
        },
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::{TapLayout, TapTable};

    fn table(en: &[[f32; 2]], tgt: &[[f32; 2]]) -> StandardTaps {
        let layout = TapLayout {
            layers: 1,
            heads: 1,
            head_dim: 2,
            languages: vec!["en".into(), "tgt".into()],
            sample_ids: (0..en.len() as u64).collect(),
        };
        let values = en
            .iter()
            .zip(tgt)
            .flat_map(|(a, b)| a.iter().chain(b.iter()).copied())
            .collect();
        StandardTaps(TapTable::new(layout, values).unwrap())
    }

    #[test]
    fn hand_mean() {
        let t = table(&[[1.0, 2.0], [3.0, 4.0]], &[[0.0, 0.0], [1.0, 1.0]]);
        let s = estimate_specific(&t, "tgt").unwrap();
        assert_eq!(s.get(0, 0).unwrap(), &[1.5, 2.5]);
    }

    #[test]
    fn equal_records_give_zero() {
        let t = table(&[[1.0, -2.0], [0.5, 4.0]], &[[1.0, -2.0], [0.5, 4.0]]);
        let s = estimate_specific(&t, "tgt").unwrap();
        assert_eq!(s.get(0, 0).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn missing_target_is_input_error() {
        let t = table(&[[1.0, 2.0]], &[[0.0, 0.0]]);
        assert!(matches!(estimate_specific(&t, "zz"), Err(Error::Input(_))));
    }

    #[test]
    fn single_target_pool_equals_specific() {
        let t = table(&[[1.0, 2.0], [3.0, 4.0]], &[[0.0, 0.5], [1.0, 1.0]]);
        assert_eq!(estimate_multi(&[&t]).unwrap(), estimate_specific(&t, "tgt").unwrap());
    }

    #[test]
    fn retarget_to_same_language_is_identity() {
        let t = table(&[[1.0, 2.0]], &[[0.0, 0.0]]);
        let s = estimate_specific(&t, "tgt").unwrap();
        assert_eq!(retarget_mono(&s, "tgt").unwrap(), s);
        let m = retarget_mono(&s, "other").unwrap();
        assert_eq!(m.meta.mode, ShiftMode::Mono);
        assert_eq!(m.get(0, 0), s.get(0, 0));
    }
}
