use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Vocab, WorldConfig, ENGLISH};
use crate::artifact::{ArtifactKind, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Matrix, RngStream};

const DATASET_STREAM: u64 = 0xDA7A;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
}

/// One synthetic image with its paired presence queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub patch_seed: u64,
    /// Object drawn in the image.
    pub object: usize,
    /// Object asked about.
    pub queried: usize,
    pub label: Label,
    /// 1-based patch positions of the bounding box, ascending.
    pub bbox: Vec<usize>,
    pub query_en: Vec<usize>,
    pub query_tgt: Vec<usize>,
}

impl Sample {
    /// Patch embeddings, regenerated from the stored seed.
    pub fn patches(&self, world: &WorldConfig) -> Matrix {
        let c = &world.model;
        let layout = world.layout();
        let mut rng = RngStream::new(self.patch_seed);
        let mut m = Matrix::zeros(c.n_patches, c.d_model);
        for i in 0..c.n_patches {
            let row = m.row_mut(i);
            for v in &mut row[..layout.random_dims] {
                *v = rng.next_gaussian() as f32;
            }
            row[layout.visual_flag] = 1.0;
        }
        let sig = world.construction.patch_signature as f32;
        for &p in &self.bbox {
            m.set(p - 1, layout.object_dim(self.object), sig);
        }
        m
    }

    /// Presence query in `language` (English or the world's target).
    pub fn query(&self, language: &str) -> &[usize] {
        if language == ENGLISH {
            &self.query_en
        } else {
            &self.query_tgt
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub kind: ArtifactKind,
    pub world: WorldConfig,
    pub count: usize,
    #[serde(default)]
    pub model_hash: Option<String>,
    pub patches_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn world(&self) -> &WorldConfig {
        &self.header.world
    }
}

fn make_sample(world: &WorldConfig, vocab: &Vocab, id: u64) -> Sample {
    let c = &world.model;
    let mut rng = RngStream::derive(derive_seed(world.seed, DATASET_STREAM), id);
    let objects = world.object_signatures as u64;
    let label = if id % 2 == 0 { Label::Yes } else { Label::No };
    let object = rng.next_below(objects) as usize;
    let queried = match label {
        Label::Yes => object,
        Label::No => (object + 1 + rng.next_below(objects - 1) as usize) % world.object_signatures,
    };
    let mut positions: Vec<usize> = (1..=c.n_patches).collect();
    for i in 0..world.bbox_size {
        let j = i + rng.next_below((c.n_patches - i) as u64) as usize;
        positions.swap(i, j);
    }
    let mut bbox = positions[..world.bbox_size].to_vec();
    bbox.sort_unstable();
    let patch_seed = rng.next_u64();
    let query_en = vocab.presence_query(queried);
    let query_tgt = vocab.translate(&query_en).expect("presence queries are English");
    Sample {
        id,
        patch_seed,
        object,
        queried,
        label,
        bbox,
        query_en,
        query_tgt,
    }
}

/// `count` samples; even ids are positives, so any even prefix is balanced.
pub fn gen_dataset(world: &WorldConfig, count: usize) -> Result<Dataset> {
    world.validate()?;
    if count < 10 || count % 2 != 0 {
        return Err(Error::Input(format!("dataset size {count} must be even and >= 10")));
    }
    let vocab = world.vocab();
    let samples: Vec<Sample> = (0..count as u64).map(|id| make_sample(world, &vocab, id)).collect();
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        kind: ArtifactKind::Dataset,
        world: world.clone(),
        count,
        model_hash: None,
        patches_hash: patches_hash(world, &samples),
    };
    Ok(Dataset { header, samples })
}

/// SHA-256 over the regenerated patch bytes of every sample, in order.
pub fn patches_hash(world: &WorldConfig, samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.patches(world).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// JSON lines: header first, then one sample per line.
pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut lines = Vec::with_capacity(data.samples.len() + 1);
    lines.push(serde_json::to_string(&data.header).expect("header serializes"));
    for s in &data.samples {
        lines.push(serde_json::to_string(s).expect("sample serializes"));
    }
    crate::artifact::write_lines(path, &lines)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| bad("empty dataset file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| bad(format!("corrupt header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("format version {}", header.format_version)));
    }
    if header.kind != ArtifactKind::Dataset {
        return Err(bad("not a dataset".into()));
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let s: Sample =
            serde_json::from_str(&line).map_err(|e| bad(format!("sample line {}: {e}", i + 2)))?;
        samples.push(s);
    }
    if samples.len() != header.count {
        return Err(bad(format!(
            "header declares {} samples, file has {}",
            header.count,
            samples.len()
        )));
    }
    header
        .world
        .validate()
        .map_err(|e| bad(format!("invalid world: {e}")))?;
    let vocab = header.world.vocab();
    for s in &samples {
        let ok = s.bbox.len() == header.world.bbox_size
            && s.bbox.iter().all(|&p| (1..=header.world.model.n_patches).contains(&p))
            && s.object < header.world.object_signatures
            && s.query_en.len() == s.query_tgt.len()
            && vocab.translate(&s.query_en).ok().as_ref() == Some(&s.query_tgt);
        if !ok {
            return Err(bad(format!("sample {} is inconsistent with its world", s.id)));
        }
    }
    Ok(Dataset { header, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_labels() {
        let d = gen_dataset(&WorldConfig::default(), 100).unwrap();
        let yes = d.samples.iter().filter(|s| s.label == Label::Yes).count();
        assert_eq!(yes, 50);
    }

    #[test]
    fn smaller_dataset_is_prefix() {
        let w = WorldConfig::default();
        let a = gen_dataset(&w, 20).unwrap();
        let b = gen_dataset(&w, 40).unwrap();
        assert_eq!(a.samples[..], b.samples[..20]);
    }

    #[test]
    fn rejects_odd_or_tiny_sizes() {
        let w = WorldConfig::default();
        assert!(gen_dataset(&w, 11).is_err());
        assert!(gen_dataset(&w, 8).is_err());
    }

    #[test]
    fn sample_invariants() {
        let w = WorldConfig::default();
        for s in gen_dataset(&w, 50).unwrap().samples {
            assert_eq!(s.bbox.len(), w.bbox_size);
            assert_eq!(s.query_en.len(), s.query_tgt.len());
            assert_eq!(s.label == Label::Yes, s.object == s.queried);
            assert!(s.bbox.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
