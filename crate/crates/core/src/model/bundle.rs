use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactKind, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::numerics::{f32s_to_le_bytes, le_bytes_to_f32s, Matrix, Packed};
use crate::synth::{Calibration, WorldConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Shape of the toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_patches: usize,
    pub max_text_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_grid(8, 8, 32, 64, 512, 0)
    }
}

impl ModelConfig {
    /// Config with `d_model = heads * head_dim` and an MLP as wide as the model.
    pub fn with_grid(
        layers: usize,
        heads: usize,
        head_dim: usize,
        n_patches: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            layers,
            heads,
            head_dim,
            d_model: heads * head_dim,
            d_mlp: heads * head_dim / 2,
            vocab_size,
            n_patches,
            max_text_tokens: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.n_patches == 0 {
            return Err(Error::Input("layers, heads, head_dim and n_patches must be >= 1".into()));
        }
        if self.d_model != self.heads * self.head_dim {
            return Err(Error::Input(format!(
                "d_model {} != heads {} x head_dim {}",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if self.d_mlp == 0 || self.vocab_size == 0 || self.max_text_tokens == 0 {
            return Err(Error::Input("d_mlp, vocab_size and max_text_tokens must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        self.layers * self.heads
    }

    pub fn head_index(&self, layer: usize, head: usize) -> usize {
        layer * self.heads + head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    /// `d_model × 3·d_model`: query, key and value columns; head `h`
    /// owns columns `h·d..(h+1)·d` inside each third.
    pub w_qkv: Matrix,
    /// `d_model × d_model`; rows `h·d..(h+1)·d` are the per-head `W_h`.
    pub w_o: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `vocab × d_model`; also the (tied) unembedding.
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
}

impl Weights {
    /// Weight rows `W_h` of one head's output projection.
    pub fn head_projection(&self, layer: usize, head: usize, head_dim: usize) -> Matrix {
        let w_o = &self.layers[layer].w_o;
        let rows: Vec<&[f32]> = (head * head_dim..(head + 1) * head_dim)
            .map(|r| w_o.row(r))
            .collect();
        Matrix::from_rows(&rows).expect("rows share width")
    }
}

/// A head whose output rows receive a fixed offset for the target language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub layer: usize,
    pub head: usize,
    #[serde(skip)]
    pub offset: Vec<f32>,
}

/// Everything in `config.json` beyond the raw shape.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub english: String,
    pub target: Option<String>,
    pub planted: Vec<PlantedHead>,
    pub world: Option<WorldConfig>,
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigFile {
    format_version: u32,
    kind: ArtifactKind,
    config: ModelConfig,
    annotations: Annotations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorManifest {
    format_version: u32,
    byte_order: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    total_bytes: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct PackedLayer {
    pub w_qkv: Packed,
    pub w_o: Packed,
    pub w_in: Packed,
    pub w_out: Packed,
}

/// Config, weights and planted-head annotations of one toy model.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    weights: Weights,
    annotations: Annotations,
    pub(crate) packed: Vec<PackedLayer>,
    pub(crate) unembed: Packed,
    plant_block: Vec<f32>,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, weights: Weights, annotations: Annotations) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &weights)?;
        for p in &annotations.planted {
            if p.layer >= config.layers || p.head >= config.heads {
                return Err(Error::Input(format!(
                    "planted head ({}, {}) outside the {}x{} grid",
                    p.layer, p.head, config.layers, config.heads
                )));
            }
            if p.offset.len() != config.head_dim {
                return Err(Error::Shape(format!(
                    "planted offset for ({}, {}) has length {}, expected {}",
                    p.layer,
                    p.head,
                    p.offset.len(),
                    config.head_dim
                )));
            }
        }
        let packed = weights
            .layers
            .iter()
            .map(|l| PackedLayer {
                w_qkv: Packed::new(&l.w_qkv),
                w_o: Packed::new(&l.w_o),
                w_in: Packed::new(&l.w_in),
                w_out: Packed::new(&l.w_out),
            })
            .collect();
        let unembed = Packed::new(&weights.embed.transpose());
        let plant_block = annotations
            .planted
            .iter()
            .flat_map(|p| p.offset.iter().copied())
            .collect();
        Ok(Self {
            config,
            weights,
            annotations,
            packed,
            unembed,
            plant_block,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn annotations(&self) -> &Annotations {
        &self.annotations
    }

    pub fn into_parts(self) -> (ModelConfig, Weights, Annotations) {
        (self.config, self.weights, self.annotations)
    }

    /// Offset planted at `(layer, head)` for `language`, if any.
    pub fn plant(&self, layer: usize, head: usize, language: &str) -> Option<&[f32]> {
        if self.annotations.target.as_deref() != Some(language) {
            return None;
        }
        self.annotations
            .planted
            .iter()
            .find(|p| p.layer == layer && p.head == head)
            .map(|p| p.offset.as_slice())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, values) in self.tensor_list() {
            let bytes = f32s_to_le_bytes(values);
            tensors.push(TensorEntry {
                name,
                shape,
                offset: blob.len(),
                bytes: bytes.len(),
            });
            blob.extend_from_slice(&bytes);
        }
        let manifest = TensorManifest {
            format_version: FORMAT_VERSION,
            byte_order: "little-endian".into(),
            dtype: "f32".into(),
            total_bytes: blob.len(),
            tensors,
        };
        let config = ConfigFile {
            format_version: FORMAT_VERSION,
            kind: ArtifactKind::Model,
            config: self.config.clone(),
            annotations: self.annotations.clone(),
        };
        crate::artifact::write_json(&dir.join(CONFIG_FILE), &config)?;
        crate::artifact::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        crate::artifact::write_bytes(&dir.join(WEIGHTS_FILE), &blob)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ConfigFile = crate::artifact::read_json(&dir.join(CONFIG_FILE))?;
        if config.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {} (expected {FORMAT_VERSION})",
                config.format_version
            )));
        }
        if config.kind != ArtifactKind::Model {
            return Err(Error::Format(format!("{} is not a model", dir.display())));
        }
        let manifest: TensorManifest = crate::artifact::read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format("tensor manifest version mismatch".into()));
        }
        let path = dir.join(WEIGHTS_FILE);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if blob.len() != manifest.total_bytes {
            return Err(Error::Format(format!(
                "weights.bin has {} bytes, manifest declares {}",
                blob.len(),
                manifest.total_bytes
            )));
        }
        let cfg = config.config;
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut lookup = std::collections::BTreeMap::new();
        for t in &manifest.tensors {
            let end = t.offset.checked_add(t.bytes).filter(|&end| end <= blob.len());
            let Some(end) = end else {
                return Err(Error::Format(format!("tensor {} overruns weights.bin", t.name)));
            };
            let values = le_bytes_to_f32s(&blob[t.offset..end])?;
            if values.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Format(format!("tensor {} size disagrees with shape", t.name)));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("tensor {} has non-finite entries", t.name)));
            }
            lookup.insert(t.name.clone(), (t.shape.clone(), values));
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let (s, v) = lookup
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if s != shape {
                return Err(Error::Format(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
            }
            Ok(v)
        };
        let (dm, v, mlp) = (cfg.d_model, cfg.vocab_size, cfg.d_mlp);
        let embed = Matrix::from_vec(v, dm, take("embed", &[v, dm])?)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(LayerWeights {
                attn_norm: take(&format!("layers.{l}.attn_norm"), &[dm])?,
                w_qkv: Matrix::from_vec(dm, 3 * dm, take(&format!("layers.{l}.w_qkv"), &[dm, 3 * dm])?)?,
                w_o: Matrix::from_vec(dm, dm, take(&format!("layers.{l}.w_o"), &[dm, dm])?)?,
                mlp_norm: take(&format!("layers.{l}.mlp_norm"), &[dm])?,
                w_in: Matrix::from_vec(dm, mlp, take(&format!("layers.{l}.w_in"), &[dm, mlp])?)?,
                w_out: Matrix::from_vec(mlp, dm, take(&format!("layers.{l}.w_out"), &[mlp, dm])?)?,
            });
        }
        let final_norm = take("final_norm", &[dm])?;
        let mut annotations = config.annotations;
        let planted = annotations.planted.len();
        if planted > 0 {
            let offsets = take("plant.offsets", &[planted, cfg.head_dim])?;
            for (p, chunk) in annotations
                .planted
                .iter_mut()
                .zip(offsets.chunks_exact(cfg.head_dim))
            {
                p.offset = chunk.to_vec();
            }
        }
        if let Some(extra) = lookup.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        let weights = Weights {
            embed,
            layers,
            final_norm,
        };
        Self::new(cfg, weights, annotations).map_err(|e| Error::Format(e.to_string()))
    }

    fn tensor_list(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let c = &self.config;
        let w = &self.weights;
        let mut out: Vec<(String, Vec<usize>, &[f32])> =
            vec![("embed".into(), vec![c.vocab_size, c.d_model], w.embed.data())];
        for (l, lw) in w.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), vec![c.d_model], &lw.attn_norm));
            out.push((format!("layers.{l}.w_qkv"), vec![c.d_model, 3 * c.d_model], lw.w_qkv.data()));
            out.push((format!("layers.{l}.w_o"), vec![c.d_model, c.d_model], lw.w_o.data()));
            out.push((format!("layers.{l}.mlp_norm"), vec![c.d_model], &lw.mlp_norm));
            out.push((format!("layers.{l}.w_in"), vec![c.d_model, c.d_mlp], lw.w_in.data()));
            out.push((format!("layers.{l}.w_out"), vec![c.d_mlp, c.d_model], lw.w_out.data()));
        }
        out.push(("final_norm".into(), vec![c.d_model], &w.final_norm));
        out.extend(self.plant_tensor());
        out
    }

    fn plant_tensor(&self) -> Option<(String, Vec<usize>, &[f32])> {
        if self.annotations.planted.is_empty() {
            return None;
        }
        Some((
            "plant.offsets".to_string(),
            vec![self.annotations.planted.len(), self.config.head_dim],
            self.plant_block.as_slice(),
        ))
    }
}

fn check_shapes(c: &ModelConfig, w: &Weights) -> Result<()> {
    let bad = |what: &str| Err(Error::Shape(format!("{what} has the wrong shape")));
    if w.embed.rows() != c.vocab_size || w.embed.cols() != c.d_model {
        return bad("embed");
    }
    if w.layers.len() != c.layers || w.final_norm.len() != c.d_model {
        return bad("layer stack");
    }
    for lw in &w.layers {
        if lw.attn_norm.len() != c.d_model || lw.mlp_norm.len() != c.d_model {
            return bad("norm gain");
        }
        if lw.w_qkv.rows() != c.d_model || lw.w_qkv.cols() != 3 * c.d_model {
            return bad("w_qkv");
        }
        if lw.w_o.rows() != c.d_model || lw.w_o.cols() != c.d_model {
            return bad("w_o");
        }
        if lw.w_in.rows() != c.d_model || lw.w_in.cols() != c.d_mlp {
            return bad("w_in");
        }
        if lw.w_out.rows() != c.d_mlp || lw.w_out.cols() != c.d_model {
            return bad("w_out");
        }
    }
    Ok(())
}
