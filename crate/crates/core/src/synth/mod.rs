//! Synthetic bilingual presence-task world with planted heads.
//!
//! The vocabulary holds `W = (V - 2) / 2` English words, their target
//! counterparts at `id + W`, and the two answer tokens `yes = 2W`,
//! `no = 2W + 1`. Each "image" contains one object whose signature is
//! written into a bounding box of patches. One hand-built head in the
//! last layer reads the presence signal into a dedicated readout
//! dimension of the residual stream, which the tied unembedding turns
//! into a yes/no margin.
//!
//! A planted head adds a fixed offset `b` to all its output rows when the
//! query is in the target language. `b` is tilted against the planted
//! head's readout column, so the target language loses accuracy, and the
//! shift that undoes it is exactly `-b`.

mod dataset;
mod world;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub use dataset::{
    gen_dataset, load_dataset, patches_hash, save_dataset, Dataset, DatasetHeader, Label, Sample,
};
pub use world::{gen_model, planted_offset};

pub const ENGLISH: &str = "en";

/// Word ids of the fixed prompt templates.
pub mod words {
    pub const WHAT: usize = 0;
    pub const IS: usize = 1;
    pub const IT: usize = 2;
    pub const IN: usize = 3;
    pub const THE: usize = 4;
    pub const IMAGE: usize = 5;
    pub const QUESTION: usize = 6;
    pub const THERE: usize = 7;
    pub const A: usize = 8;
    /// Object `k` is word `OBJECT_BASE + k`.
    pub const OBJECT_BASE: usize = 16;
}

/// Caption-style prompt used for identification and shift estimation.
pub const CAPTION_PROMPT: [usize; 7] = [
    words::WHAT,
    words::IS,
    words::IT,
    words::IN,
    words::THE,
    words::IMAGE,
    words::QUESTION,
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PlantPolicy {
    #[default]
    SingleLayer,
    MultiLayer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WorldMode {
    #[default]
    CleanPaired,
    Noisy,
}

/// Hand-set magnitudes of the presence circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Construction {
    /// Query gain of the answer head on object dimensions.
    pub query_gain: f64,
    /// Object signature carried by object word embeddings.
    pub token_signature: f64,
    /// Object signature added to bounding-box patches.
    pub patch_signature: f64,
    /// Answer-head output weight into the readout dimension.
    pub readout_weight: f64,
    /// Readout component of the yes (+) and no (-) embeddings.
    pub answer_gain: f64,
    /// Angle between `-w_h` and the planted offset, in degrees.
    pub tilt_degrees: f64,
    /// Target readout drop as a multiple of the mean English positive readout.
    pub damage: f64,
    /// Samples used to verify the circuit while generating.
    pub calibration_samples: usize,
}

impl Default for Construction {
    fn default() -> Self {
        Self {
            query_gain: 8.0,
            token_signature: 4.0,
            patch_signature: 4.0,
            readout_weight: 4.0,
            answer_gain: 4.0,
            tilt_degrees: 60.0,
            damage: 4.0,
            calibration_samples: 128,
        }
    }
}

pub const DEFAULT_NOISE_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub model: ModelConfig,
    pub target_language: String,
    pub planted_heads: Vec<(usize, usize)>,
    pub planted_layer_policy: PlantPolicy,
    pub offset_scale: f64,
    pub mode: WorldMode,
    pub noise_sigma: f64,
    pub object_signatures: usize,
    pub bbox_size: usize,
    /// Dataset seed.
    pub seed: u64,
    /// Seed of the planted offsets and target-embedding noise.
    pub plant_seed: u64,
    #[serde(default)]
    pub construction: Construction,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            target_language: "tgt".into(),
            planted_heads: (0..6).map(|h| (3, h + 1)).collect(),
            planted_layer_policy: PlantPolicy::SingleLayer,
            offset_scale: 4.0,
            mode: WorldMode::CleanPaired,
            noise_sigma: 0.0,
            object_signatures: 16,
            bbox_size: 4,
            seed: 0,
            plant_seed: 0,
            construction: Construction::default(),
        }
    }
}

impl WorldConfig {
    /// Default world with every seed derived from one value.
    pub fn seeded(seed: u64) -> Self {
        let mut w = Self::default();
        w.model.seed = seed;
        w.seed = seed;
        w.plant_seed = seed;
        w
    }

    /// [`WorldConfig::seeded`] with perturbed target embeddings.
    pub fn noisy(seed: u64) -> Self {
        let mut w = Self::seeded(seed);
        w.mode = WorldMode::Noisy;
        w.noise_sigma = DEFAULT_NOISE_SIGMA;
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let c = &self.model;
        let bad = |m: String| Err(Error::Input(m));
        if self.target_language == ENGLISH || self.target_language.is_empty() {
            return bad(format!("target language {:?} is not a valid target", self.target_language));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return bad(format!("offset_scale {} must be positive", self.offset_scale));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if c.layers < 1 || c.head_dim < 2 {
            return bad("worlds need head_dim >= 2".into());
        }
        if self.object_signatures < 2 || self.object_signatures >= c.head_dim {
            return bad(format!(
                "object_signatures must be in 2..{} for head_dim {}",
                c.head_dim, c.head_dim
            ));
        }
        if self.bbox_size == 0 || self.bbox_size > c.n_patches {
            return bad(format!("bbox_size must be in 1..={}", c.n_patches));
        }
        let layout = Layout::new(c.d_model, self.object_signatures);
        if layout.random_dims < 2 {
            return bad("d_model too small for the residual layout".into());
        }
        let vocab = Vocab::new(c.vocab_size)?;
        if words::OBJECT_BASE + self.object_signatures > vocab.words_per_language {
            return bad(format!(
                "vocab size {} too small for {} objects",
                c.vocab_size, self.object_signatures
            ));
        }
        if c.max_text_tokens < CAPTION_PROMPT.len() {
            return bad(format!("max_text_tokens must be >= {}", CAPTION_PROMPT.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(l, h) in &self.planted_heads {
            if l >= c.layers || h >= c.heads {
                return bad(format!("planted head ({l}, {h}) outside the grid"));
            }
            if (l, h) == answer_head(c) {
                return bad(format!("({l}, {h}) is reserved for the answer head"));
            }
            if !seen.insert((l, h)) {
                return bad(format!("planted head ({l}, {h}) listed twice"));
            }
        }
        if self.planted_layer_policy == PlantPolicy::SingleLayer {
            let layers: std::collections::BTreeSet<_> =
                self.planted_heads.iter().map(|p| p.0).collect();
            if layers.len() > 1 {
                return bad("single-layer policy needs all planted heads in one layer".into());
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.model.d_model, self.object_signatures)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.model.vocab_size).expect("validated world")
    }
}

/// Head that reads object presence into the readout dimension.
pub fn answer_head(c: &ModelConfig) -> (usize, usize) {
    (c.layers - 1, 0)
}

/// Values recorded while generating the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub attempts: u32,
    pub english_accuracy: f64,
    pub target_accuracy: f64,
    pub mean_positive_readout: f64,
    pub damage: f64,
    pub readout_scale: f64,
}

/// Residual-stream dimensions reserved by the construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub random_dims: usize,
    pub object_start: usize,
    pub objects: usize,
    pub visual_flag: usize,
    pub text_flag: usize,
    pub readout: usize,
}

impl Layout {
    pub fn new(d_model: usize, objects: usize) -> Self {
        let random_dims = d_model.saturating_sub(3 + objects);
        Self {
            random_dims,
            object_start: random_dims,
            objects,
            visual_flag: d_model.saturating_sub(3),
            text_flag: d_model.saturating_sub(2),
            readout: d_model.saturating_sub(1),
        }
    }

    pub fn object_dim(&self, k: usize) -> usize {
        self.object_start + k
    }

    /// Dimensions only the hand-built circuit may write.
    pub fn reserved(&self) -> std::ops::Range<usize> {
        self.object_start..self.readout + 1
    }
}

/// Token-id bookkeeping for one English/target pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub words_per_language: usize,
}

impl Vocab {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < 4 {
            return Err(Error::Input(format!("vocab size {vocab_size} < 4")));
        }
        Ok(Self {
            words_per_language: (vocab_size - 2) / 2,
        })
    }

    pub fn yes(&self) -> usize {
        2 * self.words_per_language
    }

    pub fn no(&self) -> usize {
        2 * self.words_per_language + 1
    }

    pub fn is_english(&self, token: usize) -> bool {
        token < self.words_per_language
    }

    pub fn is_target(&self, token: usize) -> bool {
        (self.words_per_language..2 * self.words_per_language).contains(&token)
    }

    /// English tokens into the target range; bijective on `0..W`.
    pub fn translate(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                if self.is_english(t) {
                    Ok(t + self.words_per_language)
                } else {
                    Err(Error::Input(format!("token {t} is not an English word")))
                }
            })
            .collect()
    }

    pub fn inverse_translate(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                if self.is_target(t) {
                    Ok(t - self.words_per_language)
                } else {
                    Err(Error::Input(format!("token {t} is not a target-language word")))
                }
            })
            .collect()
    }

    /// "in the image is there a <object>", object last.
    pub fn presence_query(&self, object: usize) -> Vec<usize> {
        vec![
            words::IN,
            words::THE,
            words::IMAGE,
            words::IS,
            words::THERE,
            words::A,
            words::OBJECT_BASE + object,
        ]
    }

    /// A prompt in `language`: English as is, anything else translated.
    pub fn localize(&self, english: &[usize], language: &str) -> Result<Vec<usize>> {
        if language == ENGLISH {
            Ok(english.to_vec())
        } else {
            self.translate(english)
        }
    }
}
