use rayon::prelude::*;

use super::dataset::{gen_dataset, Label, Sample};
use super::{answer_head, Calibration, WorldConfig, WorldMode, ENGLISH};
use crate::error::{Error, Result};
use crate::model::{forward, Annotations, LayerWeights, ModelBundle, PlantedHead, SequenceInput, Weights};
use crate::numerics::{derive_seed, Matrix, RngStream};

const MAX_ATTEMPTS: u32 = 20;
const MIN_ENGLISH_ACCURACY: f64 = 0.95;
const MIN_NOISY_GAP: f64 = 0.15;
const MAX_DAMAGE_RAISES: u32 = 6;
const CALIBRATION_STREAM: u64 = 0xCA11;
const PLANT_STREAM: u64 = 0x9147;
const NOISE_STREAM: u64 = 0x7015E;

/// Offset planted at `(layer, head)` for `language`; zeros when the head
/// is not planted or the language is not the model's target.
pub fn planted_offset(model: &ModelBundle, layer: usize, head: usize, language: &str) -> Vec<f32> {
    model
        .plant(layer, head, language)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; model.config().head_dim])
}

/// Build the world's model, retrying base weights until the English
/// presence task is solved on the calibration samples.
pub fn gen_model(world: &WorldConfig) -> Result<ModelBundle> {
    world.validate()?;
    let mut calib_world = world.clone();
    calib_world.seed = derive_seed(world.model.seed, CALIBRATION_STREAM);
    let samples = gen_dataset(&calib_world, even(world.construction.calibration_samples))?.samples;
    let patches: Vec<Matrix> = samples.iter().map(|s| s.patches(world)).collect();
    let offsets = plant_offsets(world);

    let mut best = 0.0f64;
    for attempt in 0..MAX_ATTEMPTS {
        let sub_seed = derive_seed(world.model.seed, u64::from(attempt));
        let base = base_weights(world, sub_seed);
        let probe_model = ModelBundle::new(world.model.clone(), base.clone(), annotations(world, Vec::new(), None))?;
        let english = run(&probe_model, &samples, &patches, ENGLISH)?;
        let acc = accuracy(&english, &samples);
        best = best.max(acc);
        if acc < MIN_ENGLISH_ACCURACY {
            continue;
        }
        let positives: Vec<f64> = english
            .iter()
            .zip(&samples)
            .filter(|(_, s)| s.label == Label::Yes)
            .map(|(r, _)| r.readout)
            .collect();
        let mean_positive = positives.iter().sum::<f64>() / positives.len() as f64;

        let mut damage = world.construction.damage;
        for raise in 0..=MAX_DAMAGE_RAISES {
            let readout_scale = readout_scale(world, mean_positive, damage);
            let mut weights = base.clone();
            install_plants(world, &mut weights, readout_scale as f32);
            let planted = world
                .planted_heads
                .iter()
                .zip(&offsets)
                .map(|(&(layer, head), b)| PlantedHead {
                    layer,
                    head,
                    offset: b.clone(),
                })
                .collect();
            let model = ModelBundle::new(world.model.clone(), weights.clone(), annotations(world, planted, None))?;
            let target = run(&model, &samples, &patches, &world.target_language)?;
            let target_acc = accuracy(&target, &samples);
            let gap_ok = world.mode != WorldMode::Noisy
                || world.planted_heads.is_empty()
                || acc - target_acc >= MIN_NOISY_GAP;
            if gap_ok || raise == MAX_DAMAGE_RAISES {
                let calibration = super::Calibration {
                    attempts: attempt + 1,
                    english_accuracy: acc,
                    target_accuracy: target_acc,
                    mean_positive_readout: mean_positive,
                    damage,
                    readout_scale,
                };
                let (config, weights, mut ann) = model.into_parts();
                ann.calibration = Some(calibration);
                return ModelBundle::new(config, weights, ann);
            }
            damage *= 1.5;
        }
    }
    Err(Error::Generation {
        attempts: MAX_ATTEMPTS,
        best_accuracy: best,
    })
}

fn even(n: usize) -> usize {
    (n.max(10) + 1) / 2 * 2
}

fn annotations(world: &WorldConfig, planted: Vec<PlantedHead>, calibration: Option<Calibration>) -> Annotations {
    Annotations {
        english: ENGLISH.into(),
        target: Some(world.target_language.clone()),
        planted,
        world: Some(world.clone()),
        calibration,
    }
}

/// Readout weight of each planted head: the target language loses
/// `damage × mean positive readout` on the readout dimension.
fn readout_scale(world: &WorldConfig, mean_positive: f64, damage: f64) -> f64 {
    let n = world.planted_heads.len();
    if n == 0 {
        return 0.0;
    }
    let cos = world.construction.tilt_degrees.to_radians().cos();
    damage * mean_positive / (n as f64 * world.offset_scale * cos)
}

struct Outcome {
    correct: bool,
    readout: f64,
}

fn run(model: &ModelBundle, samples: &[Sample], patches: &[Matrix], language: &str) -> Result<Vec<Outcome>> {
    let world = model.annotations().world.as_ref().expect("generated models carry their world");
    let vocab = world.vocab();
    let readout = world.layout().readout;
    samples
        .par_iter()
        .zip(patches)
        .map(|(s, p)| {
            let input = SequenceInput::new(p.clone(), s.query(language).to_vec(), language);
            let trace = forward(model, &input, None)?;
            let yes = trace.logits[vocab.yes()] >= trace.logits[vocab.no()];
            let last = trace.hidden.last().expect("at least one layer");
            Ok(Outcome {
                correct: yes == (s.label == Label::Yes),
                readout: f64::from(last.get(last.rows() - 1, readout)),
            })
        })
        .collect()
}

fn accuracy(outcomes: &[Outcome], samples: &[Sample]) -> f64 {
    outcomes.iter().filter(|o| o.correct).count() as f64 / samples.len() as f64
}

/// Planted offsets `b = s·normalize(-cos θ·e_{d-1} + sin θ·z)` with `z`
/// a random unit vector in the first `d - 1` head dimensions.
fn plant_offsets(world: &WorldConfig) -> Vec<Vec<f32>> {
    let d = world.model.head_dim;
    let theta = world.construction.tilt_degrees.to_radians();
    let mut rng = RngStream::new(derive_seed(world.plant_seed, PLANT_STREAM));
    world
        .planted_heads
        .iter()
        .map(|_| {
            let mut z: Vec<f64> = (0..d - 1).map(|_| rng.next_gaussian()).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            z.iter_mut().for_each(|v| *v /= norm);
            let mut b: Vec<f64> = z.iter().map(|v| theta.sin() * v).collect();
            b.push(-theta.cos());
            let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            b.iter().map(|v| (world.offset_scale * v / norm) as f32).collect()
        })
        .collect()
}

fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| (rng.next_gaussian() * scale) as f32).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// Random weights plus the hand-built presence circuit, without plants.
fn base_weights(world: &WorldConfig, seed: u64) -> Weights {
    let c = &world.model;
    let k = &world.construction;
    let layout = world.layout();
    let vocab = world.vocab();
    let (dm, d) = (c.d_model, c.head_dim);
    let scale = 1.0 / (dm as f64).sqrt();
    let mut rng = RngStream::new(seed);

    let mut embed = Matrix::zeros(c.vocab_size, dm);
    let w = vocab.words_per_language;
    for id in 0..w {
        let row = embed.row_mut(id);
        for v in &mut row[..layout.random_dims] {
            *v = rng.next_gaussian() as f32;
        }
        row[layout.text_flag] = 1.0;
        if let Some(obj) = id.checked_sub(super::words::OBJECT_BASE).filter(|&o| o < layout.objects) {
            row[layout.object_dim(obj)] = k.token_signature as f32;
        }
    }
    let shared: Vec<f32> = (0..layout.random_dims).map(|_| rng.next_gaussian() as f32).collect();
    for (id, sign) in [(vocab.yes(), 1.0), (vocab.no(), -1.0)] {
        let row = embed.row_mut(id);
        row[..layout.random_dims].copy_from_slice(&shared);
        row[layout.text_flag] = 1.0;
        row[layout.readout] = (sign * k.answer_gain) as f32;
    }

    let mut layers = Vec::with_capacity(c.layers);
    for _ in 0..c.layers {
        let w_qkv = gaussian_matrix(&mut rng, dm, 3 * dm, scale);
        let mut w_o = gaussian_matrix(&mut rng, dm, dm, scale);
        let w_in = gaussian_matrix(&mut rng, dm, c.d_mlp, scale);
        let mut w_out = gaussian_matrix(&mut rng, c.d_mlp, dm, scale);
        for m in [&mut w_o, &mut w_out] {
            for r in 0..m.rows() {
                m.row_mut(r)[layout.reserved()].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        layers.push(LayerWeights {
            attn_norm: vec![1.0; dm],
            w_qkv,
            w_o,
            mlp_norm: vec![1.0; dm],
            w_in,
            w_out,
        });
    }

    // Target words start as exact copies of their English counterparts.
    let mut noise = RngStream::new(derive_seed(world.plant_seed, NOISE_STREAM));
    let sigma = if world.mode == WorldMode::Noisy { world.noise_sigma } else { 0.0 };
    for id in 0..w {
        for col in 0..dm {
            let base = embed.get(id, col);
            let v = if sigma > 0.0 {
                (f64::from(base) + sigma * noise.next_gaussian()) as f32
            } else {
                base
            };
            embed.set(id + w, col, v);
        }
    }

    let (al, ah) = answer_head(c);
    let lw = &mut layers[al];
    for col in [ah * d, dm + ah * d, 2 * dm + ah * d] {
        for r in 0..dm {
            for j in col..col + d {
                lw.w_qkv.set(r, j, 0.0);
            }
        }
    }
    for obj in 0..layout.objects {
        lw.w_qkv.set(layout.object_dim(obj), ah * d + obj, k.query_gain as f32);
        lw.w_qkv.set(layout.object_dim(obj), dm + ah * d + obj, 1.0);
    }
    lw.w_qkv.set(layout.visual_flag, 2 * dm + ah * d + d - 1, 1.0);
    lw.w_qkv.set(layout.text_flag, 2 * dm + ah * d + d - 1, -1.0);
    for r in ah * d..(ah + 1) * d {
        lw.w_o.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    }
    lw.w_o.set(ah * d + d - 1, layout.readout, k.readout_weight as f32);

    // Keeps logits O(10) instead of O(d_model); argmax is unaffected.
    let final_norm = vec![scale as f32; dm];
    let mut weights = Weights {
        embed,
        layers,
        final_norm,
    };
    // Planted heads never carry signal on their last head dimension.
    for &(l, h) in &world.planted_heads {
        let col = 2 * dm + h * d + d - 1;
        for r in 0..dm {
            weights.layers[l].w_qkv.set(r, col, 0.0);
        }
        weights.layers[l].w_o.row_mut(h * d + d - 1).iter_mut().for_each(|v| *v = 0.0);
    }
    weights
}

/// Route each planted head's last output dimension into the readout.
fn install_plants(world: &WorldConfig, weights: &mut Weights, readout_scale: f32) {
    let d = world.model.head_dim;
    let readout = world.layout().readout;
    for &(l, h) in &world.planted_heads {
        weights.layers[l].w_o.set(h * d + d - 1, readout, readout_scale);
    }
}
