#![allow(dead_code)]

use std::sync::OnceLock;

use headshift::model::{ModelBundle, ModelConfig, SequenceInput};
use headshift::synth::{gen_dataset, gen_model, Dataset, Sample, WorldConfig, ENGLISH};

/// Four layers of four heads, two planted heads at layer 2. Calibrates
/// in one or two attempts at seed 0.
pub fn small_world() -> WorldConfig {
    let mut w = WorldConfig::seeded(0);
    w.model = ModelConfig::with_grid(4, 4, 32, 32, 256, 0);
    w.planted_heads = vec![(2, 1), (2, 2)];
    w
}

pub struct Fixture {
    pub world: WorldConfig,
    pub model: ModelBundle,
    pub data: Dataset,
}

pub fn small() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let world = small_world();
        let model = gen_model(&world).expect("small world calibrates");
        let data = gen_dataset(&world, 40).unwrap();
        Fixture { world, model, data }
    })
}

pub fn input(world: &WorldConfig, sample: &Sample, language: &str) -> SequenceInput {
    SequenceInput::new(sample.patches(world), sample.query(language).to_vec(), language)
}

pub fn english(world: &WorldConfig, sample: &Sample) -> SequenceInput {
    input(world, sample, ENGLISH)
}

pub fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max)
}

pub fn taps() -> &'static headshift::probes::TapSet {
    static CELL: OnceLock<headshift::probes::TapSet> = OnceLock::new();
    CELL.get_or_init(|| {
        let f = small();
        let langs = [ENGLISH, f.world.target_language.as_str()];
        headshift::probes::extract_features(&f.model, &f.data, &langs, None).unwrap()
    })
}
