mod common;

use std::collections::BTreeMap;

use headshift::intervene::{
    evaluate, evaluate_samples, intervened_forward, k_grid, predict, sweep, InterventionPlan, SweepConfig,
};
use headshift::model::{forward, InterventionHook, ModelBundle, ShiftRows};
use headshift::probes::{train_all, HeadSet, ProbeConfig, SelectedHead};
use headshift::shift::{estimate_specific, from_vectors, ShiftMode, ShiftSet};
use headshift::synth::{planted_offset, Label, ENGLISH};
use headshift::Error;
use proptest::prelude::*;

use common::{english, input, max_abs, small, taps};

fn planted_set() -> HeadSet {
    let f = small();
    HeadSet {
        k: f.world.planted_heads.len(),
        heads: f
            .world
            .planted_heads
            .iter()
            .map(|&(layer, head)| SelectedHead { layer, head, test_acc: 1.0 })
            .collect(),
    }
}

/// Shifts equal to exactly `-b` on the planted heads.
fn exact_shifts() -> ShiftSet {
    let f = small();
    let c = f.model.config();
    let tgt = &f.world.target_language;
    let vectors: BTreeMap<_, _> = f
        .world
        .planted_heads
        .iter()
        .map(|&(l, h)| ((l, h), planted_offset(&f.model, l, h, tgt).iter().map(|v| -v).collect()))
        .collect();
    from_vectors(ShiftMode::Specific, vec![tgt.clone()], c.layers, c.heads, c.head_dim, vectors).unwrap()
}

fn estimated_plan(alpha: f64) -> InterventionPlan {
    let f = small();
    let shifts = estimate_specific(&taps().standard, &f.world.target_language).unwrap();
    InterventionPlan::new(&planted_set(), &shifts, alpha, ShiftRows::All).unwrap()
}

#[test]
fn exact_cancellation_restores_the_english_pass() {
    let f = small();
    let plan = InterventionPlan::new(&planted_set(), &exact_shifts(), 1.0, ShiftRows::All).unwrap();
    for s in f.data.samples.iter().take(6) {
        let tgt = input(&f.world, s, &f.world.target_language);
        let fixed = intervened_forward(&f.model, &tgt, &plan).unwrap();
        let en = forward(&f.model, &english(&f.world, s), None).unwrap();
        assert_eq!(fixed.to_le_bytes(), en.to_le_bytes());
    }
}

#[test]
fn overshoot_matches_a_world_planted_with_the_opposite_offset() {
    let f = small();
    let (config, weights, mut ann) = f.model.clone().into_parts();
    for p in &mut ann.planted {
        p.offset.iter_mut().for_each(|v| *v = -*v);
    }
    let flipped = ModelBundle::new(config, weights, ann).unwrap();
    let exact = InterventionPlan::new(&planted_set(), &exact_shifts(), 2.0, ShiftRows::All).unwrap();
    let estimated = estimated_plan(2.0);
    for s in f.data.samples.iter().take(6) {
        let tgt = input(&f.world, s, &f.world.target_language);
        let want = forward(&flipped, &tgt, None).unwrap();
        let got = intervened_forward(&f.model, &tgt, &exact).unwrap();
        assert_eq!(got.to_le_bytes(), want.to_le_bytes());
        let approx = intervened_forward(&f.model, &tgt, &estimated).unwrap();
        assert!(max_abs(&approx.logits, &want.logits) < 1e-3);
    }
}

#[test]
fn estimated_shift_recovers_english_accuracy() {
    let f = small();
    let langs = [ENGLISH, f.world.target_language.as_str()];
    let base = evaluate(&f.model, &f.data, &langs, None).unwrap();
    let fixed = evaluate(&f.model, &f.data, &langs, Some(&estimated_plan(1.0))).unwrap();
    let en = base.accuracy(ENGLISH).unwrap();
    assert!(base.accuracy(langs[1]).unwrap() < en);
    assert_eq!(fixed.accuracy(langs[1]).unwrap(), en);
    assert_eq!(fixed.accuracy(ENGLISH), base.accuracy(ENGLISH));
}

#[test]
fn zero_alpha_plan_equals_no_plan() {
    let f = small();
    let langs = [ENGLISH, f.world.target_language.as_str()];
    let base = evaluate(&f.model, &f.data, &langs, None).unwrap();
    let zero = evaluate(&f.model, &f.data, &langs, Some(&estimated_plan(0.0))).unwrap();
    assert_eq!(base.rows, zero.rows);
    assert_eq!(base.summary, zero.summary);
    assert!(base.plan_hash.is_none() && zero.plan_hash.is_some());
}

#[test]
fn plan_construction_errors() {
    let f = small();
    let c = f.model.config();
    let empty = from_vectors(
        ShiftMode::Specific,
        vec![f.world.target_language.clone()],
        c.layers,
        c.heads,
        c.head_dim,
        BTreeMap::new(),
    )
    .unwrap();
    assert!(matches!(
        InterventionPlan::new(&planted_set(), &empty, 1.0, ShiftRows::All),
        Err(Error::Plan(_))
    ));
    assert!(matches!(
        InterventionPlan::new(&planted_set(), &exact_shifts(), f64::INFINITY, ShiftRows::All),
        Err(Error::Plan(_))
    ));
    let mut broken = estimated_plan(1.0);
    broken.shifts.pop();
    assert!(matches!(broken.validate(&f.model), Err(Error::Plan(_))));
    let other = estimated_plan(1.0).retarget_mono("zz").unwrap();
    assert_eq!(other.mode, ShiftMode::Mono);
    let langs = [f.world.target_language.as_str()];
    assert!(matches!(evaluate(&f.model, &f.data, &langs, Some(&other)), Err(Error::Plan(_))));
    assert!(matches!(estimated_plan(1.0).retarget_mono(ENGLISH), Err(Error::Plan(_))));
}

#[test]
fn report_summary_agrees_with_rows() {
    let f = small();
    let langs = [ENGLISH, f.world.target_language.as_str()];
    let subset: Vec<_> = f.data.samples.iter().rev().step_by(3).collect();
    let r = evaluate_samples(&f.model, &f.data, &subset, &langs, None).unwrap();
    for lang in langs {
        let rows: Vec<_> = r.rows.iter().filter(|x| x.language == lang).collect();
        assert_eq!(rows.len(), subset.len());
        assert!(rows.windows(2).all(|w| w[0].id < w[1].id));
        let correct = rows.iter().filter(|x| x.correct && x.label == x.predicted).count();
        assert_eq!(r.summary[lang].correct, correct);
        assert_eq!(r.summary[lang].accuracy, correct as f64 / rows.len() as f64);
    }
    let csv = r.to_csv();
    assert_eq!(csv.lines().next(), Some("id,language,label,prediction,correct"));
    assert_eq!(csv.lines().count(), 1 + r.rows.len());
}

#[test]
fn sweep_finds_the_cancelling_alpha() {
    let f = small();
    let t = taps();
    let bank = train_all(&[&t.masked], &ProbeConfig::default()).unwrap();
    let cfg = SweepConfig {
        alphas: vec![2.0, 0.5, 1.0, 3.0],
        ks: vec![2, 1, 4],
        stage1_k: 2,
        tune_fraction: 0.5,
        split_seed: 0,
        shift_rows: ShiftRows::All,
        full_grid: true,
    };
    let r = sweep(&f.model, &f.data, &t.standard, &bank, &cfg).unwrap();
    assert_eq!(r.alpha_star, 1.0);
    assert_eq!(r.k_star, 2);
    assert_eq!(r.tuning_samples, 20);
    let alphas: Vec<f64> = r.points.iter().filter(|p| p.stage == "alpha").map(|p| p.alpha).collect();
    assert_eq!(alphas, vec![0.5, 1.0, 2.0, 3.0]);
    assert_eq!(r.points.iter().filter(|p| p.stage == "grid").count(), 12);
    assert!(r.to_csv().starts_with("stage,alpha,k,accuracy\n"));

    let single = SweepConfig {
        alphas: vec![1.0],
        ks: vec![2],
        full_grid: false,
        ..cfg.clone()
    };
    let one = sweep(&f.model, &f.data, &t.standard, &bank, &single).unwrap();
    assert_eq!((one.alpha_star, one.k_star, one.points.len()), (1.0, 2, 2));

    let empty = SweepConfig { alphas: vec![], ..cfg };
    assert!(matches!(sweep(&f.model, &f.data, &t.standard, &bank, &empty), Err(Error::Input(_))));
}

#[test]
fn k_grid_stays_inside_the_head_count() {
    for total in 1..300 {
        let (ks, first) = k_grid(total);
        assert!(ks.iter().all(|&k| (1..=total).contains(&k)));
        assert!(ks.windows(2).all(|w| w[0] < w[1]));
        assert!(ks.contains(&first));
    }
}

#[test]
fn hooks_from_plans_carry_every_head() {
    let plan = estimated_plan(1.5);
    let hook: InterventionHook = plan.hook();
    assert_eq!(hook.alpha(), 1.5);
    assert_eq!(hook.heads().collect::<Vec<_>>(), small().world.planted_heads);
    assert_eq!(plan.with_alpha(0.5).alpha, 0.5);
    assert_ne!(plan.content_hash(), plan.with_alpha(0.5).content_hash());
}

proptest! {
    #[test]
    fn prediction_ignores_a_common_offset(yes in -20f32..20.0, no in -20f32..20.0, c in -5f32..5.0) {
        let a = predict(&[yes, no], 0, 1);
        let b = predict(&[(f64::from(yes) + f64::from(c)) as f32, (f64::from(no) + f64::from(c)) as f32], 0, 1);
        prop_assume!(((yes + c) - (no + c)).signum() == (yes - no).signum());
        prop_assert_eq!(a, b);
        prop_assert_eq!(predict(&[yes, yes], 0, 1), Label::Yes);
    }
}
