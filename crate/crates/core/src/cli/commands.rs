use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use super::Format;
use crate::analysis::{self, svg, ProjectionReport};
use crate::artifact::{self, hash_path, ArtifactHeader, ArtifactKind, Provenance, RunManifest};
use crate::error::{Error, Result};
use crate::intervene::{self, InterventionPlan, SweepConfig, SweepResult};
use crate::model::{forward, ModelBundle, SequenceInput, ShiftRows};
use crate::probes::{self, HeadSet, Loss, ProbeBank, ProbeConfig, TapSet};
use crate::shift::{self, ShiftMode};
use crate::synth::{self, Dataset, Sample, WorldConfig, WorldMode, DEFAULT_NOISE_SIGMA, ENGLISH};

/// Accumulates a run manifest; `finish` hashes the outputs and writes
/// one manifest next to each.
struct Run {
    manifest: RunManifest,
}

impl Run {
    fn new<C: Serialize>(command: &str, config: &C, seed: Option<u64>) -> Self {
        let config = serde_json::to_value(config).expect("argument structs serialize");
        Self {
            manifest: RunManifest::new(command, config, seed),
        }
    }

    fn input(&mut self, role: &str, hash: &str) {
        self.manifest.inputs.insert(role.to_string(), hash.to_string());
    }

    fn finish(mut self, outputs: &[&Path]) -> Result<()> {
        for out in outputs {
            let name = out
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            self.manifest.outputs.insert(name, hash_path(out)?);
        }
        for out in outputs {
            self.manifest.write(out)?;
        }
        Ok(())
    }
}

fn load_model(path: &Path) -> Result<(ModelBundle, String)> {
    let model = ModelBundle::load(path)?;
    Ok((model, hash_path(path)?))
}

fn load_data(path: &Path, model_hash: Option<&str>) -> Result<(Dataset, String)> {
    let data = synth::load_dataset(path)?;
    if let (Some(want), Some(have)) = (model_hash, data.header.model_hash.as_deref()) {
        if want != have {
            return Err(Error::Provenance(format!(
                "{} was generated for model {have}, got model {want}",
                path.display()
            )));
        }
    }
    Ok((data, hash_path(path)?))
}

/// Fails when `header` names a different artifact for `role`.
fn expect(header: &ArtifactHeader, path: &Path, role: &str, hash: &str) -> Result<()> {
    match header.provenance.get(role) {
        Some(h) if h != hash => Err(Error::Provenance(format!(
            "{} was derived from a different {role} ({h}, given {hash})",
            path.display()
        ))),
        _ => Ok(()),
    }
}

/// The model hash shared by every header, if they agree.
fn shared_model<'a>(headers: impl IntoIterator<Item = &'a ArtifactHeader>) -> Option<String> {
    let mut seen: Option<&String> = None;
    for h in headers {
        let m = h.provenance.get("model")?;
        if seen.is_some_and(|s| s != m) {
            return None;
        }
        seen = Some(m);
    }
    seen.cloned()
}

fn languages_for(requested: &Option<Vec<String>>, world: &WorldConfig) -> Vec<String> {
    requested
        .clone()
        .unwrap_or_else(|| vec![ENGLISH.to_string(), world.target_language.clone()])
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn load_plan(path: &Path) -> Result<(ArtifactHeader, InterventionPlan, String)> {
    let (h, p) = artifact::load_json(path, ArtifactKind::Plan)?;
    Ok((h, p, hash_path(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    artifact::write_bytes(path, text.as_bytes())
}

// gen-model ------------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenModelArgs {
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = WorldMode::CleanPaired)]
    pub mode: WorldMode,
    /// Target-embedding noise (noisy mode only; default 0.5).
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long, default_value = "tgt")]
    pub target_language: String,
    /// Defaults to `--seed`.
    #[arg(long)]
    pub plant_seed: Option<u64>,
    #[arg(long)]
    pub offset_scale: Option<f64>,
    /// Planted heads as `layer:head` pairs, or `none`.
    #[arg(long, value_delimiter = ',')]
    pub planted: Vec<String>,
    /// Full world configuration as JSON; overrides every other option.
    #[arg(long)]
    #[serde(skip)]
    pub world: Option<PathBuf>,
}

impl GenModelArgs {
    pub fn world_config(&self) -> Result<WorldConfig> {
        if let Some(p) = &self.world {
            return artifact::read_json(p);
        }
        let mut w = WorldConfig::seeded(self.seed);
        w.mode = self.mode;
        if self.mode == WorldMode::Noisy {
            w.noise_sigma = self.noise_sigma.unwrap_or(DEFAULT_NOISE_SIGMA);
        }
        w.target_language = self.target_language.clone();
        if let Some(s) = self.plant_seed {
            w.plant_seed = s;
        }
        if let Some(s) = self.offset_scale {
            w.offset_scale = s;
        }
        if !self.planted.is_empty() {
            w.planted_heads = parse_planted(&self.planted)?;
        }
        Ok(w)
    }
}

fn parse_planted(items: &[String]) -> Result<Vec<(usize, usize)>> {
    if items.len() == 1 && items[0] == "none" {
        return Ok(Vec::new());
    }
    items
        .iter()
        .map(|s| {
            let (l, h) = s
                .split_once(':')
                .ok_or_else(|| Error::Usage(format!("planted head {s:?} is not layer:head")))?;
            let num = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Usage(format!("planted head {s:?} is not layer:head")))
            };
            Ok((num(l)?, num(h)?))
        })
        .collect()
}

pub fn gen_model(a: &GenModelArgs) -> Result<()> {
    let world = a.world_config()?;
    let model = synth::gen_model(&world)?;
    model.save(&a.out)?;
    let run = Run::new(
        "gen-model",
        &serde_json::json!({ "args": a, "world": world }),
        Some(world.model.seed),
    );
    run.finish(&[&a.out])
}

// gen-data -------------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long = "b", default_value_t = 1000)]
    pub b: usize,
    /// Dataset seed (defaults to the world's).
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (model, model_hash) = load_model(&a.model)?;
    let mut world = model
        .annotations()
        .world
        .clone()
        .ok_or_else(|| Error::Input("model carries no world description".into()))?;
    if let Some(s) = a.seed {
        world.seed = s;
    }
    let mut data = synth::gen_dataset(&world, a.b)?;
    data.header.model_hash = Some(model_hash.clone());
    synth::save_dataset(&a.out, &data)?;
    let mut run = Run::new("gen-data", a, Some(world.seed));
    run.input("model", &model_hash);
    run.finish(&[&a.out])
}

// record ---------------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct RecordArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Comma-separated; defaults to English plus the world's target.
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    /// Apply this plan to non-English runs.
    #[arg(long)]
    #[serde(skip)]
    pub plan: Option<PathBuf>,
}

pub fn record(a: &RecordArgs) -> Result<()> {
    let (model, model_hash) = load_model(&a.model)?;
    let (data, data_hash) = load_data(&a.data, Some(&model_hash))?;
    let mut prov = Provenance::new();
    prov.insert("model".into(), model_hash.clone());
    prov.insert("dataset".into(), data_hash.clone());
    let mut run = Run::new("record", a, None);
    run.input("model", &model_hash);
    run.input("dataset", &data_hash);
    let plan = match &a.plan {
        Some(p) => {
            let (h, plan, ph) = load_plan(p)?;
            expect(&h, p, "model", &model_hash)?;
            prov.insert("plan".into(), ph.clone());
            run.input("plan", &ph);
            Some(plan)
        }
        None => None,
    };
    let hook = plan.as_ref().map(|p| {
        p.validate(&model)?;
        Ok::<_, Error>(p.hook())
    });
    let hook = hook.transpose()?;
    let langs = languages_for(&a.languages, data.world());
    let taps = probes::extract_features(&model, &data, &as_strs(&langs), hook.as_ref())?;
    probes::save_taps(&a.out, &taps, prov)?;
    run.finish(&[&a.out])
}

fn load_taps(paths: &[PathBuf]) -> Result<Vec<(ArtifactHeader, TapSet, String)>> {
    paths
        .iter()
        .map(|p| {
            let (h, t) = probes::load_taps(p)?;
            Ok((h, t, hash_path(p)?))
        })
        .collect()
}

/// `taps` for a single input, `taps.0`, `taps.1`, ... otherwise.
fn tap_roles(loaded: &[(ArtifactHeader, TapSet, String)], prov: &mut Provenance, run: &mut Run) {
    for (i, (_, _, hash)) in loaded.iter().enumerate() {
        let role = if loaded.len() == 1 {
            "taps".to_string()
        } else {
            format!("taps.{i}")
        };
        prov.insert(role.clone(), hash.clone());
        run.input(&role, hash);
    }
    if let Some(m) = shared_model(loaded.iter().map(|t| &t.0)) {
        prov.insert("model".into(), m);
    }
}

// probe ----------------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    /// One or more tap files (pooled).
    #[arg(long, required = true, num_args = 1..)]
    #[serde(skip)]
    pub taps: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Training fraction of the per-sample split.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Loss::Logistic)]
    pub loss: Loss,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
}

pub fn probe(a: &ProbeArgs) -> Result<()> {
    if !(a.split > 0.0 && a.split < 1.0) {
        return Err(Error::Usage(format!("--split {} must lie in (0, 1)", a.split)));
    }
    let loaded = load_taps(&a.taps)?;
    let cfg = ProbeConfig {
        lambda: a.lambda,
        learning_rate: a.learning_rate,
        iterations: a.iterations,
        loss: a.loss,
        train_fraction: a.split,
        split_seed: a.seed,
    };
    let masked: Vec<_> = loaded.iter().map(|t| &t.1.masked).collect();
    let bank = probes::train_all(&masked, &cfg)?;
    let mut prov = Provenance::new();
    let mut run = Run::new("probe", a, Some(a.seed));
    tap_roles(&loaded, &mut prov, &mut run);
    artifact::save_json(&a.out, ArtifactKind::Probes, prov, &bank)?;
    run.finish(&[&a.out])
}

fn load_probes(path: &Path) -> Result<(ArtifactHeader, ProbeBank, String)> {
    let (h, b) = artifact::load_json(path, ArtifactKind::Probes)?;
    Ok((h, b, hash_path(path)?))
}

// select-heads ---------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectHeadsArgs {
    #[arg(long)]
    #[serde(skip)]
    pub probes: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

pub fn select_heads(a: &SelectHeadsArgs) -> Result<()> {
    let (h, bank, hash) = load_probes(&a.probes)?;
    let set = probes::select_heads(&bank, a.k)?;
    let mut prov = Provenance::new();
    prov.insert("probes".into(), hash.clone());
    if let Some(m) = h.provenance.get("model") {
        prov.insert("model".into(), m.clone());
    }
    artifact::save_json(&a.out, ArtifactKind::Headset, prov, &set)?;
    let mut run = Run::new("select-heads", a, None);
    run.input("probes", &hash);
    run.finish(&[&a.out])
}

// estimate-shift -------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateShiftArgs {
    #[arg(long, required = true, num_args = 1..)]
    #[serde(skip)]
    pub taps: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ShiftMode::Specific)]
    pub mode: ShiftMode,
    /// Language paired with English (specific/mono); defaults to the
    /// table's only non-English language.
    #[arg(long)]
    pub target: Option<String>,
    /// Mono mode: language the shifts will be applied to.
    #[arg(long)]
    pub retarget: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

fn only_target(t: &TapSet) -> Result<String> {
    let others: Vec<&String> = t.layout().languages.iter().filter(|l| *l != ENGLISH).collect();
    match others.as_slice() {
        [one] => Ok((*one).clone()),
        _ => Err(Error::Usage("tap table has several targets; pass --target".into())),
    }
}

pub fn estimate_shift(a: &EstimateShiftArgs) -> Result<()> {
    let loaded = load_taps(&a.taps)?;
    let single = || -> Result<&TapSet> {
        match loaded.as_slice() {
            [one] => Ok(&one.1),
            _ => Err(Error::Usage(format!("{:?} mode takes exactly one tap file", a.mode))),
        }
    };
    let shifts = match a.mode {
        ShiftMode::Specific => {
            let t = single()?;
            let target = a.target.clone().map_or_else(|| only_target(t), Ok)?;
            shift::estimate_specific(&t.standard, &target)?
        }
        ShiftMode::Multi => {
            let standard: Vec<_> = loaded.iter().map(|t| &t.1.standard).collect();
            shift::estimate_multi(&standard)?
        }
        ShiftMode::Mono => {
            let t = single()?;
            let target = a.target.clone().map_or_else(|| only_target(t), Ok)?;
            let retarget = a
                .retarget
                .as_deref()
                .ok_or_else(|| Error::Usage("mono mode needs --retarget".into()))?;
            shift::retarget_mono(&shift::estimate_specific(&t.standard, &target)?, retarget)?
        }
    };
    let mut prov = Provenance::new();
    let mut run = Run::new("estimate-shift", a, None);
    tap_roles(&loaded, &mut prov, &mut run);
    if shifts.mode() == ShiftMode::Mono {
        if let Some(m) = prov.remove("model") {
            prov.insert("source_model".into(), m);
        }
    }
    shift::save_shifts(&a.out, &shifts, prov)?;
    run.finish(&[&a.out])
}

// intervene ------------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct InterventionArgs {
    #[arg(long)]
    #[serde(skip)]
    pub headset: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub shifts: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = ShiftRows::All)]
    pub shift_rows: ShiftRows,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

pub fn intervene(a: &InterventionArgs) -> Result<()> {
    let (hh, heads): (_, HeadSet) = artifact::load_json(&a.headset, ArtifactKind::Headset)?;
    let (sh, shifts) = shift::load_shifts(&a.shifts)?;
    let plan = InterventionPlan::new(&heads, &shifts, a.alpha, a.shift_rows)?;
    let (head_hash, shift_hash) = (hash_path(&a.headset)?, hash_path(&a.shifts)?);
    let mut prov = Provenance::new();
    prov.insert("headset".into(), head_hash.clone());
    prov.insert("shifts".into(), shift_hash.clone());
    if shifts.mode() != ShiftMode::Mono {
        match (hh.provenance.get("model"), sh.provenance.get("model")) {
            (Some(x), Some(y)) if x != y => {
                return Err(Error::Provenance("head set and shifts come from different models".into()));
            }
            (Some(x), Some(_)) => {
                prov.insert("model".into(), x.clone());
            }
            _ => {}
        }
    }
    artifact::save_json(&a.out, ArtifactKind::Plan, prov, &plan)?;
    let mut run = Run::new("intervene", a, None);
    run.input("headset", &head_hash);
    run.input("shifts", &shift_hash);
    run.finish(&[&a.out])
}

// evaluate -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    /// The sweep's tuning split.
    Tuning,
    /// Everything outside the tuning split.
    Holdout,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    pub subset: Subset,
    #[arg(long, default_value_t = 0.2)]
    pub tune_fraction: f64,
    /// Seed of the tuning split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

fn subset<'a>(data: &'a Dataset, which: Subset, seed: u64, fraction: f64) -> Vec<&'a Sample> {
    if which == Subset::All {
        return data.samples.iter().collect();
    }
    let ids: Vec<u64> = data.samples.iter().map(|s| s.id).collect();
    let tune = intervene::tuning_split(&ids, seed, fraction);
    data.samples
        .iter()
        .zip(tune)
        .filter(|(_, t)| *t == (which == Subset::Tuning))
        .map(|(s, _)| s)
        .collect()
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (model, model_hash) = load_model(&a.model)?;
    let (data, data_hash) = load_data(&a.data, Some(&model_hash))?;
    let mut run = Run::new("evaluate", a, Some(a.seed));
    run.input("model", &model_hash);
    run.input("dataset", &data_hash);
    let mut prov = Provenance::new();
    prov.insert("model".into(), model_hash.clone());
    prov.insert("dataset".into(), data_hash.clone());
    let plan = match &a.plan {
        Some(p) => {
            let (h, plan, ph) = load_plan(p)?;
            expect(&h, p, "model", &model_hash)?;
            run.input("plan", &ph);
            prov.insert("plan".into(), ph);
            Some(plan)
        }
        None => None,
    };
    let langs = languages_for(&a.languages, data.world());
    let samples = subset(&data, a.subset, a.seed, a.tune_fraction);
    let report = intervene::evaluate_samples(&model, &data, &samples, &as_strs(&langs), plan.as_ref())?;
    match a.format {
        Format::Json => artifact::save_json(&a.out, ArtifactKind::Report, prov, &report)?,
        Format::Csv => write_text(&a.out, &report.to_csv())?,
    }
    run.finish(&[&a.out])
}

// sweep ----------------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub taps: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub probes: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Defaults to 0.5, 1.0, ..., 4.5.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Defaults to {50..300} scaled by heads / 1024.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// K held fixed in the first stage.
    #[arg(long)]
    pub stage1_k: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub tune_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ShiftRows::All)]
    pub shift_rows: ShiftRows,
    /// Also evaluate every (alpha, K) pair.
    #[arg(long)]
    pub full_grid: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

pub fn sweep(a: &SweepArgs) -> Result<SweepResult> {
    let (model, model_hash) = load_model(&a.model)?;
    let (data, data_hash) = load_data(&a.data, Some(&model_hash))?;
    let (th, taps) = probes::load_taps(&a.taps)?;
    let taps_hash = hash_path(&a.taps)?;
    expect(&th, &a.taps, "model", &model_hash)?;
    expect(&th, &a.taps, "dataset", &data_hash)?;
    let (ph, bank, probes_hash) = load_probes(&a.probes)?;
    expect(&ph, &a.probes, "model", &model_hash)?;

    let mut cfg = SweepConfig::for_heads(model.config().head_count());
    if let Some(al) = &a.alphas {
        cfg.alphas = al.clone();
    }
    if let Some(ks) = &a.ks {
        cfg.ks = ks.clone();
        if a.stage1_k.is_none() {
            let anchor = 100.0 * model.config().head_count() as f64 / 1024.0;
            cfg.stage1_k = *ks
                .iter()
                .min_by(|x, y| {
                    (**x as f64 - anchor)
                        .abs()
                        .total_cmp(&(**y as f64 - anchor).abs())
                        .then(x.cmp(y))
                })
                .ok_or_else(|| Error::Input("sweep grids must not be empty".into()))?;
        }
    }
    if let Some(k) = a.stage1_k {
        cfg.stage1_k = k;
    }
    cfg.tune_fraction = a.tune_fraction;
    cfg.split_seed = a.seed;
    cfg.shift_rows = a.shift_rows;
    cfg.full_grid = a.full_grid;
    let result = intervene::sweep(&model, &data, &taps.standard, &bank, &cfg)?;

    let mut prov = Provenance::new();
    prov.insert("model".into(), model_hash.clone());
    prov.insert("dataset".into(), data_hash.clone());
    prov.insert("taps".into(), taps_hash.clone());
    prov.insert("probes".into(), probes_hash.clone());
    match a.format {
        Format::Json => artifact::save_json(&a.out, ArtifactKind::Sweep, prov, &result)?,
        Format::Csv => write_text(&a.out, &result.to_csv())?,
    }
    let mut run = Run::new("sweep", &serde_json::json!({ "args": a, "config": cfg }), Some(a.seed));
    run.input("model", &model_hash);
    run.input("dataset", &data_hash);
    run.input("taps", &taps_hash);
    run.input("probes", &probes_hash);
    run.finish(&[&a.out])?;
    Ok(result)
}

// analyze --------------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct AbArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Also render a line chart.
    #[arg(long)]
    #[serde(skip)]
    pub svg: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

pub fn analyze_ab(a: &AbArgs) -> Result<()> {
    let (model, model_hash) = load_model(&a.model)?;
    let (data, data_hash) = load_data(&a.data, Some(&model_hash))?;
    let mut run = Run::new("analyze-ab", a, None);
    run.input("model", &model_hash);
    run.input("dataset", &data_hash);
    let mut prov = Provenance::new();
    prov.insert("model".into(), model_hash.clone());
    prov.insert("dataset".into(), data_hash.clone());
    let plan = match &a.plan {
        Some(p) => {
            let (h, plan, ph) = load_plan(p)?;
            expect(&h, p, "model", &model_hash)?;
            run.input("plan", &ph);
            prov.insert("plan".into(), ph);
            Some(plan)
        }
        None => None,
    };
    let langs = languages_for(&a.languages, data.world());
    let profile = analysis::ab_profile(&model, &data, &as_strs(&langs), plan.as_ref())?;
    match a.format {
        Format::Json => artifact::save_json(&a.out, ArtifactKind::Analysis, prov, &profile)?,
        Format::Csv => write_text(&a.out, &profile.to_csv())?,
    }
    let mut outputs = vec![a.out.as_path()];
    if let Some(svg_path) = &a.svg {
        let series: Vec<(String, Vec<(f64, f64)>)> = profile
            .ab
            .iter()
            .map(|(l, v)| (l.clone(), v.iter().enumerate().map(|(i, y)| (i as f64, *y)).collect()))
            .collect();
        write_text(svg_path, &svg::line_chart("A_b per layer", &series))?;
        outputs.push(svg_path);
    }
    run.finish(&outputs)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProjectionArgs {
    #[arg(long)]
    #[serde(skip)]
    pub taps: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub probes: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    /// Label stored with the projections, e.g. `baseline` or `intervened`.
    #[arg(long, default_value = "baseline")]
    pub tag: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

pub fn analyze_projection(a: &ProjectionArgs) -> Result<()> {
    let (th, taps) = probes::load_taps(&a.taps)?;
    let (_, bank, probes_hash) = load_probes(&a.probes)?;
    let taps_hash = hash_path(&a.taps)?;
    let probe = bank
        .get(a.layer, a.head)
        .ok_or_else(|| Error::Input(format!("no probe for head ({}, {})", a.layer, a.head)))?;
    let report = analysis::hyperplane_projection(&taps.masked, probe, &a.tag)?;
    let mut prov = Provenance::new();
    prov.insert("taps".into(), taps_hash.clone());
    prov.insert("probes".into(), probes_hash.clone());
    if let Some(m) = th.provenance.get("model") {
        prov.insert("model".into(), m.clone());
    }
    match a.format {
        Format::Json => artifact::save_json(&a.out, ArtifactKind::Analysis, prov, &report)?,
        Format::Csv => write_text(&a.out, &report.to_csv())?,
    }
    let mut run = Run::new("analyze-projection", a, None);
    run.input("taps", &taps_hash);
    run.input("probes", &probes_hash);
    run.finish(&[&a.out])
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KdeArgs {
    /// Projection report (JSON) or a CSV with a `projection` or `value`
    /// column and an optional `language` column.
    #[arg(long)]
    #[serde(skip)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    /// Defaults to Silverman's rule per language.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub svg: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

fn read_values(path: &Path) -> Result<ProjectionReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.first() == Some(&b'{') {
        return artifact::load_json(path, ArtifactKind::Analysis).map(|(_, r)| r);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{}: not UTF-8", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = head
        .iter()
        .position(|c| *c == "projection" || *c == "value")
        .ok_or_else(|| Error::Format(format!("{}: no projection or value column", path.display())))?;
    let lang_col = head.iter().position(|c| *c == "language");
    let mut report = ProjectionReport {
        layer: 0,
        head: 0,
        tag: String::new(),
        sample_ids: Vec::new(),
        projections: Default::default(),
    };
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("{}: malformed row {}", path.display(), i + 2));
        let v: f64 = cells.get(col).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let lang = match lang_col {
            Some(c) => cells.get(c).ok_or_else(bad)?.to_string(),
            None => "values".to_string(),
        };
        report.projections.entry(lang).or_default().push(v);
    }
    Ok(report)
}

pub fn analyze_kde(a: &KdeArgs) -> Result<()> {
    let report = read_values(&a.input)?;
    let curves = report.densities(a.points, a.bandwidth)?;
    let input_hash = hash_path(&a.input)?;
    let mut prov = Provenance::new();
    prov.insert("input".into(), input_hash.clone());
    match a.format {
        Format::Json => artifact::save_json(&a.out, ArtifactKind::Analysis, prov, &curves)?,
        Format::Csv => write_text(&a.out, &curves.to_csv())?,
    }
    let mut outputs = vec![a.out.as_path()];
    if let Some(svg_path) = &a.svg {
        let series: Vec<(String, Vec<(f64, f64)>)> = curves
            .curves
            .iter()
            .map(|(l, ys)| (l.clone(), curves.grid.iter().copied().zip(ys.iter().copied()).collect()))
            .collect();
        write_text(svg_path, &svg::line_chart("projection density", &series))?;
        outputs.push(svg_path);
    }
    let mut run = Run::new("analyze-kde", a, None);
    run.input("input", &input_hash);
    run.finish(&outputs)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HeatmapArgs {
    #[arg(long)]
    #[serde(skip)]
    pub probes: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub svg: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

pub fn analyze_heatmap(a: &HeatmapArgs) -> Result<()> {
    let (_, bank, hash) = load_probes(&a.probes)?;
    let map = analysis::head_accuracy_heatmap(&bank)?;
    let mut prov = Provenance::new();
    prov.insert("probes".into(), hash.clone());
    match a.format {
        Format::Json => artifact::save_json(&a.out, ArtifactKind::Analysis, prov, &map)?,
        Format::Csv => write_text(&a.out, &map.to_csv())?,
    }
    let mut outputs = vec![a.out.as_path()];
    if let Some(svg_path) = &a.svg {
        write_text(svg_path, &svg::heatmap("probe test accuracy (rows sorted)", &map.sorted))?;
        outputs.push(svg_path);
    }
    let mut run = Run::new("analyze-heatmap", a, None);
    run.input("probes", &hash);
    run.finish(&outputs)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LensArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub data: PathBuf,
    /// Sample id.
    #[arg(long)]
    pub sample: u64,
    #[arg(long, default_value = ENGLISH)]
    pub language: String,
    #[arg(long)]
    #[serde(skip)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

pub fn analyze_lens(a: &LensArgs) -> Result<()> {
    let (model, model_hash) = load_model(&a.model)?;
    let (data, data_hash) = load_data(&a.data, Some(&model_hash))?;
    let mut run = Run::new("analyze-logitlens", a, None);
    run.input("model", &model_hash);
    run.input("dataset", &data_hash);
    let mut prov = Provenance::new();
    prov.insert("model".into(), model_hash.clone());
    prov.insert("dataset".into(), data_hash.clone());
    let world = data.world();
    if a.language != ENGLISH && a.language != world.target_language {
        return Err(Error::Input(format!("language {} is not part of this world", a.language)));
    }
    let sample = data
        .samples
        .iter()
        .find(|s| s.id == a.sample)
        .ok_or_else(|| Error::Input(format!("no sample with id {}", a.sample)))?;
    let hook = match &a.plan {
        Some(p) => {
            let (h, plan, ph) = load_plan(p)?;
            expect(&h, p, "model", &model_hash)?;
            plan.validate(&model)?;
            run.input("plan", &ph);
            prov.insert("plan".into(), ph);
            (a.language != ENGLISH).then(|| plan.hook())
        }
        None => None,
    };
    let input = SequenceInput::new(sample.patches(world), sample.query(&a.language).to_vec(), a.language.as_str());
    let trace = forward(&model, &input, hook.as_ref())?;
    let cells = analysis::logit_lens_grid(&model, &trace)?;
    match a.format {
        Format::Json => artifact::save_json(&a.out, ArtifactKind::Analysis, prov, &cells)?,
        Format::Csv => write_text(&a.out, &analysis::lens_csv(&cells))?,
    }
    run.finish(&[&a.out])
}

// pipeline -------------------------------------------------------------

#[derive(Debug, Clone, Args, Serialize)]
pub struct PipelineArgs {
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of samples.
    #[arg(long = "b", default_value_t = 1000)]
    pub b: usize,
    #[arg(long, value_enum, default_value_t = WorldMode::CleanPaired)]
    pub mode: WorldMode,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Skip the sweep's alpha search and use this value.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Skip the sweep's K search and use this value.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value_t = ShiftRows::All)]
    pub shift_rows: ShiftRows,
    /// Probe training fraction.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 0.2)]
    pub tune_fraction: f64,
    #[arg(long)]
    pub full_grid: bool,
    /// Also write baseline and intervened A_b profiles.
    #[arg(long)]
    pub ab: bool,
}

#[derive(Debug, Serialize)]
struct PipelineSummary {
    alpha: f64,
    k: usize,
    swept: bool,
    planted: Vec<(usize, usize)>,
    selected: Vec<(usize, usize)>,
    baseline: std::collections::BTreeMap<String, f64>,
    intervened: std::collections::BTreeMap<String, f64>,
}

pub fn pipeline(a: &PipelineArgs) -> Result<()> {
    let dir = &a.out;
    let p = |name: &str| dir.join(name);
    gen_model(&GenModelArgs {
        out: p("model"),
        seed: a.seed,
        mode: a.mode,
        noise_sigma: a.noise_sigma,
        target_language: "tgt".into(),
        plant_seed: None,
        offset_scale: None,
        planted: Vec::new(),
        world: None,
    })?;
    gen_data(&GenDataArgs {
        model: p("model"),
        out: p("data.jsonl"),
        b: a.b,
        seed: None,
    })?;
    record(&RecordArgs {
        model: p("model"),
        data: p("data.jsonl"),
        out: p("taps.bin"),
        languages: None,
        plan: None,
    })?;
    probe(&ProbeArgs {
        taps: vec![p("taps.bin")],
        out: p("probes.json"),
        split: a.split,
        seed: a.seed,
        loss: Loss::Logistic,
        iterations: 500,
        lambda: 1e-3,
        learning_rate: 0.1,
    })?;
    let swept = a.alpha.is_none() || a.k.is_none();
    let (alpha, k) = if swept {
        let r = sweep(&SweepArgs {
            model: p("model"),
            data: p("data.jsonl"),
            taps: p("taps.bin"),
            probes: p("probes.json"),
            out: p("sweep.json"),
            alphas: None,
            ks: None,
            stage1_k: None,
            tune_fraction: a.tune_fraction,
            seed: a.seed,
            shift_rows: a.shift_rows,
            full_grid: a.full_grid,
            format: Format::Json,
        })?;
        (a.alpha.unwrap_or(r.alpha_star), a.k.unwrap_or(r.k_star))
    } else {
        (a.alpha.unwrap_or(1.0), a.k.unwrap_or(1))
    };
    select_heads(&SelectHeadsArgs {
        probes: p("probes.json"),
        k,
        out: p("headset.json"),
    })?;
    estimate_shift(&EstimateShiftArgs {
        taps: vec![p("taps.bin")],
        mode: ShiftMode::Specific,
        target: None,
        retarget: None,
        out: p("shifts.bin"),
    })?;
    intervene(&InterventionArgs {
        headset: p("headset.json"),
        shifts: p("shifts.bin"),
        alpha,
        shift_rows: a.shift_rows,
        out: p("plan.json"),
    })?;
    for (name, plan) in [("baseline.json", None), ("intervened.json", Some(p("plan.json")))] {
        evaluate(&EvaluateArgs {
            model: p("model"),
            data: p("data.jsonl"),
            plan,
            languages: None,
            subset: Subset::Holdout,
            tune_fraction: a.tune_fraction,
            seed: a.seed,
            out: p(name),
            format: Format::Json,
        })?;
    }
    analyze_heatmap(&HeatmapArgs {
        probes: p("probes.json"),
        out: p("heatmap.csv"),
        svg: Some(p("heatmap.svg")),
        format: Format::Csv,
    })?;
    if a.ab {
        for (name, plan) in [("ab_baseline.csv", None), ("ab_intervened.csv", Some(p("plan.json")))] {
            analyze_ab(&AbArgs {
                model: p("model"),
                data: p("data.jsonl"),
                plan,
                languages: None,
                out: p(name),
                svg: None,
                format: Format::Csv,
            })?;
        }
    }

    let model = ModelBundle::load(&p("model"))?;
    let (_, heads): (_, HeadSet) = artifact::load_json(&p("headset.json"), ArtifactKind::Headset)?;
    let (_, base): (_, intervene::EvalReport) = artifact::load_json(&p("baseline.json"), ArtifactKind::Report)?;
    let (_, inter): (_, intervene::EvalReport) = artifact::load_json(&p("intervened.json"), ArtifactKind::Report)?;
    let acc = |r: &intervene::EvalReport| r.summary.iter().map(|(l, s)| (l.clone(), s.accuracy)).collect();
    let summary = PipelineSummary {
        alpha,
        k,
        swept,
        planted: model.annotations().planted.iter().map(|h| (h.layer, h.head)).collect(),
        selected: heads.pairs(),
        baseline: acc(&base),
        intervened: acc(&inter),
    };
    artifact::write_json(&p("summary.json"), &summary)?;
    Run::new("pipeline", a, Some(a.seed)).finish(&[&p("summary.json")])
}
