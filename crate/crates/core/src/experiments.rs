//! Experiment specs and the runner behind `ssmlab run`.
//!
//! A spec is a [`ConfigDoc`] with the sections `[experiment]`, `[data]`,
//! `[attack]` and `[perturb]`:
//!
//! ```text
//! [experiment]
//! kind = whitebox            # whitebox patchfool masked transfer occlusion shuffle heatmap corruption
//! checkpoints = desk.ssmr    # comma separated, relative to the spec file
//! names = vssm               # optional, defaults to file stems
//! samples = 512
//! seed = 0
//!
//! [data]
//! source = synth             # or idx, with images = and labels =
//! n = 512
//! seed = 3
//!
//! [attack]
//! epsilon = 1/255
//! step_size = 0.5/255
//! iterations = 5
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attacks::{attack_dataset, dataset_images, accuracy, transfer_eval, AttackConfig, AttackKind};
use crate::autodiff::{StreamMask, StreamTag};
use crate::checkpoint;
use crate::config::{ConfigDoc, Section};
use crate::data::{load_idx, synth_split, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::perturb::{perturbed_accuracy, positional_sweep, Corruption, Heatmap, PerturbKind, PerturbationSpec};
use crate::report::{sha256_hex, Metadata, Report, Row};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Whitebox,
    Patchfool,
    Masked,
    Transfer,
    Occlusion,
    Shuffle,
    Heatmap,
    Corruption,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Whitebox,
        ExperimentKind::Patchfool,
        ExperimentKind::Masked,
        ExperimentKind::Transfer,
        ExperimentKind::Occlusion,
        ExperimentKind::Shuffle,
        ExperimentKind::Heatmap,
        ExperimentKind::Corruption,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Whitebox => "whitebox",
            ExperimentKind::Patchfool => "patchfool",
            ExperimentKind::Masked => "masked",
            ExperimentKind::Transfer => "transfer",
            ExperimentKind::Occlusion => "occlusion",
            ExperimentKind::Shuffle => "shuffle",
            ExperimentKind::Heatmap => "heatmap",
            ExperimentKind::Corruption => "corruption",
        }
    }

    fn min_checkpoints(self) -> usize {
        if self == ExperimentKind::Transfer {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Synthetic gratings; size and class count default to the first model's.
    Synth {
        n: Option<usize>,
        seed: u64,
        noise: f32,
    },
    Idx { images: PathBuf, labels: PathBuf },
}

/// Everything needed to run one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub checkpoints: Vec<PathBuf>,
    pub names: Vec<String>,
    pub data: DataSource,
    pub samples: usize,
    pub seed: u64,
    /// Whole-image attack for `whitebox`, `masked` and `transfer`.
    pub attack: AttackConfig,
    /// Patch-Fool settings for `patchfool` and `heatmap`.
    pub patch_fool: AttackConfig,
    pub patch_counts: Vec<usize>,
    pub masks: Vec<StreamMask>,
    pub budgets: Vec<usize>,
    pub grids: Vec<usize>,
    pub corruptions: Vec<Corruption>,
    pub severities: Vec<usize>,
}

const EXPERIMENT_KEYS: [&str; 5] = ["kind", "checkpoints", "names", "samples", "seed"];
const DATA_KEYS: [&str; 6] = ["source", "n", "seed", "noise", "images", "labels"];
const ATTACK_KEYS: [&str; 12] = [
    "kind",
    "epsilon",
    "step_size",
    "iterations",
    "lr",
    "decay",
    "decay_every",
    "alpha",
    "pf_iterations",
    "patches",
    "early_stop",
    "masks",
];
const PERTURB_KEYS: [&str; 4] = ["budgets", "grids", "corruptions", "severities"];

fn mask_label(mask: StreamMask) -> String {
    if mask.is_empty() {
        "pgd".to_string()
    } else {
        let names: Vec<&str> = mask.tags().map(StreamTag::as_str).collect();
        format!("w/o {}", names.join("+"))
    }
}

fn parse_mask(s: &str) -> Result<StreamMask> {
    match s.trim() {
        "none" | "" | "{}" => Ok(StreamMask::EMPTY),
        other => other.replace('+', ",").parse(),
    }
}

impl ExperimentSpec {
    /// Defaults for `kind` with one checkpoint; used by tests and as the
    /// starting point of [`ExperimentSpec::parse`].
    pub fn new(kind: ExperimentKind, checkpoints: Vec<PathBuf>) -> Self {
        ExperimentSpec {
            kind,
            names: checkpoints.iter().map(|p| stem(p)).collect(),
            checkpoints,
            data: DataSource::Synth {
                n: None,
                seed: 3,
                noise: 0.08,
            },
            samples: 512,
            seed: 0,
            attack: AttackConfig::pgd_default(),
            patch_fool: AttackConfig::patch_fool(1),
            patch_counts: vec![1, 2, 3, 4],
            masks: vec![
                StreamMask::EMPTY,
                StreamMask::of(&[StreamTag::A]),
                StreamMask::of(&[StreamTag::B]),
                StreamMask::of(&[StreamTag::C]),
                StreamMask::of(&[StreamTag::Delta]),
            ],
            budgets: vec![1, 2, 4, 8, 16, 24, 32, 48],
            grids: vec![1, 2, 4, 8],
            corruptions: Corruption::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let doc = ConfigDoc::load(path.as_ref())?;
        let base = path.as_ref().parent().unwrap_or(Path::new("."));
        ExperimentSpec::from_doc(&doc, base)
    }

    /// Parses a spec; relative file paths are resolved against `base`.
    pub fn from_doc(doc: &ConfigDoc, base: &Path) -> Result<Self> {
        for name in doc.sections() {
            if !["experiment", "data", "attack", "perturb"].contains(&name) {
                return Err(Error::Parse {
                    path: doc.path.clone(),
                    line: 0,
                    msg: format!("unknown section [{name}]"),
                });
            }
        }
        let ex = doc.section("experiment");
        ex.only(&EXPERIMENT_KEYS)?;
        let kind: ExperimentKind = ex.get_with("kind", str::parse)?.ok_or_else(|| ex.fail("kind", "is required"))?;
        let checkpoints: Vec<PathBuf> = ex
            .list::<String>("checkpoints")?
            .unwrap_or_default()
            .into_iter()
            .map(|p| base.join(p))
            .collect();
        let mut spec = ExperimentSpec::new(kind, checkpoints);
        if let Some(names) = ex.list::<String>("names")? {
            spec.names = names;
        }
        spec.samples = ex.get_or("samples", spec.samples)?;
        spec.seed = ex.get_or("seed", spec.seed)?;

        let data = doc.section("data");
        data.only(&DATA_KEYS)?;
        spec.data = match data.get::<String>("source")?.as_deref().unwrap_or("synth") {
            "synth" => DataSource::Synth {
                n: data.get("n")?,
                seed: data.get_or("seed", 3)?,
                noise: data.real("noise")?.unwrap_or(0.08),
            },
            "idx" => DataSource::Idx {
                images: base.join(data.require::<String>("images")?),
                labels: base.join(data.require::<String>("labels")?),
            },
            other => return Err(data.fail("source", format!("expected synth or idx, got {other:?}"))),
        };

        let at = doc.section("attack");
        at.only(&ATTACK_KEYS)?;
        parse_attack(&at, &mut spec)?;

        let pt = doc.section("perturb");
        pt.only(&PERTURB_KEYS)?;
        if let Some(b) = pt.list("budgets")? {
            spec.budgets = b;
        }
        if let Some(g) = pt.list("grids")? {
            spec.grids = g;
        }
        if let Some(c) = pt.list("corruptions")? {
            spec.corruptions = c;
        }
        if let Some(s) = pt.list("severities")? {
            spec.severities = s;
        }
        spec.validate().map_err(|e| Error::Parse {
            path: doc.path.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.checkpoints.len() < self.kind.min_checkpoints() {
            return fail(format!(
                "{} needs at least {} checkpoint(s), got {}",
                self.kind,
                self.kind.min_checkpoints(),
                self.checkpoints.len()
            ));
        }
        if self.names.len() != self.checkpoints.len() {
            return fail(format!(
                "{} names for {} checkpoints",
                self.names.len(),
                self.checkpoints.len()
            ));
        }
        let mut sorted = self.names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.names.len() {
            return fail(format!("model names {:?} are not unique", self.names));
        }
        if self.samples == 0 {
            return fail("samples must be at least 1".into());
        }
        self.attack.validate()?;
        self.patch_fool.validate()?;
        let nonempty = |name: &str, v: &[usize]| -> Result<()> {
            if v.is_empty() {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
            Ok(())
        };
        match self.kind {
            ExperimentKind::Patchfool => nonempty("patches", &self.patch_counts)?,
            ExperimentKind::Occlusion => nonempty("budgets", &self.budgets)?,
            ExperimentKind::Shuffle => nonempty("grids", &self.grids)?,
            ExperimentKind::Corruption => {
                nonempty("severities", &self.severities)?;
                if self.corruptions.is_empty() {
                    return fail("corruptions must not be empty".into());
                }
                if let Some(s) = self.severities.iter().find(|s| !(1..=5).contains(*s)) {
                    return fail(format!("severity {s} outside 1..=5"));
                }
            }
            ExperimentKind::Masked if self.masks.is_empty() => return fail("masks must not be empty".into()),
            _ => {}
        }
        Ok(())
    }

    /// Every effective setting, one `key = value` per line. Hashed into each
    /// report so a table can be traced back to the exact run.
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("kind", self.kind.to_string());
        kv("names", self.names.join(","));
        kv(
            "checkpoints",
            self.checkpoints.iter().map(|p| stem(p)).collect::<Vec<_>>().join(","),
        );
        kv("data", match &self.data {
            DataSource::Synth { n, seed, noise } => {
                format!("synth n={} seed={seed} noise={noise}", n.map_or("samples".into(), |n| n.to_string()))
            }
            DataSource::Idx { images, labels } => format!("idx {} {}", file_name(images), file_name(labels)),
        });
        kv("samples", self.samples.to_string());
        kv("seed", self.seed.to_string());
        kv("attack", self.attack.describe());
        kv("patch_fool", self.patch_fool.describe());
        kv("patches", list(&self.patch_counts));
        kv(
            "masks",
            self.masks.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(" "),
        );
        kv("budgets", list(&self.budgets));
        kv("grids", list(&self.grids));
        kv(
            "corruptions",
            self.corruptions.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(","),
        );
        kv("severities", list(&self.severities));
        out
    }
}

fn parse_attack(at: &Section<'_>, spec: &mut ExperimentSpec) -> Result<()> {
    let a = &mut spec.attack;
    if let Some(kind) = at.get_with("kind", str::parse::<AttackKind>)? {
        if kind == AttackKind::PatchFool {
            return Err(at.fail("kind", "use the patchfool experiment for Patch-Fool"));
        }
        a.kind = kind;
    }
    if let Some(e) = at.real("epsilon")? {
        a.epsilon = e;
        if a.kind == AttackKind::Fgsm {
            a.step_size = e;
        }
    }
    if let Some(s) = at.real("step_size")? {
        a.step_size = s;
    }
    if let Some(i) = at.get("iterations")? {
        a.iterations = i;
    }
    let p = &mut spec.patch_fool;
    if let Some(v) = at.real("lr")? {
        p.step_size = v;
    }
    if let Some(v) = at.real("decay")? {
        p.decay = v;
    }
    if let Some(v) = at.get("decay_every")? {
        p.decay_every = v;
    }
    if let Some(v) = at.real("alpha")? {
        p.alpha = v;
    }
    if let Some(v) = at.get("pf_iterations")? {
        p.iterations = v;
    }
    if let Some(v) = at.get("early_stop")? {
        p.early_stop = v;
    }
    if let Some(v) = at.list("patches")? {
        spec.patch_counts = v;
    }
    if let Some(m) = at.get_with("masks", |v| v.split(',').map(parse_mask).collect::<Result<Vec<_>>>())? {
        spec.masks = m;
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// A finished experiment: the table plus any heatmaps, keyed by model name.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub report: Report,
    pub heatmaps: Vec<(String, Heatmap)>,
}

/// Loads the models and the evaluation subset, then runs the experiment.
pub fn run(spec: &ExperimentSpec) -> Result<Outcome> {
    spec.validate()?;
    let mut models = Vec::with_capacity(spec.checkpoints.len());
    let mut metadata_notes = Vec::new();
    for (name, path) in spec.names.iter().zip(&spec.checkpoints) {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let model = checkpoint::from_bytes(&bytes).map_err(|e| e.in_row(format!("{name}: load {}", path.display())))?;
        metadata_notes.push((format!("checkpoint.{name}"), sha256_hex(&bytes)));
        models.push((name.clone(), model));
    }
    let data = eval_data(spec, &models[0].1)?;
    run_with(spec, &models, &data, metadata_notes)
}

fn eval_data(spec: &ExperimentSpec, first: &Model) -> Result<Dataset> {
    let cfg = first.config();
    let pool = match &spec.data {
        DataSource::Synth { n, seed, noise } => {
            let mut s = SynthConfig::new(n.unwrap_or(spec.samples), cfg.image_size, cfg.n_classes, *seed);
            s.channels = cfg.in_channels;
            s.noise = *noise;
            synth_split(&s, Split::Eval)
        }
        DataSource::Idx { images, labels } => load_idx(images, labels, cfg.n_classes)?,
    };
    if spec.samples > pool.len() {
        return Err(Error::Config(format!(
            "samples = {} but the dataset holds {} images",
            spec.samples,
            pool.len()
        )));
    }
    Ok(if spec.samples == pool.len() {
        pool
    } else {
        pool.sample(spec.samples, spec.seed)
    })
}

/// Runs the experiment on already loaded models and data.
pub fn run_with(
    spec: &ExperimentSpec,
    models: &[(String, Model)],
    data: &Dataset,
    notes: Vec<(String, String)>,
) -> Result<Outcome> {
    spec.validate()?;
    if models.len() < spec.kind.min_checkpoints() {
        return Err(Error::Config(format!("{} needs at least 2 models", spec.kind)));
    }
    for (name, m) in models {
        if m.image_shape() != data.image_shape() || m.config().n_classes != data.n_classes() {
            return Err(Error::Config(format!(
                "model {name} expects {:?} images and {} classes; data has {:?} and {}",
                m.image_shape(),
                m.config().n_classes,
                data.image_shape(),
                data.n_classes()
            ))
            .in_row(format!("{name}: setup")));
        }
    }
    let mut metadata = Metadata::new(spec.seed, &spec.canonical())
        .note("kind", spec.kind.as_str())
        .note("samples", data.len().to_string());
    for (k, v) in notes {
        metadata = metadata.note(k, v);
    }
    match spec.kind {
        ExperimentKind::Whitebox | ExperimentKind::Masked | ExperimentKind::Transfer => {
            metadata = metadata.note("attack", spec.attack.describe());
        }
        ExperimentKind::Patchfool | ExperimentKind::Heatmap => {
            metadata = metadata.note("attack", spec.patch_fool.describe());
            if models.iter().any(|(_, m)| m.arch().is_ssm()) {
                metadata = metadata.note("alpha", "attention term inactive for models without attention");
            }
        }
        _ => {}
    }
    let mut report = Report::new(metadata);
    let mut heatmaps = Vec::new();
    let seeded = |c: &AttackConfig| {
        let mut c = c.clone();
        c.seed = spec.seed;
        c
    };
    let images = dataset_images(data);
    let clean = |name: &str, m: &Model| {
        accuracy(m, &images, data.labels()).map_err(|e| e.in_row(format!("{name}: clean")))
    };
    let robust = |name: &str, cond: &str, m: &Model, cfg: &AttackConfig| -> Result<f64> {
        let res = attack_dataset(m, data, cfg).map_err(|e| e.in_row(format!("{name}: {cond}")))?;
        Ok(res.iter().filter(|r| !r.success).count() as f64 / data.len() as f64)
    };
    let perturbed = |name: &str, m: &Model, p: &PerturbationSpec| {
        perturbed_accuracy(m, data, p).map_err(|e| e.in_row(format!("{name}: {}", p.condition())))
    };

    match spec.kind {
        ExperimentKind::Whitebox => {
            for (name, m) in models {
                report.push(Row::new(name, "clean", "accuracy", clean(name, m)?));
                let mut fgsm = seeded(&spec.attack);
                fgsm.kind = AttackKind::Fgsm;
                fgsm.step_size = fgsm.epsilon;
                fgsm.iterations = 1;
                report.push(Row::new(name, "fgsm", "accuracy", robust(name, "fgsm", m, &fgsm)?));
                let mut pgd = seeded(&spec.attack);
                pgd.kind = AttackKind::Pgd;
                report.push(Row::new(name, "pgd", "accuracy", robust(name, "pgd", m, &pgd)?));
            }
        }
        ExperimentKind::Patchfool => {
            for (name, m) in models {
                report.push(Row::new(name, "clean", "accuracy", clean(name, m)?));
                let mut values = Vec::new();
                for &n in &spec.patch_counts {
                    let mut cfg = seeded(&spec.patch_fool);
                    cfg.n_patches = n;
                    let cond = format!("P{n}");
                    let v = robust(name, &cond, m, &cfg)?;
                    report.push(Row::new(name, cond, "accuracy", v));
                    values.push(v);
                }
                if let (Some(first), Some(last)) = (spec.patch_counts.first(), spec.patch_counts.last()) {
                    if spec.patch_counts.len() > 1 {
                        let gap = values[0] - values[values.len() - 1];
                        report.push(Row::new(name, format!("P{first}-P{last}"), "accuracy", gap));
                    }
                }
            }
        }
        ExperimentKind::Masked => {
            for (name, m) in models {
                report.push(Row::new(name, "clean", "accuracy", clean(name, m)?));
                for &mask in &spec.masks {
                    let cond = mask_label(mask);
                    let mut cfg = seeded(&spec.attack);
                    cfg.kind = AttackKind::Pgd;
                    cfg.mask = mask;
                    let res = attack_dataset(m, data, &cfg).map_err(|e| e.in_row(format!("{name}: {cond}")))?;
                    let n = data.len() as f64;
                    let clean_ok = res
                        .iter()
                        .zip(data.labels())
                        .filter(|(r, &y)| r.clean_prediction == y)
                        .count();
                    let robust_ok = res.iter().filter(|r| !r.success).count();
                    report.push(Row::new(name, cond.clone(), "clean_accuracy", clean_ok as f64 / n));
                    report.push(Row::new(name, cond, "robust_accuracy", robust_ok as f64 / n));
                }
            }
        }
        ExperimentKind::Transfer => {
            let cfg = seeded(&spec.attack);
            let mut seen = std::collections::HashSet::new();
            for i in 0..models.len() {
                for j in i + 1..models.len() {
                    let (a, b) = (&models[i], &models[j]);
                    let rows = transfer_eval((&a.0, &a.1), (&b.0, &b.1), data, &cfg)
                        .map_err(|e| e.in_row(format!("{} <-> {}", a.0, b.0)))?;
                    for r in rows {
                        if seen.insert((r.model.clone(), r.condition.clone())) {
                            report.push(r);
                        }
                    }
                }
            }
        }
        ExperimentKind::Occlusion => {
            for (name, m) in models {
                let p2 = m.config().patch_size * m.config().patch_size;
                report.push(Row::new(name, "clean", "accuracy", clean(name, m)?));
                for &k in &spec.budgets {
                    let mut patch = PerturbationSpec::new(PerturbKind::PatchDrop);
                    patch.budget = k;
                    patch.seed = spec.seed;
                    let mut pixel = PerturbationSpec::new(PerturbKind::PixelDrop);
                    pixel.budget = k * p2;
                    pixel.seed = spec.seed;
                    let a = perturbed(name, m, &patch)?;
                    let b = perturbed(name, m, &pixel)?;
                    report.push(Row::new(name, patch.condition(), "accuracy", a));
                    report.push(Row::new(name, pixel.condition(), "accuracy", b));
                    report.push(Row::new(name, format!("pixel-patch k={k}"), "accuracy_gap", b - a));
                }
            }
        }
        ExperimentKind::Shuffle => {
            for (name, m) in models {
                for &g in &spec.grids {
                    let mut p = PerturbationSpec::new(PerturbKind::GridShuffle);
                    p.grid = g;
                    p.seed = spec.seed;
                    report.push(Row::new(name, p.condition(), "accuracy", perturbed(name, m, &p)?));
                }
            }
        }
        ExperimentKind::Heatmap => {
            for (name, m) in models {
                let cfg = seeded(&spec.patch_fool);
                let map = positional_sweep(m, data, &cfg).map_err(|e| e.in_row(format!("{name}: sweep")))?;
                for (i, &v) in map.values.iter().enumerate() {
                    let (r, c) = (i / map.grid, i % map.grid);
                    report.push(Row::new(name, format!("patch {i} ({r},{c})"), "accuracy", v));
                }
                report.push(Row::new(name, "center", "mean_accuracy", map.center_mean()));
                report.push(Row::new(name, "border", "mean_accuracy", map.border_mean()));
                heatmaps.push((name.clone(), map));
            }
        }
        ExperimentKind::Corruption => {
            for (name, m) in models {
                report.push(Row::new(name, "clean", "error", 1.0 - clean(name, m)?));
                let mut all = Vec::new();
                for &kind in &spec.corruptions {
                    let mut errs = Vec::new();
                    for &s in &spec.severities {
                        let mut p = PerturbationSpec::new(PerturbKind::Corruption(kind));
                        p.severity = s;
                        p.seed = spec.seed;
                        let e = 1.0 - perturbed(name, m, &p)?;
                        report.push(Row::new(name, p.condition(), "error", e));
                        errs.push(e);
                    }
                    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
                    report.push(Row::new(name, kind.as_str(), "mean_error", mean));
                    all.extend(errs);
                }
                let mce = all.iter().sum::<f64>() / all.len() as f64;
                report.push(Row::new(name, "all", "mce", mce));
            }
        }
    }
    Ok(Outcome { report, heatmaps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelConfig};

    fn doc(text: &str) -> ConfigDoc {
        ConfigDoc::parse(text, "spec.cfg").unwrap()
    }

    fn tiny(arch: Arch, seed: u64) -> Model {
        Model::build(ModelConfig {
            arch,
            image_size: 8,
            patch_size: 2,
            in_channels: 3,
            depths: vec![1, 1],
            dims: vec![6, 8],
            n_state: 2,
            n_classes: 3,
            window: 2,
            seed,
        })
        .unwrap()
    }

    fn data() -> Dataset {
        let mut s = SynthConfig::new(6, 8, 3, 1);
        s.noise = 0.05;
        synth_split(&s, Split::Eval)
    }

    #[test]
    fn parses_a_full_spec() {
        let text = "[experiment]\nkind = masked\ncheckpoints = a.ssmr\nsamples = 64\nseed = 3\n\
                    [data]\nsource = synth\nn = 100\n\
                    [attack]\nepsilon = 8/255\nstep_size = 2/255\niterations = 5\nmasks = none, B, A+C\n";
        let spec = ExperimentSpec::from_doc(&doc(text), Path::new("/runs")).unwrap();
        assert_eq!(spec.kind, ExperimentKind::Masked);
        assert_eq!(spec.checkpoints, vec![PathBuf::from("/runs/a.ssmr")]);
        assert_eq!(spec.names, vec!["a"]);
        assert_eq!(spec.samples, 64);
        assert_eq!(spec.attack.epsilon, 8.0 / 255.0);
        assert_eq!(
            spec.masks,
            vec![
                StreamMask::EMPTY,
                StreamMask::of(&[StreamTag::B]),
                StreamMask::of(&[StreamTag::A, StreamTag::C])
            ]
        );
        assert_eq!(mask_label(spec.masks[2]), "w/o A+C");
    }

    #[test]
    fn spec_errors_name_the_line() {
        let err = ExperimentSpec::from_doc(&doc("[experiment]\nkind = whitebox\nsample = 3\n"), Path::new("."))
            .unwrap_err();
        assert!(err.to_string().starts_with("spec.cfg:3:"), "{err}");
        let err = ExperimentSpec::from_doc(&doc("[experiment]\nkind = transfer\ncheckpoints = a\n"), Path::new("."))
            .unwrap_err();
        assert!(err.to_string().contains("at least 2"), "{err}");
        let err = ExperimentSpec::from_doc(&doc("[experiment]\nkind = nope\n"), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("unknown experiment kind"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn whitebox_with_zero_budget_matches_clean() {
        let mut spec = ExperimentSpec::new(ExperimentKind::Whitebox, vec!["m".into()]);
        spec.attack = AttackConfig::pgd(0.0, 0.0, 2);
        spec.samples = 6;
        let models = vec![("m".to_string(), tiny(Arch::VssmHier, 1))];
        let out = run_with(&spec, &models, &data(), vec![]).unwrap();
        let clean = out.report.value("m", "clean", "accuracy").unwrap();
        assert_eq!(out.report.value("m", "fgsm", "accuracy"), Some(clean));
        assert_eq!(out.report.value("m", "pgd", "accuracy"), Some(clean));
    }

    #[test]
    fn masked_rows_share_the_clean_column() {
        let mut spec = ExperimentSpec::new(ExperimentKind::Masked, vec!["m".into()]);
        spec.attack = AttackConfig::pgd(0.1, 0.05, 2);
        let models = vec![("m".to_string(), tiny(Arch::VssmHier, 2))];
        let out = run_with(&spec, &models, &data(), vec![]).unwrap();
        let cleans: Vec<f64> = out
            .report
            .rows
            .iter()
            .filter(|r| r.metric == "clean_accuracy")
            .map(|r| r.value)
            .collect();
        assert_eq!(cleans.len(), 5);
        assert!(cleans.iter().all(|&c| c == cleans[0]));
        assert_eq!(out.report.value("m", "clean", "accuracy"), Some(cleans[0]));
    }

    #[test]
    fn masked_attention_model_is_a_row_error() {
        let spec = ExperimentSpec::new(ExperimentKind::Masked, vec!["att".into()]);
        let models = vec![("att".to_string(), tiny(Arch::AttnWindow, 2))];
        let err = run_with(&spec, &models, &data(), vec![]).unwrap_err();
        assert!(matches!(&err, Error::Experiment { row, .. } if row == "att: w/o A"), "{err}");
    }

    #[test]
    fn transfer_rows_cover_both_directions_once() {
        let mut spec = ExperimentSpec::new(ExperimentKind::Transfer, vec!["a".into(), "b".into(), "c".into()]);
        spec.attack = AttackConfig::pgd(0.05, 0.02, 1);
        let models = vec![
            ("a".to_string(), tiny(Arch::VssmHier, 1)),
            ("b".to_string(), tiny(Arch::AttnWindow, 2)),
            ("c".to_string(), tiny(Arch::VssmHier, 3)),
        ];
        let out = run_with(&spec, &models, &data(), vec![]).unwrap();
        // three clean rows plus both directions of three pairs
        assert_eq!(out.report.rows.len(), 3 + 6);
        assert!(out.report.value("b", "a -> b", "accuracy").is_some());
        assert!(out.report.value("a", "b -> a", "accuracy").is_some());
    }

    #[test]
    fn corruption_mce_is_the_plain_mean() {
        let mut spec = ExperimentSpec::new(ExperimentKind::Corruption, vec!["m".into()]);
        spec.severities = vec![1, 5];
        let models = vec![("m".to_string(), tiny(Arch::VssmHier, 1))];
        let out = run_with(&spec, &models, &data(), vec![]).unwrap();
        let errs: Vec<f64> = out.report.rows.iter().filter(|r| r.metric == "error" && r.condition != "clean").map(|r| r.value).collect();
        assert_eq!(errs.len(), 8);
        let mce = out.report.value("m", "all", "mce").unwrap();
        assert!((mce - errs.iter().sum::<f64>() / 8.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_text_tracks_settings() {
        let a = ExperimentSpec::new(ExperimentKind::Whitebox, vec!["m".into()]);
        let mut b = a.clone();
        b.attack.epsilon = 2.0 / 255.0;
        assert_ne!(a.canonical(), b.canonical());
        assert_eq!(a.canonical(), a.clone().canonical());
    }
}
