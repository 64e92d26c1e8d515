//! Run configuration and the `train`, `eval`, `heatmap` and `sweep` commands.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::datasets::{corrupt, stratified_split, Benchmark, CorruptionKind, CorruptionSpec, Dataset, DatasetSpec};
use crate::error::{contract, GemError, Result};
use crate::metrics::{
    auroc, aupr, calibration_report, fit_temperature, misclassification_set, softmax_t, uncertainty_scores, write_metrics_csv,
    CalibrationReport, MetricRow, ScoreKind, ScoredEvalSet, TemperatureFit, UncertaintyScores,
};
use crate::model::{GemConfig, GemModel, Variant};
use crate::networks::ArchConfig;
use crate::rng::substream;
use crate::trainer::{fit, History, TrainSchedule};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GRID_FILE: &str = "heatmap.csv";
pub const SVG_FILE: &str = "heatmap.svg";
pub const SWEEP_FILE: &str = "sweep.csv";

fn config_err(msg: impl Into<String>) -> GemError {
    GemError::Config(msg.into())
}

/// Evaluation options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub temperature_scaling: bool,
    /// Gaussian-noise severities (1–5) evaluated on the ID test set.
    pub corruption_severities: Vec<u8>,
    /// OOD sets to score; `None` scores every set of the benchmark.
    pub ood: Option<Vec<String>>,
    pub dump_scores: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            temperature_scaling: true,
            corruption_severities: vec![],
            ood: None,
            dump_scores: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapSpec {
    pub score: ScoreKind,
    pub resolution: usize,
    /// Defaults to the padded bounding box of the training and OOD points.
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    pub show_points: bool,
    pub max_points: usize,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            score: ScoreKind::Entropy,
            resolution: 64,
            x_range: None,
            y_range: None,
            show_points: true,
            max_points: 1000,
        }
    }
}

/// Ablation switches of the sweep command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    Sn,
    Core,
    Mix,
    FiReg,
    FiMod,
    Ebm,
    Unc,
}

impl Switch {
    pub const ALL: [Switch; 7] = [Switch::Sn, Switch::Core, Switch::Mix, Switch::FiReg, Switch::FiMod, Switch::Ebm, Switch::Unc];

    pub fn name(self) -> &'static str {
        match self {
            Switch::Sn => "sn",
            Switch::Core => "core",
            Switch::Mix => "mix",
            Switch::FiReg => "fi_reg",
            Switch::FiMod => "fi_mod",
            Switch::Ebm => "ebm",
            Switch::Unc => "unc",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Run the ten-row ablation matrix instead of the cross-product of `axes`.
    pub ablation: bool,
    pub axes: Vec<Switch>,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

/// Component switch state of one ablation cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub sn: bool,
    pub core: bool,
    pub mix: bool,
    pub fi_reg: bool,
    pub fi_mod: bool,
    pub ebm: bool,
    pub unc: bool,
}

impl Switches {
    pub fn of(config: &GemConfig) -> Self {
        let f = &config.flags;
        Self {
            sn: f.sn,
            core: f.gate && f.density_scaling,
            mix: config.heads > 1,
            fi_reg: f.fi_reg,
            fi_mod: f.fi_mod,
            ebm: f.ebm,
            unc: f.unc,
        }
    }

    pub fn get(&self, s: Switch) -> bool {
        match s {
            Switch::Sn => self.sn,
            Switch::Core => self.core,
            Switch::Mix => self.mix,
            Switch::FiReg => self.fi_reg,
            Switch::FiMod => self.fi_mod,
            Switch::Ebm => self.ebm,
            Switch::Unc => self.unc,
        }
    }

    pub fn set(&mut self, s: Switch, on: bool) {
        match s {
            Switch::Sn => self.sn = on,
            Switch::Core => self.core = on,
            Switch::Mix => self.mix = on,
            Switch::FiReg => self.fi_reg = on,
            Switch::FiMod => self.fi_mod = on,
            Switch::Ebm => self.ebm = on,
            Switch::Unc => self.unc = on,
        }
    }

    pub fn with(mut self, s: &[Switch]) -> Self {
        s.iter().for_each(|&s| self.set(s, true));
        self
    }

    /// Enabled switches joined by `+`, or `none`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = Switch::ALL.iter().filter(|s| self.get(**s)).map(|s| s.name()).collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }

    /// `base` with variant, head count and flags rewritten to match the switches.
    pub fn apply(&self, base: &GemConfig) -> GemConfig {
        let mut c = base.clone();
        let extras = self.fi_reg || self.fi_mod || self.ebm || self.unc;
        c.variant = if self.mix && extras {
            Variant::Fi
        } else if self.mix {
            Variant::Mix
        } else if self.core {
            Variant::Core
        } else {
            Variant::EdlBaseline
        };
        c.heads = match (self.mix, base.heads) {
            (false, _) => 1,
            (true, k) if k > 1 => k,
            (true, _) => 3,
        };
        let f = &mut c.flags;
        f.sn = self.sn;
        f.gate = self.core;
        f.density_scaling = self.core;
        f.fi_reg = self.fi_reg;
        f.fi_mod = self.fi_mod;
        f.ebm = self.ebm;
        f.unc = self.unc;
        f.vos = self.ebm || self.unc;
        c
    }
}

/// The ten rows of the ablation matrix, in order.
pub fn ablation_cells() -> Vec<(String, Switches)> {
    use Switch::*;
    let off = Switches::default();
    let base = [Sn, Core, Mix];
    let full = [Sn, Core, Mix, FiReg, FiMod, Ebm, Unc];
    vec![
        ("t01_all_off".into(), off),
        ("t02_sn".into(), off.with(&[Sn])),
        ("t03_sn_core".into(), off.with(&[Sn, Core])),
        ("t04_mix".into(), off.with(&base)),
        ("t05_fi_reg".into(), off.with(&base).with(&[FiReg])),
        ("t06_fi_mod".into(), off.with(&base).with(&[FiMod])),
        ("t07_fi_reg_mod".into(), off.with(&base).with(&[FiReg, FiMod])),
        ("t08_ebm".into(), off.with(&base).with(&[FiReg, FiMod, Ebm])),
        ("t09_full".into(), off.with(&full)),
        ("t10_full_no_sn".into(), off.with(&[Core, Mix, FiReg, FiMod, Ebm, Unc])),
    ]
}

/// Full run description read from a JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides deep-merged over the preset named by `model.variant`.
    pub model: Value,
    pub schedule: TrainSchedule,
    pub dataset: DatasetSpec,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub eval: EvalSpec,
    pub heatmap: HeatmapSpec,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: Value::Object(Map::new()),
            schedule: TrainSchedule::default(),
            dataset: DatasetSpec::default(),
            out: None,
            seeds: vec![0],
            eval: EvalSpec::default(),
            heatmap: HeatmapSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

fn deep_merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parsed config and its verbatim text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            GemError::Config(m) => config_err(format!("{}: {m}", path.display())),
            e => e,
        })?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.model, Value::Object(_) | Value::Null) {
            return Err(config_err("`model` must be an object"));
        }
        self.schedule.validate()?;
        if self.seeds.is_empty() {
            return Err(config_err("`seeds` must list at least one seed"));
        }
        if self.heatmap.resolution < 16 {
            return Err(config_err("heatmap.resolution must be at least 16"));
        }
        if let Some(s) = self.eval.corruption_severities.iter().find(|s| **s > 5) {
            return Err(config_err(format!("eval.corruption_severities: {s} is outside 0..=5")));
        }
        Ok(())
    }

    /// Model configuration: preset for `model.variant` (default `gem_fi`)
    /// shaped to the benchmark, with the `model` object merged over it.
    pub fn model_config(&self, bench: &Benchmark) -> Result<GemConfig> {
        let patch = match &self.model {
            Value::Null => Value::Object(Map::new()),
            v => v.clone(),
        };
        let variant: Variant = match patch.get("variant") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| config_err(format!("model.variant: {e}")))?,
            None => Variant::Fi,
        };
        let mut arch = match self.dataset {
            DatasetSpec::Idx(_) => ArchConfig::mnist(),
            _ => ArchConfig::toy2d(),
        };
        arch.input_dim = bench.train.dim();
        arch.classes = bench.train.classes;
        let mut merged = serde_json::to_value(GemConfig::preset(variant, arch))?;
        deep_merge(&mut merged, &patch);
        let cfg: GemConfig = serde_json::from_value(merged).map_err(|e| config_err(format!("model: {e}")))?;
        cfg.validate()?;
        if cfg.arch.input_dim != bench.train.dim() || cfg.arch.classes != bench.train.classes {
            return Err(config_err(format!(
                "model.arch expects {}-d inputs and {} classes but the dataset has {} and {}",
                cfg.arch.input_dim,
                cfg.arch.classes,
                bench.train.dim(),
                bench.train.classes
            )));
        }
        Ok(cfg)
    }
}

/// Arguments shared by every command.
#[derive(Clone, Debug, Default)]
pub struct CommandArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Checkpoint to load instead of `<out>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
}

/// Resolved inputs of a command.
pub struct Session {
    pub config: RunConfig,
    pub text: String,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    started: Instant,
}

impl Session {
    pub fn open(args: &CommandArgs) -> Result<Self> {
        let (config, text) = RunConfig::load(&args.config)?;
        let out = args
            .out
            .clone()
            .or_else(|| config.out.clone())
            .ok_or_else(|| config_err("no output directory: pass --out or set `out`"))?;
        std::fs::create_dir_all(&out)?;
        let seeds = args.seed.map_or_else(|| config.seeds.clone(), |s| vec![s]);
        Ok(Self {
            config,
            text,
            out,
            seeds,
            started: Instant::now(),
        })
    }

    pub fn seed(&self) -> u64 {
        if self.seeds.len() > 1 {
            warn!("using the first of {} seeds", self.seeds.len());
        }
        self.seeds[0]
    }

    /// Output directory of one seed: `out` for a single seed, else `out/seed<k>`.
    pub fn seed_dir(&self, seed: u64) -> Result<PathBuf> {
        if self.seeds.len() == 1 {
            return Ok(self.out.clone());
        }
        let dir = self.out.join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn write_provenance(&self, command: &str, model: Option<&GemConfig>) -> Result<()> {
        std::fs::write(self.out.join(CONFIG_ECHO_FILE), &self.text)?;
        let manifest = Manifest {
            command: command.into(),
            argv: std::env::args().collect(),
            seeds: self.seeds.clone(),
            git_hash: git_hash(),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            config_file: CONFIG_ECHO_FILE.into(),
            model: model.cloned(),
            schedule: self.config.schedule.clone(),
            dataset: self.config.dataset.clone(),
        };
        std::fs::write(self.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Provenance record written next to every output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seeds: Vec<u64>,
    pub git_hash: String,
    pub version: String,
    pub wall_time_s: f64,
    /// Verbatim copy of the input config, relative to the manifest.
    pub config_file: String,
    /// Resolved model configuration.
    pub model: Option<GemConfig>,
    pub schedule: TrainSchedule,
    pub dataset: DatasetSpec,
}

pub fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Builds and trains a model on `bench.train`.
pub fn train_model(config: &GemConfig, schedule: &TrainSchedule, bench: &Benchmark, seed: u64) -> Result<(GemModel, History)> {
    if schedule.epochs == 0 {
        warn!("epochs = 0: the checkpoint holds an untrained model");
    }
    let mut model = GemModel::new(config.clone(), seed)?;
    let history = fit(&mut model, &bench.train, schedule, seed)?;
    Ok((model, history))
}

fn save_training(dir: &Path, model: &GemModel, history: &History) -> Result<()> {
    Checkpoint::save(model, &dir.join(CHECKPOINT_FILE))?;
    history.write_csv(&dir.join(HISTORY_FILE))
}

/// Validation split used during training, recomputed from the seed.
pub fn validation_set(bench: &Benchmark, schedule: &TrainSchedule, seed: u64) -> Dataset {
    let mut rng = substream(seed, "data/split");
    let (_, val) = stratified_split(&bench.train.y, bench.train.classes, schedule.val_fraction, &mut rng);
    bench.train.select(&val)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreAuc {
    pub kind: ScoreKind,
    pub auroc: f64,
    pub aupr: f64,
}

/// Detection of one OOD set against the ID test set.
#[derive(Clone, Debug, PartialEq)]
pub struct OodResult {
    pub name: String,
    pub scores: Vec<ScoreAuc>,
}

impl OodResult {
    pub fn get(&self, kind: ScoreKind) -> ScoreAuc {
        *self.scores.iter().find(|s| s.kind == kind).expect("every score kind is evaluated")
    }

    pub fn aleatoric(&self) -> ScoreAuc {
        self.get(ScoreKind::Maxp)
    }

    pub fn epistemic(&self) -> ScoreAuc {
        self.get(ScoreKind::Alpha0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureResult {
    pub fit: TemperatureFit,
    /// Test calibration of `p_mix` at `T = 1`.
    pub before: CalibrationReport,
    pub after: CalibrationReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub calibration: CalibrationReport,
    /// AUROC and AUPR of max probability for correct-vs-wrong; `None` without errors.
    pub misclassification: Option<(f64, f64)>,
    pub mi_single_head: bool,
    pub ood: Vec<OodResult>,
    pub skipped: Vec<String>,
    pub temperature: Option<TemperatureResult>,
    pub shifted: Vec<(u8, CalibrationReport)>,
    pub test_scores: UncertaintyScores,
    pub test_pred: Vec<usize>,
    pub ood_scores: Vec<(String, UncertaintyScores)>,
}

impl EvalReport {
    pub fn ood(&self, name: &str) -> Option<&OodResult> {
        self.ood.iter().find(|o| o.name == name)
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = vec![];
        let mut push = |dataset: &str, metric: &str, value: f64| {
            rows.push(MetricRow {
                dataset: dataset.into(),
                variant: self.variant.clone(),
                seed: self.seed,
                metric: metric.into(),
                value,
            })
        };
        let ds = self.dataset.as_str();
        let c = &self.calibration;
        for (m, v) in [("accuracy", c.accuracy), ("ece", c.ece), ("nll", c.nll), ("brier", c.brier), ("brier_x100", c.brier_x100)] {
            push(ds, m, v);
        }
        if let Some((roc, pr)) = self.misclassification {
            push(ds, "misclf_auroc", roc);
            push(ds, "misclf_aupr", pr);
        }
        push(ds, "mi_single_head", if self.mi_single_head { 1.0 } else { 0.0 });
        for o in &self.ood {
            let name = format!("{ds}/{}", o.name);
            for s in &o.scores {
                push(&name, &format!("auroc_{}", s.kind.name()), s.auroc);
                push(&name, &format!("aupr_{}", s.kind.name()), s.aupr);
            }
            for (tag, s) in [("aleatoric", o.aleatoric()), ("epistemic", o.epistemic())] {
                push(&name, &format!("auroc_{tag}"), s.auroc);
                push(&name, &format!("aupr_{tag}"), s.aupr);
            }
        }
        for s in &self.skipped {
            push(&format!("{ds}/{s}"), "skipped", 1.0);
        }
        if let Some(t) = &self.temperature {
            push(ds, "ts_temperature", t.fit.temperature);
            push(ds, "ts_val_nll_before", t.fit.nll_before);
            push(ds, "ts_val_nll_after", t.fit.nll_after);
            for (tag, r) in [("before", &t.before), ("after", &t.after)] {
                for (m, v) in [("accuracy", r.accuracy), ("ece", r.ece), ("nll", r.nll), ("brier_x100", r.brier_x100)] {
                    push(ds, &format!("ts_{tag}_{m}"), v);
                }
            }
        }
        for (sev, r) in &self.shifted {
            let name = format!("{ds}_noise{sev}");
            for (m, v) in [("accuracy", r.accuracy), ("ece", r.ece), ("nll", r.nll), ("brier_x100", r.brier_x100)] {
                push(&name, m, v);
            }
        }
        rows
    }
}

fn detection(id: &UncertaintyScores, ood: &UncertaintyScores) -> Result<Vec<ScoreAuc>> {
    ScoreKind::ALL
        .iter()
        .map(|&kind| {
            let set = ScoredEvalSet::from_groups(id.get(kind), ood.get(kind))?;
            Ok(ScoreAuc {
                kind,
                auroc: auroc(&set)?,
                aupr: aupr(&set)?,
            })
        })
        .collect()
}

/// Calibration, misclassification, OOD detection, temperature scaling and
/// corruption metrics of `model` on `bench`.
pub fn evaluate(model: &GemModel, bench: &Benchmark, spec: &EvalSpec, seed: u64, val: Option<&Dataset>) -> Result<EvalReport> {
    let calib = model.energy_calib.as_ref();
    let d = model.predict(&bench.test.x)?;
    let calibration = calibration_report(&d.p_hat, &bench.test.y)?;
    let test_scores = uncertainty_scores(&d, calib);
    let test_pred = d.p_hat.argmax_rows();
    let mis = misclassification_set(&d.p_hat, &bench.test.y)?;
    let misclassification = match (auroc(&mis), aupr(&mis)) {
        (Ok(a), Ok(b)) => Some((a, b)),
        _ => None,
    };

    let wanted: Vec<String> = match &spec.ood {
        Some(names) => names.clone(),
        None => bench.ood.iter().map(|o| o.name.clone()).collect(),
    };
    let mut ood = vec![];
    let mut ood_scores = vec![];
    let mut skipped = vec![];
    for name in wanted {
        match bench.ood_set(&name) {
            Some(set) if !set.is_empty() => {
                let s = uncertainty_scores(&model.predict(&set.x)?, calib);
                ood.push(OodResult {
                    name: name.clone(),
                    scores: detection(&test_scores, &s)?,
                });
                ood_scores.push((name, s));
            }
            _ => {
                warn!("OOD set `{name}` is not available for {}; skipped", bench.name);
                skipped.push(name);
            }
        }
    }

    let temperature = match (spec.temperature_scaling, val) {
        (true, Some(v)) if !v.is_empty() => {
            let fit = fit_temperature(&model.predict(&v.x)?.log_p_mix(), &v.y)?;
            let logits = d.log_p_mix();
            Some(TemperatureResult {
                fit,
                before: calibration_report(&softmax_t(&logits, 1.0), &bench.test.y)?,
                after: calibration_report(&softmax_t(&logits, fit.temperature), &bench.test.y)?,
            })
        }
        (true, _) => {
            warn!("temperature scaling needs a validation split; skipped");
            None
        }
        _ => None,
    };

    let mut shifted = vec![];
    for &severity in &spec.corruption_severities {
        let spec = CorruptionSpec {
            kind: CorruptionKind::GaussianNoise,
            severity,
        };
        let data = corrupt(&bench.test, spec, seed)?;
        shifted.push((severity, calibration_report(&model.predict(&data.x)?.p_hat, &data.y)?));
    }

    Ok(EvalReport {
        dataset: bench.name.clone(),
        variant: model.config.variant.name().into(),
        seed,
        calibration,
        misclassification,
        mi_single_head: test_scores.mi_single_head,
        ood,
        skipped,
        temperature,
        shifted,
        test_scores,
        test_pred,
        ood_scores,
    })
}

pub const SCORES_HEADER: &str = "index,label,pred,maxp,entropy,alpha0,mi,energy";

/// Per-sample scores; OOD rows carry label and prediction `-1` and the predicted class respectively.
pub fn write_scores_csv(path: &Path, scores: &UncertaintyScores, labels: Option<&[usize]>, pred: &[usize]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{SCORES_HEADER}")?;
    for i in 0..scores.maxp.len() {
        let label = labels.map_or("-1".to_string(), |l| l[i].to_string());
        writeln!(
            out,
            "{i},{label},{},{},{},{},{},{}",
            pred[i], scores.maxp[i], scores.entropy[i], scores.alpha0[i], scores.mi[i], scores.energy[i]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Loads `--checkpoint`, else `<out>/checkpoint.json`, else trains and saves one.
fn obtain_model(session: &Session, args: &CommandArgs, bench: &Benchmark, seed: u64, dir: &Path) -> Result<GemModel> {
    let path = args.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    if path.exists() {
        info!("loading {}", path.display());
        return Checkpoint::load(&path);
    }
    if args.checkpoint.is_some() {
        return Err(GemError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )));
    }
    info!("no checkpoint in {}; training one", dir.display());
    let cfg = session.config.model_config(bench)?;
    let (model, history) = train_model(&cfg, &session.config.schedule, bench, seed)?;
    save_training(dir, &model, &history)?;
    Ok(model)
}

pub fn cmd_train(args: &CommandArgs) -> Result<()> {
    let session = Session::open(args)?;
    let mut resolved = None;
    for &seed in &session.seeds {
        let bench = session.config.dataset.generate(seed)?;
        let cfg = session.config.model_config(&bench)?;
        info!("training {} on {} (seed {seed})", cfg.variant.name(), bench.name);
        let (model, history) = train_model(&cfg, &session.config.schedule, &bench, seed)?;
        save_training(&session.seed_dir(seed)?, &model, &history)?;
        resolved = Some(cfg);
    }
    session.write_provenance("train", resolved.as_ref())
}

pub fn cmd_eval(args: &CommandArgs) -> Result<()> {
    let session = Session::open(args)?;
    let mut resolved = None;
    for &seed in &session.seeds {
        let dir = session.seed_dir(seed)?;
        let model = eval_seed(&session, args, seed, &dir)?;
        resolved = Some(model.config);
    }
    session.write_provenance("eval", resolved.as_ref())
}

fn eval_seed(session: &Session, args: &CommandArgs, seed: u64, dir: &Path) -> Result<GemModel> {
    let bench = session.config.dataset.generate(seed)?;
    let model = obtain_model(session, args, &bench, seed, dir)?;
    let val = validation_set(&bench, &session.config.schedule, seed);
    let report = evaluate(&model, &bench, &session.config.eval, seed, Some(&val))?;
    write_metrics_csv(&report.rows(), &dir.join(METRICS_FILE))?;
    if session.config.eval.dump_scores {
        write_scores_csv(
            &dir.join("scores_test.csv"),
            &report.test_scores,
            Some(&bench.test.y),
            &report.test_pred,
        )?;
        for (name, s) in &report.ood_scores {
            let set = bench.ood_set(name).expect("scored sets exist");
            let pred = model.predict(&set.x)?.p_hat.argmax_rows();
            write_scores_csv(&dir.join(format!("scores_{name}.csv")), s, None, &pred)?;
        }
    }
    Ok(model)
}

/// Score values on a regular grid of cell centers.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub score: ScoreKind,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: usize,
    /// Row-major with `y` outer: `values[j * resolution + i]`.
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn x_at(&self, i: usize) -> f64 {
        let (a, b) = self.x_range;
        a + (i as f64 + 0.5) * (b - a) / self.resolution as f64
    }

    pub fn y_at(&self, j: usize) -> f64 {
        let (a, b) = self.y_range;
        a + (j as f64 + 0.5) * (b - a) / self.resolution as f64
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.resolution + i]
    }

    pub fn points(&self) -> Tensor {
        let n = self.resolution;
        let mut data = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                data.push(self.x_at(i));
                data.push(self.y_at(j));
            }
        }
        Tensor::new(n * n, 2, data).expect("grid shape")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "x,y,value")?;
        for j in 0..self.resolution {
            for i in 0..self.resolution {
                writeln!(out, "{},{},{}", self.x_at(i), self.y_at(j), self.value(i, j))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Color range: `[0, ln C]` for entropy, the grid extremes otherwise.
    fn span(&self, classes: usize) -> (f64, f64) {
        if self.score == ScoreKind::Entropy {
            return (0.0, (classes as f64).ln());
        }
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo, lo + 1.0)
        }
    }

    /// Raster SVG, brighter for higher values, with optional labelled points on top.
    pub fn to_svg(&self, classes: usize, points: Option<&Dataset>, max_points: usize) -> String {
        const SIZE: f64 = 480.0;
        const MARGIN: f64 = 40.0;
        let n = self.resolution;
        let cell = SIZE / n as f64;
        let (vlo, vhi) = self.span(classes);
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * SIZE;
        let py = |y: f64| MARGIN + (y1 - y) / (y1 - y0) * SIZE;
        let total = SIZE + 2.0 * MARGIN;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
        );
        let _ = writeln!(s, r#"<rect width="{total}" height="{total}" fill="white"/>"#);
        let _ = writeln!(s, r#"<g shape-rendering="crispEdges">"#);
        for j in 0..n {
            for i in 0..n {
                let t = ((self.value(i, j) - vlo) / (vhi - vlo)).clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                    MARGIN + i as f64 * cell,
                    MARGIN + (n - 1 - j) as f64 * cell,
                    cell + 0.01,
                    cell + 0.01,
                    colormap(t)
                );
            }
        }
        let _ = writeln!(s, "</g>");
        if let Some(d) = points {
            const PALETTE: [&str; 10] = [
                "#e41a1c", "#377eb8", "#ff7f00", "#4daf4a", "#984ea3", "#a65628", "#f781bf", "#999999", "#66c2a5", "#ffd92f",
            ];
            let stride = d.len().div_ceil(max_points.max(1)).max(1);
            let _ = writeln!(s, r#"<g stroke="black" stroke-width="0.4">"#);
            for (r, y) in d.x.iter_rows().zip(&d.y).step_by(stride) {
                if !(x0..=x1).contains(&r[0]) || !(y0..=y1).contains(&r[1]) {
                    continue;
                }
                let color = PALETTE.get(*y).copied().unwrap_or("#ffffff");
                let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="2" fill="{color}"/>"#, px(r[0]), py(r[1]));
            }
            let _ = writeln!(s, "</g>");
        }
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{} [{:.4}, {:.4}]</text>"#,
            self.score.name(),
            vlo,
            vhi
        );
        let axis = MARGIN + SIZE + 16.0;
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="{axis}" font-family="sans-serif" font-size="11">x: {x0:.2} .. {x1:.2}, y: {y0:.2} .. {y1:.2}</text>"#
        );
        s.push_str("</svg>\n");
        s
    }
}

/// Five-stop approximation of a perceptually ordered dark-to-bright map.
pub fn colormap(t: f64) -> String {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let x = t.clamp(0.0, 1.0) * 4.0;
    let k = (x.floor() as usize).min(3);
    let f = x - k as f64;
    let c: Vec<u8> = (0..3).map(|i| (STOPS[k][i] + f * (STOPS[k + 1][i] - STOPS[k][i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Bounding box of `sets`, padded by `pad` on each side.
pub fn bounding_box(sets: &[&Dataset], pad: f64) -> ((f64, f64), (f64, f64)) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for d in sets {
        for r in d.x.iter_rows() {
            for a in 0..2 {
                lo[a] = lo[a].min(r[a]);
                hi[a] = hi[a].max(r[a]);
            }
        }
    }
    ((lo[0] - pad, hi[0] + pad), (lo[1] - pad, hi[1] + pad))
}

/// Evaluates the frozen model over a `resolution × resolution` grid.
pub fn heatmap_grid(model: &GemModel, score: ScoreKind, x_range: (f64, f64), y_range: (f64, f64), resolution: usize) -> Result<HeatmapGrid> {
    if model.config.arch.input_dim != 2 {
        return Err(contract(format!("heatmaps need a 2-D input model, got {}-D", model.config.arch.input_dim)));
    }
    if resolution < 16 {
        return Err(contract("heatmap resolution must be at least 16"));
    }
    if !(x_range.0 < x_range.1 && y_range.0 < y_range.1) {
        return Err(contract("heatmap ranges must be increasing"));
    }
    let mut grid = HeatmapGrid {
        score,
        x_range,
        y_range,
        resolution,
        values: vec![],
    };
    let pts = grid.points();
    const CHUNK: usize = 4096;
    let mut values = Vec::with_capacity(pts.rows());
    for start in (0..pts.rows()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(pts.rows())).collect();
        let d = model.predict(&pts.select_rows(&idx))?;
        values.extend_from_slice(uncertainty_scores(&d, model.energy_calib.as_ref()).get(score));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GemError::NonFinite { op: "heatmap_grid" });
    }
    grid.values = values;
    Ok(grid)
}

pub fn cmd_heatmap(args: &CommandArgs) -> Result<()> {
    let session = Session::open(args)?;
    let seed = session.seed();
    let bench = session.config.dataset.generate(seed)?;
    let model = obtain_model(&session, args, &bench, seed, &session.out)?;
    let spec = &session.config.heatmap;
    if model.config.arch.input_dim != 2 {
        return Err(contract(format!("heatmaps need a 2-D input model, got {}-D", model.config.arch.input_dim)));
    }
    let mut sets = vec![&bench.train];
    sets.extend(bench.ood.iter());
    let (bx, by) = bounding_box(&sets, 0.5);
    let grid = heatmap_grid(&model, spec.score, spec.x_range.unwrap_or(bx), spec.y_range.unwrap_or(by), spec.resolution)?;
    grid.write_csv(&session.out.join(GRID_FILE))?;
    let points = spec.show_points.then_some(&bench.train);
    std::fs::write(session.out.join(SVG_FILE), grid.to_svg(model.classes(), points, spec.max_points))?;
    session.write_provenance("heatmap", Some(&model.config))
}

/// One ablation cell: a name and its model configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub name: String,
    pub switches: Switches,
    pub config: GemConfig,
}

/// Cells of a sweep over `base`: the ablation matrix, the cross-product of
/// `axes` (other switches as in `base`), or `base` alone.
pub fn sweep_cells(spec: &SweepSpec, base: &GemConfig) -> Vec<SweepCell> {
    if spec.ablation {
        return ablation_cells()
            .into_iter()
            .map(|(name, sw)| SweepCell {
                name,
                switches: sw,
                config: sw.apply(base),
            })
            .collect();
    }
    if spec.axes.is_empty() {
        return vec![SweepCell {
            name: "base".into(),
            switches: Switches::of(base),
            config: base.clone(),
        }];
    }
    let own = Switches::of(base);
    (0..1usize << spec.axes.len())
        .map(|mask| {
            let mut sw = own;
            let mut parts = vec![];
            for (b, &axis) in spec.axes.iter().enumerate() {
                let on = mask >> b & 1 == 1;
                sw.set(axis, on);
                parts.push(format!("{}{}", axis.name(), u8::from(on)));
            }
            SweepCell {
                name: parts.join("_"),
                switches: sw,
                config: sw.apply(base),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: String,
    pub switches: String,
    pub variant: String,
    pub seed: u64,
    pub status: String,
    /// Values in the order of [`sweep_columns`].
    pub values: Vec<f64>,
}

/// Metric columns of the sweep CSV for the given OOD set names.
pub fn sweep_columns(ood: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = ["accuracy", "ece", "nll", "brier_x100"].iter().map(|s| s.to_string()).collect();
    for n in ood {
        for m in ["auroc_alea", "aupr_alea", "auroc_epis", "aupr_epis"] {
            cols.push(format!("{m}_{n}"));
        }
    }
    cols
}

fn sweep_values(report: &EvalReport, ood: &[String]) -> Vec<f64> {
    let c = &report.calibration;
    let mut v = vec![c.accuracy, c.ece, c.nll, c.brier_x100];
    for n in ood {
        match report.ood(n) {
            Some(o) => v.extend([o.aleatoric().auroc, o.aleatoric().aupr, o.epistemic().auroc, o.epistemic().aupr]),
            None => v.extend([f64::NAN; 4]),
        }
    }
    v
}

pub fn write_sweep_csv(path: &Path, ood: &[String], rows: &[SweepRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "cell,switches,variant,seed,status,{}", sweep_columns(ood).join(","))?;
    for r in rows {
        let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},{},{},{},{}", r.cell, r.switches, r.variant, r.seed, r.status, vals.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Trains and evaluates one cell for one seed, writing its artifacts under `dir`.
pub fn run_cell(cell: &SweepCell, config: &RunConfig, seed: u64, dir: &Path, ood: &[String]) -> Result<SweepRow> {
    std::fs::create_dir_all(dir)?;
    let bench = config.dataset.generate(seed)?;
    let mut row = SweepRow {
        cell: cell.name.clone(),
        switches: cell.switches.label(),
        variant: cell.config.variant.name().into(),
        seed,
        status: "ok".into(),
        values: vec![f64::NAN; sweep_columns(ood).len()],
    };
    match train_model(&cell.config, &config.schedule, &bench, seed) {
        Ok((model, history)) => {
            save_training(dir, &model, &history)?;
            let val = validation_set(&bench, &config.schedule, seed);
            let report = evaluate(&model, &bench, &config.eval, seed, Some(&val))?;
            write_metrics_csv(&report.rows(), &dir.join(METRICS_FILE))?;
            row.values = sweep_values(&report, ood);
        }
        Err(GemError::Diverged { epoch, step, detail }) => {
            warn!("cell {} seed {seed} diverged at epoch {epoch}, step {step}: {detail}", cell.name);
            row.status = "diverged".into();
        }
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Runs every cell for every seed on `workers` threads; rows come back in
/// cell-major, seed-minor order regardless of scheduling.
pub fn run_sweep(config: &RunConfig, cells: &[SweepCell], seeds: &[u64], out: &Path, workers: usize) -> Result<(Vec<String>, Vec<SweepRow>)> {
    let probe = config.dataset.generate(seeds[0])?;
    let ood: Vec<String> = match &config.eval.ood {
        Some(names) => names.clone(),
        None => probe.ood.iter().map(|o| o.name.clone()).collect(),
    };
    let jobs: Vec<(usize, &SweepCell, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .enumerate()
        .map(|(i, (c, s))| (i, c, s))
        .collect();
    let workers = match workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(jobs.len())
    .max(1);
    let run = |job: &(usize, &SweepCell, u64)| -> Result<SweepRow> {
        let (_, cell, seed) = *job;
        info!("sweep cell {} seed {seed}", cell.name);
        run_cell(cell, config, seed, &out.join(&cell.name).join(format!("seed{seed}")), &ood)
    };
    let mut results: Vec<(usize, Result<SweepRow>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let mine: Vec<_> = jobs.iter().skip(w).step_by(workers).collect();
                let run = &run;
                scope.spawn(move || mine.into_iter().map(|j| (j.0, run(j))).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    results.sort_by_key(|r| r.0);
    let rows = results.into_iter().map(|(_, r)| r).collect::<Result<Vec<_>>>()?;
    Ok((ood, rows))
}

pub fn cmd_sweep(args: &CommandArgs) -> Result<()> {
    let session = Session::open(args)?;
    let probe = session.config.dataset.generate(session.seed())?;
    let base = session.config.model_config(&probe)?;
    let cells = sweep_cells(&session.config.sweep, &base);
    let (ood, rows) = run_sweep(&session.config, &cells, &session.seeds, &session.out, session.config.sweep.workers)?;
    write_sweep_csv(&session.out.join(SWEEP_FILE), &ood, &rows)?;
    session.write_provenance("sweep", Some(&base))?;
    match rows.iter().find(|r| r.status != "ok") {
        Some(r) => Err(GemError::Diverged {
            epoch: 0,
            step: 0,
            detail: format!("sweep cell {} seed {} diverged (see {SWEEP_FILE})", r.cell, r.seed),
        }),
        None => Ok(()),
    }
}

/// Process exit code for a command result: 0 success, 3 numerical failure, 2 otherwise.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(GemError::Diverged { .. } | GemError::NonFinite { .. }) => 3,
        Err(_) => 2,
    }
}
