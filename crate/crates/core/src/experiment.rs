//! Reproducible runs: flat `key = value` configs, manifests, the artifact
//! directory layout, and the drivers behind each CLI command.
//!
//! Config precedence is defaults, then the config file, then explicit
//! overrides. Every command that writes artifacts writes `manifest.txt`
//! first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use thiserror::Error;

use crate::data::{
    leave_one_out_split, load_interactions, load_pivots, synth_generate, Archetype, BehaviorSequence, DataError,
    InteractionLog, PivotLabels, SyntheticSpec, WindowMode, DEFAULT_MIN_COUNT,
};
use crate::eval::{evaluate, route_recovery, EvalConfig, EvalError, EvalReport, RouteRecovery};
use crate::model::{write_attention_csv, write_routes_csv, ModelConfig, ModelError, RetrModel};
use crate::parallel::Parallelism;
use crate::rng::{stream_rng, Stream};
use crate::train::{train, EpochRecord, StopReason, TrainConfig, TrainError};

pub const BUILD_ID: &str = concat!("retr-core ", env!("CARGO_PKG_VERSION"));

/// Model keys that may differ from a checkpoint's at evaluation time.
pub const RUNTIME_MODEL_KEYS: [&str; 2] = ["routing", "inference_routing"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ExperimentError {
    /// 2 for invalid input or configuration, 1 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Usage(_)
            | ExperimentError::Data(DataError::InvalidSpec(_))
            | ExperimentError::Model(ModelError::Config(_))
            | ExperimentError::Train(TrainError::Config(_))
            | ExperimentError::Eval(EvalError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn usage(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Usage(msg.into())
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    parse_entries(&text)
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| usage(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parallelism_name(p: Parallelism) -> &'static str {
    match p {
        Parallelism::Sequential => "sequential",
        Parallelism::Rayon => "rayon",
    }
}

fn window_name(w: WindowMode) -> &'static str {
    match w {
        WindowMode::MostRecent => "most-recent",
        WindowMode::All => "all",
    }
}

/// Keys a manifest carries that are descriptive only.
const MANIFEST_ONLY: [&str; 4] = ["command", "build", "artifacts", "checkpoint"];

/// Everything needed to load data, train, and evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub min_count: usize,
    pub windows: WindowMode,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub pivots: Option<PathBuf>,
    /// Model keys set by a config file or override, in order.
    pub explicit_model_keys: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            min_count: DEFAULT_MIN_COUNT,
            windows: WindowMode::MostRecent,
            seed: 0,
            data: None,
            pivots: None,
            explicit_model_keys: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, entries: &[(K, V)]) -> Result<()> {
        for (k, v) in entries {
            self.apply_one(k.as_ref(), v.as_ref())?;
        }
        Ok(())
    }

    fn apply_one(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "seed" => {
                self.seed = parse(k, v)?;
                self.train.seed = self.seed;
                self.eval.seed = self.seed;
            }
            "data" => self.data = Some(PathBuf::from(v)),
            "pivots" => self.pivots = Some(PathBuf::from(v)),
            "min_count" => self.min_count = parse(k, v)?,
            "windows" => {
                self.windows = match v {
                    "most-recent" => WindowMode::MostRecent,
                    "all" => WindowMode::All,
                    _ => return Err(usage(format!("windows: expected most-recent or all, got {v:?}"))),
                }
            }
            "learning_rate" => self.train.learning_rate = parse(k, v)?,
            "batch_size" => self.train.batch_size = parse(k, v)?,
            "max_epochs" => self.train.max_epochs = parse(k, v)?,
            "patience" => self.train.patience = parse(k, v)?,
            "beta1" => self.train.beta1 = parse(k, v)?,
            "beta2" => self.train.beta2 = parse(k, v)?,
            "epsilon" => self.train.epsilon = parse(k, v)?,
            "negatives" => self.eval.negatives = parse(k, v)?,
            "k" => self.eval.ks = parse_list(k, v)?,
            "parallelism" => {
                let p = match v {
                    "sequential" => Parallelism::Sequential,
                    "rayon" => Parallelism::Rayon,
                    _ => return Err(usage(format!("parallelism: expected sequential or rayon, got {v:?}"))),
                };
                self.train.parallelism = p;
                self.eval.parallelism = p;
            }
            k if MANIFEST_ONLY.contains(&k) => {}
            _ => {
                let unknown = self.model.apply_entries([(k, v)]).map_err(|e| usage(e.to_string()))?;
                if !unknown.is_empty() {
                    return Err(usage(format!("unknown config key {k:?}")));
                }
                if !self.explicit_model_keys.iter().any(|e| e == k) {
                    self.explicit_model_keys.push(k.to_string());
                }
            }
        }
        Ok(())
    }

    /// Flat entries covering every setting; `apply` on them reproduces `self`.
    pub fn to_entries(&self) -> IndexMap<String, String> {
        let mut m = IndexMap::new();
        m.insert("seed".into(), self.seed.to_string());
        if let Some(d) = &self.data {
            m.insert("data".into(), d.display().to_string());
        }
        if let Some(p) = &self.pivots {
            m.insert("pivots".into(), p.display().to_string());
        }
        m.insert("min_count".into(), self.min_count.to_string());
        m.insert("windows".into(), window_name(self.windows).into());
        m.extend(self.model.to_entries());
        let t = &self.train;
        m.insert("learning_rate".into(), t.learning_rate.to_string());
        m.insert("batch_size".into(), t.batch_size.to_string());
        m.insert("max_epochs".into(), t.max_epochs.to_string());
        m.insert("patience".into(), t.patience.to_string());
        m.insert("beta1".into(), t.beta1.to_string());
        m.insert("beta2".into(), t.beta2.to_string());
        m.insert("epsilon".into(), t.epsilon.to_string());
        m.insert("negatives".into(), self.eval.negatives.to_string());
        let ks: Vec<String> = self.eval.ks.iter().map(usize::to_string).collect();
        m.insert("k".into(), ks.join(","));
        m.insert("parallelism".into(), parallelism_name(self.train.parallelism).into());
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        if self.min_count == 0 {
            return Err(usage("min_count must be at least 1"));
        }
        Ok(())
    }
}

fn synth_mix(v: &str) -> Result<[f64; 3]> {
    if v == "all" {
        return Ok([1.0; 3]);
    }
    if let Some(a) = Archetype::parse(v) {
        return Ok(SyntheticSpec::default().only(a).mix);
    }
    let parts: Vec<f64> = v
        .split(',')
        .map(|s| parse("mix", s.trim()))
        .collect::<Result<_>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| usage(format!("mix: expected three weights, got {v:?}")))
}

/// Applies synthetic generator keys.
pub fn apply_synth_entries<K: AsRef<str>, V: AsRef<str>>(spec: &mut SyntheticSpec, entries: &[(K, V)]) -> Result<()> {
    for (k, v) in entries {
        let (k, v) = (k.as_ref(), v.as_ref());
        match k {
            "users" => spec.users = parse(k, v)?,
            "items" => spec.items = parse(k, v)?,
            "categories" => spec.categories = parse(k, v)?,
            "min_len" => spec.min_len = parse(k, v)?,
            "max_len" => spec.max_len = parse(k, v)?,
            "archetype" | "mix" => spec.mix = synth_mix(v)?,
            "noise_rate" => spec.noise_rate = parse(k, v)?,
            "drift_fraction" => spec.drift_fraction = parse(k, v)?,
            "max_stride" => spec.max_stride = parse(k, v)?,
            "seed" => spec.seed = parse(k, v)?,
            k if MANIFEST_ONLY.contains(&k) => {}
            _ => return Err(usage(format!("unknown synth key {k:?}"))),
        }
    }
    Ok(())
}

pub fn synth_entries(spec: &SyntheticSpec) -> IndexMap<String, String> {
    let mut m = IndexMap::new();
    m.insert("seed".into(), spec.seed.to_string());
    m.insert("users".into(), spec.users.to_string());
    m.insert("items".into(), spec.items.to_string());
    m.insert("categories".into(), spec.categories.to_string());
    m.insert("min_len".into(), spec.min_len.to_string());
    m.insert("max_len".into(), spec.max_len.to_string());
    let mix: Vec<String> = spec.mix.iter().map(f64::to_string).collect();
    m.insert("mix".into(), mix.join(","));
    m.insert("noise_rate".into(), spec.noise_rate.to_string());
    m.insert("drift_fraction".into(), spec.drift_fraction.to_string());
    m.insert("max_stride".into(), spec.max_stride.to_string());
    m
}

/// Fixed file names inside an artifact directory.
#[derive(Debug, Clone)]
pub struct ArtifactDir {
    root: PathBuf,
}

impl ArtifactDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_at(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }

    pub fn epochs(&self) -> PathBuf {
        self.root.join("epochs.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }

    pub fn routes(&self) -> PathBuf {
        self.root.join("routes")
    }

    pub fn interactions(&self) -> PathBuf {
        self.root.join("interactions.tsv")
    }

    pub fn pivots(&self) -> PathBuf {
        self.root.join("pivots.tsv")
    }
}

/// What a run was asked to do, written before it does anything.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub command: String,
    pub artifacts: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub config: IndexMap<String, String>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "build = {}", build_id());
        let _ = writeln!(s, "artifacts = {}", self.artifacts.display());
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", c.display());
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(io_at(path))
    }
}

/// Crate version plus the build switches that can change numeric results.
pub fn build_id() -> String {
    format!(
        "{BUILD_ID} parallel={} debug={}",
        cfg!(feature = "parallel"),
        cfg!(debug_assertions)
    )
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_at(path))?))
}

fn load_log(cfg: &RunConfig) -> Result<InteractionLog> {
    let path = cfg.data.as_ref().ok_or_else(|| usage("--data is required"))?;
    if !path.exists() {
        return Err(usage(format!("dataset not found: {}", path.display())));
    }
    Ok(load_interactions(path, cfg.min_count)?)
}

fn load_optional_pivots(cfg: &RunConfig) -> Result<Option<PivotLabels>> {
    match &cfg.pivots {
        None => Ok(None),
        Some(p) if !p.exists() => Err(usage(format!("pivot labels not found: {}", p.display()))),
        Some(p) => Ok(Some(load_pivots(p)?)),
    }
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub users: usize,
    pub records: usize,
}

pub fn run_synth(spec: &SyntheticSpec, out: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let dir = ArtifactDir::create(out)?;
    let mut config = synth_entries(spec);
    config.insert("data".into(), dir.interactions().display().to_string());
    config.insert("pivots".into(), dir.pivots().display().to_string());
    Manifest {
        command: "synth".into(),
        artifacts: out.to_path_buf(),
        checkpoint: None,
        config,
    }
    .write(&dir.manifest())?;
    let data = synth_generate(spec)?;
    data.write(&dir.interactions(), &dir.pivots())?;
    Ok(SynthSummary {
        users: data.users.len(),
        records: data.users.iter().map(|u| u.items.len()).sum(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop: StopReason,
    pub test: EvalReport,
}

fn stop_text(stop: &StopReason) -> String {
    match stop {
        StopReason::MaxEpochs => "max-epochs".into(),
        StopReason::EarlyStop => "early-stop".into(),
        StopReason::Diverged { epoch, message } => format!("diverged at epoch {epoch}: {message}"),
    }
}

/// Load, split, train, checkpoint the best model, and evaluate it on the
/// test split. Progress lines go to `progress`.
pub fn run_train(cfg: &RunConfig, out: &Path, progress: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let log = load_log(cfg)?;
    let pivots = load_optional_pivots(cfg)?;
    let mut resolved = cfg.clone();
    resolved.model.num_items = log.num_items();
    resolved.model.validate()?;

    let dir = ArtifactDir::create(out)?;
    Manifest {
        command: "train".into(),
        artifacts: out.to_path_buf(),
        checkpoint: Some(dir.checkpoint()),
        config: resolved.to_entries(),
    }
    .write(&dir.manifest())?;

    let split = leave_one_out_split(&log, resolved.model.max_len, resolved.windows);
    let mut model = RetrModel::<f32>::new(resolved.model.clone(), resolved.seed)?;
    let layers = resolved.model.blocks;
    let epochs_path = dir.epochs();
    let mut epochs_csv = create(&epochs_path)?;
    writeln!(epochs_csv, "{}", EpochRecord::csv_header(layers)).map_err(io_at(&epochs_path))?;
    epochs_csv.flush().map_err(io_at(&epochs_path))?;
    let mut write_err = None;
    let report = train(&mut model, &split, &log, &resolved.train, &resolved.eval, |r| {
        let _ = writeln!(
            progress,
            "epoch {:>3}  loss {:.5}  val mrr {:.4}  hr@10 {:.4}",
            r.epoch, r.train_loss, r.val_mrr, r.val_hr10
        );
        let res = writeln!(epochs_csv, "{}", r.csv_row()).and_then(|_| epochs_csv.flush());
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_at(&epochs_path)(e));
    }
    drop(epochs_csv);

    let mut extra = IndexMap::new();
    extra.insert("seed".into(), resolved.seed.to_string());
    extra.insert("min_count".into(), resolved.min_count.to_string());
    extra.insert("windows".into(), window_name(resolved.windows).into());
    extra.insert("best_epoch".into(), report.best_epoch.to_string());
    extra.insert("best_val_mrr".into(), report.best_val_mrr.to_string());
    extra.insert("stop".into(), stop_text(&report.stop));
    extra.insert("build".into(), build_id());
    let ck = dir.checkpoint();
    let mut w = create(&ck)?;
    model.write_checkpoint(&mut w, &extra).map_err(io_at(&ck))?;
    w.flush().map_err(io_at(&ck))?;

    let test = evaluate(&model, &split.test, &log, &resolved.eval, pivots.as_ref())?;
    write_report(&dir.eval(), &test)?;
    let _ = writeln!(
        progress,
        "stopped: {} (best epoch {})",
        stop_text(&report.stop),
        report.best_epoch
    );
    Ok(TrainSummary {
        epochs: report.epochs,
        best_epoch: report.best_epoch,
        stop: report.stop,
        test,
    })
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = create(path)?;
    report.write_csv(&mut w).map_err(io_at(path))?;
    w.flush().map_err(io_at(path))
}

/// A checkpoint plus the data settings it was trained with.
pub struct LoadedCheckpoint {
    pub model: RetrModel<f32>,
    pub metadata: IndexMap<String, String>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    if !path.exists() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    let file = File::open(path).map_err(io_at(path))?;
    let (model, metadata) = RetrModel::<f32>::read_checkpoint(BufReader::new(file))?;
    Ok(LoadedCheckpoint { model, metadata })
}

/// Reconciles `cfg` with a checkpoint. Explicitly set model keys must match
/// the checkpoint except the runtime switches, which are applied. Data
/// settings the user left alone come from the checkpoint.
pub fn reconcile(cfg: &RunConfig, loaded: &mut LoadedCheckpoint, user_keys: &[String]) -> Result<RunConfig> {
    let stored = loaded.model.config().to_entries();
    let wanted = cfg.model.to_entries();
    let mut diffs = Vec::new();
    for k in &cfg.explicit_model_keys {
        if RUNTIME_MODEL_KEYS.contains(&k.as_str()) {
            continue;
        }
        if stored.get(k) != wanted.get(k) {
            diffs.push(format!(
                "{k} (config {}, checkpoint {})",
                wanted.get(k).map_or("-", String::as_str),
                stored.get(k).map_or("-", String::as_str)
            ));
        }
    }
    if !diffs.is_empty() {
        return Err(usage(format!("config does not match checkpoint: {}", diffs.join(", "))));
    }
    let mut out = cfg.clone();
    for k in &cfg.explicit_model_keys {
        match k.as_str() {
            "routing" => loaded.model.set_routing(cfg.model.routing),
            "inference_routing" => loaded.model.set_inference_routing(cfg.model.inference_routing),
            _ => {}
        }
    }
    out.model = loaded.model.config().clone();
    for key in ["min_count", "windows"] {
        if !user_keys.iter().any(|k| k == key) {
            if let Some(v) = loaded.metadata.get(key) {
                out.apply_one(key, v)?;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitPart {
    #[default]
    Test,
    Validation,
    Train,
}

impl std::str::FromStr for SplitPart {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "test" => Ok(Self::Test),
            "validation" => Ok(Self::Validation),
            "train" => Ok(Self::Train),
            _ => Err(format!("expected test, validation or train, got {s:?}")),
        }
    }
}

pub struct EvalRequest<'a> {
    pub config: &'a RunConfig,
    /// Keys the user set explicitly, model or not.
    pub user_keys: &'a [String],
    pub checkpoint: &'a Path,
    pub out: &'a Path,
    pub split: SplitPart,
    pub export_routes: bool,
    /// Raw user ids whose routes to export; all evaluated users if empty.
    pub users: &'a [String],
}

fn checked_log(cfg: &RunConfig, model: &RetrModel<f32>) -> Result<InteractionLog> {
    let log = load_log(cfg)?;
    if log.num_items() != model.config().num_items {
        return Err(usage(format!(
            "config does not match checkpoint: num_items (data {}, checkpoint {})",
            log.num_items(),
            model.config().num_items
        )));
    }
    Ok(log)
}

pub fn run_eval(req: &EvalRequest<'_>) -> Result<EvalReport> {
    req.config.validate()?;
    let mut loaded = load_checkpoint(req.checkpoint)?;
    let cfg = reconcile(req.config, &mut loaded, req.user_keys)?;
    let log = checked_log(&cfg, &loaded.model)?;
    let pivots = load_optional_pivots(&cfg)?;
    let dir = ArtifactDir::create(req.out)?;
    Manifest {
        command: "eval".into(),
        artifacts: req.out.to_path_buf(),
        checkpoint: Some(req.checkpoint.to_path_buf()),
        config: cfg.to_entries(),
    }
    .write(&dir.manifest())?;

    let split = leave_one_out_split(&log, cfg.model.max_len, cfg.windows);
    let seqs = match req.split {
        SplitPart::Test => &split.test,
        SplitPart::Validation => &split.validation,
        SplitPart::Train => &split.train,
    };
    let report = evaluate(&loaded.model, seqs, &log, &cfg.eval, pivots.as_ref())?;
    write_report(&dir.eval(), &report)?;
    if req.export_routes {
        let routes = dir.routes();
        fs::create_dir_all(&routes).map_err(io_at(&routes))?;
        let chosen = select_sequences(&log, seqs, req.users)?;
        for seq in chosen {
            let trace = infer_for_user(&loaded.model, &cfg, seq)?;
            let raw = log.user_raw(seq.user);
            let p = routes.join(format!("user_{raw}_routes.csv"));
            let mut w = create(&p)?;
            write_routes_csv(&mut w, &trace).map_err(io_at(&p))?;
            w.flush().map_err(io_at(&p))?;
            let p = routes.join(format!("user_{raw}_attention.csv"));
            let mut w = create(&p)?;
            write_attention_csv(&mut w, &trace).map_err(io_at(&p))?;
            w.flush().map_err(io_at(&p))?;
        }
    }
    Ok(report)
}

fn select_sequences<'s>(
    log: &InteractionLog,
    seqs: &'s [BehaviorSequence],
    users: &[String],
) -> Result<Vec<&'s BehaviorSequence>> {
    if users.is_empty() {
        return Ok(seqs.iter().collect());
    }
    let by_user: BTreeMap<usize, &BehaviorSequence> = seqs.iter().rev().map(|s| (s.user, s)).collect();
    users
        .iter()
        .map(|raw| {
            log.user_index(raw)
                .and_then(|u| by_user.get(&u).copied())
                .ok_or_else(|| usage(format!("unknown user id {raw:?}")))
        })
        .collect()
}

fn infer_for_user(
    model: &RetrModel<f32>,
    cfg: &RunConfig,
    seq: &BehaviorSequence,
) -> Result<crate::model::ForwardTrace<f32>> {
    let mut rng = stream_rng(cfg.eval.seed, Stream::Gumbel, seq.user as u64, u64::MAX);
    Ok(model.infer(seq, &mut rng)?)
}

/// Hard routes of one user's test window.
#[derive(Debug, Clone)]
pub struct UserRoutes {
    pub user: String,
    /// Raw item ids.
    pub items: Vec<String>,
    /// `routes[l][t]` for valid positions `t`.
    pub routes: Vec<Vec<bool>>,
    pub pivotal: Option<Vec<bool>>,
    pub recovery: Option<RouteRecovery>,
}

impl UserRoutes {
    pub fn render(&self) -> String {
        let row = |name: &str, cells: Vec<String>| format!("{name}\t{}\n", cells.join("\t"));
        let bits = |v: &[bool]| v.iter().map(|&b| u8::from(b).to_string()).collect();
        let mut s = format!("user\t{}\n", self.user);
        s += &row("item", self.items.clone());
        if let Some(p) = &self.pivotal {
            s += &row("pivotal", bits(p));
        }
        for (l, r) in self.routes.iter().enumerate() {
            s += &row(&format!("layer{}", l + 1), bits(r));
        }
        if let Some(rec) = &self.recovery {
            let _ = writeln!(
                s,
                "agreement\t{:.6}\npivotal_kept\t{}/{}\nother_kept\t{}/{}",
                rec.agreement(),
                rec.pivotal_kept,
                rec.pivotal_total,
                rec.other_kept,
                rec.other_total
            );
        }
        s
    }
}

pub fn inspect_routes(cfg: &RunConfig, user_keys: &[String], checkpoint: &Path, users: &[String]) -> Result<Vec<UserRoutes>> {
    if users.is_empty() {
        return Err(usage("--users is required"));
    }
    let mut loaded = load_checkpoint(checkpoint)?;
    let cfg = reconcile(cfg, &mut loaded, user_keys)?;
    let log = checked_log(&cfg, &loaded.model)?;
    let pivots = load_optional_pivots(&cfg)?;
    let split = leave_one_out_split(&log, cfg.model.max_len, cfg.windows);
    let chosen = select_sequences(&log, &split.test, users)?;
    chosen
        .into_iter()
        .map(|seq| {
            let trace = infer_for_user(&loaded.model, &cfg, seq)?;
            let off = seq.offset();
            let routes = trace
                .routes
                .iter()
                .map(|r| r.hard[off..].iter().map(|&h| h == 1.0).collect())
                .collect();
            let mask = pivots.as_ref().and_then(|p| p.mask_for(&log, seq));
            let recovery = mask.as_ref().map(|m| route_recovery(&trace, m));
            Ok(UserRoutes {
                user: log.user_raw(seq.user).to_string(),
                items: seq.items[off..].iter().map(|&i| log.item_raw(i).to_string()).collect(),
                routes,
                pivotal: mask.map(|m| m[off..].to_vec()),
                recovery,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply(&[("dim", "32"), ("seed", "7"), ("k", "5,10"), ("windows", "all")])
            .unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.eval.ks, vec![5, 10]);
        let text: String = cfg.to_entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let mut back = RunConfig::default();
        back.apply(&parse_entries(&text).unwrap()).unwrap();
        back.explicit_model_keys = cfg.explicit_model_keys.clone();
        assert_eq!(back.to_entries(), cfg.to_entries());
    }

    #[test]
    fn later_entries_win() {
        let mut cfg = RunConfig::default();
        cfg.apply(&[("tau", "2")]).unwrap();
        cfg.apply(&[("tau", "0.8")]).unwrap();
        assert_eq!(cfg.model.tau, 0.8);
        assert_eq!(cfg.explicit_model_keys, vec!["tau".to_string()]);
    }

    #[test]
    fn bad_entries_are_usage_errors() {
        let mut cfg = RunConfig::default();
        for (k, v) in [("nope", "1"), ("dim", "x"), ("routing", "maybe"), ("windows", "some")] {
            let e = cfg.apply(&[(k, v)]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{k}");
        }
        assert!(parse_entries("a = 1\n# c\n\nb=2").is_ok());
        assert_eq!(parse_entries("novalue").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn manifest_is_applicable_as_config() {
        let mut cfg = RunConfig::default();
        cfg.apply(&[("heads", "2"), ("data", "x.tsv")]).unwrap();
        let m = Manifest {
            command: "train".into(),
            artifacts: "out".into(),
            checkpoint: Some("out/checkpoint.bin".into()),
            config: cfg.to_entries(),
        };
        let mut back = RunConfig::default();
        back.apply(&parse_entries(&m.render()).unwrap()).unwrap();
        assert_eq!(back.model.heads, 2);
        assert_eq!(back.data.as_deref(), Some(Path::new("x.tsv")));
    }

    #[test]
    fn synth_keys() {
        let mut spec = SyntheticSpec::default();
        apply_synth_entries(&mut spec, &[("archetype", "drifted"), ("users", "10")]).unwrap();
        assert_eq!(spec.mix, [0.0, 0.0, 1.0]);
        assert_eq!(spec.users, 10);
        let entries: Vec<(String, String)> = synth_entries(&spec).into_iter().collect();
        let mut back = SyntheticSpec::default();
        apply_synth_entries(&mut back, &entries).unwrap();
        assert_eq!(back, spec);
        assert!(apply_synth_entries(&mut spec, &[("mix", "1,2")]).is_err());
    }

    #[test]
    fn agreement_counts_matches() {
        let rec = RouteRecovery {
            pivotal_kept: 3,
            pivotal_total: 4,
            other_kept: 1,
            other_total: 6,
            skipped: 0,
        };
        assert!((rec.agreement() - 0.8).abs() < 1e-12);
    }
}
