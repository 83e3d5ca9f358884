//! End-to-end runs: dataset selection, training, registry building and
//! evaluation, producing [`ResultRow`]s.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::balance::MovePlan;
use crate::data::{
    apply_imbalance, pixel_style, Dataset, DatasetManifest, DatasetSpec, ImbalanceSpec, Split,
};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansParams};
use crate::net::train::{
    build_registry, eval_shift, evaluate, hook_styles, train, Augmentation, BatchIndex,
    EpochMetrics, HookPolicy, LabeledSet, TrainConfig,
};
use crate::net::{hook_index, MicroNet, NetConfig};
use crate::rng::{derive_rng, streams};
use crate::shift::{pseudo_domains, DomainRegistry, ShiftMode, DEFAULT_ALPHA, PSEUDO_LABEL_ALPHA};
use crate::style_ops::DEFAULT_LAMBDA_SHAPE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Path to a `manifest.json`, relative to the working directory.
    Manifest(String),
    /// Generate in memory.
    Generate(DatasetSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    LeaveOneDomainOut,
    SingleDomain,
}

fn default_hooks() -> Vec<String> {
    vec!["block1".into(), "block2".into()]
}

fn default_ts_hook() -> String {
    "block2".into()
}

fn default_mode() -> String {
    "proposed".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsConfig {
    /// `off`, `proposed`, `shift-all`, `nearest-sample[:N]` or `single-domain`.
    #[serde(default = "default_mode")]
    pub mode: String,
    /// Defaults to 3, or 2 with pseudo labels.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_ts_hook")]
    pub hook: String,
}

impl Default for TsConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            alpha: None,
            hook: default_ts_hook(),
        }
    }
}

fn default_prob() -> f64 {
    0.5
}

fn default_shape() -> f64 {
    DEFAULT_LAMBDA_SHAPE
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_imbalance() -> ImbalanceSpec {
    ImbalanceSpec::Balanced
}

/// Training hyperparameters of an experiment; hooks come from the
/// experiment's style-module fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn d_epochs() -> usize {
    TrainConfig::default().epochs
}
fn d_batch() -> usize {
    TrainConfig::default().batch_size
}
fn d_lr() -> f64 {
    TrainConfig::default().learning_rate
}
fn d_momentum() -> f64 {
    TrainConfig::default().momentum
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            momentum: d_momentum(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_imbalance")]
    pub imbalance: ImbalanceSpec,
    #[serde(default)]
    pub protocol: Protocol,
    /// Evaluated domains by name. Leave-one-domain-out trains once per
    /// target; defaults to the last domain. Single-domain defaults to every
    /// domain except the source.
    #[serde(default)]
    pub targets: Vec<String>,
    /// The only training domain under the single-domain protocol; defaults
    /// to the first domain.
    #[serde(default)]
    pub source: Option<String>,
    /// Defaults to the standard three-block network for the image size.
    #[serde(default)]
    pub net: Option<NetConfig>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub style_balance: bool,
    #[serde(default)]
    pub augmentation: Augmentation,
    #[serde(default = "default_hooks")]
    pub sb_hooks: Vec<String>,
    #[serde(default = "default_hooks")]
    pub aug_hooks: Vec<String>,
    #[serde(default = "default_prob")]
    pub activation_prob: f64,
    #[serde(default = "default_shape")]
    pub lambda_shape: f64,
    #[serde(default)]
    pub ts: TsConfig,
    /// Replace true domain labels by k-means clusters with this many groups.
    #[serde(default)]
    pub pseudo_labels: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: crate::shift::byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { offset, message } => Error::Parse {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn shift_mode(&self) -> Result<ShiftMode> {
        self.ts.mode.parse()
    }

    pub fn alpha(&self) -> f64 {
        self.ts.alpha.unwrap_or(if self.pseudo_labels.is_some() {
            PSEUDO_LABEL_ALPHA
        } else {
            DEFAULT_ALPHA
        })
    }

    /// Loads or generates the dataset named by the config.
    pub fn dataset(&self, workdir: &Path) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Manifest(p) => Dataset::load(&resolve(workdir, p)),
            DatasetSource::Generate(spec) => crate::data::gen_dataset(spec),
        }
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self, dataset: &Dataset) -> Result<Plan> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mode = self.shift_mode()?;
        let alpha = self.alpha();
        if alpha.is_nan() || alpha < 0.0 {
            return Err(Error::Config(format!("alpha {alpha} must be nonnegative")));
        }
        self.imbalance.validate()?;
        let names = &dataset.manifest.domains;
        let find = |name: &str| {
            names.iter().position(|n| n == name).ok_or_else(|| {
                Error::Config(format!("unknown domain {name:?}; dataset has {names:?}"))
            })
        };
        let nd = dataset.manifest.num_domains();
        let (runs, single_source) = match self.protocol {
            Protocol::LeaveOneDomainOut => {
                if nd < 3 {
                    return Err(Error::Config(format!(
                        "leave-one-domain-out needs at least 2 sources plus a target; dataset has {nd} domains"
                    )));
                }
                if self.source.is_some() {
                    return Err(Error::Config(
                        "`source` only applies to the single-domain protocol".into(),
                    ));
                }
                let targets = if self.targets.is_empty() {
                    vec![nd - 1]
                } else {
                    self.targets
                        .iter()
                        .map(|t| find(t))
                        .collect::<Result<_>>()?
                };
                let runs = targets
                    .into_iter()
                    .map(|t| Run {
                        sources: (0..nd).filter(|&d| d != t).collect(),
                        targets: vec![t],
                    })
                    .collect();
                (runs, false)
            }
            Protocol::SingleDomain => {
                let source = match &self.source {
                    Some(s) => find(s)?,
                    None => 0,
                };
                let targets: Vec<usize> = if self.targets.is_empty() {
                    (0..nd).filter(|&d| d != source).collect()
                } else {
                    self.targets
                        .iter()
                        .map(|t| find(t))
                        .collect::<Result<_>>()?
                };
                if targets.is_empty() || targets.contains(&source) {
                    return Err(Error::Config(
                        "single-domain targets must exclude the source".into(),
                    ));
                }
                (
                    vec![Run {
                        sources: vec![source],
                        targets,
                    }],
                    true,
                )
            }
        };
        if single_source && self.style_balance {
            return Err(Error::Config(
                "style balancing needs more than one source domain".into(),
            ));
        }
        if let Some(k) = self.pseudo_labels {
            if k == 0 {
                return Err(Error::Config("pseudo_labels must be at least 1".into()));
            }
        }
        let net = self.net_config(dataset)?;
        let ts_hook = hook_index(&self.ts.hook, &net)?;
        let policy = self.hook_policy(&net)?;
        let train = self.train_config(0, policy.clone());
        train.validate(net.num_hooks())?;
        Ok(Plan {
            runs,
            net,
            ts_hook,
            mode,
            alpha,
            policy,
        })
    }

    fn net_config(&self, dataset: &Dataset) -> Result<NetConfig> {
        let img = dataset.images.first().ok_or(Error::EmptySet("dataset"))?;
        let classes = dataset.manifest.num_classes();
        let cfg = match &self.net {
            Some(n) => n.clone(),
            None => NetConfig::standard(img.channels, img.height, img.width, classes),
        };
        cfg.validate()?;
        if (cfg.in_channels, cfg.height, cfg.width, cfg.classes)
            != (img.channels, img.height, img.width, classes)
        {
            return Err(Error::Config(format!(
                "network expects {}x{}x{} inputs and {} classes; dataset has {}x{}x{} and {classes}",
                cfg.in_channels, cfg.height, cfg.width, cfg.classes, img.channels, img.height, img.width
            )));
        }
        Ok(cfg)
    }

    fn hook_policy(&self, net: &NetConfig) -> Result<HookPolicy> {
        let idx = |names: &[String]| {
            names
                .iter()
                .map(|n| hook_index(n, net))
                .collect::<Result<Vec<_>>>()
        };
        Ok(HookPolicy {
            style_balance: self.style_balance,
            sb_hooks: if self.style_balance {
                idx(&self.sb_hooks)?
            } else {
                Vec::new()
            },
            augmentation: self.augmentation,
            aug_hooks: if self.augmentation != Augmentation::None {
                idx(&self.aug_hooks)?
            } else {
                Vec::new()
            },
            activation_prob: self.activation_prob,
            lambda_shape: self.lambda_shape,
        })
    }

    fn train_config(&self, seed: u64, hooks: HookPolicy) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seed,
            hooks,
        }
    }

    /// Table label such as `Baseline`, `TSB + EFDMix` or `TS-shift-all (pseudo)`.
    pub fn method_label(&self, mode: ShiftMode) -> String {
        let sb = self.style_balance;
        let base = match (sb, mode) {
            (false, ShiftMode::Off) => "Baseline".to_string(),
            (true, ShiftMode::Off) => "SB".to_string(),
            (false, ShiftMode::Proposed) => "TS".to_string(),
            (true, ShiftMode::Proposed) => "TSB".to_string(),
            (false, m) => format!("TS-{m}"),
            (true, m) => format!("TSB-{m}"),
        };
        let aug = match self.augmentation {
            Augmentation::None => String::new(),
            a => format!(" + {}", a.label()),
        };
        let pseudo = if self.pseudo_labels.is_some() {
            " (pseudo)"
        } else {
            ""
        };
        format!("{base}{aug}{pseudo}")
    }
}

/// `path` relative to `workdir` unless absolute.
pub fn resolve(workdir: &Path, path: impl AsRef<Path>) -> PathBuf {
    let p = path.as_ref();
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

/// One training run: its source domains and the domains evaluated after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct Plan {
    pub runs: Vec<Run>,
    pub net: NetConfig,
    pub ts_hook: usize,
    pub mode: ShiftMode,
    pub alpha: f64,
    pub policy: HookPolicy,
}

/// The result of training on one run's sources with one seed.
pub struct Trained {
    pub net: MicroNet,
    pub train_set: LabeledSet,
    /// Names of the domain labels used for training (true or pseudo).
    pub domain_names: Vec<String>,
    pub manifest: DatasetManifest,
    pub metrics: Vec<EpochMetrics>,
    /// One JSON line per executed style-balancing plan.
    pub audit: Vec<String>,
}

fn audit_json(at: BatchIndex, plan: &MovePlan) -> Vec<String> {
    plan.audit_lines()
        .into_iter()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(&line).expect("audit line is JSON");
            if let serde_json::Value::Object(m) = &mut v {
                m.insert("epoch".into(), at.epoch.into());
                m.insert("batch".into(), at.batch.into());
                m.insert("hook".into(), crate::net::hook_name(at.hook).into());
            }
            v.to_string()
        })
        .collect()
}

/// k-means labels over raw-pixel styles, available before any training.
pub fn pixel_pseudo_labels(
    dataset: &Dataset,
    indices: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let points: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| pixel_style(&dataset.images[i]))
        .collect();
    if points.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot form {k} pseudo domains",
            points.len()
        )));
    }
    let mut rng = derive_rng(seed, streams::PSEUDO);
    Ok(kmeans(&points, k, &KMeansParams::default(), &mut rng)?.labels)
}

fn pseudo_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("pseudo{i}")).collect()
}

/// Applies the imbalance to the run's sources and trains one network.
pub fn train_run(
    cfg: &ExperimentConfig,
    plan: &Plan,
    dataset: &Dataset,
    run: &Run,
    seed: u64,
) -> Result<Trained> {
    let held_out: Vec<usize> = (0..dataset.manifest.num_domains())
        .filter(|d| !run.sources.contains(d))
        .collect();
    let mut rng = derive_rng(seed, streams::IMBALANCE);
    let (manifest, kept) = apply_imbalance(&dataset.manifest, &cfg.imbalance, &held_out, &mut rng)?;
    let train_idx: Vec<usize> = kept
        .iter()
        .copied()
        .filter(|&i| {
            let s = &dataset.manifest.samples[i];
            s.split == Split::Train && run.sources.contains(&s.domain)
        })
        .collect();
    let mut train_set = dataset.labeled(&train_idx, &run.sources)?;
    let mut domain_names: Vec<String> = run
        .sources
        .iter()
        .map(|&d| dataset.manifest.domains[d].clone())
        .collect();
    if let Some(k) = cfg.pseudo_labels {
        let labels = pixel_pseudo_labels(dataset, &train_idx, k, seed)?;
        train_set = train_set.relabel_domains(labels, k)?;
        domain_names = pseudo_names(k);
    }
    let mut net = MicroNet::new(plan.net.clone(), seed)?;
    let tc = cfg.train_config(seed, plan.policy.clone());
    let mut audit = Vec::new();
    let metrics = train(&mut net, &train_set, &tc, |at, p| {
        audit.extend(audit_json(at, p))
    })?;
    Ok(Trained {
        net,
        train_set,
        domain_names,
        manifest,
        metrics,
        audit,
    })
}

/// Registry over the styles of `set` at `hook`, labelled by `set`'s domains
/// named `names`. With `pseudo_k` the domains are re-clustered from the
/// network's hook styles instead.
pub fn registry_for(
    net: &MicroNet,
    set: &LabeledSet,
    names: &[String],
    hook: usize,
    alpha: f64,
    pseudo_k: Option<usize>,
    seed: u64,
) -> Result<DomainRegistry> {
    match pseudo_k {
        None => build_registry(net, set, hook, alpha, names),
        Some(k) => {
            let styles = hook_styles(net, &set.inputs, hook)?;
            let mut rng = derive_rng(seed, streams::PSEUDO + 1);
            let labels = pseudo_domains(&styles, k, &mut rng)?;
            crate::shift::registry_from_styles(
                crate::net::hook_name(hook),
                alpha,
                &pseudo_names(k),
                &styles,
                &labels,
            )
        }
    }
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub target: String,
    pub seed: u64,
    /// Swept parameter name, empty outside sweeps.
    #[serde(default)]
    pub param: String,
    #[serde(default)]
    pub value: String,
    pub accuracy: f64,
    pub shift_rate: f64,
    /// On the test split of the training domains.
    pub source_accuracy: f64,
    pub source_shift_rate: f64,
    /// Seconds; reported in the timing sidecar, never in the CSV.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Evaluates `net` on every target of `run` (and on the sources' test
/// split) with one shift setting. `pool_from` supplies the training styles
/// for nearest-sample mode.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run(
    label: &str,
    dataset: &Dataset,
    net: &MicroNet,
    pool_from: &LabeledSet,
    registry: &DomainRegistry,
    run: &Run,
    hook: usize,
    mode: ShiftMode,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let pool = match mode {
        ShiftMode::NearestSample { .. } => Some(hook_styles(net, &pool_from.inputs, hook)?),
        _ => None,
    };
    let shift = (mode != ShiftMode::Off)
        .then(|| eval_shift(hook, registry.clone(), alpha, mode, pool, seed));
    let source_idx = dataset.select(Split::Test, &run.sources);
    let source_eval = evaluate(net, &dataset.labeled(&source_idx, &[])?, shift.as_ref())?;
    let mut rows = Vec::new();
    for &t in &run.targets {
        let idx = dataset.select(Split::Test, &[t]);
        let e = evaluate(net, &dataset.labeled(&idx, &[])?, shift.as_ref())?;
        rows.push(ResultRow {
            method: label.to_string(),
            target: dataset.manifest.domains[t].clone(),
            seed,
            param: String::new(),
            value: String::new(),
            accuracy: e.accuracy(),
            shift_rate: e.shift_rate(),
            source_accuracy: source_eval.accuracy(),
            source_shift_rate: source_eval.shift_rate(),
            wall_time: 0.0,
        });
    }
    Ok(rows)
}

/// Trains every (run, seed) pair and evaluates it without test-time
/// shifting and, unless the mode is `off`, with the configured mode.
pub fn run_experiment(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<ResultRow>> {
    let plan = cfg.validate(dataset)?;
    let mut rows = Vec::new();
    for run in &plan.runs {
        for &seed in &cfg.seeds {
            rows.extend(run_one(cfg, &plan, dataset, run, seed, None)?);
        }
    }
    Ok(rows)
}

/// Trains once and evaluates. Without `alpha_sweep` this yields the rows
/// without test-time shifting followed, unless the mode is `off`, by the
/// configured mode. With it, only shifted rows, one group per alpha, tagged
/// with `param = "alpha"`.
pub fn run_one(
    cfg: &ExperimentConfig,
    plan: &Plan,
    dataset: &Dataset,
    run: &Run,
    seed: u64,
    alpha_sweep: Option<&[f64]>,
) -> Result<Vec<ResultRow>> {
    let start = Instant::now();
    let trained = train_run(cfg, plan, dataset, run, seed)?;
    let registry = registry_for(
        &trained.net,
        &trained.train_set,
        &trained.domain_names,
        plan.ts_hook,
        plan.alpha,
        cfg.pseudo_labels,
        seed,
    )?;
    let eval = |mode: ShiftMode, alpha: f64| {
        evaluate_run(
            &cfg.method_label(mode),
            dataset,
            &trained.net,
            &trained.train_set,
            &registry,
            run,
            plan.ts_hook,
            mode,
            alpha,
            seed,
        )
    };
    let mut rows = Vec::new();
    match alpha_sweep {
        None => {
            rows.extend(eval(ShiftMode::Off, plan.alpha)?);
            if plan.mode != ShiftMode::Off {
                rows.extend(eval(plan.mode, plan.alpha)?);
            }
        }
        Some(alphas) => {
            if plan.mode == ShiftMode::Off {
                return Err(Error::Config(
                    "an alpha sweep needs a test-time shift mode other than off".into(),
                ));
            }
            for &alpha in alphas {
                for mut r in eval(plan.mode, alpha)? {
                    r.param = "alpha".into();
                    r.value = alpha.to_string();
                    rows.push(r);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    for r in &mut rows {
        r.wall_time = secs;
    }
    Ok(rows)
}
