//! SGD training with style modules, evaluation with test-time shifting and
//! registry construction.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::hooks::{HookModule, HookPlan, TestTimeShift};
use super::{argmax_rows, softmax_cross_entropy, MicroNet};
use crate::balance::{BatchMeta, MovePlan};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, streams};
use crate::shift::{registry_from_styles, DomainRegistry};
use crate::style_ops::DEFAULT_LAMBDA_SHAPE;
use crate::tensor::{style_vector, FeatureBatch, StyleVector};

/// Samples per forward pass when no gradients are needed.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    #[default]
    None,
    MixStyle,
    Dsu,
    EfdMix,
}

impl Augmentation {
    pub fn label(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::MixStyle => "MixStyle",
            Augmentation::Dsu => "DSU",
            Augmentation::EfdMix => "EFDMix",
        }
    }

    fn module(self, lambda_shape: f64) -> Option<HookModule> {
        match self {
            Augmentation::None => None,
            Augmentation::MixStyle => Some(HookModule::MixStyle { lambda_shape }),
            Augmentation::Dsu => Some(HookModule::Dsu),
            Augmentation::EfdMix => Some(HookModule::EfdMix { lambda_shape }),
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augmentation::None => "none",
            Augmentation::MixStyle => "mixstyle",
            Augmentation::Dsu => "dsu",
            Augmentation::EfdMix => "efdmix",
        })
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Augmentation::None),
            "mixstyle" => Ok(Augmentation::MixStyle),
            "dsu" => Ok(Augmentation::Dsu),
            "efdmix" => Ok(Augmentation::EfdMix),
            other => Err(Error::Config(format!(
                "unknown augmentation {other:?}; expected none, mixstyle, dsu or efdmix"
            ))),
        }
    }
}

fn default_prob() -> f64 {
    0.5
}

fn default_shape() -> f64 {
    DEFAULT_LAMBDA_SHAPE
}

/// Which style modules run during training and where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookPolicy {
    #[serde(default)]
    pub style_balance: bool,
    /// Candidate hooks for SB; one is picked uniformly per batch.
    #[serde(default)]
    pub sb_hooks: Vec<usize>,
    #[serde(default)]
    pub augmentation: Augmentation,
    /// Every listed hook is activated independently.
    #[serde(default)]
    pub aug_hooks: Vec<usize>,
    #[serde(default = "default_prob")]
    pub activation_prob: f64,
    #[serde(default = "default_shape")]
    pub lambda_shape: f64,
}

impl Default for HookPolicy {
    fn default() -> Self {
        Self {
            style_balance: false,
            sb_hooks: Vec::new(),
            augmentation: Augmentation::None,
            aug_hooks: Vec::new(),
            activation_prob: default_prob(),
            lambda_shape: default_shape(),
        }
    }
}

impl HookPolicy {
    pub fn validate(&self, num_hooks: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.activation_prob) {
            return Err(Error::Config(format!(
                "activation probability {} outside [0, 1]",
                self.activation_prob
            )));
        }
        if !(self.lambda_shape > 0.0 && self.lambda_shape.is_finite()) {
            return Err(Error::Config(format!(
                "lambda shape {} must be positive",
                self.lambda_shape
            )));
        }
        if self.style_balance && self.sb_hooks.is_empty() {
            return Err(Error::Config(
                "style balancing needs at least one hook".into(),
            ));
        }
        if self.augmentation != Augmentation::None && self.aug_hooks.is_empty() {
            return Err(Error::Config(format!(
                "{} needs at least one hook",
                self.augmentation.label()
            )));
        }
        if let Some(h) = self
            .sb_hooks
            .iter()
            .chain(&self.aug_hooks)
            .find(|&&h| h >= num_hooks)
        {
            return Err(Error::Config(format!(
                "hook {h} out of range for a {num_hooks}-hook network"
            )));
        }
        Ok(())
    }

    /// Draws this batch's modules. SB goes first so that it runs before any
    /// augmentation sharing its hook.
    fn draw<R: Rng + ?Sized>(
        &self,
        num_hooks: usize,
        meta: &BatchMeta,
        rng: &mut R,
    ) -> Result<HookPlan> {
        let mut plan = HookPlan::identity(num_hooks);
        if self.style_balance && rng.random::<f64>() < self.activation_prob {
            let hook = self.sb_hooks[rng.random_range(0..self.sb_hooks.len())];
            plan.push(
                hook,
                HookModule::StyleBalance {
                    meta: meta.clone(),
                    lambda_shape: self.lambda_shape,
                },
            )?;
        }
        if let Some(module) = self.augmentation.module(self.lambda_shape) {
            for &hook in &self.aug_hooks {
                if rng.random::<f64>() < self.activation_prob {
                    plan.push(hook, module.clone())?;
                }
            }
        }
        Ok(plan)
    }
}

fn default_epochs() -> usize {
    30
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    0.05
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hooks: HookPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            momentum: default_momentum(),
            weight_decay: 0.0,
            seed: 0,
            hooks: HookPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_hooks: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for (name, v) in [
            ("learning rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} {v} must be finite and nonnegative"
                )));
            }
        }
        self.hooks.validate(num_hooks)
    }
}

/// Inputs with class and domain labels, all zero-based.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub inputs: FeatureBatch,
    pub classes: Vec<usize>,
    pub domains: Vec<usize>,
    /// Stable per-sample ids; they seed per-sample test-time draws.
    pub ids: Vec<u64>,
    pub num_classes: usize,
    pub num_domains: usize,
}

impl LabeledSet {
    pub fn new(
        inputs: FeatureBatch,
        classes: Vec<usize>,
        domains: Vec<usize>,
        ids: Vec<u64>,
        num_classes: usize,
        num_domains: usize,
    ) -> Result<Self> {
        let n = inputs.batch_size();
        if classes.len() != n || domains.len() != n || ids.len() != n {
            return Err(Error::Dimension(format!(
                "{n} inputs with {} classes, {} domains and {} ids",
                classes.len(),
                domains.len(),
                ids.len()
            )));
        }
        // validates the label ranges
        BatchMeta::new(domains.clone(), classes.clone(), num_domains, num_classes)?;
        Ok(Self {
            inputs,
            classes,
            domains,
            ids,
            num_classes,
            num_domains,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (_, c, h, w) = self.inputs.shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.inputs.sample_slice(i));
        }
        Self {
            inputs: FeatureBatch::from_raw(indices.len(), c, h, w, data),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            domains: indices.iter().map(|&i| self.domains[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
            num_domains: self.num_domains,
        }
    }

    /// Same samples with different domain labels.
    pub fn relabel_domains(&self, domains: Vec<usize>, num_domains: usize) -> Result<Self> {
        Self::new(
            self.inputs.clone(),
            self.classes.clone(),
            domains,
            self.ids.clone(),
            self.num_classes,
            num_domains,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Batch position handed to the audit callback together with its plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchIndex {
    pub epoch: usize,
    pub batch: usize,
    pub hook: usize,
}

/// Trains `net` in place. `audit` sees every style-balancing plan executed.
pub fn train(
    net: &mut MicroNet,
    set: &LabeledSet,
    cfg: &TrainConfig,
    mut audit: impl FnMut(BatchIndex, &MovePlan),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate(net.num_hooks())?;
    if set.is_empty() {
        return Err(Error::EmptySet("training set"));
    }
    let mut rng = derive_rng(cfg.seed, streams::TRAIN);
    let mut velocity = vec![0.0; net.params().len()];
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let k = set.num_classes;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = set.subset(idx);
            let meta = BatchMeta::new(
                batch.domains.clone(),
                batch.classes.clone(),
                set.num_domains,
                set.num_classes,
            )?;
            let plan = cfg.hooks.draw(net.num_hooks(), &meta, &mut rng)?;
            let fwd = net.forward(&batch.inputs, &plan, &mut rng)?;
            for (hook, t) in fwd.tape.applied() {
                if let Some(p) = t.move_plan() {
                    audit(
                        BatchIndex {
                            epoch,
                            batch: bi,
                            hook,
                        },
                        p,
                    );
                }
            }
            let (loss, grad) = softmax_cross_entropy(&fwd.logits, &batch.classes, k);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            loss_sum += loss * idx.len() as f64;
            correct += argmax_rows(&fwd.logits, k)
                .iter()
                .zip(&batch.classes)
                .filter(|(p, y)| p == y)
                .count();
            let grads = net.backward(&fwd.tape, &grad)?;
            let params = net.params_mut();
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grads.params) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= cfg.learning_rate * *v;
            }
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / set.len() as f64,
            accuracy: correct as f64 / set.len() as f64,
        };
        log::debug!("epoch {epoch}: loss {:.4} acc {:.4}", m.loss, m.accuracy);
        metrics.push(m);
    }
    Ok(metrics)
}

/// Test-time shifting attached at one hook.
#[derive(Debug, Clone)]
pub struct EvalShift {
    pub hook: usize,
    pub shift: TestTimeShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub shifted: Vec<bool>,
    /// Per domain id: (correct, total, shifted).
    pub per_domain: Vec<(usize, usize, usize)>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        let (c, t) = self
            .per_domain
            .iter()
            .fold((0, 0), |(c, t), d| (c + d.0, t + d.1));
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }

    pub fn shift_rate(&self) -> f64 {
        if self.shifted.is_empty() {
            0.0
        } else {
            self.shifted.iter().filter(|&&s| s).count() as f64 / self.shifted.len() as f64
        }
    }

    /// Accuracy on one domain, if it has samples.
    pub fn domain_accuracy(&self, domain: usize) -> Option<f64> {
        self.per_domain
            .get(domain)
            .filter(|d| d.1 > 0)
            .map(|d| d.0 as f64 / d.1 as f64)
    }

    pub fn domain_shift_rate(&self, domain: usize) -> Option<f64> {
        self.per_domain
            .get(domain)
            .filter(|d| d.1 > 0)
            .map(|d| d.2 as f64 / d.1 as f64)
    }
}

/// Top-1 predictions with optional test-time shifting. Each sample is
/// handled independently, so chunking does not change the result.
pub fn evaluate(net: &MicroNet, set: &LabeledSet, shift: Option<&EvalShift>) -> Result<Evaluation> {
    if let Some(s) = shift {
        if s.hook >= net.num_hooks() {
            return Err(Error::Config(format!("hook {} does not exist", s.hook)));
        }
        let (c, _, _) = net.config().hook_shape(s.hook);
        if c != s.shift.registry.channels() {
            return Err(Error::Config(format!(
                "registry has {} channels but hook {} has {c}",
                s.shift.registry.channels(),
                super::hook_name(s.hook)
            )));
        }
    }
    let k = net.config().classes;
    let mut predictions = Vec::with_capacity(set.len());
    let mut shifted = Vec::with_capacity(set.len());
    let all: Vec<usize> = (0..set.len()).collect();
    // the rng is unused by TS (it seeds per sample) and by an identity plan
    let mut rng = derive_rng(0, streams::EVAL);
    for chunk in all.chunks(EVAL_CHUNK) {
        let part = set.subset(chunk);
        let mut plan = HookPlan::identity(net.num_hooks());
        if let Some(s) = shift {
            plan.push(
                s.hook,
                HookModule::TestTimeShift {
                    shift: s.shift.clone(),
                    sample_ids: part.ids.clone(),
                },
            )?;
        }
        let fwd = net.forward(&part.inputs, &plan, &mut rng)?;
        predictions.extend(argmax_rows(&fwd.logits, k));
        let decisions = fwd.tape.applied().find_map(|(_, t)| t.decisions());
        match decisions {
            Some(d) => shifted.extend(d.iter().map(|d| d.shifted())),
            None => shifted.extend(std::iter::repeat_n(false, chunk.len())),
        }
    }
    let mut per_domain = vec![(0, 0, 0); set.num_domains];
    for i in 0..set.len() {
        let d = &mut per_domain[set.domains[i]];
        d.0 += usize::from(predictions[i] == set.classes[i]);
        d.1 += 1;
        d.2 += usize::from(shifted[i]);
    }
    Ok(Evaluation {
        predictions,
        shifted,
        per_domain,
    })
}

/// Clean per-sample style vectors at `hook`.
pub fn hook_styles(net: &MicroNet, inputs: &FeatureBatch, hook: usize) -> Result<Vec<StyleVector>> {
    let n = inputs.batch_size();
    let (_, c, h, w) = inputs.shape();
    let mut out = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * c * h * w);
        for &i in chunk {
            data.extend_from_slice(inputs.sample_slice(i));
        }
        let part = FeatureBatch::from_raw(chunk.len(), c, h, w, data);
        let feats = net.features_at(&part, hook)?;
        out.extend((0..chunk.len()).map(|b| style_vector(&feats.sample(b))));
    }
    Ok(out)
}

/// Per-domain centroids of the clean hook styles of `set`, using its
/// domain labels (true or pseudo).
pub fn build_registry(
    net: &MicroNet,
    set: &LabeledSet,
    hook: usize,
    alpha: f64,
    names: &[String],
) -> Result<DomainRegistry> {
    let styles = hook_styles(net, &set.inputs, hook)?;
    registry_from_styles(super::hook_name(hook), alpha, names, &styles, &set.domains)
}

/// Convenience constructor for a shift at `hook` with a shared registry.
pub fn eval_shift(
    hook: usize,
    registry: DomainRegistry,
    alpha: f64,
    mode: crate::shift::ShiftMode,
    pool: Option<Vec<StyleVector>>,
    seed: u64,
) -> EvalShift {
    EvalShift {
        hook,
        shift: TestTimeShift {
            registry: Arc::new(registry),
            alpha,
            mode,
            pool: pool.map(Arc::new),
            seed,
        },
    }
}
