//! Style modules that attach to the network's hook points.
//!
//! A [`HookModule`] is a recipe. At forward time it looks at the hook's
//! features, draws whatever randomness it needs, and becomes an
//! [`AppliedTransform`], which is a deterministic function of its input with
//! a matching backward. Recorded transforms can be replayed as
//! [`HookModule::Fixed`], which is how gradient checks freeze the randomness.

use std::sync::Arc;

use rand::Rng;

use crate::balance::{apply_plan, apply_plan_backward, plan_moves, BatchMeta, MovePlan};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::shift::{ts_apply, DomainRegistry, ShiftDecision, ShiftMode};
use crate::style_ops::{
    adain_backward, dsu_backward, dsu_with_noise, efdmix_batch, efdmix_batch_backward, mixstyle,
    mixstyle_backward, random_partner, sample_lambda, DsuNoise, MixCoefficient,
};
use crate::tensor::{style_vector, ChannelStats, FeatureBatch, StyleVector};

/// Test-time shifting configuration shared by every evaluated batch.
#[derive(Debug, Clone)]
pub struct TestTimeShift {
    pub registry: Arc<DomainRegistry>,
    pub alpha: f64,
    pub mode: ShiftMode,
    pub pool: Option<Arc<Vec<StyleVector>>>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum HookModule {
    StyleBalance {
        meta: BatchMeta,
        lambda_shape: f64,
    },
    MixStyle {
        lambda_shape: f64,
    },
    Dsu,
    EfdMix {
        lambda_shape: f64,
    },
    /// `sample_ids[b]` seeds the per-sample generator of sample `b`.
    TestTimeShift {
        shift: TestTimeShift,
        sample_ids: Vec<u64>,
    },
    Fixed(AppliedTransform),
}

#[derive(Debug, Clone)]
pub enum AppliedTransform {
    Identity,
    StyleBalance(MovePlan),
    MixStyle {
        lambdas: Vec<MixCoefficient>,
        partner: Vec<usize>,
    },
    Dsu(DsuNoise),
    EfdMix {
        lambdas: Vec<MixCoefficient>,
        partner: Vec<usize>,
    },
    /// Per-sample AdaIN targets; `None` keeps the sample unchanged.
    Renormalize {
        targets: Vec<Option<ChannelStats>>,
        decisions: Vec<ShiftDecision>,
    },
}

fn draw_lambdas<R: Rng + ?Sized>(rng: &mut R, n: usize, shape: f64) -> Result<Vec<MixCoefficient>> {
    (0..n).map(|_| sample_lambda(rng, shape)).collect()
}

impl HookModule {
    pub fn instantiate<R: Rng + ?Sized>(
        &self,
        features: &FeatureBatch,
        rng: &mut R,
    ) -> Result<AppliedTransform> {
        let n = features.batch_size();
        Ok(match self {
            HookModule::Fixed(t) => t.clone(),
            HookModule::StyleBalance { meta, lambda_shape } => {
                let styles: Vec<StyleVector> =
                    (0..n).map(|b| style_vector(&features.sample(b))).collect();
                AppliedTransform::StyleBalance(plan_moves(&styles, meta, *lambda_shape, rng)?)
            }
            HookModule::MixStyle { lambda_shape } => {
                let lambdas = draw_lambdas(rng, n, *lambda_shape)?;
                let partner = random_partner(rng, n);
                AppliedTransform::MixStyle { lambdas, partner }
            }
            HookModule::EfdMix { lambda_shape } => {
                let lambdas = draw_lambdas(rng, n, *lambda_shape)?;
                let partner = random_partner(rng, n);
                AppliedTransform::EfdMix { lambdas, partner }
            }
            HookModule::Dsu if n < 2 => AppliedTransform::Identity,
            HookModule::Dsu => AppliedTransform::Dsu(DsuNoise::draw(rng, n, features.channels())),
            HookModule::TestTimeShift { shift, sample_ids } => {
                if sample_ids.len() != n {
                    return Err(Error::Dimension(format!(
                        "{} sample ids for batch of {n}",
                        sample_ids.len()
                    )));
                }
                let mut targets = Vec::with_capacity(n);
                let mut decisions = Vec::with_capacity(n);
                for (b, &id) in sample_ids.iter().enumerate() {
                    let mut sample_rng = derive_rng(shift.seed, id);
                    let f = features.sample(b);
                    let (out, d) = ts_apply(
                        &f,
                        &shift.registry,
                        shift.alpha,
                        shift.mode,
                        shift.pool.as_deref().map(Vec::as_slice),
                        &mut sample_rng,
                    )?;
                    targets.push(d.shifted().then(|| ChannelStats::of(&out)));
                    decisions.push(d);
                }
                AppliedTransform::Renormalize { targets, decisions }
            }
        })
    }
}

impl AppliedTransform {
    pub fn forward(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        match self {
            AppliedTransform::Identity => Ok(x.clone()),
            AppliedTransform::StyleBalance(plan) => apply_plan(x, plan),
            AppliedTransform::MixStyle { lambdas, partner } => mixstyle(x, lambdas, partner),
            AppliedTransform::Dsu(noise) => dsu_with_noise(x, noise),
            AppliedTransform::EfdMix { lambdas, partner } => efdmix_batch(x, lambdas, partner),
            AppliedTransform::Renormalize { targets, .. } => {
                let mut out = x.clone();
                for (b, t) in targets.iter().enumerate() {
                    if let Some(stats) = t {
                        let shifted = crate::style_ops::adain(&x.sample(b), stats)?;
                        out.set_sample(b, &shifted)?;
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn backward(&self, x: &FeatureBatch, grad_out: &FeatureBatch) -> Result<FeatureBatch> {
        match self {
            AppliedTransform::Identity => Ok(grad_out.clone()),
            AppliedTransform::StyleBalance(plan) => apply_plan_backward(x, plan, grad_out),
            AppliedTransform::MixStyle { lambdas, partner } => {
                mixstyle_backward(x, lambdas, partner, grad_out)
            }
            AppliedTransform::Dsu(noise) => dsu_backward(x, noise, grad_out),
            AppliedTransform::EfdMix { lambdas, partner } => {
                efdmix_batch_backward(x, lambdas, partner, grad_out)
            }
            AppliedTransform::Renormalize { targets, .. } => {
                let mut grad = grad_out.clone();
                for (b, t) in targets.iter().enumerate() {
                    if let Some(stats) = t {
                        let g = adain_backward(&x.sample(b), stats, &grad_out.sample(b))?;
                        grad.set_sample(b, &g)?;
                    }
                }
                Ok(grad)
            }
        }
    }

    pub fn move_plan(&self) -> Option<&MovePlan> {
        match self {
            AppliedTransform::StyleBalance(plan) => Some(plan),
            _ => None,
        }
    }

    pub fn decisions(&self) -> Option<&[ShiftDecision]> {
        match self {
            AppliedTransform::Renormalize { decisions, .. } => Some(decisions),
            _ => None,
        }
    }
}

/// Modules to run at every hook, in order.
#[derive(Debug, Clone)]
pub struct HookPlan {
    hooks: Vec<Vec<HookModule>>,
}

impl HookPlan {
    /// No modules at any of `num_hooks` hooks.
    pub fn identity(num_hooks: usize) -> Self {
        Self {
            hooks: vec![Vec::new(); num_hooks],
        }
    }

    pub fn push(&mut self, hook: usize, module: HookModule) -> Result<()> {
        let slot = self
            .hooks
            .get_mut(hook)
            .ok_or_else(|| Error::Config(format!("hook {hook} does not exist")))?;
        slot.push(module);
        Ok(())
    }

    pub fn with(mut self, hook: usize, module: HookModule) -> Result<Self> {
        self.push(hook, module)?;
        Ok(self)
    }

    pub fn modules(&self, hook: usize) -> &[HookModule] {
        self.hooks.get(hook).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_hooks(&self) -> usize {
        self.hooks.len()
    }

    pub fn is_identity(&self) -> bool {
        self.hooks.iter().all(Vec::is_empty)
    }
}
