//! Style transforms on feature statistics: AdaIN, MixStyle, DSU, EFDM and EFDMix.
//!
//! Every transform comes with a backward function. Moment-based transforms
//! (AdaIN, MixStyle, DSU) differentiate through the instance statistics; the
//! sort-based ones (EFDM, EFDMix) treat the sorting permutations as constants
//! of the forward pass.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{ChannelStats, FeatureBatch, FeatureMap, EPS_STD};

/// Beta shape used for every mixing coefficient draw.
pub const DEFAULT_LAMBDA_SHAPE: f64 = 0.1;

/// A mixing weight in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MixCoefficient(f64);

impl MixCoefficient {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "mixing coefficient {lambda} outside [0, 1]"
            )));
        }
        Ok(Self(lambda))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Draws `lambda ~ Beta(shape, shape)`.
pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> Result<MixCoefficient> {
    let beta = Beta::new(shape, shape)
        .map_err(|e| Error::Config(format!("invalid Beta shape {shape}: {e}")))?;
    Ok(MixCoefficient(beta.sample(rng).clamp(0.0, 1.0)))
}

/// Indices that order a vector ascending; ties keep their original order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortPermutation(Vec<usize>);

impl SortPermutation {
    pub fn of(values: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        // sort_by is stable
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        Self(idx)
    }

    /// Position in the source of the `i`-th smallest element.
    pub fn index(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Gradient routing for [`efdm`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum EfdmGradient {
    /// `out = x + y_sorted - detach(x)`: unit gradient to `x`, none to `y`.
    #[default]
    Detach,
    /// Gradient follows the value: unit gradient to the matched `y` entries.
    Matched,
}

/// Exact distribution matching: `out[tau_i] = y[kappa_i]`.
pub fn efdm(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_same_len(x, y)?;
    let tau = SortPermutation::of(x);
    let kappa = SortPermutation::of(y);
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        out[tau.index(i)] = y[kappa.index(i)];
    }
    Ok(out)
}

/// Returns `(grad_x, grad_y)` for [`efdm`] under the given policy.
pub fn efdm_backward(
    x: &[f64],
    y: &[f64],
    grad_out: &[f64],
    policy: EfdmGradient,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_len(x, y)?;
    check_same_len(x, grad_out)?;
    match policy {
        EfdmGradient::Detach => Ok((grad_out.to_vec(), vec![0.0; y.len()])),
        EfdmGradient::Matched => {
            let tau = SortPermutation::of(x);
            let kappa = SortPermutation::of(y);
            let mut gy = vec![0.0; y.len()];
            for i in 0..x.len() {
                gy[kappa.index(i)] += grad_out[tau.index(i)];
            }
            Ok((vec![0.0; x.len()], gy))
        }
    }
}

/// `out[tau_i] = lambda * x[tau_i] + (1 - lambda) * y[kappa_i]`
pub fn efdmix(x: &[f64], y: &[f64], lambda: MixCoefficient) -> Result<Vec<f64>> {
    check_same_len(x, y)?;
    let mut out = vec![0.0; x.len()];
    efdmix_into(x, y, lambda.value(), &mut out);
    Ok(out)
}

fn efdmix_into(x: &[f64], y: &[f64], lambda: f64, out: &mut [f64]) {
    let tau = SortPermutation::of(x);
    let kappa = SortPermutation::of(y);
    for i in 0..x.len() {
        let t = tau.index(i);
        out[t] = lambda * x[t] + (1.0 - lambda) * y[kappa.index(i)];
    }
}

/// Returns `(grad_x, grad_y)` for [`efdmix`].
pub fn efdmix_backward(
    x: &[f64],
    y: &[f64],
    lambda: MixCoefficient,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_len(x, y)?;
    check_same_len(x, grad_out)?;
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; y.len()];
    efdmix_backward_into(x, y, lambda.value(), grad_out, &mut gx, &mut gy);
    Ok((gx, gy))
}

fn efdmix_backward_into(
    x: &[f64],
    y: &[f64],
    lambda: f64,
    grad_out: &[f64],
    gx: &mut [f64],
    gy: &mut [f64],
) {
    let tau = SortPermutation::of(x);
    let kappa = SortPermutation::of(y);
    for i in 0..x.len() {
        let t = tau.index(i);
        gx[t] += lambda * grad_out[t];
        gy[kappa.index(i)] += (1.0 - lambda) * grad_out[t];
    }
}

/// Checks that `partner` is a permutation of `0..n`.
pub fn validate_permutation(partner: &[usize], n: usize) -> Result<()> {
    if partner.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} for batch of {n}",
            partner.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in partner {
        if p >= n || seen[p] {
            return Err(Error::InvalidPermutation(format!(
                "{partner:?} is not a permutation of 0..{n}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// A uniformly random permutation of the batch indices.
pub fn random_partner<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Batch EFDMix with a partner permutation: each sample takes the sorted
/// values of its partner, mixed with weight `lambdas[b]` on itself.
pub fn efdmix_batch(
    batch: &FeatureBatch,
    lambdas: &[MixCoefficient],
    partner: &[usize],
) -> Result<FeatureBatch> {
    let n = batch.batch_size();
    validate_permutation(partner, n)?;
    check_lambda_count(lambdas, n)?;
    let mut out = batch.clone();
    for b in 0..n {
        for c in 0..batch.channels() {
            efdmix_into(
                batch.plane(b, c),
                batch.plane(partner[b], c),
                lambdas[b].value(),
                out.plane_mut(b, c),
            );
        }
    }
    Ok(out)
}

pub fn efdmix_batch_backward(
    batch: &FeatureBatch,
    lambdas: &[MixCoefficient],
    partner: &[usize],
    grad_out: &FeatureBatch,
) -> Result<FeatureBatch> {
    let n = batch.batch_size();
    validate_permutation(partner, n)?;
    check_lambda_count(lambdas, n)?;
    check_same_shape(batch, grad_out)?;
    let hw = batch.plane_len();
    let mut grad = FeatureBatch::zeros(n, batch.channels(), batch.height(), batch.width());
    let mut gx = vec![0.0; hw];
    let mut gy = vec![0.0; hw];
    for b in 0..n {
        let p = partner[b];
        for c in 0..batch.channels() {
            gx.fill(0.0);
            gy.fill(0.0);
            efdmix_backward_into(
                batch.plane(b, c),
                batch.plane(p, c),
                lambdas[b].value(),
                grad_out.plane(b, c),
                &mut gx,
                &mut gy,
            );
            for (g, v) in grad.plane_mut(b, c).iter_mut().zip(&gx) {
                *g += v;
            }
            for (g, v) in grad.plane_mut(p, c).iter_mut().zip(&gy) {
                *g += v;
            }
        }
    }
    Ok(grad)
}

fn check_lambda_count(lambdas: &[MixCoefficient], n: usize) -> Result<()> {
    if lambdas.len() != n {
        return Err(Error::Dimension(format!(
            "{} mixing coefficients for batch of {n}",
            lambdas.len()
        )));
    }
    Ok(())
}

fn check_same_shape(a: &FeatureBatch, b: &FeatureBatch) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "batches of shape {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Per-sample, per-channel statistics of a batch, row-major `B x C`.
#[derive(Debug, Clone)]
pub(crate) struct BatchStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl BatchStats {
    pub fn of(batch: &FeatureBatch) -> Self {
        let (b, c, _, _) = batch.shape();
        let mut mu = Vec::with_capacity(b * c);
        let mut sigma = Vec::with_capacity(b * c);
        for i in 0..b {
            let s = ChannelStats::of_planes(batch.sample_slice(i), c, batch.plane_len());
            mu.extend(s.mu);
            sigma.extend(s.sigma);
        }
        Self { mu, sigma }
    }
}

/// `out = gamma * (x - mu) / sigma + beta` with `beta`, `gamma` given per `(b, c)`.
pub(crate) fn renormalize(
    batch: &FeatureBatch,
    stats: &BatchStats,
    beta: &[f64],
    gamma: &[f64],
) -> FeatureBatch {
    let mut out = batch.clone();
    let c = batch.channels();
    for b in 0..batch.batch_size() {
        for ch in 0..c {
            let k = b * c + ch;
            let (m, s) = (stats.mu[k], stats.sigma[k]);
            let (bt, gm) = (beta[k], gamma[k]);
            for v in out.plane_mut(b, ch) {
                *v = gm * (*v - m) / s + bt;
            }
        }
    }
    out
}

/// Backward of [`renormalize`]. Returns the gradient reaching `x` through the
/// normalized term, plus `d beta` and `d gamma` for the caller to route into
/// whatever statistics produced them.
pub(crate) fn renormalize_backward(
    batch: &FeatureBatch,
    stats: &BatchStats,
    gamma: &[f64],
    grad_out: &FeatureBatch,
) -> (FeatureBatch, Vec<f64>, Vec<f64>) {
    let c = batch.channels();
    let hw = batch.plane_len() as f64;
    let mut grad = FeatureBatch::zeros(batch.batch_size(), c, batch.height(), batch.width());
    let mut dbeta = vec![0.0; stats.mu.len()];
    let mut dgamma = vec![0.0; stats.mu.len()];
    for b in 0..batch.batch_size() {
        for ch in 0..c {
            let k = b * c + ch;
            let (m, s) = (stats.mu[k], stats.sigma[k]);
            let x = batch.plane(b, ch);
            let g = grad_out.plane(b, ch);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (xv, gv) in x.iter().zip(g) {
                let xh = (xv - m) / s;
                sum_g += gv;
                sum_gx += gv * xh;
            }
            dbeta[k] = sum_g;
            dgamma[k] = sum_gx;
            // d xhat = g * gamma; instance-norm backward
            let mean_dxh = gamma[k] * sum_g / hw;
            let mean_dxh_xh = gamma[k] * sum_gx / hw;
            for ((o, xv), gv) in grad.plane_mut(b, ch).iter_mut().zip(x).zip(g) {
                let xh = (xv - m) / s;
                *o = (gamma[k] * gv - mean_dxh - xh * mean_dxh_xh) / s;
            }
        }
    }
    (grad, dbeta, dgamma)
}

/// Adds the gradient flowing into `x` through its own `mu` and `sigma`.
pub(crate) fn accumulate_stat_grads(
    batch: &FeatureBatch,
    stats: &BatchStats,
    dmu: &[f64],
    dsigma: &[f64],
    grad: &mut FeatureBatch,
) {
    let c = batch.channels();
    let hw = batch.plane_len() as f64;
    for b in 0..batch.batch_size() {
        for ch in 0..c {
            let k = b * c + ch;
            if dmu[k] == 0.0 && dsigma[k] == 0.0 {
                continue;
            }
            let (m, s) = (stats.mu[k], stats.sigma[k]);
            let x = batch.plane(b, ch).to_vec();
            for (o, xv) in grad.plane_mut(b, ch).iter_mut().zip(&x) {
                *o += dmu[k] / hw + dsigma[k] * (xv - m) / (s * hw);
            }
        }
    }
}

/// AdaIN: renormalize `content` to the target `style` statistics.
pub fn adain(content: &FeatureMap, style: &ChannelStats) -> Result<FeatureMap> {
    if style.channels() != content.channels() {
        return Err(Error::Dimension(format!(
            "content has {} channels, style statistics {}",
            content.channels(),
            style.channels()
        )));
    }
    let own = ChannelStats::of(content);
    let mut out = content.clone();
    for c in 0..content.channels() {
        let (m, s) = (own.mu[c], own.sigma[c]);
        let (bt, gm) = (style.mu[c], style.sigma[c]);
        for v in out.channel_mut(c) {
            *v = gm * (*v - m) / s + bt;
        }
    }
    Ok(out)
}

/// Gradient of [`adain`] with respect to `content`; the target statistics are constants.
pub fn adain_backward(
    content: &FeatureMap,
    style: &ChannelStats,
    grad_out: &FeatureMap,
) -> Result<FeatureMap> {
    if style.channels() != content.channels() || grad_out.shape() != content.shape() {
        return Err(Error::Dimension("adain backward shapes".into()));
    }
    let (c, h, w) = content.shape();
    let batch = FeatureBatch::from_raw(1, c, h, w, content.as_slice().to_vec());
    let g = FeatureBatch::from_raw(1, c, h, w, grad_out.as_slice().to_vec());
    let stats = BatchStats::of(&batch);
    let (grad, _, _) = renormalize_backward(&batch, &stats, &style.sigma, &g);
    Ok(FeatureMap::from_raw(c, h, w, grad.as_slice().to_vec()))
}

/// MixStyle: each sample's statistics are interpolated with its partner's.
pub fn mixstyle(
    batch: &FeatureBatch,
    lambdas: &[MixCoefficient],
    partner: &[usize],
) -> Result<FeatureBatch> {
    let n = batch.batch_size();
    validate_permutation(partner, n)?;
    check_lambda_count(lambdas, n)?;
    let stats = BatchStats::of(batch);
    let (beta, gamma) = mixstyle_targets(&stats, batch.channels(), lambdas, partner);
    Ok(renormalize(batch, &stats, &beta, &gamma))
}

fn mixstyle_targets(
    stats: &BatchStats,
    c: usize,
    lambdas: &[MixCoefficient],
    partner: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut beta = vec![0.0; stats.mu.len()];
    let mut gamma = vec![0.0; stats.mu.len()];
    for (b, (&p, l)) in partner.iter().zip(lambdas).enumerate() {
        let l = l.value();
        for ch in 0..c {
            let (k, kp) = (b * c + ch, p * c + ch);
            beta[k] = l * stats.mu[k] + (1.0 - l) * stats.mu[kp];
            gamma[k] = l * stats.sigma[k] + (1.0 - l) * stats.sigma[kp];
        }
    }
    (beta, gamma)
}

pub fn mixstyle_backward(
    batch: &FeatureBatch,
    lambdas: &[MixCoefficient],
    partner: &[usize],
    grad_out: &FeatureBatch,
) -> Result<FeatureBatch> {
    let n = batch.batch_size();
    validate_permutation(partner, n)?;
    check_lambda_count(lambdas, n)?;
    check_same_shape(batch, grad_out)?;
    let c = batch.channels();
    let stats = BatchStats::of(batch);
    let (_, gamma) = mixstyle_targets(&stats, c, lambdas, partner);
    let (mut grad, dbeta, dgamma) = renormalize_backward(batch, &stats, &gamma, grad_out);
    let mut dmu = vec![0.0; stats.mu.len()];
    let mut dsigma = vec![0.0; stats.mu.len()];
    for (b, (&p, l)) in partner.iter().zip(lambdas).enumerate() {
        let l = l.value();
        for ch in 0..c {
            let (k, kp) = (b * c + ch, p * c + ch);
            dmu[k] += l * dbeta[k];
            dmu[kp] += (1.0 - l) * dbeta[k];
            dsigma[k] += l * dgamma[k];
            dsigma[kp] += (1.0 - l) * dgamma[k];
        }
    }
    accumulate_stat_grads(batch, &stats, &dmu, &dsigma, &mut grad);
    Ok(grad)
}

/// Standard-normal perturbations for DSU, row-major `B x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct DsuNoise {
    pub eps_mu: Vec<f64>,
    pub eps_sigma: Vec<f64>,
}

impl DsuNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, channels: usize) -> Self {
        let n = batch * channels;
        let eps_mu = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let eps_sigma = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self { eps_mu, eps_sigma }
    }

    pub fn zeros(batch: usize, channels: usize) -> Self {
        Self {
            eps_mu: vec![0.0; batch * channels],
            eps_sigma: vec![0.0; batch * channels],
        }
    }
}

/// Per-channel sample standard deviation (divisor `B - 1`) of a `B x C` table.
fn batch_std(values: &[f64], b: usize, c: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| {
            let mean = (0..b).map(|i| values[i * c + ch]).sum::<f64>() / b as f64;
            let var = (0..b)
                .map(|i| (values[i * c + ch] - mean).powi(2))
                .sum::<f64>()
                / (b - 1) as f64;
            var.sqrt()
        })
        .collect()
}

/// Uncertainty estimates `(Sigma_mu, Sigma_sigma)` that DSU perturbs with.
pub fn dsu_uncertainty(batch: &FeatureBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, _, _) = batch.shape();
    if b < 2 {
        return Err(Error::InsufficientBatch { needed: 2, got: b });
    }
    let stats = BatchStats::of(batch);
    Ok((batch_std(&stats.mu, b, c), batch_std(&stats.sigma, b, c)))
}

/// DSU with freshly drawn perturbations.
pub fn dsu<R: Rng + ?Sized>(batch: &FeatureBatch, rng: &mut R) -> Result<FeatureBatch> {
    let noise = DsuNoise::draw(rng, batch.batch_size(), batch.channels());
    dsu_with_noise(batch, &noise)
}

struct DsuForward {
    stats: BatchStats,
    sd_mu: Vec<f64>,
    sd_sigma: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    clamped: Vec<bool>,
}

fn dsu_forward(batch: &FeatureBatch, noise: &DsuNoise) -> Result<DsuForward> {
    let (b, c, _, _) = batch.shape();
    if b < 2 {
        return Err(Error::InsufficientBatch { needed: 2, got: b });
    }
    if noise.eps_mu.len() != b * c || noise.eps_sigma.len() != b * c {
        return Err(Error::Dimension(format!(
            "DSU noise for {} entries, batch needs {}",
            noise.eps_mu.len(),
            b * c
        )));
    }
    let stats = BatchStats::of(batch);
    let sd_mu = batch_std(&stats.mu, b, c);
    let sd_sigma = batch_std(&stats.sigma, b, c);
    let mut beta = vec![0.0; b * c];
    let mut gamma = vec![0.0; b * c];
    let mut clamped = vec![false; b * c];
    for i in 0..b {
        for ch in 0..c {
            let k = i * c + ch;
            beta[k] = stats.mu[k] + noise.eps_mu[k] * sd_mu[ch];
            let g = stats.sigma[k] + noise.eps_sigma[k] * sd_sigma[ch];
            if g < EPS_STD {
                gamma[k] = EPS_STD;
                clamped[k] = true;
            } else {
                gamma[k] = g;
            }
        }
    }
    let n_clamped = clamped.iter().filter(|&&x| x).count();
    if n_clamped > 0 {
        log::warn!("DSU: clamped {n_clamped} perturbed sigma values at {EPS_STD}");
    }
    Ok(DsuForward {
        stats,
        sd_mu,
        sd_sigma,
        beta,
        gamma,
        clamped,
    })
}

/// DSU with explicit perturbations: `beta = mu + eps_mu * Sigma_mu`,
/// `gamma = max(sigma + eps_sigma * Sigma_sigma, EPS_STD)`.
pub fn dsu_with_noise(batch: &FeatureBatch, noise: &DsuNoise) -> Result<FeatureBatch> {
    let fwd = dsu_forward(batch, noise)?;
    Ok(renormalize(batch, &fwd.stats, &fwd.beta, &fwd.gamma))
}

pub fn dsu_backward(
    batch: &FeatureBatch,
    noise: &DsuNoise,
    grad_out: &FeatureBatch,
) -> Result<FeatureBatch> {
    check_same_shape(batch, grad_out)?;
    let fwd = dsu_forward(batch, noise)?;
    let (b, c, _, _) = batch.shape();
    let (mut grad, dbeta, mut dgamma) =
        renormalize_backward(batch, &fwd.stats, &fwd.gamma, grad_out);
    for (g, &cl) in dgamma.iter_mut().zip(&fwd.clamped) {
        if cl {
            *g = 0.0;
        }
    }
    let mut dmu = dbeta.clone();
    let mut dsigma = dgamma.clone();
    let route = |table: &[f64], sd: &[f64], eps: &[f64], upstream: &[f64], out: &mut [f64]| {
        for ch in 0..c {
            if sd[ch] == 0.0 {
                continue;
            }
            let d_sd: f64 = (0..b).map(|i| upstream[i * c + ch] * eps[i * c + ch]).sum();
            let mean = (0..b).map(|i| table[i * c + ch]).sum::<f64>() / b as f64;
            for i in 0..b {
                out[i * c + ch] += d_sd * (table[i * c + ch] - mean) / ((b - 1) as f64 * sd[ch]);
            }
        }
    };
    route(&fwd.stats.mu, &fwd.sd_mu, &noise.eps_mu, &dbeta, &mut dmu);
    route(
        &fwd.stats.sigma,
        &fwd.sd_sigma,
        &noise.eps_sigma,
        &dgamma,
        &mut dsigma,
    );
    accumulate_stat_grads(batch, &fwd.stats, &dmu, &dsigma, &mut grad);
    Ok(grad)
}
