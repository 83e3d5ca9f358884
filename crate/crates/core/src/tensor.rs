//! Dense feature tensors and the per-instance style statistics computed on them.
//!
//! All reductions sum left to right in storage order, so results never depend
//! on how work is split across threads.

use crate::error::{Error, Result};

/// Stabilizer added under the square root of every standard deviation.
pub const EPS_STD: f64 = 1e-6;

fn check_dims(dims: &[usize], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Dimension(format!(
            "all dimensions must be positive, got {dims:?}"
        )));
    }
    let expected: usize = dims.iter().product();
    if expected != len {
        return Err(Error::Dimension(format!(
            "shape {dims:?} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// One sample's activations, `C x H x W` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(&[channels, height, width], data.len())?;
        check_finite(&data)?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Builds a map whose `(c, h, w)` entry is `f(c, h, w)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(channels * height * width, data.len());
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(C, H, W)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Number of spatial positions, `H * W`.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.plane_len();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.plane_len();
        &mut self.data[c * hw..(c + 1) * hw]
    }
}

/// A mini-batch of activations, `B x C x H x W` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        check_dims(&[batch, channels, height, width], data.len())?;
        check_finite(&data)?;
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    pub(crate) fn from_raw(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(batch * channels * height * width, data.len());
        Self {
            batch,
            channels,
            height,
            width,
            data,
        }
    }

    /// Stacks equally shaped maps into a batch.
    pub fn from_maps(maps: &[FeatureMap]) -> Result<Self> {
        let first = maps.first().ok_or(Error::EmptySet("feature maps"))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(maps.len() * first.data.len());
        for (i, m) in maps.iter().enumerate() {
            if m.shape() != shape {
                return Err(Error::Dimension(format!(
                    "map {i} has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Self::from_raw(maps.len(), shape.0, shape.1, shape.2, data))
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(B, C, H, W)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sample_slice(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_slice_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Values of channel `c` of sample `b`.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.plane_len();
        let start = (b * self.channels + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let hw = self.plane_len();
        let start = (b * self.channels + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Copy of sample `b` as a standalone map.
    pub fn sample(&self, b: usize) -> FeatureMap {
        FeatureMap::from_raw(
            self.channels,
            self.height,
            self.width,
            self.sample_slice(b).to_vec(),
        )
    }

    pub fn set_sample(&mut self, b: usize, map: &FeatureMap) -> Result<()> {
        if map.shape() != (self.channels, self.height, self.width) {
            return Err(Error::Dimension(format!(
                "cannot store map of shape {:?} into batch of sample shape {:?}",
                map.shape(),
                (self.channels, self.height, self.width)
            )));
        }
        self.sample_slice_mut(b).copy_from_slice(map.as_slice());
        Ok(())
    }

    pub fn to_maps(&self) -> Vec<FeatureMap> {
        (0..self.batch).map(|b| self.sample(b)).collect()
    }
}

/// Mean of one channel plane.
pub fn plane_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Stabilized population standard deviation of one channel plane.
pub fn plane_std(values: &[f64], mean: f64, eps_std: f64) -> f64 {
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (var + eps_std * eps_std).sqrt()
}

/// Per-channel mean and standard deviation of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Dimension(format!(
                "mu has {} channels, sigma has {}",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.is_empty() {
            return Err(Error::EmptySet("channel statistics"));
        }
        check_finite(&mu)?;
        check_finite(&sigma)?;
        if let Some(c) = sigma.iter().position(|&s| s <= 0.0) {
            return Err(Error::Dimension(format!(
                "sigma[{c}] = {} is not positive",
                sigma[c]
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn of(map: &FeatureMap) -> Self {
        Self::of_planes(map.as_slice(), map.channels(), map.plane_len())
    }

    /// Statistics of `channels` consecutive planes of `plane_len` values.
    pub fn of_planes(data: &[f64], channels: usize, plane_len: usize) -> Self {
        let mut mu = Vec::with_capacity(channels);
        let mut sigma = Vec::with_capacity(channels);
        for plane in data.chunks_exact(plane_len).take(channels) {
            let m = plane_mean(plane);
            mu.push(m);
            sigma.push(plane_std(plane, m, EPS_STD));
        }
        Self { mu, sigma }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// `phi = [mu, sigma]`, the style of one instance or the mean style of a set.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector(Vec<f64>);

impl StyleVector {
    /// Wraps a raw `2C` vector.
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        if phi.is_empty() || !phi.len().is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "style vector length must be a positive even number, got {}",
                phi.len()
            )));
        }
        check_finite(&phi)?;
        Ok(Self(phi))
    }

    pub fn from_stats(stats: &ChannelStats) -> Self {
        let mut phi = Vec::with_capacity(2 * stats.channels());
        phi.extend_from_slice(&stats.mu);
        phi.extend_from_slice(&stats.sigma);
        Self(phi)
    }

    pub fn channels(&self) -> usize {
        self.0.len() / 2
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mu(&self) -> &[f64] {
        &self.0[..self.channels()]
    }

    pub fn sigma(&self) -> &[f64] {
        &self.0[self.channels()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Splits back into channel statistics.
    pub fn to_stats(&self) -> ChannelStats {
        ChannelStats {
            mu: self.mu().to_vec(),
            sigma: self.sigma().to_vec(),
        }
    }
}

/// `out[c] = (1 / HW) * sum over h, w of f[c, h, w]`
pub fn channel_mean(f: &FeatureMap) -> Vec<f64> {
    (0..f.channels())
        .map(|c| plane_mean(f.channel(c)))
        .collect()
}

/// `out[c] = sqrt(var_c + eps_std^2)` with the population variance over `H * W`.
pub fn channel_std(f: &FeatureMap, eps_std: f64) -> Vec<f64> {
    (0..f.channels())
        .map(|c| {
            let plane = f.channel(c);
            plane_std(plane, plane_mean(plane), eps_std)
        })
        .collect()
}

pub fn style_vector(f: &FeatureMap) -> StyleVector {
    StyleVector::from_stats(&ChannelStats::of(f))
}

/// Euclidean distance between two style vectors.
pub fn style_distance(a: &StyleVector, b: &StyleVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "style vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(euclidean(a.as_slice(), b.as_slice()))
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Element-wise arithmetic mean of a nonempty list of style vectors.
pub fn mean_style(samples: &[StyleVector]) -> Result<StyleVector> {
    let first = samples.first().ok_or(Error::EmptySet("style vectors"))?;
    let mut acc = vec![0.0; first.len()];
    for s in samples {
        if s.len() != acc.len() {
            return Err(Error::Dimension(format!(
                "style vectors of length {} and {}",
                acc.len(),
                s.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(s.as_slice()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(StyleVector(acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map1(values: &[f64]) -> FeatureMap {
        FeatureMap::new(1, 2, values.len() / 2, values.to_vec()).unwrap()
    }

    #[test]
    fn mean_of_small_map() {
        assert_eq!(channel_mean(&map1(&[1.0, 2.0, 3.0, 4.0])), vec![2.5]);
        assert_eq!(channel_mean(&map1(&[7.0; 4])), vec![7.0]);
        assert_eq!(channel_mean(&map1(&[-3.0, 1.0, -1.0, 3.0])), vec![0.0]);
    }

    #[test]
    fn std_uses_population_variance() {
        let s = channel_std(&map1(&[1.0, 2.0, 3.0, 4.0]), 1e-12)[0];
        assert!((s - 1.25f64.sqrt()).abs() < 1e-12);
        let s = channel_std(&map1(&[5.0; 4]), 1e-6)[0];
        assert!((s - 1e-6).abs() < 1e-18);
        let scaled = channel_std(&map1(&[3.0, 6.0, 9.0, 12.0]), 1e-12)[0];
        assert!((scaled - 3.0 * 1.25f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn style_vector_layout() {
        let phi = style_vector(&map1(&[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(phi.len(), 2);
        assert_eq!(phi.mu(), &[2.5]);
        assert!((phi.sigma()[0] - 1.118_033_988_749_895).abs() < 1e-9);

        let constant = FeatureMap::new(2, 2, 2, vec![4.0; 8]).unwrap();
        let phi = style_vector(&constant);
        assert_eq!(phi.as_slice(), &[4.0, 4.0, EPS_STD, EPS_STD]);
    }

    #[test]
    fn distance_examples() {
        let a = StyleVector::new(vec![0.0, 1.0]).unwrap();
        let b = StyleVector::new(vec![3.0, 5.0]).unwrap();
        assert_eq!(style_distance(&a, &b).unwrap(), 5.0);
        assert_eq!(style_distance(&b, &a).unwrap(), 5.0);
        assert_eq!(style_distance(&a, &a).unwrap(), 0.0);
        let c = StyleVector::new(vec![0.0; 4]).unwrap();
        assert!(matches!(style_distance(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_style_examples() {
        let a = StyleVector::new(vec![0.0, 0.0]).unwrap();
        let b = StyleVector::new(vec![2.0, 4.0]).unwrap();
        assert_eq!(
            mean_style(&[a.clone(), b.clone()]).unwrap().as_slice(),
            &[1.0, 2.0]
        );
        assert_eq!(mean_style(std::slice::from_ref(&b)).unwrap(), b);
        assert!(matches!(mean_style(&[]), Err(Error::EmptySet(_))));
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(FeatureMap::new(1, 0, 2, vec![]).is_err());
        assert!(FeatureMap::new(1, 1, 2, vec![1.0]).is_err());
        assert!(matches!(
            FeatureMap::new(1, 1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(FeatureBatch::new(2, 1, 1, 1, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn batch_views_keep_shape() {
        let batch = FeatureBatch::new(2, 2, 1, 2, (0..8).map(f64::from).collect()).unwrap();
        let s1 = batch.sample(1);
        assert_eq!(s1.shape(), (2, 1, 2));
        assert_eq!(s1.as_slice(), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(batch.plane(1, 1), &[6.0, 7.0]);
        let back = FeatureBatch::from_maps(&batch.to_maps()).unwrap();
        assert_eq!(back, batch);
    }
}
