//! Test-time style shifting.
//!
//! After training, the mean style of every source domain is recorded at one
//! layer. At inference a sample whose average style distance to those
//! centroids exceeds `alpha` times the centroids' own spread is renormalized
//! (AdaIN) to the nearest centroid; every other sample keeps its style.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansParams};
use crate::style_ops::adain;
use crate::tensor::{euclidean, mean_style, style_vector, FeatureMap, StyleVector};

/// Threshold multiplier for classification runs.
pub const DEFAULT_ALPHA: f64 = 3.0;
/// Threshold multiplier when domains come from clustering.
pub const PSEUDO_LABEL_ALPHA: f64 = 2.0;
/// Threshold multiplier for retrieval-style configurations.
pub const RETRIEVAL_ALPHA: f64 = 5.0;
/// Candidate pool size of the nearest-sample variant.
pub const DEFAULT_POOL_SIZE: usize = 100;

const INVARIANT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCentroid {
    pub name: String,
    pub style: StyleVector,
}

/// Per-domain mean styles at one layer, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainRegistry {
    layer: String,
    alpha: f64,
    channels: usize,
    domains: Vec<DomainCentroid>,
    global: StyleVector,
    spread: f64,
}

fn spread_of(global: &StyleVector, domains: &[DomainCentroid]) -> f64 {
    domains
        .iter()
        .map(|d| euclidean(global.as_slice(), d.style.as_slice()))
        .sum::<f64>()
        / domains.len() as f64
}

impl DomainRegistry {
    pub fn from_centroids(
        layer: impl Into<String>,
        alpha: f64,
        domains: Vec<DomainCentroid>,
    ) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::RegistryBuild("no domains".into()));
        }
        if alpha.is_nan() || alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        let len = domains[0].style.len();
        if let Some(d) = domains.iter().find(|d| d.style.len() != len) {
            return Err(Error::Dimension(format!(
                "domain {} has a style of length {}, expected {len}",
                d.name,
                d.style.len()
            )));
        }
        let styles: Vec<StyleVector> = domains.iter().map(|d| d.style.clone()).collect();
        let global = mean_style(&styles)?;
        let spread = spread_of(&global, &domains);
        Ok(Self {
            layer: layer.into(),
            alpha,
            channels: len / 2,
            domains,
            global,
            spread,
        })
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domains(&self) -> &[DomainCentroid] {
        &self.domains
    }

    pub fn centroid(&self, n: usize) -> &StyleVector {
        &self.domains[n].style
    }

    pub fn global(&self) -> &StyleVector {
        &self.global
    }

    /// `(1 / N) * sum_n ||global - centroid_n||`
    pub fn spread(&self) -> f64 {
        self.spread
    }

    pub fn to_json(&self) -> String {
        let file = RegistryFile {
            layer: self.layer.clone(),
            alpha: self.alpha,
            channels: self.channels,
            domains: self
                .domains
                .iter()
                .map(|d| DomainEntry {
                    name: d.name.clone(),
                    mu: d.style.mu().to_vec(),
                    sigma: d.style.sigma().to_vec(),
                })
                .collect(),
            global: StatsEntry {
                mu: self.global.mu().to_vec(),
                sigma: self.global.sigma().to_vec(),
            },
            spread: self.spread,
        };
        serde_json::to_string_pretty(&file).expect("registry serializes")
    }

    /// Parses a registry file and checks its cached fields against the centroids.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegistryFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        let to_style = |mu: Vec<f64>, sigma: Vec<f64>| -> Result<StyleVector> {
            if mu.len() != file.channels || sigma.len() != file.channels {
                return Err(Error::Dimension(format!(
                    "registry declares {} channels, entry has {} / {}",
                    file.channels,
                    mu.len(),
                    sigma.len()
                )));
            }
            StyleVector::new([mu, sigma].concat())
        };
        let mut domains = Vec::with_capacity(file.domains.len());
        for d in file.domains {
            domains.push(DomainCentroid {
                name: d.name,
                style: to_style(d.mu, d.sigma)?,
            });
        }
        if domains.is_empty() {
            return Err(Error::RegistryBuild(
                "registry file lists no domains".into(),
            ));
        }
        let global = to_style(file.global.mu, file.global.sigma)?;
        let styles: Vec<StyleVector> = domains.iter().map(|d| d.style.clone()).collect();
        let mean = mean_style(&styles)?;
        let drift = euclidean(mean.as_slice(), global.as_slice());
        if drift > INVARIANT_TOL {
            return Err(Error::Invariant(format!(
                "stored global style is {drift:e} away from the mean of the centroids"
            )));
        }
        let spread = spread_of(&global, &domains);
        if (spread - file.spread).abs() > INVARIANT_TOL {
            return Err(Error::Invariant(format!(
                "stored spread {} disagrees with recomputed {spread}",
                file.spread
            )));
        }
        Ok(Self {
            layer: file.layer,
            alpha: file.alpha,
            channels: file.channels,
            domains,
            global,
            spread: file.spread,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    start + column.saturating_sub(1)
}

#[derive(Serialize, Deserialize)]
struct DomainEntry {
    name: String,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StatsEntry {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    layer: String,
    alpha: f64,
    channels: usize,
    domains: Vec<DomainEntry>,
    global: StatsEntry,
    spread: f64,
}

/// Builds a registry from per-sample styles and their domain labels.
/// The global style is the mean of the domain means, not of the samples.
pub fn registry_from_styles(
    layer: impl Into<String>,
    alpha: f64,
    names: &[String],
    styles: &[StyleVector],
    labels: &[usize],
) -> Result<DomainRegistry> {
    if styles.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} styles with {} labels",
            styles.len(),
            labels.len()
        )));
    }
    let mut domains = Vec::with_capacity(names.len());
    for (n, name) in names.iter().enumerate() {
        let members: Vec<StyleVector> = styles
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == n)
            .map(|(s, _)| s.clone())
            .collect();
        if members.is_empty() {
            return Err(Error::RegistryBuild(format!(
                "domain {n} ({name}) has no samples"
            )));
        }
        domains.push(DomainCentroid {
            name: name.clone(),
            style: mean_style(&members)?,
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= names.len()) {
        return Err(Error::RegistryBuild(format!(
            "label {l} has no domain name"
        )));
    }
    DomainRegistry::from_centroids(layer, alpha, domains)
}

/// Outcome of the shift test for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftDecision {
    /// Destination domain, or `None` to keep the original style.
    pub shift_to: Option<usize>,
    pub avg_distance: f64,
    pub threshold: f64,
}

impl ShiftDecision {
    pub fn shifted(&self) -> bool {
        self.shift_to.is_some()
    }
}

/// Index of the nearest centroid; ties go to the lower id.
pub fn nearest_domain(phi: &StyleVector, reg: &DomainRegistry) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (n, d) in reg.domains.iter().enumerate() {
        let dist = euclidean(phi.as_slice(), d.style.as_slice());
        if dist < best_d {
            best = n;
            best_d = dist;
        }
    }
    best
}

/// Shift iff the average distance to the centroids exceeds `alpha * spread`.
pub fn decide(phi_t: &StyleVector, reg: &DomainRegistry, alpha: f64) -> Result<ShiftDecision> {
    if phi_t.len() != reg.global.len() {
        return Err(Error::Dimension(format!(
            "style of length {} against registry of length {}",
            phi_t.len(),
            reg.global.len()
        )));
    }
    let avg_distance = reg
        .domains
        .iter()
        .map(|d| euclidean(phi_t.as_slice(), d.style.as_slice()))
        .sum::<f64>()
        / reg.domains.len() as f64;
    let threshold = alpha * reg.spread;
    let shift_to = (avg_distance > threshold).then(|| nearest_domain(phi_t, reg));
    Ok(ShiftDecision {
        shift_to,
        avg_distance,
        threshold,
    })
}

/// Which test-time rule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftMode {
    Off,
    Proposed,
    /// Always shift to the nearest centroid.
    ShiftAll,
    /// Threshold test, then shift to the nearest of `pool_size` random
    /// training styles.
    NearestSample {
        pool_size: usize,
    },
    /// Always shift to the first (only) source domain.
    SingleDomain,
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShiftMode::Off => f.write_str("off"),
            ShiftMode::Proposed => f.write_str("proposed"),
            ShiftMode::ShiftAll => f.write_str("shift-all"),
            ShiftMode::NearestSample { pool_size } if *pool_size == DEFAULT_POOL_SIZE => {
                f.write_str("nearest-sample")
            }
            ShiftMode::NearestSample { pool_size } => write!(f, "nearest-sample:{pool_size}"),
            ShiftMode::SingleDomain => f.write_str("single-domain"),
        }
    }
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let mode = match (head, arg) {
            ("off", None) => ShiftMode::Off,
            ("proposed", None) => ShiftMode::Proposed,
            ("shift-all", None) => ShiftMode::ShiftAll,
            ("single-domain", None) => ShiftMode::SingleDomain,
            ("nearest-sample", None) => ShiftMode::NearestSample {
                pool_size: DEFAULT_POOL_SIZE,
            },
            ("nearest-sample", Some(n)) => {
                let pool_size: usize = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad pool size in {s:?}")))?;
                if pool_size == 0 {
                    return Err(Error::Config("pool size must be at least 1".into()));
                }
                ShiftMode::NearestSample { pool_size }
            }
            _ => return Err(Error::Config(format!("unknown shift mode {s:?}"))),
        };
        Ok(mode)
    }
}

/// Applies the selected test-time rule to one sample's features.
pub fn ts_apply<R: Rng + ?Sized>(
    f_t: &FeatureMap,
    reg: &DomainRegistry,
    alpha: f64,
    mode: ShiftMode,
    sample_pool: Option<&[StyleVector]>,
    rng: &mut R,
) -> Result<(FeatureMap, ShiftDecision)> {
    if f_t.channels() != reg.channels {
        return Err(Error::Dimension(format!(
            "features with {} channels against registry of {}",
            f_t.channels(),
            reg.channels
        )));
    }
    let phi = style_vector(f_t);
    let decision = decide(&phi, reg, alpha)?;
    let (target, decision) = match mode {
        ShiftMode::Off => (
            None,
            ShiftDecision {
                shift_to: None,
                ..decision
            },
        ),
        ShiftMode::Proposed => (decision.shift_to.map(|n| reg.centroid(n).clone()), decision),
        ShiftMode::ShiftAll => {
            let n = nearest_domain(&phi, reg);
            (
                Some(reg.centroid(n).clone()),
                ShiftDecision {
                    shift_to: Some(n),
                    ..decision
                },
            )
        }
        ShiftMode::SingleDomain => (
            Some(reg.centroid(0).clone()),
            ShiftDecision {
                shift_to: Some(0),
                ..decision
            },
        ),
        ShiftMode::NearestSample { pool_size } => {
            let pool = sample_pool.filter(|p| !p.is_empty()).ok_or_else(|| {
                Error::Config("nearest-sample mode needs a pool of training styles".into())
            })?;
            if pool_size == 0 {
                return Err(Error::Config("pool size must be at least 1".into()));
            }
            if decision.shifted() {
                let take = pool_size.min(pool.len());
                let picked = sample_indices(rng, pool.len(), take);
                let best = picked
                    .iter()
                    .min_by(|&a, &b| {
                        euclidean(phi.as_slice(), pool[a].as_slice())
                            .total_cmp(&euclidean(phi.as_slice(), pool[b].as_slice()))
                    })
                    .expect("pool is nonempty");
                (Some(pool[best].clone()), decision)
            } else {
                (None, decision)
            }
        }
    };
    match target {
        Some(style) => Ok((adain(f_t, &style.to_stats())?, decision)),
        None => Ok((f_t.clone(), decision)),
    }
}

/// Pseudo domain labels from k-means over style vectors.
pub fn pseudo_domains<R: Rng + ?Sized>(
    styles: &[StyleVector],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if styles.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot form {k} pseudo domains",
            styles.len()
        )));
    }
    let points: Vec<Vec<f64>> = styles.iter().map(|s| s.as_slice().to_vec()).collect();
    Ok(kmeans(&points, k, &KMeansParams::default(), rng)?.labels)
}
