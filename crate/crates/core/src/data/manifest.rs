//! Dataset manifest and the training-split imbalance constructions.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shift::byte_offset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub domain: usize,
    pub class: usize,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: String,
}

/// How the training split of the source domains is thinned out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImbalanceSpec {
    Balanced,
    /// The largest source domain is kept; every other source keeps
    /// `keep_fraction` of each of its class cells.
    DataImbalance {
        keep_fraction: f64,
    },
    /// Source domain `i` keeps only the classes in `subsets[i]`. When
    /// omitted, the classes are split into contiguous, nearly equal runs.
    ClassImbalance {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subsets: Option<Vec<Vec<usize>>>,
    },
    /// Class counts decay geometrically from class 0 to the last class,
    /// with head/tail ratio `ratio`.
    LongTailed {
        ratio: f64,
    },
}

impl ImbalanceSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ImbalanceSpec::DataImbalance { keep_fraction }
                if !(*keep_fraction > 0.0 && *keep_fraction <= 1.0) =>
            {
                Err(Error::Config(format!(
                    "keep_fraction {keep_fraction} outside (0, 1]"
                )))
            }
            ImbalanceSpec::LongTailed { ratio } if !(*ratio >= 1.0 && ratio.is_finite()) => Err(
                Error::Config(format!("long-tail ratio {ratio} must be at least 1")),
            ),
            _ => Ok(()),
        }
    }
}

/// Contiguous split of `classes` into `parts` runs, larger runs first
/// (7 over 3 gives 3/2/2).
pub fn contiguous_subsets(classes: usize, parts: usize) -> Vec<Vec<usize>> {
    let (base, extra) = (classes / parts, classes % parts);
    let mut next = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let run = (next..next + len).collect();
            next += len;
            run
        })
        .collect()
}

/// Per-class keep counts of a long-tailed profile over `classes` classes
/// starting from `head` samples.
pub fn long_tail_counts(head: usize, classes: usize, ratio: f64) -> Vec<usize> {
    (0..classes)
        .map(|k| {
            let t = if classes > 1 {
                k as f64 / (classes - 1) as f64
            } else {
                0.0
            };
            ((head as f64 * ratio.powf(-t)).round() as usize).clamp(1, head.max(1))
        })
        .collect()
}

fn balanced() -> ImbalanceSpec {
    ImbalanceSpec::Balanced
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    #[serde(default = "balanced")]
    pub imbalance: ImbalanceSpec,
    /// Domains excluded from the imbalance (the targets).
    #[serde(default)]
    pub held_out: Vec<usize>,
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate sample id {}", w[0])));
        }
        let (nd, nk) = (self.num_domains(), self.num_classes());
        if let Some(s) = self
            .samples
            .iter()
            .find(|s| s.domain >= nd || s.class >= nk)
        {
            return Err(Error::Config(format!(
                "sample {} has domain {} / class {} outside {nd} domains and {nk} classes",
                s.id, s.domain, s.class
            )));
        }
        self.imbalance.validate()
    }

    pub fn num_domains(&self) -> usize {
        if self.domains.is_empty() {
            self.samples.iter().map(|s| s.domain + 1).max().unwrap_or(0)
        } else {
            self.domains.len()
        }
    }

    pub fn num_classes(&self) -> usize {
        if self.classes.is_empty() {
            self.samples.iter().map(|s| s.class + 1).max().unwrap_or(0)
        } else {
            self.classes.len()
        }
    }

    /// Train samples per `(domain, class)`.
    pub fn train_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.num_classes()]; self.num_domains()];
        for s in self.samples.iter().filter(|s| s.split == Split::Train) {
            counts[s.domain][s.class] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Subsamples the training split of every domain not in `held_out`. Test
/// samples and held-out domains are never touched. Returns the indices of
/// the retained samples in manifest order alongside the new manifest.
pub fn apply_imbalance<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    spec: &ImbalanceSpec,
    held_out: &[usize],
    rng: &mut R,
) -> Result<(DatasetManifest, Vec<usize>)> {
    spec.validate()?;
    if manifest.imbalance != ImbalanceSpec::Balanced {
        return Err(Error::Config(
            "imbalance can only be applied to a balanced manifest".into(),
        ));
    }
    let nd = manifest.num_domains();
    let nk = manifest.num_classes();
    if let Some(&d) = held_out.iter().find(|&&d| d >= nd) {
        return Err(Error::Config(format!("held-out domain {d} does not exist")));
    }
    let sources: Vec<usize> = (0..nd).filter(|d| !held_out.contains(d)).collect();
    if sources.is_empty() {
        return Err(Error::Config("every domain is held out".into()));
    }
    let counts = manifest.train_counts();
    // keep[d][k]: how many train samples of cell (d, k) survive
    let mut keep: Vec<Vec<usize>> = counts.clone();
    match spec {
        ImbalanceSpec::Balanced => {}
        ImbalanceSpec::DataImbalance { keep_fraction } => {
            let largest = *sources
                .iter()
                .max_by(|&&a, &&b| {
                    let (ca, cb): (usize, usize) = (counts[a].iter().sum(), counts[b].iter().sum());
                    ca.cmp(&cb).then(b.cmp(&a))
                })
                .expect("sources nonempty");
            for &d in sources.iter().filter(|&&d| d != largest) {
                for k in 0..nk {
                    if counts[d][k] > 0 {
                        keep[d][k] =
                            ((counts[d][k] as f64 * keep_fraction).round() as usize).max(1);
                    }
                }
            }
        }
        ImbalanceSpec::ClassImbalance { subsets } => {
            let subsets = subsets
                .clone()
                .unwrap_or_else(|| contiguous_subsets(nk, sources.len()));
            if subsets.len() != sources.len() {
                return Err(Error::Config(format!(
                    "{} class subsets for {} source domains",
                    subsets.len(),
                    sources.len()
                )));
            }
            if let Some(&k) = subsets.iter().flatten().find(|&&k| k >= nk) {
                return Err(Error::Config(format!("class {k} does not exist")));
            }
            for (sub, &d) in subsets.iter().zip(&sources) {
                for k in 0..nk {
                    if !sub.contains(&k) {
                        keep[d][k] = 0;
                    }
                }
            }
        }
        ImbalanceSpec::LongTailed { ratio } => {
            for &d in &sources {
                let head = counts[d][0];
                if counts[d].iter().any(|&c| c != head) {
                    return Err(Error::Config(format!(
                        "long-tailed imbalance needs equal class cells in domain {d}"
                    )));
                }
                keep[d] = long_tail_counts(head, nk, *ratio);
            }
        }
    }
    // cell members in manifest order, then a seeded subset of each
    let mut members: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); nk]; nd];
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.split == Split::Train {
            members[s.domain][s.class].push(i);
        }
    }
    let mut retained = vec![true; manifest.samples.len()];
    for d in 0..nd {
        for k in 0..nk {
            let cell = &members[d][k];
            if keep[d][k] >= cell.len() {
                continue;
            }
            let mut chosen = vec![false; cell.len()];
            for j in rand::seq::index::sample(rng, cell.len(), keep[d][k]) {
                chosen[j] = true;
            }
            for (j, &i) in cell.iter().enumerate() {
                retained[i] = chosen[j];
            }
        }
    }
    let indices: Vec<usize> = (0..manifest.samples.len())
        .filter(|&i| retained[i])
        .collect();
    let out = DatasetManifest {
        seed: manifest.seed,
        imbalance: spec.clone(),
        held_out: held_out.to_vec(),
        domains: manifest.domains.clone(),
        classes: manifest.classes.clone(),
        samples: indices
            .iter()
            .map(|&i| manifest.samples[i].clone())
            .collect(),
    };
    Ok((out, indices))
}
