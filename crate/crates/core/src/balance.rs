//! Style balancing: within one mini-batch, move the styles of redundant
//! samples from domains that over-represent a class to domains that
//! under-represent it.
//!
//! Per class the work is: integer targets per domain, a surplus-to-deficit
//! move matrix, greedy removal of the most redundant styles from each surplus
//! domain, then a sort-matching transplant onto two style carriers drawn from
//! the destination domain.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::style_ops::{sample_lambda, MixCoefficient, SortPermutation, DEFAULT_LAMBDA_SHAPE};
use crate::tensor::{euclidean, style_vector, FeatureBatch, FeatureMap, StyleVector};

/// Domain and class label of every sample in a batch. Ids are zero-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchMeta {
    domains: Vec<usize>,
    classes: Vec<usize>,
    num_domains: usize,
    num_classes: usize,
}

impl BatchMeta {
    pub fn new(
        domains: Vec<usize>,
        classes: Vec<usize>,
        num_domains: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if domains.len() != classes.len() {
            return Err(Error::Dimension(format!(
                "{} domain labels but {} class labels",
                domains.len(),
                classes.len()
            )));
        }
        if let Some(d) = domains.iter().find(|&&d| d >= num_domains) {
            return Err(Error::Config(format!(
                "domain id {d} out of range 0..{num_domains}"
            )));
        }
        if let Some(k) = classes.iter().find(|&&k| k >= num_classes) {
            return Err(Error::Config(format!(
                "class id {k} out of range 0..{num_classes}"
            )));
        }
        Ok(Self {
            domains,
            classes,
            num_domains,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domain(&self, i: usize) -> usize {
        self.domains[i]
    }

    pub fn class(&self, i: usize) -> usize {
        self.classes[i]
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Sample indices of class `k` in domain `n`, in batch order.
    pub fn cell(&self, n: usize, k: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.domains[i] == n && self.classes[i] == k)
            .collect()
    }

    /// Per-domain counts of class `k`.
    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; self.num_domains];
        for (d, c) in self.domains.iter().zip(&self.classes) {
            if *c == k {
                counts[*d] += 1;
            }
        }
        counts
    }
}

/// Integer per-domain targets for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceTargets {
    /// Real-valued per-domain average.
    pub average: f64,
    pub targets: Vec<usize>,
}

impl BalanceTargets {
    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Every domain gets `floor(average)`; the remaining units go to the domains
/// with the largest original counts, ties by ascending id.
pub fn compute_targets(counts: &[usize]) -> Result<BalanceTargets> {
    let n = counts.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "balancing needs at least 2 domains, got {n}"
        )));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Ok(BalanceTargets {
            average: 0.0,
            targets: Vec::new(),
        });
    }
    let floor = total / n;
    let remainder = total - floor * n;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut targets = vec![floor; n];
    for &d in order.iter().take(remainder) {
        targets[d] += 1;
    }
    Ok(BalanceTargets {
        average: total as f64 / n as f64,
        targets,
    })
}

/// `moves[from][to]` sample counts for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoveMatrix {
    n: usize,
    cells: Vec<usize>,
}

impl MoveMatrix {
    pub fn get(&self, from: usize, to: usize) -> usize {
        self.cells[from * self.n + to]
    }

    pub fn num_domains(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|&m| m == 0)
    }

    pub fn total(&self) -> usize {
        self.cells.iter().sum()
    }

    /// Total leaving domain `from`.
    pub fn outgoing(&self, from: usize) -> usize {
        (0..self.n).map(|to| self.get(from, to)).sum()
    }

    /// Nonzero entries as `(from, to, count)`, row-major.
    pub fn entries(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for from in 0..self.n {
            for to in 0..self.n {
                let m = self.get(from, to);
                if m > 0 {
                    out.push((from, to, m));
                }
            }
        }
        out
    }
}

/// Greedy assignment: surplus domains in ascending id fill deficit domains in
/// ascending id.
pub fn build_move_matrix(counts: &[usize], targets: &BalanceTargets) -> Result<MoveMatrix> {
    let n = counts.len();
    if targets.is_empty() {
        return Ok(MoveMatrix {
            n,
            cells: vec![0; n * n],
        });
    }
    if targets.targets.len() != n {
        return Err(Error::Invariant(format!(
            "{} targets for {n} domains",
            targets.targets.len()
        )));
    }
    let total: usize = counts.iter().sum();
    let target_total: usize = targets.targets.iter().sum();
    if total != target_total {
        return Err(Error::Invariant(format!(
            "counts sum to {total}, targets to {target_total}"
        )));
    }
    let mut deficit: Vec<usize> = counts
        .iter()
        .zip(&targets.targets)
        .map(|(&c, &t)| t.saturating_sub(c))
        .collect();
    let mut cells = vec![0; n * n];
    for from in 0..n {
        let mut surplus = counts[from].saturating_sub(targets.targets[from]);
        for to in 0..n {
            if surplus == 0 {
                break;
            }
            let m = surplus.min(deficit[to]);
            if m > 0 {
                cells[from * n + to] = m;
                surplus -= m;
                deficit[to] -= m;
            }
        }
        if surplus != 0 {
            return Err(Error::Invariant(format!(
                "domain {from} has {surplus} unassigned surplus samples"
            )));
        }
    }
    if deficit.iter().any(|&d| d != 0) {
        return Err(Error::Invariant(format!("unfilled deficits {deficit:?}")));
    }
    Ok(MoveMatrix { n, cells })
}

/// Result of the redundancy-based sample selection in one cell.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selection {
    /// Positions into the input list, in selection order.
    pub selected: Vec<usize>,
    /// Set when the requested count was capped so one sample stays behind.
    pub capped: bool,
    /// Number of pairwise style distances evaluated.
    pub distance_evals: usize,
}

/// Picks `m` samples whose styles are most redundant within the cell.
///
/// Each round takes the closest pair `(i*, j*)` in the remaining pool and
/// selects `i*` if its nearest other neighbour (excluding `j*`) is strictly
/// closer than `j*`'s, otherwise `j*`. The selected sample leaves the pool.
/// Pairwise distances are computed once and reused across rounds.
pub fn select_samples(styles: &[StyleVector], m: usize) -> Result<Selection> {
    let size = styles.len();
    if let Some(s) = styles.iter().find(|s| s.len() != styles[0].len()) {
        return Err(Error::Dimension(format!(
            "style vectors of length {} and {}",
            styles[0].len(),
            s.len()
        )));
    }
    let mut capped = false;
    let mut m = m;
    let cap = size.saturating_sub(1);
    if m > cap {
        log::warn!("style balancing: {m} moves requested from a cell of {size}; capped at {cap}");
        m = cap;
        capped = true;
    }
    if m == 0 {
        return Ok(Selection {
            selected: Vec::new(),
            capped,
            distance_evals: 0,
        });
    }

    let mut dist = vec![0.0; size * size];
    let mut evals = 0;
    for i in 0..size {
        for j in i + 1..size {
            let d = euclidean(styles[i].as_slice(), styles[j].as_slice());
            dist[i * size + j] = d;
            dist[j * size + i] = d;
            evals += 1;
        }
    }

    let mut pool: Vec<usize> = (0..size).collect();
    let mut selected = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(usize, usize, f64)> = None;
        for (a, &i) in pool.iter().enumerate() {
            for &j in &pool[a + 1..] {
                let d = dist[i * size + j];
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        let (i, j, _) = best.expect("pool keeps at least two members");
        let nearest = |me: usize, other: usize| {
            pool.iter()
                .filter(|&&z| z != me && z != other)
                .map(|&z| dist[z * size + me])
                .fold(f64::INFINITY, f64::min)
        };
        let pick = if nearest(i, j) < nearest(j, i) { i } else { j };
        pool.retain(|&z| z != pick);
        selected.push(pick);
    }
    Ok(Selection {
        selected,
        capped,
        distance_evals: evals,
    })
}

/// The two destination-domain samples whose styles are transplanted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Carriers {
    pub first: usize,
    pub second: usize,
    /// Only one candidate existed, so it was used twice.
    pub degenerate: bool,
}

/// Draws two distinct samples of domain `dest` (any class) from the batch.
pub fn pick_style_carriers<R: Rng + ?Sized>(
    meta: &BatchMeta,
    dest: usize,
    exclude: usize,
    rng: &mut R,
) -> Result<Carriers> {
    let candidates: Vec<usize> = (0..meta.len())
        .filter(|&i| meta.domain(i) == dest && i != exclude)
        .collect();
    match candidates.len() {
        0 => Err(Error::CarrierUnavailable { domain: dest }),
        1 => Ok(Carriers {
            first: candidates[0],
            second: candidates[0],
            degenerate: true,
        }),
        n => {
            let picked = sample_indices(rng, n, 2);
            Ok(Carriers {
                first: candidates[picked.index(0)],
                second: candidates[picked.index(1)],
                degenerate: false,
            })
        }
    }
}

fn check_three(a: &FeatureMap, b: &FeatureMap, c: &FeatureMap) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != c.shape() {
        return Err(Error::Dimension(format!(
            "style balancing inputs of shapes {:?}, {:?}, {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    Ok(())
}

pub(crate) fn sb_plane(x: &[f64], y1: &[f64], y2: &[f64], lambda: f64, out: &mut [f64]) {
    let tau = SortPermutation::of(x);
    let kappa = SortPermutation::of(y1);
    let eta = SortPermutation::of(y2);
    for i in 0..x.len() {
        // x - detach(x) contributes zero in value
        out[tau.index(i)] = lambda * y1[kappa.index(i)] + (1.0 - lambda) * y2[eta.index(i)];
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sb_plane_backward(
    x: &[f64],
    y1: &[f64],
    y2: &[f64],
    lambda: f64,
    grad_out: &[f64],
    gx: &mut [f64],
    g1: &mut [f64],
    g2: &mut [f64],
) {
    let tau = SortPermutation::of(x);
    let kappa = SortPermutation::of(y1);
    let eta = SortPermutation::of(y2);
    for i in 0..x.len() {
        let g = grad_out[tau.index(i)];
        gx[tau.index(i)] += g;
        g1[kappa.index(i)] += lambda * g;
        g2[eta.index(i)] += (1.0 - lambda) * g;
    }
}

/// Per channel: `out[tau_i] = lambda * f1[kappa_i] + (1 - lambda) * f2[eta_i]
/// + f_s[tau_i] - stopgrad(f_s[tau_i])`.
pub fn sb_transform(
    f_s: &FeatureMap,
    f_s1: &FeatureMap,
    f_s2: &FeatureMap,
    lambda: MixCoefficient,
) -> Result<FeatureMap> {
    check_three(f_s, f_s1, f_s2)?;
    let mut out = f_s.clone();
    for c in 0..f_s.channels() {
        sb_plane(
            f_s.channel(c),
            f_s1.channel(c),
            f_s2.channel(c),
            lambda.value(),
            out.channel_mut(c),
        );
    }
    Ok(out)
}

/// Gradients `(d f_s, d f_s1, d f_s2)` of [`sb_transform`]: unit along the
/// moved sample's own positions, `lambda` and `1 - lambda` along the matched
/// carrier positions.
pub fn sb_transform_backward(
    f_s: &FeatureMap,
    f_s1: &FeatureMap,
    f_s2: &FeatureMap,
    lambda: MixCoefficient,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
    check_three(f_s, f_s1, f_s2)?;
    if grad_out.shape() != f_s.shape() {
        return Err(Error::Dimension("gradient shape".into()));
    }
    let (c, h, w) = f_s.shape();
    let mut gs = FeatureMap::zeros(c, h, w);
    let mut g1 = FeatureMap::zeros(c, h, w);
    let mut g2 = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let hw = f_s.plane_len();
        let mut a = vec![0.0; hw];
        let mut b = vec![0.0; hw];
        let mut d = vec![0.0; hw];
        sb_plane_backward(
            f_s.channel(ch),
            f_s1.channel(ch),
            f_s2.channel(ch),
            lambda.value(),
            grad_out.channel(ch),
            &mut a,
            &mut b,
            &mut d,
        );
        gs.channel_mut(ch).copy_from_slice(&a);
        g1.channel_mut(ch).copy_from_slice(&b);
        g2.channel_mut(ch).copy_from_slice(&d);
    }
    Ok((gs, g1, g2))
}

/// One executed (or skipped) style move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleMove {
    pub sample: usize,
    pub from: usize,
    pub to: usize,
    pub lambda: Option<f64>,
    pub carriers: Option<(usize, usize)>,
    pub degenerate: bool,
    /// No carrier of the destination domain was in the batch.
    pub skipped: bool,
}

/// All moves of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPlan {
    pub class: usize,
    pub moves: Vec<StyleMove>,
}

/// The audited schedule of a balanced batch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MovePlan {
    pub classes: Vec<ClassPlan>,
    #[serde(skip)]
    pub distance_evals: usize,
    #[serde(skip)]
    pub capped_cells: usize,
}

impl MovePlan {
    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(|c| c.moves.is_empty())
    }

    pub fn executed(&self) -> impl Iterator<Item = &StyleMove> {
        self.classes
            .iter()
            .flat_map(|c| c.moves.iter())
            .filter(|m| !m.skipped)
    }

    /// Per-domain counts of class `k` after the executed moves.
    pub fn effective_counts(&self, meta: &BatchMeta, k: usize) -> Vec<usize> {
        let mut counts = meta.class_counts(k);
        for m in self.classes.iter().filter(|c| c.class == k) {
            for mv in m.moves.iter().filter(|mv| !mv.skipped) {
                counts[mv.from] -= 1;
                counts[mv.to] += 1;
            }
        }
        counts
    }

    /// One JSON object per class with moves:
    /// `{"class", "moves": [{"sample", "from", "to", "lambda", "degenerate"}]}`.
    pub fn audit_lines(&self) -> Vec<String> {
        self.classes
            .iter()
            .filter(|c| !c.moves.is_empty())
            .map(|c| {
                let moves: Vec<serde_json::Value> = c
                    .moves
                    .iter()
                    .map(|m| {
                        serde_json::json!({
                            "sample": m.sample,
                            "from": m.from,
                            "to": m.to,
                            "lambda": m.lambda,
                            "degenerate": m.degenerate,
                            "skipped": m.skipped,
                        })
                    })
                    .collect();
                serde_json::json!({ "class": c.class, "moves": moves }).to_string()
            })
            .collect()
    }
}

/// Plans the moves for a batch without touching feature values. Consumes the
/// generator exactly as [`style_balance_batch`] does.
pub fn plan_moves<R: Rng + ?Sized>(
    styles: &[StyleVector],
    meta: &BatchMeta,
    lambda_shape: f64,
    rng: &mut R,
) -> Result<MovePlan> {
    if styles.len() != meta.len() {
        return Err(Error::Dimension(format!(
            "{} styles for {} labelled samples",
            styles.len(),
            meta.len()
        )));
    }
    let n = meta.num_domains();
    let mut plan = MovePlan::default();
    for k in 0..meta.num_classes() {
        let counts = meta.class_counts(k);
        let targets = compute_targets(&counts)?;
        let matrix = build_move_matrix(&counts, &targets)?;
        if matrix.is_empty() {
            continue;
        }
        let mut moves = Vec::new();
        for from in 0..n {
            let m = matrix.outgoing(from);
            if m == 0 {
                continue;
            }
            let cell = meta.cell(from, k);
            let cell_styles: Vec<StyleVector> = cell.iter().map(|&i| styles[i].clone()).collect();
            let sel = select_samples(&cell_styles, m)?;
            plan.distance_evals += sel.distance_evals;
            if sel.capped {
                plan.capped_cells += 1;
            }
            let mut chosen = sel.selected.iter().map(|&p| cell[p]);
            for to in 0..n {
                for _ in 0..matrix.get(from, to) {
                    let Some(sample) = chosen.next() else { break };
                    let mv = match pick_style_carriers(meta, to, sample, rng) {
                        Ok(car) => StyleMove {
                            sample,
                            from,
                            to,
                            lambda: Some(sample_lambda(rng, lambda_shape)?.value()),
                            carriers: Some((car.first, car.second)),
                            degenerate: car.degenerate,
                            skipped: false,
                        },
                        Err(Error::CarrierUnavailable { domain }) => {
                            log::info!(
                                "style balancing: no carrier of domain {domain}; move of sample {sample} skipped"
                            );
                            StyleMove {
                                sample,
                                from,
                                to,
                                lambda: None,
                                carriers: None,
                                degenerate: false,
                                skipped: true,
                            }
                        }
                        Err(e) => return Err(e),
                    };
                    moves.push(mv);
                }
            }
        }
        plan.classes.push(ClassPlan { class: k, moves });
    }
    Ok(plan)
}

/// Applies the executed moves of a plan. Carriers always contribute their
/// input features, even if they are moved themselves.
pub fn apply_plan(batch: &FeatureBatch, plan: &MovePlan) -> Result<FeatureBatch> {
    let mut out = batch.clone();
    for mv in plan.executed() {
        let (s1, s2) = mv
            .carriers
            .ok_or_else(|| Error::Invariant("executed move without carriers".into()))?;
        let lambda = mv
            .lambda
            .ok_or_else(|| Error::Invariant("executed move without lambda".into()))?;
        for c in 0..batch.channels() {
            sb_plane(
                batch.plane(mv.sample, c),
                batch.plane(s1, c),
                batch.plane(s2, c),
                lambda,
                out.plane_mut(mv.sample, c),
            );
        }
    }
    Ok(out)
}

/// Backward of [`apply_plan`].
pub fn apply_plan_backward(
    batch: &FeatureBatch,
    plan: &MovePlan,
    grad_out: &FeatureBatch,
) -> Result<FeatureBatch> {
    if batch.shape() != grad_out.shape() {
        return Err(Error::Dimension("gradient shape".into()));
    }
    let mut grad = grad_out.clone();
    let hw = batch.plane_len();
    let (mut gx, mut g1, mut g2) = (vec![0.0; hw], vec![0.0; hw], vec![0.0; hw]);
    for mv in plan.executed() {
        let (s1, s2) = mv.carriers.expect("executed move has carriers");
        let lambda = mv.lambda.expect("executed move has lambda");
        for c in 0..batch.channels() {
            gx.fill(0.0);
            g1.fill(0.0);
            g2.fill(0.0);
            sb_plane_backward(
                batch.plane(mv.sample, c),
                batch.plane(s1, c),
                batch.plane(s2, c),
                lambda,
                grad_out.plane(mv.sample, c),
                &mut gx,
                &mut g1,
                &mut g2,
            );
            // the moved sample's own path is the identity already held in `grad`
            debug_assert_eq!(gx.as_slice(), grad_out.plane(mv.sample, c));
            for (g, v) in grad.plane_mut(s1, c).iter_mut().zip(&g1) {
                *g += v;
            }
            for (g, v) in grad.plane_mut(s2, c).iter_mut().zip(&g2) {
                *g += v;
            }
        }
    }
    Ok(grad)
}

/// Balances every class of the batch independently and returns the
/// transformed batch together with the executed plan.
pub fn style_balance_batch<R: Rng + ?Sized>(
    batch: &FeatureBatch,
    meta: &BatchMeta,
    rng: &mut R,
) -> Result<(FeatureBatch, MovePlan)> {
    if batch.batch_size() != meta.len() {
        return Err(Error::Dimension(format!(
            "batch of {} with {} labels",
            batch.batch_size(),
            meta.len()
        )));
    }
    let styles: Vec<StyleVector> = (0..batch.batch_size())
        .map(|b| style_vector(&batch.sample(b)))
        .collect();
    let plan = plan_moves(&styles, meta, DEFAULT_LAMBDA_SHAPE, rng)?;
    let out = apply_plan(batch, &plan)?;
    Ok((out, plan))
}
