//! Latency/power Pareto exploration guided by a power predictor.
//!
//! Both objectives are minimized. True power of a design is only revealed
//! once the explorer decides to sample it; every reveal is recorded so that
//! callers can audit that unsampled designs were judged by predictions only.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DseError {
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("predictor failed on point {id}: {msg}")]
    Predictor { id: usize, msg: String },
    #[error("point {0} has non-positive or non-finite objectives")]
    InvalidPoint(usize),
}

/// Objective vector `[latency, power]`.
pub type Objectives = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct DesignPoint {
    pub id: usize,
    pub latency: f64,
    pub true_power: f64,
}

/// A non-dominated set, ordered by latency then power.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoSet {
    pub points: Vec<(usize, Objectives)>,
}

impl ParetoSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn objectives(&self) -> Vec<Objectives> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.0).collect()
    }
}

fn lex(a: &Objectives, b: &Objectives) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

/// `a` dominates `b`: no worse in both objectives and better in one.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
}

/// Exact non-dominated subset. Of several points with equal objectives the
/// first in input order is kept.
pub fn pareto_front(points: &[(usize, Objectives)]) -> ParetoSet {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| lex(&points[i].1, &points[j].1).then(i.cmp(&j)));
    let mut out = Vec::new();
    let mut best_power = f64::INFINITY;
    for i in order {
        let p = points[i];
        if p.1[1] < best_power {
            best_power = p.1[1];
            out.push(p);
        }
    }
    ParetoSet { points: out }
}

/// Distance of an approximate point from a reference point: the largest
/// clamped relative excess over the objectives.
pub fn point_distance(reference: &Objectives, approx: &Objectives) -> f64 {
    reference
        .iter()
        .zip(approx)
        .map(|(g, w)| ((w - g) / g).max(0.0))
        .fold(0.0, f64::max)
}

/// Average distance from each exact frontier point to its closest
/// approximate point.
pub fn adrs(exact: &[Objectives], approx: &[Objectives]) -> Result<f64, DseError> {
    if exact.is_empty() {
        return Err(DseError::EmptySet("reference"));
    }
    if approx.is_empty() {
        return Err(DseError::EmptySet("approximate"));
    }
    let total: f64 = exact
        .iter()
        .map(|g| {
            approx
                .iter()
                .map(|w| point_distance(g, w))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / exact.len() as f64)
}

/// Fronts of a non-dominated sort, each as indices into `points`.
pub fn non_dominated_sort(points: &[Objectives]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dominates(&points[i], &points[j]) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of one front (same order as `front`).
pub fn crowding_distance(points: &[Objectives], front: &[usize]) -> Vec<f64> {
    let mut dist = vec![0.0; front.len()];
    if front.len() <= 2 {
        return vec![f64::INFINITY; front.len()];
    }
    for obj in 0..2 {
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| {
            points[front[a]][obj]
                .total_cmp(&points[front[b]][obj])
                .then(a.cmp(&b))
        });
        let lo = points[front[order[0]]][obj];
        let hi = points[front[*order.last().expect("nonempty")]][obj];
        dist[order[0]] = f64::INFINITY;
        dist[*order.last().expect("nonempty")] = f64::INFINITY;
        if hi > lo {
            for w in order.windows(3) {
                dist[w[1]] += (points[front[w[2]]][obj] - points[front[w[0]]][obj]) / (hi - lo);
            }
        }
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExploreConfig {
    /// Fraction of the space sampled uniformly before guidance starts.
    pub init_fraction: f64,
    /// Fraction of the space sampled in total.
    pub total_fraction: f64,
    /// Points added per guided iteration.
    pub batch: usize,
    pub seed: u64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            init_fraction: 0.02,
            total_fraction: 0.4,
            batch: 4,
            seed: 0,
        }
    }
}

/// Number of points a fraction of `n` amounts to, rounded up. A small slack
/// keeps products like `0.2 * 100` from rounding to 21.
pub fn budget_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub sampled: usize,
    pub budget: f64,
    pub adrs: f64,
    pub frontier_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreResult {
    /// Frontier of the sampled points under their true power.
    pub frontier: ParetoSet,
    pub trace: Vec<IterationLog>,
    /// Ids whose true power was read, in reveal order.
    pub revealed: Vec<usize>,
    pub sampled: BTreeSet<usize>,
}

/// Holds the hidden truth and logs every access to it.
struct Truth<'a> {
    space: &'a [DesignPoint],
    revealed: Vec<usize>,
}

impl Truth<'_> {
    fn reveal(&mut self, i: usize) -> Objectives {
        self.revealed.push(self.space[i].id);
        [self.space[i].latency, self.space[i].true_power]
    }
}

fn validate_space(space: &[DesignPoint]) -> Result<(), DseError> {
    if space.is_empty() {
        return Err(DseError::EmptySet("design space"));
    }
    for p in space {
        if !(p.latency > 0.0
            && p.true_power > 0.0
            && p.latency.is_finite()
            && p.true_power.is_finite())
        {
            return Err(DseError::InvalidPoint(p.id));
        }
    }
    Ok(())
}

/// Exact frontier of a whole space, for evaluation.
pub fn exact_front(space: &[DesignPoint]) -> ParetoSet {
    let pts: Vec<(usize, Objectives)> = space
        .iter()
        .map(|p| (p.id, [p.latency, p.true_power]))
        .collect();
    pareto_front(&pts)
}

/// Predictor-guided exploration.
///
/// After a uniform initial sample, every iteration predicts the power of
/// the unsampled points, ranks them by non-dominated sorting on
/// `(latency, predicted power)` alongside the sampled points' true values
/// and samples the next batch from the best fronts, preferring larger
/// crowding distance and then lower id.
pub fn explore<F>(
    space: &[DesignPoint],
    mut predictor: F,
    cfg: &ExploreConfig,
) -> Result<ExploreResult, DseError>
where
    F: FnMut(&DesignPoint) -> Result<f64, String>,
{
    validate_space(space)?;
    let n = space.len();
    if !(cfg.init_fraction > 0.0 && cfg.init_fraction <= cfg.total_fraction) {
        return Err(DseError::Budget("need 0 < init <= total".into()));
    }
    if cfg.total_fraction > 1.0 {
        return Err(DseError::Budget(format!(
            "total budget {} exceeds the space",
            cfg.total_fraction
        )));
    }
    if cfg.batch == 0 {
        return Err(DseError::Budget("batch must be positive".into()));
    }
    let total = budget_count(cfg.total_fraction, n).max(1);
    let init = budget_count(cfg.init_fraction, n).clamp(1, total);
    let reference = exact_front(space).objectives();

    let mut truth = Truth {
        space,
        revealed: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut sampled_idx: BTreeSet<usize> = BTreeSet::new();
    let mut known: Vec<(usize, Objectives)> = Vec::new();
    for &i in &order[..init] {
        sampled_idx.insert(i);
        known.push((space[i].id, truth.reveal(i)));
    }

    let mut trace = Vec::new();
    let log = |iter: usize, known: &[(usize, Objectives)], trace: &mut Vec<IterationLog>| {
        let front = pareto_front(known);
        let a = adrs(&reference, &front.objectives()).expect("nonempty sets");
        trace.push(IterationLog {
            iter,
            sampled: known.len(),
            budget: known.len() as f64 / n as f64,
            adrs: a,
            frontier_size: front.len(),
        });
    };
    log(0, &known, &mut trace);

    let mut predicted: Vec<Option<f64>> = vec![None; n];
    let mut iter = 0;
    while sampled_idx.len() < total {
        iter += 1;
        let candidates: Vec<usize> = (0..n).filter(|i| !sampled_idx.contains(i)).collect();
        for &i in &candidates {
            if predicted[i].is_none() {
                let p = predictor(&space[i]).map_err(|msg| DseError::Predictor {
                    id: space[i].id,
                    msg,
                })?;
                predicted[i] = Some(p);
            }
        }
        // Candidates are ranked together with the sampled points so that a
        // candidate counts as non-dominated only if it is predicted to improve
        // on the known frontier, and crowding favours gaps in that frontier.
        let mut objs: Vec<Objectives> = known.iter().map(|k| k.1).collect();
        let offset = objs.len();
        objs.extend(
            candidates
                .iter()
                .map(|&i| [space[i].latency, predicted[i].expect("predicted")]),
        );
        let want = cfg.batch.min(total - sampled_idx.len());
        let mut chosen = Vec::with_capacity(want);
        for front in non_dominated_sort(&objs) {
            let crowd = crowding_distance(&objs, &front);
            let mut ranked: Vec<(f64, usize)> = front
                .iter()
                .zip(crowd)
                .filter(|(&k, _)| k >= offset)
                .map(|(&k, c)| (c, candidates[k - offset]))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(space[a.1].id.cmp(&space[b.1].id)));
            for (_, i) in ranked {
                if chosen.len() < want {
                    chosen.push(i);
                }
            }
            if chosen.len() == want {
                break;
            }
        }
        for i in chosen {
            sampled_idx.insert(i);
            known.push((space[i].id, truth.reveal(i)));
        }
        log(iter, &known, &mut trace);
    }

    Ok(ExploreResult {
        frontier: pareto_front(&known),
        trace,
        revealed: truth.revealed,
        sampled: sampled_idx.iter().map(|&i| space[i].id).collect(),
    })
}

/// Baseline: sample the same budget uniformly at random and report the
/// ADRS of the resulting frontier.
pub fn random_search(
    space: &[DesignPoint],
    total_fraction: f64,
    seed: u64,
) -> Result<f64, DseError> {
    validate_space(space)?;
    if !(total_fraction > 0.0 && total_fraction <= 1.0) {
        return Err(DseError::Budget(format!("total budget {total_fraction}")));
    }
    let n = space.len();
    let k = budget_count(total_fraction, n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let known: Vec<(usize, Objectives)> = order[..k]
        .iter()
        .map(|&i| (space[i].id, [space[i].latency, space[i].true_power]))
        .collect();
    adrs(
        &exact_front(space).objectives(),
        &pareto_front(&known).objectives(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_front(points: &[(usize, Objectives)]) -> Vec<(usize, Objectives)> {
        let mut out: Vec<(usize, Objectives)> = Vec::new();
        for (i, p) in points.iter().enumerate() {
            let dominated = points.iter().any(|q| dominates(&q.1, &p.1));
            let dup_earlier = points[..i].iter().any(|q| q.1 == p.1);
            if !dominated && !dup_earlier {
                out.push(*p);
            }
        }
        out.sort_by(|a, b| lex(&a.1, &b.1));
        out
    }

    fn space(n: usize, seed: u64) -> Vec<DesignPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|id| {
                let lat: f64 = rng.gen_range(1.0..100.0);
                DesignPoint {
                    id,
                    latency: lat.round(),
                    true_power: (50.0 / lat + rng.gen_range(0.0..2.0)).max(0.01),
                }
            })
            .collect()
    }

    #[test]
    fn front_examples() {
        assert_eq!(
            pareto_front(&[(0, [1.0, 1.0])]).points,
            vec![(0, [1.0, 1.0])]
        );
        let f = pareto_front(&[(0, [1.0, 2.0]), (1, [2.0, 1.0]), (2, [2.0, 2.0])]);
        assert_eq!(f.ids(), vec![0, 1]);
        let d = pareto_front(&[(5, [1.0, 1.0]), (3, [1.0, 1.0]), (4, [2.0, 3.0])]);
        assert_eq!(d.ids(), vec![5]);
    }

    #[test]
    fn front_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.gen_range(1..120);
            let pts: Vec<(usize, Objectives)> = (0..n)
                .map(|i| {
                    (
                        i,
                        [rng.gen_range(0..20) as f64, rng.gen_range(0..20) as f64],
                    )
                })
                .collect();
            assert_eq!(pareto_front(&pts).points, brute_front(&pts));
        }
    }

    #[test]
    fn adrs_examples() {
        let g = [[1.0, 1.0]];
        assert_eq!(adrs(&g, &g).unwrap(), 0.0);
        assert!((adrs(&g, &[[1.1, 1.2]]).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(adrs(&g, &[[0.5, 0.5]]).unwrap(), 0.0);
        assert_eq!(adrs(&[], &g), Err(DseError::EmptySet("reference")));
        assert_eq!(adrs(&g, &[]), Err(DseError::EmptySet("approximate")));
    }

    #[test]
    fn full_budget_reaches_zero() {
        let s = space(50, 2);
        let cfg = ExploreConfig {
            total_fraction: 1.0,
            ..Default::default()
        };
        let r = explore(&s, |p| Ok(p.true_power), &cfg).unwrap();
        assert_eq!(r.trace.last().unwrap().adrs, 0.0);
        assert_eq!(r.sampled.len(), 50);
    }

    #[test]
    fn budget_and_audit() {
        let s = space(97, 3);
        for budget in [0.2, 0.3, 0.4] {
            let cfg = ExploreConfig {
                total_fraction: budget,
                batch: 3,
                ..Default::default()
            };
            let r = explore(&s, |_| Ok(1.0), &cfg).unwrap();
            assert_eq!(r.sampled.len(), (budget * 97.0f64).ceil() as usize);
            let revealed: BTreeSet<usize> = r.revealed.iter().copied().collect();
            assert_eq!(revealed, r.sampled);
            assert_eq!(r.revealed.len(), r.sampled.len());
            assert!(r.frontier.points.iter().all(|p| r.sampled.contains(&p.0)));
        }
        assert_eq!(budget_count(0.2, 100), 20);
    }

    #[test]
    fn trace_is_non_increasing_with_perfect_predictions() {
        let s = space(120, 4);
        let r = explore(&s, |p| Ok(p.true_power), &ExploreConfig::default()).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].adrs <= w[0].adrs);
        }
    }

    #[test]
    fn errors() {
        let s = space(10, 5);
        let over = ExploreConfig {
            total_fraction: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            explore(&s, |_| Ok(1.0), &over),
            Err(DseError::Budget(_))
        ));
        let r = explore(
            &s,
            |p| {
                if p.id == 7 {
                    Err("boom".into())
                } else {
                    Ok(1.0)
                }
            },
            &ExploreConfig {
                total_fraction: 1.0,
                ..Default::default()
            },
        );
        assert!(matches!(r, Err(DseError::Predictor { id: 7, .. })));
    }

    #[test]
    fn crowding_prefers_spread() {
        let pts = [[1.0, 4.0], [2.0, 3.0], [2.1, 2.9], [4.0, 1.0]];
        let d = crowding_distance(&pts, &[0, 1, 2, 3]);
        assert!(d[0].is_infinite() && d[3].is_infinite());
        // hand-computed: (1.1 + 1.1) / 3 and (2 + 2) / 3
        assert!((d[1] - 2.2 / 3.0).abs() < 1e-12);
        assert!((d[2] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            non_dominated_sort(&[[1.0, 1.0], [2.0, 2.0], [0.5, 3.0]]),
            vec![vec![0, 2], vec![1]]
        );
    }
}
