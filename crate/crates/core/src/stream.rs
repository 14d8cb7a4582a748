//! Synthetic class streams and session plans for CIL, LTCIL, FSCIL and the
//! generalized mixed case.
//!
//! Classes are Gaussian blobs around seeded means on a sphere of radius `r`.
//! Every sample is drawn from its own seeded stream keyed by
//! `(class, split, index)`, so train and test never share a draw and a class's
//! first `n` training samples are the same whatever the plan asks for.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("plan needs {needed} classes but only {available} are available")]
    NotEnoughClasses { needed: usize, available: usize },
    #[error("plan asks for {requested} samples per class but only {available} exist")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("imbalance ratio must lie in (0, 1], got {0}")]
    BadRatio(f64),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionMode {
    Normal,
    Longtail,
    Fewshot,
}

impl SessionMode {
    pub fn short(self) -> &'static str {
        match self {
            SessionMode::Normal => "nm",
            SessionMode::Longtail => "lt",
            SessionMode::Fewshot => "fs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LongTailOrder {
    Ordered,
    Shuffled,
}

impl FromStr for LongTailOrder {
    type Err = StreamError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ordered" => Ok(Self::Ordered),
            "shuffled" => Ok(Self::Shuffled),
            other => Err(StreamError::InvalidPlan(format!("unknown long-tail order `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self { input_dim: 16, classes: 20, radius: 4.0, sigma: 1.0, train_per_class: 100, test_per_class: 50, seed: 0 }
    }
}

impl SyntheticTaskSpec {
    /// Seeded class means: Gaussian directions scaled to `radius`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|c| {
                let mut rng = seed::rng(self.seed, "class-mean", &[c as u64]);
                let v: Vec<f64> = (0..self.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let u = linalg::normalized(&v, 0.0).expect("gaussian draw is nonzero");
                linalg::scale(&u, self.radius)
            })
            .collect()
    }

    fn sample(&self, mean: &[f64], class: usize, split: Split, index: usize) -> Vec<f64> {
        let tag = match split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let mut rng = seed::rng(self.seed, "sample", &[class as u64, tag, index as u64]);
        mean.iter()
            .map(|m| {
                let e: f64 = StandardNormal.sample(&mut rng);
                m + self.sigma * e
            })
            .collect()
    }
}

/// One session: its classes, mode and per-class training counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub t: usize,
    pub classes: Vec<usize>,
    pub mode: SessionMode,
    pub counts: Vec<usize>,
}

impl SessionDescriptor {
    pub fn min_count(&self) -> usize {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn total_samples(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub sessions: Vec<SessionDescriptor>,
    pub seed: u64,
}

impl SessionPlan {
    pub fn num_classes(&self) -> usize {
        self.sessions.iter().map(|s| s.classes.len()).sum()
    }

    /// Classes seen up to and including session `t`.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.sessions[..=t].iter().flat_map(|s| s.classes.iter().copied()).collect();
        all.sort_unstable();
        all
    }

    pub fn modes(&self) -> Vec<SessionMode> {
        self.sessions.iter().map(|s| s.mode).collect()
    }

    /// Checks label disjointness, count/class alignment and contiguous ids.
    pub fn validate(&self) -> Result<(), StreamError> {
        let mut seen = BTreeSet::new();
        for (i, s) in self.sessions.iter().enumerate() {
            if s.t != i {
                return Err(StreamError::InvalidPlan(format!("session {i} carries id {}", s.t)));
            }
            if s.classes.len() != s.counts.len() {
                return Err(StreamError::InvalidPlan(format!("session {i} has mismatched counts")));
            }
            if s.counts.contains(&0) {
                return Err(StreamError::InvalidPlan(format!("session {i} has an empty class")));
            }
            for &c in &s.classes {
                if !seen.insert(c) {
                    return Err(StreamError::InvalidPlan(format!("class {c} appears in two sessions")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

fn check_classes(needed: usize, available: usize) -> Result<(), StreamError> {
    if needed > available {
        return Err(StreamError::NotEnoughClasses { needed, available });
    }
    Ok(())
}

fn check_samples(requested: usize, available: usize) -> Result<(), StreamError> {
    if requested > available {
        return Err(StreamError::NotEnoughSamples { requested, available });
    }
    Ok(())
}

fn session(t: usize, classes: std::ops::Range<usize>, mode: SessionMode, count: impl Fn(usize) -> usize) -> SessionDescriptor {
    let classes: Vec<usize> = classes.collect();
    let counts = classes.iter().map(|&c| count(c)).collect();
    SessionDescriptor { t, classes, mode, counts }
}

/// `base` classes in session 0, then `steps` sessions of `ways` classes, all
/// at the full per-class count `n_max`.
pub fn plan_cil(base: usize, steps: usize, ways: usize, available: usize, n_max: usize) -> Result<SessionPlan, StreamError> {
    let total = base + steps * ways;
    check_classes(total, available)?;
    let mut sessions = vec![session(0, 0..base, SessionMode::Normal, |_| n_max)];
    for t in 1..=steps {
        let start = base + (t - 1) * ways;
        sessions.push(session(t, start..start + ways, SessionMode::Normal, |_| n_max));
    }
    Ok(SessionPlan { sessions, seed: 0 })
}

/// Exponential decay `n_max · ρ^{rank/(K−1)}` over a global class ranking,
/// rounded and clamped to at least one sample.
pub fn longtail_count(n_max: usize, rho: f64, rank: usize, total: usize) -> usize {
    if total <= 1 {
        return n_max;
    }
    let n = (n_max as f64 * rho.powf(rank as f64 / (total - 1) as f64)).round() as usize;
    n.max(1)
}

fn class_ranks(total: usize, order: LongTailOrder, seed_value: u64) -> Vec<usize> {
    let mut ranks: Vec<usize> = (0..total).collect();
    if order == LongTailOrder::Shuffled {
        ranks.shuffle(&mut seed::rng(seed_value, "longtail-ranks", &[]));
    }
    ranks
}

#[allow(clippy::too_many_arguments)]
pub fn plan_ltcil(
    base: usize,
    steps: usize,
    ways: usize,
    rho: f64,
    n_max: usize,
    order: LongTailOrder,
    available: usize,
    seed_value: u64,
) -> Result<SessionPlan, StreamError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(StreamError::BadRatio(rho));
    }
    let mut plan = plan_cil(base, steps, ways, available, n_max)?;
    let total = plan.num_classes();
    let ranks = class_ranks(total, order, seed_value);
    for s in &mut plan.sessions {
        s.mode = SessionMode::Longtail;
        s.counts = s.classes.iter().map(|&c| longtail_count(n_max, rho, ranks[c], total)).collect();
    }
    plan.seed = seed_value;
    Ok(plan)
}

/// Full-data base session followed by `steps` sessions of `ways`-way `shots`-shot.
pub fn plan_fscil(
    base: usize,
    steps: usize,
    ways: usize,
    shots: usize,
    available: usize,
    n_max: usize,
) -> Result<SessionPlan, StreamError> {
    check_samples(shots, n_max)?;
    let mut plan = plan_cil(base, steps, ways, available, n_max)?;
    for s in plan.sessions.iter_mut().skip(1) {
        s.mode = SessionMode::Fewshot;
        s.counts = vec![shots; s.classes.len()];
    }
    Ok(plan)
}

/// Uniform draws over the three session modes.
pub fn sample_modes(n: usize, seed_value: u64) -> Vec<SessionMode> {
    let mut rng = seed::rng(seed_value, "gcil-modes", &[]);
    (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => SessionMode::Normal,
            1 => SessionMode::Longtail,
            _ => SessionMode::Fewshot,
        })
        .collect()
}

/// Normal base session, then each session's mode drawn uniformly and its
/// classes drawn from the unseen pool.
#[allow(clippy::too_many_arguments)]
pub fn plan_gcil(
    base: usize,
    steps: usize,
    ways: usize,
    shots: usize,
    rho: f64,
    n_max: usize,
    available: usize,
    seed_value: u64,
) -> Result<SessionPlan, StreamError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(StreamError::BadRatio(rho));
    }
    check_samples(shots, n_max)?;
    let total = base + steps * ways;
    check_classes(total, available)?;
    let modes = sample_modes(steps, seed_value);
    let mut pool: Vec<usize> = (base..total).collect();
    pool.shuffle(&mut seed::rng(seed_value, "gcil-pool", &[]));
    let mut sessions = vec![session(0, 0..base, SessionMode::Normal, |_| n_max)];
    for (i, &mode) in modes.iter().enumerate() {
        let mut classes: Vec<usize> = pool[i * ways..(i + 1) * ways].to_vec();
        classes.sort_unstable();
        let counts = classes
            .iter()
            .map(|&c| match mode {
                SessionMode::Normal => n_max,
                SessionMode::Longtail => longtail_count(n_max, rho, c, total),
                SessionMode::Fewshot => shots,
            })
            .collect();
        sessions.push(SessionDescriptor { t: i + 1, classes, mode, counts });
    }
    Ok(SessionPlan { sessions, seed: seed_value })
}

/// Materialized samples of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionBatch {
    pub t: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl SessionBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Inputs of one class, in sample order.
    pub fn class_inputs(&self, class: usize) -> Vec<Vec<f64>> {
        self.inputs.iter().zip(&self.labels).filter(|(_, &y)| y == class).map(|(x, _)| x.clone()).collect()
    }
}

/// Draws the samples of every session. Training uses the planned counts; the
/// test split is always `test_per_class` per class.
pub fn materialize(plan: &SessionPlan, spec: &SyntheticTaskSpec, split: Split) -> Result<Vec<SessionBatch>, StreamError> {
    plan.validate()?;
    let means = spec.class_means();
    let mut out = Vec::with_capacity(plan.sessions.len());
    for s in &plan.sessions {
        let mut batch = SessionBatch { t: s.t, inputs: Vec::new(), labels: Vec::new() };
        for (&c, &count) in s.classes.iter().zip(&s.counts) {
            check_classes(c + 1, spec.classes)?;
            let n = match split {
                Split::Train => {
                    check_samples(count, spec.train_per_class)?;
                    count
                }
                Split::Test => spec.test_per_class,
            };
            for i in 0..n {
                batch.inputs.push(spec.sample(&means[c], c, split, i));
                batch.labels.push(c);
            }
        }
        out.push(batch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cil_layouts() {
        let p = plan_cil(10, 5, 2, 20, 100).unwrap();
        let sizes: Vec<usize> = p.sessions.iter().map(|s| s.classes.len()).collect();
        assert_eq!(sizes, vec![10, 2, 2, 2, 2, 2]);
        let p = plan_cil(60, 8, 5, 100, 500).unwrap();
        assert_eq!(p.sessions.len(), 9);
        assert_eq!(p.num_classes(), 100);
        let p = plan_cil(50, 10, 5, 100, 500).unwrap();
        assert_eq!(p.sessions.len(), 11);
        assert_eq!(p.sessions[0].classes.len(), 50);
        assert_eq!(plan_cil(10, 6, 2, 20, 1).unwrap_err(), StreamError::NotEnoughClasses { needed: 22, available: 20 });
    }

    #[test]
    fn longtail_extremes() {
        let p = plan_ltcil(50, 10, 5, 0.01, 500, LongTailOrder::Ordered, 100, 0).unwrap();
        let counts: Vec<usize> = p.sessions.iter().flat_map(|s| s.counts.clone()).collect();
        assert_eq!(counts[0], 500);
        assert_eq!(counts[99], 5);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        let flat = plan_ltcil(10, 2, 2, 1.0, 40, LongTailOrder::Ordered, 14, 0).unwrap();
        assert!(flat.sessions.iter().all(|s| s.counts.iter().all(|&n| n == 40)));
        assert_eq!(plan_ltcil(10, 2, 2, 0.0, 40, LongTailOrder::Ordered, 14, 0).unwrap_err(), StreamError::BadRatio(0.0));
    }

    #[test]
    fn shuffled_longtail_is_a_permutation() {
        let a = plan_ltcil(10, 5, 2, 0.05, 100, LongTailOrder::Ordered, 20, 3).unwrap();
        let b = plan_ltcil(10, 5, 2, 0.05, 100, LongTailOrder::Shuffled, 20, 3).unwrap();
        let mut ca: Vec<usize> = a.sessions.iter().flat_map(|s| s.counts.clone()).collect();
        let mut cb: Vec<usize> = b.sessions.iter().flat_map(|s| s.counts.clone()).collect();
        assert_ne!(ca, cb);
        ca.sort();
        cb.sort();
        assert_eq!(ca, cb);
    }

    #[test]
    fn fscil_layout() {
        let p = plan_fscil(60, 8, 5, 5, 100, 500).unwrap();
        assert_eq!(p.sessions.len(), 9);
        assert!(p.sessions[1..].iter().all(|s| s.classes.len() == 5 && s.counts == vec![5; 5]));
        assert_eq!(p.sessions[0].counts, vec![500; 60]);
        assert_eq!(plan_fscil(10, 2, 2, 200, 20, 100).unwrap_err(), StreamError::NotEnoughSamples { requested: 200, available: 100 });
        assert_eq!(plan_fscil(10, 0, 2, 5, 20, 100).unwrap().sessions.len(), 1);
    }

    #[test]
    fn gcil_is_deterministic_and_disjoint() {
        let a = plan_gcil(10, 10, 2, 5, 0.05, 100, 30, 7).unwrap();
        let b = plan_gcil(10, 10, 2, 5, 0.05, 100, 30, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.num_classes(), 30);
        for s in &a.sessions[1..] {
            match s.mode {
                SessionMode::Fewshot => assert!(s.counts.iter().all(|&n| n == 5)),
                SessionMode::Normal => assert!(s.counts.iter().all(|&n| n == 100)),
                SessionMode::Longtail => assert!(s.counts.iter().all(|&n| (5..=100).contains(&n))),
            }
        }
    }

    #[test]
    fn mode_sampler_is_uniform() {
        let modes = sample_modes(3000, 11);
        for m in [SessionMode::Normal, SessionMode::Longtail, SessionMode::Fewshot] {
            let f = modes.iter().filter(|&&x| x == m).count() as f64 / 3000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "{m:?}: {f}");
        }
    }

    #[test]
    fn materialize_properties() {
        let spec = SyntheticTaskSpec { classes: 6, train_per_class: 10, test_per_class: 4, ..Default::default() };
        let plan = plan_cil(4, 1, 2, 6, 10).unwrap();
        let train = materialize(&plan, &spec, Split::Train).unwrap();
        let again = materialize(&plan, &spec, Split::Train).unwrap();
        assert_eq!(train, again);
        let test = materialize(&plan, &spec, Split::Test).unwrap();
        assert_eq!(test[0].len(), 16);
        for x in &test[0].inputs {
            assert!(!train[0].inputs.contains(x));
        }
        let flat = SyntheticTaskSpec { sigma: 0.0, ..spec.clone() };
        let means = flat.class_means();
        let b = materialize(&plan, &flat, Split::Train).unwrap();
        for (x, &y) in b[1].inputs.iter().zip(&b[1].labels) {
            assert_eq!(x, &means[y]);
        }
    }

    #[test]
    fn test_split_ignores_mode() {
        let spec = SyntheticTaskSpec { classes: 14, train_per_class: 40, test_per_class: 7, ..Default::default() };
        let cil = plan_cil(10, 2, 2, 14, 40).unwrap();
        let fs = plan_fscil(10, 2, 2, 5, 14, 40).unwrap();
        let lt = plan_ltcil(10, 2, 2, 0.1, 40, LongTailOrder::Ordered, 14, 0).unwrap();
        let a = materialize(&cil, &spec, Split::Test).unwrap();
        assert_eq!(a, materialize(&fs, &spec, Split::Test).unwrap());
        assert_eq!(a, materialize(&lt, &spec, Split::Test).unwrap());
    }
}
