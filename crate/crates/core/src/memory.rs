//! Rehearsal memory: herding-selected exemplars for CIL/LTCIL and the
//! intermediate-feature-mean memory replayed through the projection head in
//! FSCIL.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::losses::ZERO_FEATURE_EPS;
use crate::net::{Mlp, NetError};

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("exemplar budget must be at least 1")]
    ZeroBudget,
    #[error("class {0} is already stored and entries are immutable")]
    AlreadyStored(usize),
    #[error("feature means must be computed with a frozen backbone")]
    BackboneNotFrozen,
    #[error("inputs and labels differ in length ({inputs} vs {labels})")]
    LengthMismatch { inputs: usize, labels: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Greedy herding over ℓ2-normalized features. At step `j` the sample that
/// brings the running exemplar mean closest to the class mean is taken.
/// Returns indices in selection order; ties go to the lowest index.
pub fn herding_select<R: AsRef<[f64]>>(features: &[R], budget: usize) -> Result<Vec<usize>, MemoryError> {
    if budget == 0 {
        return Err(MemoryError::ZeroBudget);
    }
    if features.is_empty() {
        return Err(MemoryError::EmptyClass(0));
    }
    let units: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let f = f.as_ref();
            linalg::normalized(f, ZERO_FEATURE_EPS).unwrap_or_else(|| vec![0.0; f.len()])
        })
        .collect();
    let target = linalg::mean_rows(&units);
    let dim = target.len();
    let take = budget.min(units.len());
    let mut chosen = Vec::with_capacity(take);
    let mut used = vec![false; units.len()];
    let mut running = vec![0.0; dim];
    for step in 1..=take {
        let mut best: Option<(usize, f64)> = None;
        for (i, u) in units.iter().enumerate() {
            if used[i] {
                continue;
            }
            let dist: f64 = (0..dim)
                .map(|k| {
                    let m = (running[k] + u[k]) / step as f64;
                    (target[k] - m).powi(2)
                })
                .sum();
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("an unused sample remains");
        used[i] = true;
        linalg::axpy(1.0, &units[i], &mut running);
        chosen.push(i);
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: Vec<f64>,
    pub session: usize,
}

/// Per-class exemplar lists with a fixed per-class budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    budget: usize,
    classes: BTreeMap<usize, Vec<Exemplar>>,
}

impl ExemplarStore {
    pub fn new(budget: usize) -> Self {
        Self { budget, classes: BTreeMap::new() }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn exemplars(&self, class: usize) -> Option<&[Exemplar]> {
        self.classes.get(&class).map(Vec::as_slice)
    }

    /// All stored `(input, class)` pairs, class-ordered.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.classes.iter().flat_map(|(&c, list)| list.iter().map(move |e| (e.input.as_slice(), c)))
    }

    /// Selects up to `budget` exemplars of `class` by herding on `features`
    /// and stores the matching raw inputs.
    pub fn fill_class(
        &mut self,
        class: usize,
        session: usize,
        inputs: &[Vec<f64>],
        features: &[Vec<f64>],
    ) -> Result<usize, MemoryError> {
        if self.classes.contains_key(&class) {
            return Err(MemoryError::AlreadyStored(class));
        }
        if inputs.is_empty() {
            return Err(MemoryError::EmptyClass(class));
        }
        if inputs.len() != features.len() {
            return Err(MemoryError::LengthMismatch { inputs: inputs.len(), labels: features.len() });
        }
        let picks = herding_select(features, self.budget).map_err(|e| match e {
            MemoryError::EmptyClass(_) => MemoryError::EmptyClass(class),
            other => other,
        })?;
        let list: Vec<Exemplar> = picks.iter().map(|&i| Exemplar { input: inputs[i].clone(), session }).collect();
        let n = list.len();
        self.classes.insert(class, list);
        Ok(n)
    }
}

/// Map from class to the mean intermediate feature `h_c`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeanMemory {
    means: BTreeMap<usize, Vec<f64>>,
}

impl FeatureMeanMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.means.get(&class).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.means.iter().map(|(&c, m)| (c, m.as_slice()))
    }

    pub fn insert(&mut self, class: usize, mean: Vec<f64>) -> Result<(), MemoryError> {
        if self.means.contains_key(&class) {
            return Err(MemoryError::AlreadyStored(class));
        }
        self.means.insert(class, mean);
        Ok(())
    }

    /// Adds the unnormalized mean backbone output of every class in the
    /// session. The backbone must be frozen.
    pub fn record_feature_means(
        &mut self,
        backbone: &Mlp,
        inputs: &[Vec<f64>],
        labels: &[usize],
    ) -> Result<Vec<usize>, MemoryError> {
        if !backbone.is_frozen() {
            return Err(MemoryError::BackboneNotFrozen);
        }
        if inputs.len() != labels.len() {
            return Err(MemoryError::LengthMismatch { inputs: inputs.len(), labels: labels.len() });
        }
        let mut grouped: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (x, &y) in inputs.iter().zip(labels) {
            grouped.entry(y).or_default().push(backbone.forward_one(x)?);
        }
        if let Some(&c) = grouped.keys().find(|c| self.means.contains_key(c)) {
            return Err(MemoryError::AlreadyStored(c));
        }
        let added: Vec<usize> = grouped.keys().copied().collect();
        for (c, feats) in grouped {
            self.means.insert(c, linalg::mean_rows(&feats));
        }
        Ok(added)
    }
}
