//! Nearest-class-mean initialization and the per-epoch flight of novel-class
//! prototypes from their NCM direction to their terminus column.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::losses::ZERO_FEATURE_EPS;

const DEGENERATE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum FlightError {
    #[error("class has no samples")]
    EmptyClass,
    #[error("feature norm {0:e} is too small to normalize")]
    ZeroFeature(f64),
    #[error("normalized features cancel out (mean norm {0:e})")]
    DegenerateMean(f64),
    #[error("class {0} is not tracked by this prototype state")]
    UnknownClass(usize),
    #[error("epoch {epoch} is outside 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("interpolated prototype for class {class} vanished at epoch {epoch}")]
    DegenerateInterpolation { class: usize, epoch: usize },
}

/// How novel-class prototypes move during an incremental session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlightMode {
    /// η = e/E, from NCM to the terminus column.
    Flying,
    /// η = 1: train directly against the terminus.
    TerminusOnly,
    /// η = 0: keep the NCM direction as the class prototype.
    MeanOnly,
}

/// Average of per-sample normalized features, renormalized to unit length.
pub fn compute_ncm<R: AsRef<[f64]>>(features: &[R]) -> Result<Vec<f64>, FlightError> {
    if features.is_empty() {
        return Err(FlightError::EmptyClass);
    }
    let units: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let f = f.as_ref();
            linalg::normalized(f, ZERO_FEATURE_EPS).ok_or(FlightError::ZeroFeature(linalg::norm(f)))
        })
        .collect::<Result<_, _>>()?;
    let mean = linalg::mean_rows(&units);
    let n = linalg::norm(&mean);
    if n <= DEGENERATE_EPS {
        return Err(FlightError::DegenerateMean(n));
    }
    Ok(linalg::scale(&mean, 1.0 / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class: usize,
    pub ncm: Vec<f64>,
    pub nct: Vec<f64>,
    pub novel: bool,
}

/// Per-class prototype schedule for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeState {
    classes: BTreeMap<usize, ClassPrototype>,
    epochs: usize,
    mode: FlightMode,
}

impl PrototypeState {
    pub fn new(epochs: usize, mode: FlightMode) -> Self {
        assert!(epochs >= 1, "a session needs at least one epoch");
        Self { classes: BTreeMap::new(), epochs, mode }
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Old class: sits at its settled prototype for the whole session.
    pub fn add_old(&mut self, class: usize, prototype: Vec<f64>) {
        self.classes.insert(class, ClassPrototype { class, ncm: prototype.clone(), nct: prototype, novel: false });
    }

    pub fn add_novel(&mut self, class: usize, ncm: Vec<f64>, nct: Vec<f64>) {
        self.classes.insert(class, ClassPrototype { class, ncm, nct, novel: true });
    }

    pub fn get(&self, class: usize) -> Option<&ClassPrototype> {
        self.classes.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.classes.values()
    }

    /// Interpolation weight toward the terminus at `epoch`.
    pub fn eta(&self, epoch: usize) -> f64 {
        match self.mode {
            FlightMode::Flying => epoch as f64 / self.epochs as f64,
            FlightMode::TerminusOnly => 1.0,
            FlightMode::MeanOnly => 0.0,
        }
    }

    pub fn effective_prototype(&self, class: usize, epoch: usize) -> Result<Vec<f64>, FlightError> {
        if epoch > self.epochs {
            return Err(FlightError::EpochOutOfRange { epoch, total: self.epochs });
        }
        let rec = self.classes.get(&class).ok_or(FlightError::UnknownClass(class))?;
        if !rec.novel {
            return Ok(rec.nct.clone());
        }
        let eta = self.eta(epoch);
        if eta == 1.0 {
            return Ok(rec.nct.clone());
        }
        if eta == 0.0 {
            return Ok(rec.ncm.clone());
        }
        let mixed: Vec<f64> = rec.nct.iter().zip(&rec.ncm).map(|(t, m)| eta * t + (1.0 - eta) * m).collect();
        linalg::normalized(&mixed, DEGENERATE_EPS).ok_or(FlightError::DegenerateInterpolation { class, epoch })
    }

    /// Prototype each class keeps after the session closes.
    pub fn settled(&self, class: usize) -> Result<Vec<f64>, FlightError> {
        let rec = self.classes.get(&class).ok_or(FlightError::UnknownClass(class))?;
        Ok(match (rec.novel, self.mode) {
            (true, FlightMode::MeanOnly) => rec.ncm.clone(),
            _ => rec.nct.clone(),
        })
    }
}
