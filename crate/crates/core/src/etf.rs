//! Fixed prototype frames for the whole label space.
//!
//! A simplex ETF of `K` unit columns in `d ≥ K` dimensions is built as
//! `E = sqrt(K/(K-1)) · U · (I_K − 1/K · 1 1ᵀ)` from a seeded orthonormal
//! `U ∈ ℝ^{d×K}`. Any orthonormal `U` gives the same Gram matrix, so the seed
//! only fixes the rotation. The orthogonal frame is `U` itself and serves as
//! the ablation arm.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum EtfError {
    #[error("feature dimension {dim} is smaller than the number of prototypes {classes}")]
    DimensionTooSmall { dim: usize, classes: usize },
    #[error("a frame needs at least two prototypes, got {0}")]
    TooFewClasses(usize),
    #[error("orthonormalization failed after {attempts} seeded draws")]
    DegenerateBasis { attempts: usize },
    #[error("class {class} is out of range for a terminus with {classes} prototypes")]
    IndexOutOfRange { class: usize, classes: usize },
    #[error("malformed terminus text: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    #[serde(rename = "etf")]
    SimplexEtf,
    #[serde(rename = "orthogonal")]
    OrthogonalFrame,
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameKind::SimplexEtf => f.write_str("etf"),
            FrameKind::OrthogonalFrame => f.write_str("orthogonal"),
        }
    }
}

impl FromStr for FrameKind {
    type Err = EtfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "etf" | "simplex" => Ok(FrameKind::SimplexEtf),
            "orthogonal" | "ortho" => Ok(FrameKind::OrthogonalFrame),
            other => Err(EtfError::Parse(format!("unknown frame kind `{other}`"))),
        }
    }
}

/// The fixed `d × K_total` prototype matrix, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfTerminus {
    dim: usize,
    kind: FrameKind,
    seed: u64,
    columns: Vec<Vec<f64>>,
}

const MAX_BASIS_ATTEMPTS: usize = 3;

impl EtfTerminus {
    pub fn build(dim: usize, classes: usize, kind: FrameKind, seed: u64) -> Result<Self, EtfError> {
        if classes < 2 {
            return Err(EtfError::TooFewClasses(classes));
        }
        if dim < classes {
            return Err(EtfError::DimensionTooSmall { dim, classes });
        }
        let basis = (0..MAX_BASIS_ATTEMPTS)
            .find_map(|attempt| orthonormal_basis(dim, classes, seed, attempt as u64))
            .ok_or(EtfError::DegenerateBasis { attempts: MAX_BASIS_ATTEMPTS })?;

        let columns = match kind {
            FrameKind::OrthogonalFrame => basis,
            FrameKind::SimplexEtf => {
                // U (I − 11ᵀ/K) subtracts the mean column from every column.
                let centroid = linalg::mean_rows(&basis);
                let gain = (classes as f64 / (classes as f64 - 1.0)).sqrt();
                basis
                    .iter()
                    .map(|u| {
                        let e: Vec<f64> =
                            u.iter().zip(&centroid).map(|(a, c)| gain * (a - c)).collect();
                        linalg::normalized(&e, 0.0).expect("ETF column cannot vanish")
                    })
                    .collect()
            }
        };
        Ok(Self { dim, kind, seed, columns })
    }

    /// Wraps raw columns without checking geometry. Use [`verify_geometry`](Self::verify_geometry)
    /// before relying on the invariants.
    pub fn from_columns(kind: FrameKind, seed: u64, columns: Vec<Vec<f64>>) -> Result<Self, EtfError> {
        let dim = columns.first().map(Vec::len).unwrap_or(0);
        if columns.len() < 2 {
            return Err(EtfError::TooFewClasses(columns.len()));
        }
        if columns.iter().any(|c| c.len() != dim) || dim == 0 {
            return Err(EtfError::Parse("columns must share one positive dimension".into()));
        }
        Ok(Self { dim, kind, seed, columns })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.columns.len()
    }

    pub fn kind(&self) -> FrameKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn prototype(&self, class: usize) -> Result<&[f64], EtfError> {
        self.columns
            .get(class)
            .map(Vec::as_slice)
            .ok_or(EtfError::IndexOutOfRange { class, classes: self.columns.len() })
    }

    /// Target inner product between two distinct columns.
    pub fn offdiag_target(&self) -> f64 {
        match self.kind {
            FrameKind::SimplexEtf => -1.0 / (self.columns.len() as f64 - 1.0),
            FrameKind::OrthogonalFrame => 0.0,
        }
    }

    pub fn verify_geometry(&self, tol: f64) -> GeometryReport {
        let k = self.columns.len();
        let target = self.offdiag_target();
        let mut max_norm_dev = 0.0_f64;
        let mut max_offdiag_dev = 0.0_f64;
        for i in 0..k {
            max_norm_dev = max_norm_dev.max((linalg::norm(&self.columns[i]) - 1.0).abs());
            for j in (i + 1)..k {
                let g = linalg::dot(&self.columns[i], &self.columns[j]);
                max_offdiag_dev = max_offdiag_dev.max((g - target).abs());
            }
        }
        let mut sum = vec![0.0; self.dim];
        for c in &self.columns {
            linalg::axpy(1.0, c, &mut sum);
        }
        let colsum_norm = linalg::norm(&sum);
        // An orthogonal frame has no zero-sum requirement.
        let colsum_ok = self.kind == FrameKind::OrthogonalFrame || colsum_norm <= tol;
        GeometryReport {
            max_norm_dev,
            max_offdiag_dev,
            colsum_norm,
            pass: max_norm_dev <= tol && max_offdiag_dev <= tol && colsum_ok,
        }
    }

    /// Writes `d K kind seed` followed by `d` rows of `K` values at 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {} {}\n", self.dim, self.columns.len(), self.kind, self.seed);
        for r in 0..self.dim {
            let row: Vec<String> = self.columns.iter().map(|c| format!("{:.16e}", c[r])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EtfError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| EtfError::Parse("empty input".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(EtfError::Parse(format!("bad header `{header}`")));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| EtfError::Parse(e.to_string()));
        let dim = parse_usize(fields[0])?;
        let k = parse_usize(fields[1])?;
        let kind: FrameKind = fields[2].parse()?;
        let seed = fields[3].parse::<u64>().map_err(|e| EtfError::Parse(e.to_string()))?;
        let mut columns = vec![vec![0.0; dim]; k];
        for r in 0..dim {
            let line = lines.next().ok_or_else(|| EtfError::Parse(format!("missing row {r}")))?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| EtfError::Parse(e.to_string())))
                .collect::<Result<_, _>>()?;
            if values.len() != k {
                return Err(EtfError::Parse(format!("row {r} has {} values, expected {k}", values.len())));
            }
            for (c, v) in values.into_iter().enumerate() {
                columns[c][r] = v;
            }
        }
        Self::from_columns(kind, seed, columns)
    }
}

/// Thin QR of a seeded Gaussian `d × k` matrix. Returns `None` for a
/// numerically rank-deficient draw.
fn orthonormal_basis(dim: usize, classes: usize, seed: u64, attempt: u64) -> Option<Vec<Vec<f64>>> {
    let mut rng = seed::rng(seed, "etf-basis", &[attempt]);
    let draw = DMatrix::<f64>::from_fn(dim, classes, |_, _| StandardNormal.sample(&mut rng));
    let qr = draw.qr();
    let r = qr.r();
    let diag_min = (0..classes).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    let diag_max = (0..classes).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if !(diag_min > 1e-10 * diag_max.max(1.0)) {
        return None;
    }
    let q = qr.q();
    Some((0..classes).map(|c| q.column(c).iter().copied().collect()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub max_norm_dev: f64,
    pub max_offdiag_dev: f64,
    pub colsum_norm: f64,
    pub pass: bool,
}
