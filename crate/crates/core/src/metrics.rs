//! Accuracy summaries and neural-collapse diagnostics.
//!
//! The diagnostic functions work on whatever features they are handed; the
//! trainer passes ℓ2-normalized features. Class means `m_k` and the global
//! mean `m_G` are taken over the samples whose label is in scope.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("accuracy list is empty")]
    EmptyList,
    #[error("diagnostics need at least two classes with samples in scope, found {0}")]
    TooFewClasses(usize),
    #[error("between-class scatter trace {0:e} is too small")]
    DegenerateBetweenClass(f64),
    #[error("class {0} has no prototype")]
    MissingPrototype(usize),
    #[error("features and labels differ in length")]
    LengthMismatch,
    #[error("feature dump: {0}")]
    Parse(String),
}

pub fn average_incremental_accuracy(acc: &[f64]) -> Result<f64, MetricsError> {
    if acc.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}

/// First-session accuracy minus last-session accuracy.
pub fn performance_drop(acc: &[f64]) -> Result<f64, MetricsError> {
    match (acc.first(), acc.last()) {
        (Some(a0), Some(at)) => Ok(a0 - at),
        _ => Err(MetricsError::EmptyList),
    }
}

/// Per-class means (in class order) and the global mean over in-scope samples.
pub struct ScopedMeans {
    pub classes: Vec<usize>,
    pub class_means: Vec<Vec<f64>>,
    pub global_mean: Vec<f64>,
}

pub fn scoped_means<R: AsRef<[f64]>>(features: &[R], labels: &[usize], scope: &[usize]) -> Result<ScopedMeans, MetricsError> {
    if features.len() != labels.len() {
        return Err(MetricsError::LengthMismatch);
    }
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    let mut all: Vec<&[f64]> = Vec::new();
    for (f, &y) in features.iter().zip(labels) {
        if scope.contains(&y) {
            groups.entry(y).or_default().push(f.as_ref());
            all.push(f.as_ref());
        }
    }
    if groups.len() < 2 {
        return Err(MetricsError::TooFewClasses(groups.len()));
    }
    let global_mean = linalg::mean_rows(&all);
    let classes: Vec<usize> = groups.keys().copied().collect();
    let class_means = groups.values().map(|g| linalg::mean_rows(g)).collect();
    Ok(ScopedMeans { classes, class_means, global_mean })
}

fn centered_means(m: &ScopedMeans) -> Vec<Vec<f64>> {
    m.class_means.iter().map(|mk| linalg::sub(mk, &m.global_mean)).collect()
}

/// `Avg_{k≠k'} cos∠(m_k − m_G, w_{k'})`.
pub fn nc_cross_cos<'a, R, P>(features: &[R], labels: &[usize], prototypes: P, scope: &[usize]) -> Result<f64, MetricsError>
where
    R: AsRef<[f64]>,
    P: Fn(usize) -> Option<&'a [f64]>,
{
    let m = scoped_means(features, labels, scope)?;
    let centered = centered_means(&m);
    let protos: Vec<&[f64]> =
        m.classes.iter().map(|&c| prototypes(c).ok_or(MetricsError::MissingPrototype(c))).collect::<Result<_, _>>()?;
    let k = m.classes.len();
    let mut total = 0.0;
    for (i, ck) in centered.iter().enumerate() {
        for (j, w) in protos.iter().enumerate() {
            if i != j {
                total += linalg::cosine(ck, w);
            }
        }
    }
    Ok(total / (k * (k - 1)) as f64)
}

/// `Avg_k cos∠(m_k − m_G, w_k)`.
pub fn nc_self_cos<'a, R, P>(features: &[R], labels: &[usize], prototypes: P, scope: &[usize]) -> Result<f64, MetricsError>
where
    R: AsRef<[f64]>,
    P: Fn(usize) -> Option<&'a [f64]>,
{
    let m = scoped_means(features, labels, scope)?;
    let centered = centered_means(&m);
    let mut total = 0.0;
    for (ck, &c) in centered.iter().zip(&m.classes) {
        let w = prototypes(c).ok_or(MetricsError::MissingPrototype(c))?;
        total += linalg::cosine(ck, w);
    }
    Ok(total / m.classes.len() as f64)
}

/// `tr(Σ_W) / tr(Σ_B)` with `Σ_W = Avg_k Avg_i (m_{k,i}−m_k)(…)ᵀ` and
/// `Σ_B = Avg_k (m_k−m_G)(…)ᵀ`.
pub fn trace_ratio<R: AsRef<[f64]>>(features: &[R], labels: &[usize], scope: &[usize]) -> Result<f64, MetricsError> {
    let m = scoped_means(features, labels, scope)?;
    let mut within = vec![0.0; m.classes.len()];
    let mut counts = vec![0usize; m.classes.len()];
    for (f, &y) in features.iter().zip(labels) {
        if let Ok(pos) = m.classes.binary_search(&y) {
            let d = linalg::sub(f.as_ref(), &m.class_means[pos]);
            within[pos] += linalg::dot(&d, &d);
            counts[pos] += 1;
        }
    }
    let k = m.classes.len() as f64;
    let tr_w = within.iter().zip(&counts).map(|(w, &n)| w / n as f64).sum::<f64>() / k;
    let tr_b = centered_means(&m).iter().map(|c| linalg::dot(c, c)).sum::<f64>() / k;
    if tr_b <= 1e-12 {
        return Err(MetricsError::DegenerateBetweenClass(tr_b));
    }
    Ok(tr_w / tr_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NcStats {
    pub avg_cross_cos: f64,
    pub avg_self_cos: f64,
    pub trace_ratio: f64,
}

/// Diagnostics over the three scopes tracked per session. A scope with fewer
/// than two classes reports `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NcDiagnostics {
    pub each: Option<NcStats>,
    pub acc: Option<NcStats>,
    pub base: Option<NcStats>,
}

pub fn nc_stats<'a, R, P>(features: &[R], labels: &[usize], prototypes: P, scope: &[usize]) -> Option<NcStats>
where
    R: AsRef<[f64]>,
    P: Fn(usize) -> Option<&'a [f64]> + Copy,
{
    Some(NcStats {
        avg_cross_cos: nc_cross_cos(features, labels, prototypes, scope).ok()?,
        avg_self_cos: nc_self_cos(features, labels, prototypes, scope).ok()?,
        trace_ratio: trace_ratio(features, labels, scope).ok()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub t: usize,
    pub accuracy: f64,
    pub train: NcDiagnostics,
    pub test: NcDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(rename = "A")]
    pub average_accuracy: f64,
    #[serde(rename = "PD")]
    pub performance_drop: f64,
    pub per_session: Vec<SessionMetrics>,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn from_sessions(per_session: Vec<SessionMetrics>, violations: Vec<String>, warnings: Vec<String>) -> Result<Self, MetricsError> {
        let acc: Vec<f64> = per_session.iter().map(|s| s.accuracy).collect();
        Ok(Self {
            average_accuracy: average_incremental_accuracy(&acc)?,
            performance_drop: performance_drop(&acc)?,
            per_session,
            violations,
            warnings,
        })
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.per_session.iter().map(|s| s.accuracy).collect()
    }

    pub const CSV_HEADER: &'static str =
        "t,A_t,avg_cross_cos_each,avg_cross_cos_acc,avg_self_cos_each,avg_self_cos_acc,trace_ratio_each,trace_ratio_acc";

    /// One CSV row per session for the chosen split. Missing scopes print `nan`.
    pub fn to_csv(&self, split: crate::stream::Split) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.12}"));
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.per_session {
            let d = match split {
                crate::stream::Split::Train => &s.train,
                crate::stream::Split::Test => &s.test,
            };
            let row = [
                s.t.to_string(),
                format!("{:.12}", s.accuracy),
                f(d.each.map(|x| x.avg_cross_cos)),
                f(d.acc.map(|x| x.avg_cross_cos)),
                f(d.each.map(|x| x.avg_self_cos)),
                f(d.acc.map(|x| x.avg_self_cos)),
                f(d.each.map(|x| x.trace_ratio)),
                f(d.acc.map(|x| x.trace_ratio)),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Labeled feature dump: header `n d`, then `label v_1 … v_d` per row.
pub fn parse_feature_dump(text: &str) -> Result<(Vec<Vec<f64>>, Vec<usize>), MetricsError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| MetricsError::Parse("empty dump".into()))?;
    let hv: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| MetricsError::Parse(format!("bad header `{header}`"))))
        .collect::<Result<_, _>>()?;
    let [n, d] = hv[..] else {
        return Err(MetricsError::Parse(format!("bad header `{header}`")));
    };
    let mut feats = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let mut parts = line.split_whitespace();
        let label = parts
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| MetricsError::Parse(format!("row {i}: bad label")))?;
        let values: Vec<f64> = parts
            .map(|s| s.parse::<f64>().map_err(|_| MetricsError::Parse(format!("row {i}: bad value `{s}`"))))
            .collect::<Result<_, _>>()?;
        if values.len() != d {
            return Err(MetricsError::Parse(format!("row {i}: expected {d} values, got {}", values.len())));
        }
        labels.push(label);
        feats.push(values);
    }
    if feats.len() != n {
        return Err(MetricsError::Parse(format!("expected {n} rows, got {}", feats.len())));
    }
    Ok((feats, labels))
}

pub fn write_feature_dump(features: &[Vec<f64>], labels: &[usize]) -> String {
    let d = features.first().map_or(0, Vec::len);
    let mut out = format!("{} {}\n", features.len(), d);
    for (f, y) in features.iter().zip(labels) {
        out.push_str(&y.to_string());
        for v in f {
            out.push(' ');
            out.push_str(&format!("{v:e}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etf::{EtfTerminus, FrameKind};

    #[test]
    fn averages() {
        assert!((average_incremental_accuracy(&[0.8, 0.7, 0.6]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(average_incremental_accuracy(&[0.42]).unwrap(), 0.42);
        assert_eq!(average_incremental_accuracy(&[0.5; 4]).unwrap(), 0.5);
        assert_eq!(average_incremental_accuracy(&[]), Err(MetricsError::EmptyList));
        assert!((performance_drop(&[0.9, 0.7, 0.6]).unwrap() - 0.3).abs() < 1e-15);
    }

    fn vertex_fixture(k: usize) -> (EtfTerminus, Vec<Vec<f64>>, Vec<usize>) {
        let t = EtfTerminus::build(k + 1, k, FrameKind::SimplexEtf, 3).unwrap();
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            for _ in 0..3 {
                feats.push(t.prototype(c).unwrap().to_vec());
                labels.push(c);
            }
        }
        (t, feats, labels)
    }

    #[test]
    fn etf_vertices_collapse_exactly() {
        for k in [2usize, 5] {
            let (t, feats, labels) = vertex_fixture(k);
            let scope: Vec<usize> = (0..k).collect();
            let p = |c: usize| t.prototype(c).ok();
            let cross = nc_cross_cos(&feats, &labels, p, &scope).unwrap();
            assert!((cross + 1.0 / (k as f64 - 1.0)).abs() < 1e-9, "{cross}");
            assert!((nc_self_cos(&feats, &labels, p, &scope).unwrap() - 1.0).abs() < 1e-9);
            assert!(trace_ratio(&feats, &labels, &scope).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn anti_aligned_means_give_minus_one() {
        let (t, feats, labels) = vertex_fixture(4);
        let flipped: Vec<Vec<f64>> = feats.iter().map(|f| linalg::scale(f, -1.0)).collect();
        let s = nc_self_cos(&flipped, &labels, |c| t.prototype(c).ok(), &[0, 1, 2, 3]).unwrap();
        assert!((s + 1.0).abs() < 1e-9);
    }

    #[test]
    fn mirrored_two_class_trace_ratio_is_one() {
        // Class means ±(1,0); samples at mean ± (0,1). tr Σ_W = 1, tr Σ_B = 1.
        let feats = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
        let labels = vec![0, 0, 1, 1];
        assert!((trace_ratio(&feats, &labels, &[0, 1]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_scope_errors() {
        let feats = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(trace_ratio(&feats, &[0, 1], &[0, 1]), Err(MetricsError::DegenerateBetweenClass(0.0)));
        assert_eq!(trace_ratio(&feats, &[0, 1], &[0]), Err(MetricsError::TooFewClasses(1)));
    }

    #[test]
    fn feature_dump_round_trip() {
        let feats = vec![vec![0.1, -2.5], vec![3.0, 1e-7]];
        let labels = vec![4, 0];
        let text = write_feature_dump(&feats, &labels);
        assert_eq!(parse_feature_dump(&text).unwrap(), (feats, labels));
        assert!(parse_feature_dump("2 2\n0 1.0\n").is_err());
    }
}
