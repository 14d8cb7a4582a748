//! Small dense-vector helpers shared by the numerical modules.
//!
//! Vectors are plain `[f64]` slices. Every reduction runs left to right so
//! results are bit-reproducible for a given input order.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ‖a‖`, or `None` when the norm is at or below `floor`.
pub fn normalized(a: &[f64], floor: f64) -> Option<Vec<f64>> {
    let n = norm(a);
    if n <= floor || !n.is_finite() {
        return None;
    }
    Some(a.iter().map(|x| x / n).collect())
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine of the angle between two vectors; zero when either is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na <= 1e-300 || nb <= 1e-300 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Arithmetic mean of equally sized rows. Panics on an empty slice.
pub fn mean_rows<R: AsRef<[f64]>>(rows: &[R]) -> Vec<f64> {
    let dim = rows[0].as_ref().len();
    let mut acc = vec![0.0; dim];
    for r in rows {
        axpy(1.0, r.as_ref(), &mut acc);
    }
    let inv = 1.0 / rows.len() as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    acc
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_rejects_zero() {
        assert!(normalized(&[0.0, 0.0], 1e-12).is_none());
        let v = normalized(&[3.0, 4.0], 1e-12).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[2.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-15);
    }
}
