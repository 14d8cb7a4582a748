//! Feature-level losses with gradients taken with respect to the raw
//! (un-normalized) feature, so the normalization Jacobian lives here and the
//! networks stay loss-agnostic.

use thiserror::Error;

use crate::linalg;

/// Features with a norm at or below this are rejected.
pub const ZERO_FEATURE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("feature norm {0:e} is too small to normalize")]
    ZeroFeature(f64),
    #[error("label {0} is not among the active classes")]
    LabelInactive(usize),
    #[error("class {0} has no prototype")]
    UnknownClass(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueAndGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValueAndGrad {
    pub fn zero(dim: usize) -> Self {
        Self { value: 0.0, grad: vec![0.0; dim] }
    }
}

fn unit(feature: &[f64]) -> Result<(Vec<f64>, f64), LossError> {
    let n = linalg::norm(feature);
    if n <= ZERO_FEATURE_EPS || !n.is_finite() {
        return Err(LossError::ZeroFeature(n));
    }
    Ok((feature.iter().map(|x| x / n).collect(), n))
}

/// Pulls a gradient taken w.r.t. `μ̂ = μ/‖μ‖` back to `μ`:
/// `∂/∂μ = (g − (g·μ̂) μ̂) / ‖μ‖`.
fn through_normalization(g: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let radial = linalg::dot(g, unit);
    g.iter().zip(unit).map(|(gi, ui)| (gi - radial * ui) / norm).collect()
}

/// `½(ŵᵀμ̂ − 1)²` for a unit target direction `ŵ`.
fn cosine_gap(feature: &[f64], target: &[f64]) -> Result<LossValueAndGrad, LossError> {
    let (mu_hat, n) = unit(feature)?;
    let c = linalg::dot(target, &mu_hat);
    let gap = c - 1.0;
    let g: Vec<f64> = target.iter().map(|w| gap * w).collect();
    Ok(LossValueAndGrad { value: 0.5 * gap * gap, grad: through_normalization(&g, &mu_hat, n) })
}

/// Misalignment between a feature and its (unit) class prototype.
pub fn misalignment_loss(feature: &[f64], prototype: &[f64]) -> Result<LossValueAndGrad, LossError> {
    cosine_gap(feature, prototype)
}

/// Misalignment between the current feature and the teacher's feature of the
/// same input. The teacher feature is a constant.
pub fn distillation_loss(feature_now: &[f64], feature_prev: &[f64]) -> Result<LossValueAndGrad, LossError> {
    let (prev_hat, _) = unit(feature_prev)?;
    cosine_gap(feature_now, &prev_hat)
}

pub fn combined_loss(align: &LossValueAndGrad, distill: &LossValueAndGrad, lambda_eff: f64) -> LossValueAndGrad {
    debug_assert!(lambda_eff >= 0.0);
    let mut grad = align.grad.clone();
    linalg::axpy(lambda_eff, &distill.grad, &mut grad);
    LossValueAndGrad { value: align.value + lambda_eff * distill.value, grad }
}

/// Softmax cross-entropy over the given logits; returns the loss and `∂L/∂z`.
pub(crate) fn softmax_xent(logits: &[f64], label_pos: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    // Mass on the other classes, summed directly so a saturated softmax keeps
    // its small loss and gradient to full relative precision.
    let rest: f64 = exps.iter().enumerate().filter(|&(i, _)| i != label_pos).map(|(_, e)| e).sum();
    let value = if logits[label_pos] == max { rest.ln_1p() } else { max - logits[label_pos] + total.ln() };
    let mut dz: Vec<f64> = exps.iter().map(|e| e / total).collect();
    dz[label_pos] = -rest / total;
    (value, dz)
}

/// Cross-entropy against fixed prototypes with cosine logits
/// `z_k = scale · ŵ_kᵀμ̂` over `active` classes.
pub fn cross_entropy_fixed<'a, P>(
    feature: &[f64],
    prototypes: P,
    active: &[usize],
    label: usize,
    scale: f64,
) -> Result<LossValueAndGrad, LossError>
where
    P: Fn(usize) -> Option<&'a [f64]>,
{
    let pos = active.iter().position(|&c| c == label).ok_or(LossError::LabelInactive(label))?;
    let (mu_hat, n) = unit(feature)?;
    let protos: Vec<&[f64]> = active
        .iter()
        .map(|&c| prototypes(c).ok_or(LossError::UnknownClass(c)))
        .collect::<Result<_, _>>()?;
    let logits: Vec<f64> = protos.iter().map(|w| scale * linalg::dot(w, &mu_hat)).collect();
    let (value, dz) = softmax_xent(&logits, pos);
    let mut g = vec![0.0; feature.len()];
    for (w, d) in protos.iter().zip(&dz) {
        linalg::axpy(scale * d, w, &mut g);
    }
    Ok(LossValueAndGrad { value, grad: through_normalization(&g, &mu_hat, n) })
}

/// Cross-entropy with raw inner-product logits `z_k = ŵ_kᵀm` and no
/// normalization of `m`; the feature is kept in the unit ball by the caller.
pub fn cross_entropy_raw(feature: &[f64], prototypes: &[Vec<f64>], label: usize) -> LossValueAndGrad {
    let logits: Vec<f64> = prototypes.iter().map(|w| linalg::dot(w, feature)).collect();
    let (value, dz) = softmax_xent(&logits, label);
    let mut grad = vec![0.0; feature.len()];
    for (w, d) in prototypes.iter().zip(&dz) {
        linalg::axpy(*d, w, &mut grad);
    }
    LossValueAndGrad { value, grad }
}

/// `½(ŵᵀm − 1)²` with no normalization of `m`.
pub fn misalignment_raw(feature: &[f64], prototype: &[f64]) -> LossValueAndGrad {
    let gap = linalg::dot(prototype, feature) - 1.0;
    LossValueAndGrad { value: 0.5 * gap * gap, grad: linalg::scale(prototype, gap) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_feature_has_zero_loss_and_gradient() {
        let w = [0.6, 0.8];
        let r = misalignment_loss(&[1.2, 1.6], &w).unwrap();
        assert!(r.value.abs() < 1e-15);
        assert!(r.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn orthogonal_and_antiparallel_values() {
        assert!((misalignment_loss(&[0.0, 3.0], &[1.0, 0.0]).unwrap().value - 0.5).abs() < 1e-15);
        assert!((misalignment_loss(&[-1.0, 0.0], &[1.0, 0.0]).unwrap().value - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_feature_is_rejected() {
        assert!(matches!(misalignment_loss(&[0.0, 0.0], &[1.0, 0.0]), Err(LossError::ZeroFeature(_))));
        assert!(matches!(distillation_loss(&[1.0, 0.0], &[0.0, 1e-13]), Err(LossError::ZeroFeature(_))));
    }

    #[test]
    fn distillation_values() {
        let prev = [0.3, -0.4, 1.2];
        let now: Vec<f64> = prev.iter().map(|x| 5.0 * x).collect();
        assert!(distillation_loss(&now, &prev).unwrap().value.abs() < 1e-15);
        assert!((distillation_loss(&[0.0, 2.0], &[1.0, 0.0]).unwrap().value - 0.5).abs() < 1e-15);
        assert!((distillation_loss(&[-2.0, 0.0], &[1.0, 0.0]).unwrap().value - 2.0).abs() < 1e-15);
    }

    #[test]
    fn combined_weights_distillation() {
        let a = LossValueAndGrad { value: 0.5, grad: vec![1.0, 0.0] };
        let d = LossValueAndGrad { value: 0.1, grad: vec![0.0, 1.0] };
        let c = combined_loss(&a, &d, 5.0);
        assert!((c.value - 1.0).abs() < 1e-15);
        assert_eq!(c.grad, vec![1.0, 5.0]);
        assert_eq!(combined_loss(&a, &d, 0.0), a);
        let z = LossValueAndGrad::zero(2);
        assert_eq!(combined_loss(&z, &z, 5.0).value, 0.0);
    }

    #[test]
    fn ce_at_prototype_of_two_class_frame() {
        let protos = [vec![1.0, 0.0], vec![-1.0, 0.0]];
        let r = cross_entropy_fixed(&[1.0, 0.0], |c| protos.get(c).map(Vec::as_slice), &[0, 1], 0, 1.0).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        assert!((r.value - want).abs() < 1e-12);
        assert!((r.value - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn ce_uniform_logits() {
        let protos = [
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0],
        ];
        let r = cross_entropy_fixed(&[0.0, 0.0, 0.0, 0.0, 2.0], |c| protos.get(c).map(Vec::as_slice), &[0, 1, 2, 3], 2, 16.0)
            .unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_inactive_label() {
        let protos = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let err = cross_entropy_fixed(&[1.0, 1.0], |c| protos.get(c).map(Vec::as_slice), &[0], 1, 1.0).unwrap_err();
        assert_eq!(err, LossError::LabelInactive(1));
    }

    #[test]
    fn misalignment_is_scale_invariant() {
        let w = [0.0, 0.6, 0.8];
        let mu = [0.3, -1.1, 0.25];
        let a = misalignment_loss(&mu, &w).unwrap().value;
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let b = misalignment_loss(&linalg::scale(&mu, c), &w).unwrap().value;
            assert!((a - b).abs() < 1e-10);
        }
    }
}
