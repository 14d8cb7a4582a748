use nct_core::etf::{EtfTerminus, FrameKind};
use nct_core::linalg;
use nct_core::losses::{self, LossValueAndGrad};
use nct_core::memory::herding_select;
use nct_core::metrics;
use nct_core::net::Mlp;
use nct_core::stream::longtail_count;
use nct_core::trainer::predict_cosine;
use proptest::prelude::*;

const H: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = linalg::norm(&linalg::sub(a, b));
    diff / linalg::norm(a).max(linalg::norm(b)).max(1e-7)
}

fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += H;
            m[i] -= H;
            (f(&p) - f(&m)) / (2.0 * H)
        })
        .collect()
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0..1.0f64, dim), 0.5..3.0f64).prop_filter_map("non-degenerate", |(v, s)| {
        let n = linalg::norm(&v);
        (n > 0.1).then(|| linalg::scale(&v, s / n))
    })
}

fn dims() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![4usize, 16, 64])
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    dims().prop_flat_map(|d| (vector(d), vector(d)))
}

fn check(analytic: &LossValueAndGrad, numeric: &[f64]) -> Result<(), TestCaseError> {
    let e = rel_err(&analytic.grad, numeric);
    prop_assert!(e < 1e-4, "relative error {e:e}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn misalignment_gradient_matches_finite_differences((mu, w) in pair()) {
        let w = linalg::normalized(&w, 1e-12).unwrap();
        let g = losses::misalignment_loss(&mu, &w).unwrap();
        let n = central_diff(&mu, |x| losses::misalignment_loss(x, &w).unwrap().value);
        check(&g, &n)?;
    }

    #[test]
    fn distillation_gradient_matches_finite_differences((now, prev) in pair()) {
        let g = losses::distillation_loss(&now, &prev).unwrap();
        let n = central_diff(&now, |x| losses::distillation_loss(x, &prev).unwrap().value);
        check(&g, &n)?;
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences(
        (mu, k, label, seed) in dims().prop_flat_map(|d| (vector(d), 2usize..=d.min(12), 0usize..12, any::<u64>()))
    ) {
        let t = EtfTerminus::build(mu.len(), k, FrameKind::SimplexEtf, seed).unwrap();
        let active: Vec<usize> = (0..k).collect();
        let label = label % k;
        let protos = |c: usize| t.prototype(c).ok();
        let g = losses::cross_entropy_fixed(&mu, protos, &active, label, 16.0).unwrap();
        let n = central_diff(&mu, |x| losses::cross_entropy_fixed(x, protos, &active, label, 16.0).unwrap().value);
        check(&g, &n)?;
    }

    #[test]
    fn combined_gradient_is_linear((mu, w) in pair(), prev in vector(64), lambda in 0.0..10.0f64) {
        let d = mu.len();
        let w = linalg::normalized(&w, 1e-12).unwrap();
        let prev = &prev[..d];
        prop_assume!(linalg::norm(prev) > 1e-3);
        let a = losses::misalignment_loss(&mu, &w).unwrap();
        let b = losses::distillation_loss(&mu, prev).unwrap();
        let c = losses::combined_loss(&a, &b, lambda);
        let n = central_diff(&mu, |x| {
            losses::misalignment_loss(x, &w).unwrap().value + lambda * losses::distillation_loss(x, prev).unwrap().value
        });
        check(&c, &n)?;
    }

    #[test]
    fn losses_invariant_to_positive_feature_scale((mu, w) in pair(), s in 0.01..100.0f64) {
        let w = linalg::normalized(&w, 1e-12).unwrap();
        let a = losses::misalignment_loss(&mu, &w).unwrap().value;
        let b = losses::misalignment_loss(&linalg::scale(&mu, s), &w).unwrap().value;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&a));
    }

    #[test]
    fn etf_gram_identity(k in 2usize..24, extra in 0usize..8, seed in any::<u64>()) {
        let d = k + extra;
        let t = EtfTerminus::build(d, k, FrameKind::SimplexEtf, seed).unwrap();
        let target = -1.0 / (k as f64 - 1.0);
        for i in 0..k {
            for j in 0..k {
                let g = linalg::dot(&t.columns()[i], &t.columns()[j]);
                let want = if i == j { 1.0 } else { target };
                prop_assert!((g - want).abs() < 1e-9, "gram[{i}][{j}] = {g}");
            }
        }
        prop_assert!(t.verify_geometry(1e-8).pass);
    }

    #[test]
    fn prediction_invariant_to_scale(seed in any::<u64>(), mu in vector(8), s in 0.001..1000.0f64) {
        let t = EtfTerminus::build(8, 6, FrameKind::SimplexEtf, seed).unwrap();
        let protos = || t.columns().iter().enumerate().map(|(c, w)| (c, w.as_slice()));
        let a = predict_cosine(&mu, protos()).unwrap();
        let b = predict_cosine(&linalg::scale(&mu, s), protos()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn herding_picks_distinct_indices(feats in prop::collection::vec(vector(4), 1..30), budget in 1usize..40) {
        let picks = herding_select(&feats, budget).unwrap();
        prop_assert_eq!(picks.len(), budget.min(feats.len()));
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), picks.len());
    }

    #[test]
    fn longtail_counts_decay(n_max in 1usize..600, rho in 0.01..1.0f64, total in 2usize..100) {
        let counts: Vec<usize> = (0..total).map(|r| longtail_count(n_max, rho, r, total)).collect();
        prop_assert_eq!(counts[0], n_max);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn trace_ratio_invariant_to_translation_and_rotation(
        feats in prop::collection::vec(vector(6), 12..40), shift in vector(6), seed in any::<u64>()
    ) {
        let labels: Vec<usize> = (0..feats.len()).map(|i| i % 3).collect();
        let scope = [0, 1, 2];
        let base = metrics::trace_ratio(&feats, &labels, &scope).unwrap();
        let moved: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let moved_ratio = metrics::trace_ratio(&moved, &labels, &scope).unwrap();
        prop_assert!((base - moved_ratio).abs() < 1e-9 * base.max(1.0));
        // Orthogonal frame columns as a rotation.
        let q = EtfTerminus::build(6, 6, FrameKind::OrthogonalFrame, seed).unwrap();
        let rotated: Vec<Vec<f64>> =
            feats.iter().map(|f| q.columns().iter().map(|col| linalg::dot(col, f)).collect()).collect();
        let rot_ratio = metrics::trace_ratio(&rotated, &labels, &scope).unwrap();
        prop_assert!((base - rot_ratio).abs() < 1e-9 * base.max(1.0));
    }
}

fn flat_grads(g: &nct_core::net::Gradients) -> Vec<f64> {
    g.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
}

#[test]
fn backbone_parameter_gradients_match_finite_differences() {
    let d = 8;
    let net = Mlp::backbone(16, &[32, 32], d, 5);
    let t = EtfTerminus::build(d, 4, FrameKind::SimplexEtf, 1).unwrap();
    let teacher = Mlp::backbone(16, &[32, 32], d, 6).snapshot();
    let batch: Vec<Vec<f64>> = (0..6).map(|i| (0..16).map(|j| ((i * 16 + j) as f64 * 0.37).sin()).collect()).collect();
    let labels = [0usize, 1, 2, 3, 0, 1];
    let lambda = 2.0;
    let loss = |net: &Mlp| -> f64 {
        batch
            .iter()
            .zip(&labels)
            .map(|(x, &y)| {
                let mu = net.forward_one(x).unwrap();
                let a = losses::misalignment_loss(&mu, t.prototype(y).unwrap()).unwrap().value;
                let b = losses::distillation_loss(&mu, &teacher.forward_one(x)).unwrap().value;
                (a + lambda * b) / batch.len() as f64
            })
            .sum()
    };
    let cache = net.forward(&batch).unwrap();
    let grad_out: Vec<Vec<f64>> = cache
        .outputs()
        .iter()
        .zip(batch.iter().zip(&labels))
        .map(|(mu, (x, &y))| {
            let a = losses::misalignment_loss(mu, t.prototype(y).unwrap()).unwrap();
            let b = losses::distillation_loss(mu, &teacher.forward_one(x)).unwrap();
            linalg::scale(&losses::combined_loss(&a, &b, lambda).grad, 1.0 / batch.len() as f64)
        })
        .collect();
    let (grads, _) = net.backward(&cache, &grad_out).unwrap();
    let analytic = flat_grads(&grads);
    assert_eq!(analytic.len(), net.num_params());

    let stride = net.num_params() / 20;
    for k in 0..20 {
        let i = k * stride + k % 7;
        let mut p = net.clone();
        let mut m = net.clone();
        p.set_param(i, net.param(i) + H);
        m.set_param(i, net.param(i) - H);
        let numeric = (loss(&p) - loss(&m)) / (2.0 * H);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        assert!(err < 1e-3, "param {i}: analytic {} numeric {numeric} (rel {err:e})", analytic[i]);
    }
}
