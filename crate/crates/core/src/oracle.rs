//! Numerical witness for the optimality of the fixed terminus.
//!
//! Backbone-free model: every sample owns a free feature `m` in the unit ball
//! and the prototypes are the fixed terminus columns. Per session the
//! objective is `1/N Σ L(m_{k,i}, Ŵ)`; it is separable across sessions and,
//! with a fixed frame, across samples. Each feature is driven by projected
//! gradient descent onto the ball.
//!
//! The misalignment loss `½(ŵᵀm − 1)²` has a zero constraint multiplier at its
//! optimum (the unconstrained minimizers form the hyperplane `ŵᵀm = 1`, which
//! touches the ball only at `ŵ`), so a fixed step converges sublinearly: the
//! off-axis component decays like `1/√(step·iters)`. The default step rule is
//! therefore spectral (Barzilai–Borwein) with step halving whenever a
//! sample's loss would increase; it converges linearly on both losses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::etf::EtfTerminus;
use crate::linalg;
use crate::losses::{cross_entropy_raw, misalignment_raw, LossValueAndGrad};
use crate::seed;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleLoss {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "align")]
    Misalignment,
}

impl std::str::FromStr for OracleLoss {
    type Err = OracleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" => Ok(Self::CrossEntropy),
            "align" => Ok(Self::Misalignment),
            other => Err(OracleError::InvalidProblem(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    Fixed,
    Spectral,
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("invalid oracle problem: {0}")]
    InvalidProblem(String),
    #[error("no convergence after {} iterations (max update {:e})", .0.report.iterations, .0.report.max_update)]
    NotConverged(Box<OracleSolution>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleProblem {
    pub terminus: EtfTerminus,
    /// Class ids per session.
    pub sessions: Vec<Vec<usize>>,
    /// `counts[k]` samples for class `k`.
    pub counts: Vec<usize>,
    pub loss: OracleLoss,
}

impl OracleProblem {
    /// Splits classes `0..counts.len()` into `sessions` contiguous groups.
    pub fn split_evenly(terminus: EtfTerminus, counts: Vec<usize>, sessions: usize, loss: OracleLoss) -> Result<Self, OracleError> {
        let k = counts.len();
        if sessions == 0 || sessions > k {
            return Err(OracleError::InvalidProblem(format!("cannot split {k} classes into {sessions} sessions")));
        }
        let groups = (0..sessions)
            .map(|s| {
                let lo = s * k / sessions;
                let hi = (s + 1) * k / sessions;
                (lo..hi).collect()
            })
            .collect();
        let p = Self { terminus, sessions: groups, counts, loss };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let k = self.terminus.num_classes();
        let mut seen = vec![false; k];
        for s in &self.sessions {
            for &c in s {
                if c >= k || c >= self.counts.len() {
                    return Err(OracleError::InvalidProblem(format!("class {c} has no prototype or count")));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(OracleError::InvalidProblem(format!("class {c} appears twice")));
                }
                if self.counts[c] == 0 {
                    return Err(OracleError::InvalidProblem(format!("class {c} has no samples")));
                }
            }
        }
        Ok(())
    }

    fn sample_loss(&self, m: &[f64], class: usize) -> LossValueAndGrad {
        match self.loss {
            OracleLoss::CrossEntropy => cross_entropy_raw(m, self.terminus.columns(), class),
            OracleLoss::Misalignment => misalignment_raw(m, &self.terminus.columns()[class]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub step: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub init_radius: f64,
    pub seed: u64,
    pub rule: StepRule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { step: 0.5, max_iters: 20_000, tol: 1e-6, init_radius: 0.1, seed: 0, rule: StepRule::Spectral }
    }
}

/// One free feature with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeature {
    pub session: usize,
    pub class: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub max_update: f64,
    pub converged: bool,
    /// False if any accepted step raised a session objective.
    pub monotone: bool,
    pub step_halvings: usize,
    pub final_objective: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub features: Vec<LabeledFeature>,
    pub report: ConvergenceReport,
}

fn project_to_ball(m: &mut [f64]) {
    let n = linalg::norm(m);
    if n > 1.0 {
        m.iter_mut().for_each(|x| *x /= n);
    }
}

fn init_feature(dim: usize, radius: f64, seed_value: u64, class: usize, index: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed_value, "oracle-init", &[class as u64, index as u64]);
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let u = linalg::normalized(&dir, 0.0).expect("gaussian draw is nonzero");
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    linalg::scale(&u, r)
}

struct Particle {
    class: usize,
    m: Vec<f64>,
    loss: LossValueAndGrad,
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

const MIN_STEP: f64 = 1e-12;
const MAX_STEP: f64 = 1e12;

/// Runs projected gradient descent on one block of samples until the largest
/// per-feature update falls below `tol`. Returns (iterations, max update,
/// monotone, halvings, objective).
fn descend(problem: &OracleProblem, particles: &mut [Particle], cfg: &SolverConfig) -> (usize, f64, bool, usize, f64) {
    let n = particles.len() as f64;
    let objective = |ps: &[Particle]| ps.iter().map(|p| p.loss.value).sum::<f64>() / n;
    let mut monotone = true;
    let mut halvings = 0;
    let mut max_update = f64::INFINITY;
    let mut iters = 0;
    let mut last_obj = objective(particles);
    while iters < cfg.max_iters {
        iters += 1;
        max_update = 0.0_f64;
        for p in particles.iter_mut() {
            let mut step = match (cfg.rule, &p.prev) {
                (StepRule::Spectral, Some((pm, pg))) => {
                    let dm = linalg::sub(&p.m, pm);
                    let dg = linalg::sub(&p.loss.grad, pg);
                    let curv = linalg::dot(&dm, &dg);
                    if curv > 0.0 { linalg::dot(&dm, &dm) / curv } else { MAX_STEP }
                }
                _ => cfg.step,
            }
            .clamp(MIN_STEP, MAX_STEP);
            let (cand, cand_loss) = loop {
                let mut c = p.m.clone();
                linalg::axpy(-step, &p.loss.grad, &mut c);
                project_to_ball(&mut c);
                let l = problem.sample_loss(&c, p.class);
                if l.value <= p.loss.value || step <= MIN_STEP {
                    break (c, l);
                }
                step *= 0.5;
                halvings += 1;
            };
            let update = linalg::norm(&linalg::sub(&cand, &p.m));
            max_update = max_update.max(update);
            let old_m = std::mem::replace(&mut p.m, cand);
            let old_g = std::mem::replace(&mut p.loss, cand_loss).grad;
            p.prev = Some((old_m, old_g));
        }
        let obj = objective(particles);
        if obj > last_obj {
            monotone = false;
        }
        last_obj = obj;
        if max_update < cfg.tol {
            break;
        }
    }
    (iters, max_update, monotone, halvings, last_obj)
}

fn build_particles(problem: &OracleProblem, cfg: &SolverConfig, classes: &[usize]) -> Vec<Particle> {
    let dim = problem.terminus.dim();
    classes
        .iter()
        .flat_map(|&c| (0..problem.counts[c]).map(move |i| (c, i)))
        .map(|(c, i)| {
            let m = init_feature(dim, cfg.init_radius, cfg.seed, c, i);
            let loss = problem.sample_loss(&m, c);
            Particle { class: c, m, loss, prev: None }
        })
        .collect()
}

fn finish(
    parts: Vec<(usize, Vec<Particle>)>,
    iterations: usize,
    max_update: f64,
    monotone: bool,
    halvings: usize,
    objectives: Vec<f64>,
    tol: f64,
) -> Result<OracleSolution, OracleError> {
    let features = parts
        .into_iter()
        .flat_map(|(s, ps)| ps.into_iter().map(move |p| LabeledFeature { session: s, class: p.class, feature: p.m }))
        .collect();
    let converged = max_update < tol;
    let solution = OracleSolution {
        features,
        report: ConvergenceReport { iterations, max_update, converged, monotone, step_halvings: halvings, final_objective: objectives },
    };
    if converged {
        Ok(solution)
    } else {
        Err(OracleError::NotConverged(Box::new(solution)))
    }
}

/// Solves sessions `0..=T` one after another.
pub fn solve(problem: &OracleProblem, cfg: &SolverConfig) -> Result<OracleSolution, OracleError> {
    problem.validate()?;
    if !(cfg.step > 0.0) {
        return Err(OracleError::InvalidProblem("step size must be positive".into()));
    }
    let mut parts = Vec::new();
    let (mut iterations, mut max_update, mut monotone, mut halvings) = (0, 0.0_f64, true, 0);
    let mut objectives = Vec::new();
    for (s, classes) in problem.sessions.iter().enumerate() {
        let mut ps = build_particles(problem, cfg, classes);
        let (it, mu, mono, h, obj) = descend(problem, &mut ps, cfg);
        iterations = iterations.max(it);
        max_update = max_update.max(mu);
        monotone &= mono;
        halvings += h;
        objectives.push(obj);
        parts.push((s, ps));
    }
    finish(parts, iterations, max_update, monotone, halvings, objectives, cfg.tol)
}

/// Solves all sessions as one block; the result must match [`solve`].
pub fn solve_joint(problem: &OracleProblem, cfg: &SolverConfig) -> Result<OracleSolution, OracleError> {
    problem.validate()?;
    let all: Vec<usize> = problem.sessions.iter().flatten().copied().collect();
    let mut ps = build_particles(problem, cfg, &all);
    let (it, mu, mono, h, obj) = descend(problem, &mut ps, cfg);
    let session_of = |c: usize| problem.sessions.iter().position(|s| s.contains(&c)).unwrap_or(0);
    let features: Vec<LabeledFeature> =
        ps.into_iter().map(|p| LabeledFeature { session: session_of(p.class), class: p.class, feature: p.m }).collect();
    let converged = mu < cfg.tol;
    let solution = OracleSolution {
        features,
        report: ConvergenceReport {
            iterations: it,
            max_update: mu,
            converged,
            monotone: mono,
            step_halvings: h,
            final_objective: vec![obj],
        },
    };
    if converged {
        Ok(solution)
    } else {
        Err(OracleError::NotConverged(Box::new(solution)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminusCheck {
    pub residual_norm: f64,
    pub residual_align: f64,
    pub residual_cross: f64,
    pub pass: bool,
}

/// Residuals of the converged features against the neural-collapse terminus:
/// unit norm, unit alignment with the own prototype and `−1/(K−1)` with every
/// other prototype.
pub fn check_nc_terminus(features: &[LabeledFeature], terminus: &EtfTerminus, tol: f64) -> TerminusCheck {
    let target = terminus.offdiag_target();
    let (mut rn, mut ra, mut rc) = (0.0_f64, 0.0_f64, 0.0_f64);
    for f in features {
        rn = rn.max((linalg::norm(&f.feature) - 1.0).abs());
        for (k, w) in terminus.columns().iter().enumerate() {
            let ip = linalg::dot(&f.feature, w);
            if k == f.class {
                ra = ra.max((ip - 1.0).abs());
            } else {
                rc = rc.max((ip - target).abs());
            }
        }
    }
    TerminusCheck { residual_norm: rn, residual_align: ra, residual_cross: rc, pass: rn <= tol && ra <= tol && rc <= tol }
}
