//! Experiment configuration and the end-to-end runner behind `nct run`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::losses::ZERO_FEATURE_EPS;
use crate::metrics::{self, MetricsError, NcDiagnostics, RunReport, SessionMetrics};
use crate::seed;
use crate::stream::{self, LongTailOrder, SessionBatch, SessionPlan, Split, StreamError, SyntheticTaskSpec};
use crate::trainer::{Learner, Regime, SessionOutcome, TrainError, TrainerConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// Process exit code: 1 for bad input, 2 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Stream(_) | Self::Io(_) => 1,
            Self::Train(TrainError::Config(_)) => 1,
            Self::Train(_) | Self::Metrics(_) => 2,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Stream(_) => "plan",
            Self::Train(TrainError::Config(_)) => "config",
            Self::Train(TrainError::FrozenViolation { .. }) => "frozen-violation",
            Self::Train(_) => "train",
            Self::Metrics(_) => "metrics",
            Self::Io(_) => "io",
        }
    }
}

/// Synthetic data parameters; the generator seed comes from the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticTaskSpec::default();
        Self {
            input_dim: s.input_dim,
            classes: s.classes,
            radius: s.radius,
            sigma: s.sigma,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
        }
    }
}

impl DataConfig {
    pub fn task_spec(&self, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            input_dim: self.input_dim,
            classes: self.classes,
            radius: self.radius,
            sigma: self.sigma,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            seed,
        }
    }
}

/// Session layout. The plan family follows `trainer.regime`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub base: usize,
    pub steps: usize,
    pub ways: usize,
    pub shots: usize,
    pub rho: f64,
    pub order: LongTailOrder,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { base: 10, steps: 5, ways: 2, shots: 5, rho: 0.05, order: LongTailOrder::Ordered }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

fn yes() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            out_dir: None,
            data: DataConfig::default(),
            plan: PlanConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.trainer.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let d = &self.data;
        if d.input_dim == 0 || d.train_per_class == 0 || d.test_per_class == 0 {
            return Err(ExperimentError::Config("data dimensions and per-class counts must be positive".into()));
        }
        if !(d.sigma >= 0.0) || !(d.radius >= 0.0) {
            return Err(ExperimentError::Config("radius and sigma must be non-negative".into()));
        }
        if self.plan.base == 0 {
            return Err(ExperimentError::Config("the base session needs at least one class".into()));
        }
        Ok(())
    }

    /// Per-module seeds split from the root seed.
    pub fn stream_seed(&self) -> u64 {
        seed::derive(self.seed, "stream", &[])
    }

    pub fn sampler_seed(&self) -> u64 {
        seed::derive(self.seed, "sampler", &[])
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, "init", &[])
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        self.data.task_spec(self.stream_seed())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig { seed: self.init_seed(), ..self.trainer.clone() }
    }

    pub fn build_plan(&self) -> Result<SessionPlan, ExperimentError> {
        let p = &self.plan;
        let (avail, n_max) = (self.data.classes, self.data.train_per_class);
        let plan = match self.trainer.regime {
            Regime::Cil => stream::plan_cil(p.base, p.steps, p.ways, avail, n_max)?,
            Regime::Ltcil => stream::plan_ltcil(p.base, p.steps, p.ways, p.rho, n_max, p.order, avail, self.sampler_seed())?,
            Regime::Fscil => stream::plan_fscil(p.base, p.steps, p.ways, p.shots, avail, n_max)?,
            Regime::Gcil => {
                stream::plan_gcil(p.base, p.steps, p.ways, p.shots, p.rho, n_max, avail, self.sampler_seed())?
            }
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    #[serde(flatten)]
    pub report: RunReport,
    pub sessions: Vec<SessionOutcome>,
    /// Final-session test features (labeled dump text).
    #[serde(skip)]
    pub final_features: String,
    /// Terminus text, when the classifier is a terminus.
    #[serde(skip)]
    pub terminus: Option<String>,
}

impl ExperimentResult {
    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes `train_metrics.csv`, `test_metrics.csv`, `summary.json`,
    /// `test_features.txt` and, for terminus classifiers, `terminus.txt`.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_metrics.csv"), self.report.to_csv(Split::Train))?;
        std::fs::write(dir.join("test_metrics.csv"), self.report.to_csv(Split::Test))?;
        std::fs::write(dir.join("summary.json"), self.summary_json())?;
        std::fs::write(dir.join("test_features.txt"), &self.final_features)?;
        if let Some(t) = &self.terminus {
            std::fs::write(dir.join("terminus.txt"), t)?;
        }
        Ok(())
    }
}

/// Concatenates the sessions `0..=t`.
pub fn union_upto(batches: &[SessionBatch], t: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for b in &batches[..=t] {
        xs.extend(b.inputs.iter().cloned());
        ys.extend(b.labels.iter().copied());
    }
    (xs, ys)
}

/// Top-1 accuracy plus any predictions outside `seen`. A vanishing feature
/// counts as a miss.
pub fn evaluate(learner: &Learner, inputs: &[Vec<f64>], labels: &[usize], seen: &BTreeSet<usize>) -> (f64, usize, usize) {
    let mut correct = 0usize;
    let mut outside = 0usize;
    let mut vanished = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        match learner.model().predict(x) {
            Ok(p) => {
                if !seen.contains(&p) {
                    outside += 1;
                }
                if p == y {
                    correct += 1;
                }
            }
            Err(_) => vanished += 1,
        }
    }
    let acc = if inputs.is_empty() { 0.0 } else { correct as f64 / inputs.len() as f64 };
    (acc, outside, vanished)
}

/// Diagnostics over the session, accumulated and base scopes, computed on
/// ℓ2-normalized features against the model's prototypes.
pub fn diagnostics(learner: &Learner, inputs: &[Vec<f64>], labels: &[usize], each: &[usize], acc: &[usize], base: &[usize]) -> NcDiagnostics {
    let model = learner.model();
    let mut feats = Vec::with_capacity(inputs.len());
    let mut labs = Vec::with_capacity(inputs.len());
    for (x, &y) in inputs.iter().zip(labels) {
        if let Some(u) = model.feature(x).ok().and_then(|f| linalg::normalized(&f, ZERO_FEATURE_EPS)) {
            feats.push(u);
            labs.push(y);
        }
    }
    let protos = |c: usize| model.prototype(c);
    NcDiagnostics {
        each: metrics::nc_stats(&feats, &labs, protos, each),
        acc: metrics::nc_stats(&feats, &labs, protos, acc),
        base: metrics::nc_stats(&feats, &labs, protos, base),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    run_experiment_with(cfg, |_, _| {})
}

/// Runs every session of the configured plan; `observe` sees the learner
/// after each session closes.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut observe: F) -> Result<ExperimentResult, ExperimentError>
where
    F: FnMut(&Learner, &SessionOutcome),
{
    cfg.validate()?;
    let plan = cfg.build_plan()?;
    let spec = cfg.task_spec();
    let train = stream::materialize(&plan, &spec, Split::Train)?;
    let test = stream::materialize(&plan, &spec, Split::Test)?;
    let mut learner = Learner::new(cfg.trainer_config(), spec.input_dim, plan.num_classes())?;

    let base: Vec<usize> = plan.sessions[0].classes.clone();
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut per_session = Vec::with_capacity(plan.sessions.len());
    let mut outcomes = Vec::with_capacity(plan.sessions.len());
    let mut violations = Vec::new();
    let mut warnings = Vec::new();

    for (desc, batch) in plan.sessions.iter().zip(&train) {
        let t = desc.t;
        let mut outcome = learner.train_session(desc, batch)?;
        seen.extend(desc.classes.iter().copied());
        let acc_scope: Vec<usize> = seen.iter().copied().collect();

        let (xs, ys) = union_upto(&test, t);
        let (accuracy, outside, vanished) = evaluate(&learner, &xs, &ys, &seen);
        if outside > 0 {
            violations.push(format!("session {t}: {outside} predictions outside the seen label space"));
        }
        if vanished > 0 {
            warnings.push(format!("session {t}: {vanished} test samples had a vanishing feature"));
        }
        violations.extend(memory_violations(&learner, cfg.trainer.regime, t, &seen));
        warnings.extend(outcome.warnings.iter().cloned());
        outcome.accuracy = Some(accuracy);

        let (train_x, train_y) = union_upto(&train, t);
        per_session.push(SessionMetrics {
            t,
            accuracy,
            train: diagnostics(&learner, &train_x, &train_y, &desc.classes, &acc_scope, &base),
            test: diagnostics(&learner, &xs, &ys, &desc.classes, &acc_scope, &base),
        });
        observe(&learner, &outcome);
        outcomes.push(outcome);
    }
    let report = RunReport::from_sessions(per_session, violations, warnings)?;
    let last = plan.sessions.len() - 1;
    let (xs, ys) = union_upto(&test, last);
    let feats: Vec<Vec<f64>> = xs.iter().map(|x| learner.model().feature(x)).collect::<Result<_, _>>().map_err(TrainError::from)?;
    Ok(ExperimentResult {
        report,
        sessions: outcomes,
        final_features: metrics::write_feature_dump(&feats, &ys),
        terminus: learner.terminus().map(|t| t.to_text()),
    })
}

fn memory_violations(learner: &Learner, regime: Regime, t: usize, seen: &BTreeSet<usize>) -> Vec<String> {
    let mut out = Vec::new();
    let store = learner.exemplars();
    if matches!(regime, Regime::Cil | Regime::Ltcil | Regime::Gcil) {
        let stored: BTreeSet<usize> = store.classes().collect();
        if &stored != seen {
            out.push(format!("session {t}: exemplar classes {stored:?} differ from seen classes"));
        }
        for c in store.classes() {
            let n = store.exemplars(c).map_or(0, <[_]>::len);
            if n > store.budget() {
                out.push(format!("session {t}: class {c} holds {n} exemplars over budget {}", store.budget()));
            }
        }
    }
    if matches!(regime, Regime::Fscil | Regime::Gcil) && learner.feature_means().len() != seen.len() {
        out.push(format!(
            "session {t}: feature-mean memory holds {} classes, expected {}",
            learner.feature_means().len(),
            seen.len()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig { seed: 7, out_dir: Some("out".into()), ..Default::default() };
        cfg.trainer.regime = Regime::Gcil;
        cfg.trainer.hidden = vec![8, 8];
        cfg.plan.order = LongTailOrder::Shuffled;
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(ExperimentError::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[trainer]\nepoch = 3"), Err(ExperimentError::Config(_))));
        assert!(ExperimentConfig::from_toml("seed = 3\n[trainer]\nepochs = 3").is_ok());
    }

    #[test]
    fn seeds_split_per_module() {
        let cfg = ExperimentConfig { seed: 11, ..Default::default() };
        let seeds = [cfg.stream_seed(), cfg.sampler_seed(), cfg.init_seed()];
        assert_ne!(seeds[0], seeds[1]);
        assert_ne!(seeds[1], seeds[2]);
        assert_eq!(cfg.stream_seed(), ExperimentConfig { seed: 11, ..Default::default() }.stream_seed());
    }
}
