//! Session-by-session training.
//!
//! * CIL / LTCIL: one backbone trained against the fixed terminus. Novel
//!   classes fly from their NCM direction to their terminus column; every
//!   sample in an incremental batch (new data and exemplars) is also distilled
//!   toward the previous session's features.
//! * FSCIL: backbone `f` plus projection head `g`. Both train in the base
//!   session; afterwards `f` is frozen and `g` is finetuned on the few-shot
//!   data together with the stored per-class means of `f`'s output.
//! * GCIL: FSCIL architecture, branching per session on the smallest class
//!   count: many samples finetune `f` like CIL, few samples finetune `g` like
//!   FSCIL.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::etf::{EtfError, EtfTerminus, FrameKind};
use crate::flight::{compute_ncm, FlightError, FlightMode, PrototypeState};
use crate::linalg;
use crate::losses::{self, LossError, LossValueAndGrad};
use crate::memory::{ExemplarStore, FeatureMeanMemory, MemoryError};
use crate::net::{cosine_annealing, LinearClassifier, Mlp, NetError, SgdConfig, Snapshot};
use crate::seed;
use crate::stream::{SessionBatch, SessionDescriptor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Flight(#[from] FlightError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Etf(#[from] EtfError),
    #[error("session {0} needs a teacher snapshot from the previous session")]
    MissingTeacher(usize),
    #[error("frozen component changed during session {session}: {what}")]
    FrozenViolation { session: usize, what: &'static str },
    #[error("sessions must be trained in order: expected {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("no active classes to predict from")]
    NoActiveClasses,
    #[error("invalid trainer configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Cil,
    Ltcil,
    Fscil,
    Gcil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    /// Fixed prototypes from the terminus.
    Terminus,
    /// Jointly trained linear classifier (comparison arm; always CE).
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignLoss {
    #[serde(rename = "align")]
    Misalignment,
    #[serde(rename = "ce")]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub regime: Regime,
    pub base_epochs: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub incremental_lr: f64,
    /// Learning rate of the projection head in few-shot sessions.
    pub head_lr: f64,
    pub lr_min_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lambda_base: f64,
    /// Scale λ by `sqrt(|old classes| / |new classes|)`.
    pub adaptive_lambda: bool,
    pub exemplar_budget: usize,
    pub loss: AlignLoss,
    pub ce_scale: f64,
    pub classifier: ClassifierKind,
    pub flight: FlightMode,
    pub frame: FrameKind,
    /// Terminus size; 0 means "exactly the classes in the plan".
    pub terminus_classes: usize,
    pub fewshot_threshold: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Projection-head width; 0 means twice the feature dimension.
    pub head_width: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Cil,
            base_epochs: 30,
            epochs: 30,
            base_lr: 0.05,
            incremental_lr: 0.02,
            head_lr: 0.05,
            lr_min_ratio: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            lambda_base: 5.0,
            adaptive_lambda: true,
            exemplar_budget: 20,
            loss: AlignLoss::Misalignment,
            ce_scale: 16.0,
            classifier: ClassifierKind::Terminus,
            flight: FlightMode::Flying,
            frame: FrameKind::SimplexEtf,
            terminus_classes: 0,
            fewshot_threshold: 5,
            hidden: vec![64, 64],
            feature_dim: 32,
            head_width: 0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let rates = [self.base_lr, self.incremental_lr, self.head_lr, self.lr_min_ratio, self.momentum, self.weight_decay];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(TrainError::Config("rates must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.base_epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.lambda_base >= 0.0) {
            return Err(TrainError::Config("lambda_base must be non-negative".into()));
        }
        if self.exemplar_budget == 0 {
            return Err(TrainError::Config("exemplar_budget must be at least 1".into()));
        }
        if !(self.ce_scale > 0.0) {
            return Err(TrainError::Config("ce_scale must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(TrainError::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_head(&self) -> bool {
        matches!(self.regime, Regime::Fscil | Regime::Gcil)
    }

    /// `λ_base · sqrt(|Ĉ^{(t−1)}| / |C^{(t)}|)` or the constant `λ_base`.
    pub fn lambda_eff(&self, old_classes: usize, new_classes: usize) -> f64 {
        if !self.adaptive_lambda || new_classes == 0 {
            return self.lambda_base;
        }
        self.lambda_base * (old_classes as f64 / new_classes as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Terminus { terminus: EtfTerminus, settled: BTreeMap<usize, Vec<f64>> },
    Learnable(LinearClassifier),
}

/// Backbone, optional projection head and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Mlp,
    pub head: Option<Mlp>,
    pub classifier: Classifier,
    active: Vec<usize>,
}

impl Model {
    pub fn active_classes(&self) -> &[usize] {
        &self.active
    }

    pub fn feature(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        let h = self.backbone.forward_one(x)?;
        match &self.head {
            Some(g) => g.forward_one(&h),
            None => Ok(h),
        }
    }

    /// Prototype a class is scored against (terminus column, NCM direction in
    /// the NCM-only ablation, or the learned weight row).
    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        match &self.classifier {
            Classifier::Terminus { settled, .. } => settled.get(&class).map(Vec::as_slice),
            Classifier::Learnable(lc) => lc.classes().iter().position(|&c| c == class).map(|i| lc.weight_row(i)),
        }
    }

    pub fn predict_feature(&self, feature: &[f64]) -> Result<usize, TrainError> {
        match &self.classifier {
            Classifier::Terminus { settled, .. } => {
                predict_cosine(feature, self.active.iter().filter_map(|c| settled.get(c).map(|w| (*c, w.as_slice()))))
            }
            Classifier::Learnable(lc) => lc.predict(feature).ok_or(TrainError::NoActiveClasses),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, TrainError> {
        self.predict_feature(&self.feature(x)?)
    }
}

/// Arg-max cosine over `(class, prototype)` pairs; ties go to the lowest id.
pub fn predict_cosine<'a, I>(feature: &[f64], prototypes: I) -> Result<usize, TrainError>
where
    I: IntoIterator<Item = (usize, &'a [f64])>,
{
    let unit = linalg::normalized(feature, losses::ZERO_FEATURE_EPS)
        .ok_or(LossError::ZeroFeature(linalg::norm(feature)))?;
    let mut best: Option<(usize, f64)> = None;
    for (c, w) in prototypes {
        let s = linalg::dot(&unit, w);
        match best {
            Some((bc, bs)) if s < bs || (s == bs && c > bc) => {}
            _ => best = Some((c, s)),
        }
    }
    best.map(|(c, _)| c).ok_or(TrainError::NoActiveClasses)
}

/// Which part of the network a session trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Base session: everything trainable.
    Joint,
    /// Backbone finetuned (head frozen, if any).
    Backbone,
    /// Projection head finetuned, backbone frozen.
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub t: usize,
    pub branch: Branch,
    pub accuracy: Option<f64>,
    pub lambda_eff: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub fresh_samples_per_epoch: usize,
    pub memory_rows: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct Teacher {
    backbone: Snapshot,
    head: Option<Snapshot>,
}

impl Teacher {
    fn bitwise_eq(&self, other: &Teacher) -> bool {
        self.backbone.bitwise_eq(&other.backbone)
            && match (&self.head, &other.head) {
                (Some(a), Some(b)) => a.bitwise_eq(b),
                (None, None) => true,
                _ => false,
            }
    }

    fn feature(&self, x: &[f64]) -> Vec<f64> {
        let h = self.backbone.forward_one(x);
        match &self.head {
            Some(g) => g.forward_one(&h),
            None => h,
        }
    }
}

/// Training sample: a raw input through `f` (and `g`), or a stored feature
/// mean fed straight into `g`.
#[derive(Debug, Clone, Copy)]
enum Item<'a> {
    Input(&'a [f64], usize),
    Mean(&'a [f64], usize),
}

impl Item<'_> {
    fn label(&self) -> usize {
        match *self {
            Item::Input(_, y) | Item::Mean(_, y) => y,
        }
    }
}

struct Phase<'a> {
    t: usize,
    train_backbone: bool,
    train_head: bool,
    lr0: f64,
    epochs: usize,
    /// 0 means one full batch per epoch.
    batch_size: usize,
    prototypes: Option<&'a PrototypeState>,
    lambda: f64,
    teacher: Option<&'a Teacher>,
}

/// Incremental learner state carried across sessions.
#[derive(Debug, Clone)]
pub struct Learner {
    config: TrainerConfig,
    model: Model,
    exemplars: ExemplarStore,
    feature_means: FeatureMeanMemory,
    teacher: Option<Teacher>,
    next_session: usize,
}

impl Learner {
    /// `total_classes` is the size of the planned label space; the terminus is
    /// built with `config.terminus_classes` columns when that is larger.
    pub fn new(config: TrainerConfig, input_dim: usize, total_classes: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let d = config.feature_dim;
        let backbone = Mlp::backbone(input_dim, &config.hidden, d, seed::derive(config.seed, "backbone", &[]));
        let head = config.uses_head().then(|| {
            let width = if config.head_width == 0 { 2 * d } else { config.head_width };
            Mlp::projection_head(d, width, d, seed::derive(config.seed, "head", &[]))
        });
        let classifier = match config.classifier {
            ClassifierKind::Terminus => {
                let k = config.terminus_classes.max(total_classes);
                let terminus = EtfTerminus::build(d, k, config.frame, seed::derive(config.seed, "terminus", &[]))?;
                Classifier::Terminus { terminus, settled: BTreeMap::new() }
            }
            ClassifierKind::Learnable => {
                Classifier::Learnable(LinearClassifier::new(d, seed::derive(config.seed, "classifier", &[])))
            }
        };
        Ok(Self {
            exemplars: ExemplarStore::new(config.exemplar_budget),
            feature_means: FeatureMeanMemory::new(),
            teacher: None,
            next_session: 0,
            model: Model { backbone, head, classifier, active: Vec::new() },
            config,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn exemplars(&self) -> &ExemplarStore {
        &self.exemplars
    }

    pub fn feature_means(&self) -> &FeatureMeanMemory {
        &self.feature_means
    }

    pub fn terminus(&self) -> Option<&EtfTerminus> {
        match &self.model.classifier {
            Classifier::Terminus { terminus, .. } => Some(terminus),
            Classifier::Learnable(_) => None,
        }
    }

    /// Dispatches to the regime's session routine.
    pub fn train_session(&mut self, desc: &SessionDescriptor, data: &SessionBatch) -> Result<SessionOutcome, TrainError> {
        match self.config.regime {
            Regime::Cil | Regime::Ltcil => self.train_session_cil(desc, data),
            Regime::Fscil => self.train_session_fscil(desc, data),
            Regime::Gcil => self.train_session_gcil(desc, data),
        }
    }

    fn begin_session(&mut self, desc: &SessionDescriptor) -> Result<usize, TrainError> {
        if desc.t != self.next_session {
            return Err(TrainError::OutOfOrder { expected: self.next_session, got: desc.t });
        }
        let old = self.model.active.len();
        for &c in &desc.classes {
            if !self.model.active.contains(&c) {
                self.model.active.push(c);
            }
            if let Classifier::Learnable(lc) = &mut self.model.classifier {
                lc.add_class(c);
            }
        }
        self.model.active.sort_unstable();
        Ok(old)
    }

    fn finish_session(&mut self) {
        self.next_session += 1;
        self.teacher = Some(Teacher {
            backbone: self.model.backbone.snapshot(),
            head: self.model.head.as_ref().map(Mlp::snapshot),
        });
    }

    /// Prototype schedule for the session: old classes at their settled
    /// prototype, novel classes flying (or not) from their NCM direction.
    fn prototype_state(
        &self,
        desc: &SessionDescriptor,
        data: &SessionBatch,
        epochs: usize,
        mode: FlightMode,
    ) -> Result<Option<PrototypeState>, TrainError> {
        let Classifier::Terminus { terminus, settled } = &self.model.classifier else {
            return Ok(None);
        };
        // Epoch i of E trains at η = i/(E−1): first epoch on NCM, last on NCT.
        let mut state = PrototypeState::new(epochs.saturating_sub(1).max(1), mode);
        for (&c, w) in settled {
            state.add_old(c, w.clone());
        }
        for &c in &desc.classes {
            let nct = terminus.prototype(c)?.to_vec();
            let ncm = match mode {
                FlightMode::TerminusOnly => nct.clone(),
                _ => {
                    let feats: Vec<Vec<f64>> =
                        data.class_inputs(c).iter().map(|x| self.model.feature(x)).collect::<Result<_, _>>()?;
                    compute_ncm(&feats)?
                }
            };
            state.add_novel(c, ncm, nct);
        }
        Ok(Some(state))
    }

    fn settle(&mut self, desc: &SessionDescriptor, state: Option<&PrototypeState>) -> Result<(), TrainError> {
        if let (Classifier::Terminus { settled, .. }, Some(state)) = (&mut self.model.classifier, state) {
            for &c in &desc.classes {
                settled.insert(c, state.settled(c)?);
            }
        }
        Ok(())
    }

    fn store_exemplars(&mut self, desc: &SessionDescriptor, data: &SessionBatch) -> Result<(), TrainError> {
        for &c in &desc.classes {
            let inputs = data.class_inputs(c);
            let feats: Vec<Vec<f64>> = inputs.iter().map(|x| self.model.feature(x)).collect::<Result<_, _>>()?;
            self.exemplars.fill_class(c, desc.t, &inputs, &feats)?;
        }
        Ok(())
    }

    fn record_means(&mut self, data: &SessionBatch) -> Result<(), TrainError> {
        let was_frozen = self.model.backbone.is_frozen();
        self.model.backbone.set_frozen(true);
        let res = self.feature_means.record_feature_means(&self.model.backbone, &data.inputs, &data.labels);
        self.model.backbone.set_frozen(was_frozen);
        res?;
        Ok(())
    }

    fn base_phase<'a>(&self, t: usize, prototypes: Option<&'a PrototypeState>) -> Phase<'a> {
        Phase {
            t,
            train_backbone: true,
            train_head: true,
            lr0: self.config.base_lr,
            epochs: self.config.base_epochs,
            batch_size: self.config.batch_size,
            prototypes,
            lambda: 0.0,
            teacher: None,
        }
    }

    /// CIL and LTCIL share this routine; only the plan differs.
    pub fn train_session_cil(&mut self, desc: &SessionDescriptor, data: &SessionBatch) -> Result<SessionOutcome, TrainError> {
        let old = self.begin_session(desc)?;
        let t = desc.t;
        let memory = self.exemplars.clone();
        let mut items: Vec<Item> = data.inputs.iter().zip(&data.labels).map(|(x, &y)| Item::Input(x, y)).collect();
        let fresh = items.len();
        let (outcome_branch, lambda, curve, state, warnings) = if t == 0 {
            let state = self.prototype_state(desc, data, self.config.base_epochs, FlightMode::TerminusOnly)?;
            let phase = self.base_phase(t, state.as_ref());
            let (curve, warnings) = self.run_phase(&items, &phase)?;
            (Branch::Joint, 0.0, curve, state, warnings)
        } else {
            let teacher = self.teacher.clone().ok_or(TrainError::MissingTeacher(t))?;
            items.extend(memory.iter().map(|(x, y)| Item::Input(x, y)));
            let state = self.prototype_state(desc, data, self.config.epochs, self.config.flight)?;
            let lambda = self.config.lambda_eff(old, desc.classes.len());
            let phase = Phase {
                t,
                train_backbone: true,
                train_head: false,
                lr0: self.config.incremental_lr,
                epochs: self.config.epochs,
                batch_size: self.config.batch_size,
                prototypes: state.as_ref(),
                lambda,
                teacher: Some(&teacher),
            };
            let (curve, warnings) = self.run_phase(&items, &phase)?;
            if !self.teacher.as_ref().is_some_and(|t| t.bitwise_eq(&teacher)) {
                return Err(TrainError::FrozenViolation { session: t, what: "teacher snapshot" });
            }
            (Branch::Backbone, lambda, curve, state, warnings)
        };
        self.settle(desc, state.as_ref())?;
        self.store_exemplars(desc, data)?;
        let memory_rows = items.len() - fresh;
        self.finish_session();
        Ok(SessionOutcome {
            t,
            branch: outcome_branch,
            accuracy: None,
            lambda_eff: lambda,
            loss_curve: curve,
            fresh_samples_per_epoch: fresh,
            memory_rows,
            warnings,
        })
    }

    pub fn train_session_fscil(&mut self, desc: &SessionDescriptor, data: &SessionBatch) -> Result<SessionOutcome, TrainError> {
        if self.model.head.is_none() {
            return Err(TrainError::Config("few-shot training needs a projection head".into()));
        }
        self.begin_session(desc)?;
        let t = desc.t;
        let outcome = if t == 0 {
            self.model.backbone.set_frozen(false);
            let items: Vec<Item> = data.inputs.iter().zip(&data.labels).map(|(x, &y)| Item::Input(x, y)).collect();
            let state = self.prototype_state(desc, data, self.config.base_epochs, FlightMode::TerminusOnly)?;
            let phase = self.base_phase(t, state.as_ref());
            let (curve, warnings) = self.run_phase(&items, &phase)?;
            self.settle(desc, state.as_ref())?;
            SessionOutcome {
                t,
                branch: Branch::Joint,
                accuracy: None,
                lambda_eff: 0.0,
                loss_curve: curve,
                fresh_samples_per_epoch: items.len(),
                memory_rows: 0,
                warnings,
            }
        } else {
            self.projection_session(desc, data)?
        };
        self.model.backbone.set_frozen(true);
        self.record_means(data)?;
        self.finish_session();
        Ok(outcome)
    }

    /// Frozen backbone; head trained on fresh samples plus the feature-mean
    /// memory, full batch, prototypes fixed at the terminus.
    fn projection_session(&mut self, desc: &SessionDescriptor, data: &SessionBatch) -> Result<SessionOutcome, TrainError> {
        let t = desc.t;
        self.model.backbone.set_frozen(true);
        let before = self.model.backbone.snapshot();
        let means: Vec<(usize, Vec<f64>)> = self.feature_means.iter().map(|(c, h)| (c, h.to_vec())).collect();
        let mut items: Vec<Item> = data.inputs.iter().zip(&data.labels).map(|(x, &y)| Item::Input(x, y)).collect();
        let fresh = items.len();
        items.extend(means.iter().map(|(c, h)| Item::Mean(h, *c)));
        let state = self.prototype_state(desc, data, self.config.epochs, FlightMode::TerminusOnly)?;
        let phase = Phase {
            t,
            train_backbone: false,
            train_head: true,
            lr0: self.config.head_lr,
            epochs: self.config.epochs,
            batch_size: 0,
            prototypes: state.as_ref(),
            lambda: 0.0,
            teacher: None,
        };
        let (curve, warnings) = self.run_phase(&items, &phase)?;
        if !self.model.backbone.snapshot().bitwise_eq(&before) {
            return Err(TrainError::FrozenViolation { session: t, what: "backbone" });
        }
        self.settle(desc, state.as_ref())?;
        Ok(SessionOutcome {
            t,
            branch: Branch::Projection,
            accuracy: None,
            lambda_eff: 0.0,
            loss_curve: curve,
            fresh_samples_per_epoch: fresh,
            memory_rows: means.len(),
            warnings,
        })
    }

    pub fn train_session_gcil(&mut self, desc: &SessionDescriptor, data: &SessionBatch) -> Result<SessionOutcome, TrainError> {
        if self.model.head.is_none() {
            return Err(TrainError::Config("the generalized case uses the projection-head architecture".into()));
        }
        let old = self.begin_session(desc)?;
        let t = desc.t;
        let outcome = if t == 0 {
            self.model.backbone.set_frozen(false);
            self.model.head.as_mut().unwrap().set_frozen(false);
            let items: Vec<Item> = data.inputs.iter().zip(&data.labels).map(|(x, &y)| Item::Input(x, y)).collect();
            let state = self.prototype_state(desc, data, self.config.base_epochs, FlightMode::TerminusOnly)?;
            let phase = self.base_phase(t, state.as_ref());
            let (curve, warnings) = self.run_phase(&items, &phase)?;
            self.settle(desc, state.as_ref())?;
            SessionOutcome {
                t,
                branch: Branch::Joint,
                accuracy: None,
                lambda_eff: 0.0,
                loss_curve: curve,
                fresh_samples_per_epoch: items.len(),
                memory_rows: 0,
                warnings,
            }
        } else if desc.min_count() > self.config.fewshot_threshold {
            let teacher = self.teacher.clone().ok_or(TrainError::MissingTeacher(t))?;
            let memory = self.exemplars.clone();
            self.model.backbone.set_frozen(false);
            let head = self.model.head.as_mut().unwrap();
            head.set_frozen(true);
            let head_before = head.snapshot();
            let mut items: Vec<Item> = data.inputs.iter().zip(&data.labels).map(|(x, &y)| Item::Input(x, y)).collect();
            let fresh = items.len();
            items.extend(memory.iter().map(|(x, y)| Item::Input(x, y)));
            let state = self.prototype_state(desc, data, self.config.epochs, self.config.flight)?;
            let lambda = self.config.lambda_eff(old, desc.classes.len());
            let phase = Phase {
                t,
                train_backbone: true,
                train_head: false,
                lr0: self.config.incremental_lr,
                epochs: self.config.epochs,
                batch_size: self.config.batch_size,
                prototypes: state.as_ref(),
                lambda,
                teacher: Some(&teacher),
            };
            let (curve, warnings) = self.run_phase(&items, &phase)?;
            if !self.model.head.as_ref().unwrap().snapshot().bitwise_eq(&head_before) {
                return Err(TrainError::FrozenViolation { session: t, what: "projection head" });
            }
            self.settle(desc, state.as_ref())?;
            SessionOutcome {
                t,
                branch: Branch::Backbone,
                accuracy: None,
                lambda_eff: lambda,
                loss_curve: curve,
                fresh_samples_per_epoch: fresh,
                memory_rows: items.len() - fresh,
                warnings,
            }
        } else {
            self.model.head.as_mut().unwrap().set_frozen(false);
            self.projection_session(desc, data)?
        };
        self.store_exemplars(desc, data)?;
        self.record_means(data)?;
        self.finish_session();
        Ok(outcome)
    }

    /// Mini-batch SGD over `items` for `phase.epochs` epochs. Returns the mean
    /// loss per epoch and any warnings (skipped zero features).
    fn run_phase(&mut self, items: &[Item], phase: &Phase) -> Result<(Vec<f64>, Vec<String>), TrainError> {
        self.model.backbone.set_frozen(!phase.train_backbone);
        if let Some(g) = self.model.head.as_mut() {
            g.set_frozen(!phase.train_head);
        }
        let mut curve = Vec::with_capacity(phase.epochs);
        let mut skipped = 0usize;
        let mut order: Vec<usize> = (0..items.len()).collect();
        for epoch in 0..phase.epochs {
            let lr = cosine_annealing(phase.lr0, phase.lr0 * self.config.lr_min_ratio, epoch, phase.epochs);
            let opt = SgdConfig { lr, momentum: self.config.momentum, weight_decay: self.config.weight_decay };
            let protos: Option<BTreeMap<usize, Vec<f64>>> = match phase.prototypes {
                Some(state) => {
                    let e = if phase.epochs <= 1 { state.epochs() } else { epoch };
                    Some(
                        state
                            .classes()
                            .map(|rec| Ok((rec.class, state.effective_prototype(rec.class, e)?)))
                            .collect::<Result<_, FlightError>>()?,
                    )
                }
                None => None,
            };
            order.shuffle(&mut seed::rng(self.config.seed, "batch-order", &[phase.t as u64, epoch as u64]));
            let bs = if phase.batch_size == 0 { items.len().max(1) } else { phase.batch_size };
            let mut total = 0.0;
            for chunk in order.chunks(bs) {
                let batch: Vec<Item> = chunk.iter().map(|&i| items[i]).collect();
                let (loss, skip) = self.step_batch(&batch, protos.as_ref(), phase, &opt)?;
                total += loss;
                skipped += skip;
            }
            curve.push(total / items.len().max(1) as f64);
        }
        let mut warnings = Vec::new();
        if skipped > 0 {
            warnings.push(format!("session {}: skipped {skipped} sample-steps with a vanishing feature", phase.t));
        }
        if curve.iter().any(|l| !l.is_finite()) {
            warnings.push(format!("session {}: training loss became non-finite", phase.t));
        }
        Ok((curve, warnings))
    }

    /// One optimizer step on a batch. Returns the summed loss and the number
    /// of rows skipped because their feature vanished.
    fn step_batch(
        &mut self,
        batch: &[Item],
        protos: Option<&BTreeMap<usize, Vec<f64>>>,
        phase: &Phase,
        opt: &SgdConfig,
    ) -> Result<(f64, usize), TrainError> {
        // Inputs first, then stored means, so `f`'s rows lead the head's batch.
        let mut rows: Vec<Item> = batch.iter().copied().filter(|i| matches!(i, Item::Input(..))).collect();
        let n_inputs = rows.len();
        rows.extend(batch.iter().copied().filter(|i| matches!(i, Item::Mean(..))));
        let inputs: Vec<Vec<f64>> =
            rows[..n_inputs].iter().map(|i| if let Item::Input(x, _) = i { x.to_vec() } else { unreachable!() }).collect();
        let cache_f = if n_inputs > 0 { Some(self.model.backbone.forward(&inputs)?) } else { None };
        let mut h_all: Vec<Vec<f64>> = cache_f.as_ref().map(|c| c.outputs().to_vec()).unwrap_or_default();
        h_all.extend(rows[n_inputs..].iter().map(|i| if let Item::Mean(h, _) = i { h.to_vec() } else { unreachable!() }));
        let cache_g = match &self.model.head {
            Some(g) => Some(g.forward(&h_all)?),
            None => None,
        };
        let mu: &[Vec<f64>] = match &cache_g {
            Some(c) => c.outputs(),
            None => &h_all,
        };

        let scale = 1.0 / rows.len() as f64;
        let mut total = 0.0;
        let mut skipped = 0;
        let mut grad_mu = vec![vec![0.0; self.config.feature_dim]; rows.len()];
        let learnable = matches!(self.model.classifier, Classifier::Learnable(_));
        let n_cls = match &self.model.classifier {
            Classifier::Learnable(lc) => lc.classes().len(),
            _ => 0,
        };
        let mut cls_gw = vec![vec![0.0; self.config.feature_dim]; n_cls];
        let mut cls_gb = vec![0.0; n_cls];

        for (r, item) in rows.iter().enumerate() {
            let y = item.label();
            let feat = &mu[r];
            let class_term = match &self.model.classifier {
                Classifier::Terminus { .. } => {
                    let protos = protos.expect("terminus training has a prototype schedule");
                    match self.config.loss {
                        AlignLoss::Misalignment => {
                            let w = protos.get(&y).ok_or(LossError::UnknownClass(y))?;
                            losses::misalignment_loss(feat, w)
                        }
                        AlignLoss::CrossEntropy => losses::cross_entropy_fixed(
                            feat,
                            |c| protos.get(&c).map(Vec::as_slice),
                            &self.model.active,
                            y,
                            self.config.ce_scale,
                        ),
                    }
                }
                Classifier::Learnable(lc) => match lc.cross_entropy(feat, y) {
                    Some((value, grad, dz)) => {
                        for (k, d) in dz.iter().enumerate() {
                            linalg::axpy(d * scale, feat, &mut cls_gw[k]);
                            cls_gb[k] += d * scale;
                        }
                        Ok(LossValueAndGrad { value, grad })
                    }
                    None => Err(LossError::LabelInactive(y)),
                },
            };
            let class_term = match class_term {
                Ok(v) => v,
                Err(LossError::ZeroFeature(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let combined = match (phase.teacher, item) {
                (Some(teacher), Item::Input(x, _)) if phase.lambda > 0.0 => {
                    match losses::distillation_loss(feat, &teacher.feature(x)) {
                        Ok(d) => losses::combined_loss(&class_term, &d, phase.lambda),
                        Err(LossError::ZeroFeature(_)) => class_term,
                        Err(e) => return Err(e.into()),
                    }
                }
                _ => class_term,
            };
            total += combined.value;
            grad_mu[r] = linalg::scale(&combined.grad, scale);
        }

        let grad_h = match (self.model.head.as_mut(), cache_g) {
            (Some(g), Some(cache)) => g.backward_and_step(&cache, &grad_mu, opt)?,
            _ => grad_mu,
        };
        if let Some(cache) = cache_f {
            if phase.train_backbone {
                self.model.backbone.backward_and_step(&cache, &grad_h[..n_inputs], opt)?;
            }
        }
        if learnable {
            if let Classifier::Learnable(lc) = &mut self.model.classifier {
                lc.step(&cls_gw, &cls_gb, opt);
            }
        }
        Ok((total, skipped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_scaling() {
        let cfg = TrainerConfig::default();
        assert_eq!(cfg.lambda_eff(4, 4), 5.0);
        assert!((cfg.lambda_eff(10, 2) - 5.0 * 5f64.sqrt()).abs() < 1e-12);
        let fixed = TrainerConfig { adaptive_lambda: false, ..TrainerConfig::default() };
        assert_eq!(fixed.lambda_eff(10, 2), 5.0);
    }

    #[test]
    fn cosine_prediction_rules() {
        let t = EtfTerminus::build(6, 5, FrameKind::SimplexEtf, 2).unwrap();
        let protos = |ids: &[usize]| ids.iter().map(|&c| (c, t.columns()[c].as_slice())).collect::<Vec<_>>();
        let all: Vec<usize> = (0..5).collect();
        assert_eq!(predict_cosine(&t.columns()[3], protos(&all)).unwrap(), 3);
        assert_eq!(predict_cosine(&linalg::scale(&t.columns()[3], 10.0), protos(&all)).unwrap(), 3);
        let mid: Vec<f64> = t.columns()[1].iter().zip(&t.columns()[2]).map(|(a, b)| a + b).collect();
        assert_eq!(predict_cosine(&mid, protos(&[1, 2])).unwrap(), 1);
        assert!(matches!(predict_cosine(&[0.0; 6], protos(&all)), Err(TrainError::Loss(LossError::ZeroFeature(_)))));
        assert!(matches!(predict_cosine(&t.columns()[0], protos(&[])), Err(TrainError::NoActiveClasses)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        assert!(TrainerConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig { base_lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig { base_lr: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
