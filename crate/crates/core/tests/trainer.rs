use nct_core::experiment::{run_experiment_with, union_upto, ExperimentConfig};
use nct_core::flight::FlightMode;
use nct_core::stream::{self, SessionDescriptor, SessionMode, Split, SyntheticTaskSpec};
use nct_core::trainer::{Branch, Learner, Regime, TrainError, TrainerConfig};

fn spec(classes: usize, per_class: usize) -> SyntheticTaskSpec {
    SyntheticTaskSpec { classes, train_per_class: per_class, test_per_class: 20, seed: 3, ..SyntheticTaskSpec::default() }
}

fn small_config(regime: Regime) -> TrainerConfig {
    TrainerConfig { regime, hidden: vec![32, 32], feature_dim: 16, seed: 9, ..TrainerConfig::default() }
}

#[test]
fn base_session_alignment_converges() {
    let plan = stream::plan_cil(4, 0, 1, 4, 40).unwrap();
    let data = stream::materialize(&plan, &spec(4, 40), Split::Train).unwrap();
    let cfg = TrainerConfig { base_epochs: 200, flight: FlightMode::TerminusOnly, ..small_config(Regime::Cil) };
    let mut learner = Learner::new(cfg, 16, 4).unwrap();
    let out = learner.train_session(&plan.sessions[0], &data[0]).unwrap();
    let last = *out.loss_curve.last().unwrap();
    assert!(last < 1e-2, "final alignment loss {last}");
    assert_eq!(out.branch, Branch::Joint);
}

#[test]
fn distillation_protects_base_classes() {
    let base_accuracy = |lambda: f64| {
        let mut cfg = ExperimentConfig { seed: 4, ..ExperimentConfig::default() };
        cfg.plan.steps = 1;
        cfg.trainer.lambda_base = lambda;
        cfg.trainer.exemplar_budget = 2;
        cfg.trainer.incremental_lr = 0.1;
        let plan = cfg.build_plan().unwrap();
        let test = stream::materialize(&plan, &cfg.task_spec(), Split::Test).unwrap();
        let mut acc = 0.0;
        run_experiment_with(&cfg, |l, o| {
            if o.t == 1 {
                let (xs, ys) = union_upto(&test, 0);
                let hits = xs.iter().zip(&ys).filter(|(x, &y)| l.model().predict(x).unwrap() == y).count();
                acc = hits as f64 / xs.len() as f64;
            }
        })
        .unwrap();
        acc
    };
    let without = base_accuracy(0.0);
    let with = base_accuracy(5.0);
    assert!(with > without, "base accuracy with distillation {with} vs without {without}");
}

#[test]
fn fewshot_sessions_use_fresh_samples_plus_memory() {
    let plan = stream::plan_fscil(6, 2, 5, 5, 16, 30).unwrap();
    let data = stream::materialize(&plan, &spec(16, 30), Split::Train).unwrap();
    let cfg = TrainerConfig { base_epochs: 10, epochs: 20, ..small_config(Regime::Fscil) };
    let mut learner = Learner::new(cfg, 16, plan.num_classes()).unwrap();
    learner.train_session(&plan.sessions[0], &data[0]).unwrap();
    let probe = vec![0.25; 16];
    let before = learner.model().backbone.forward_one(&probe).unwrap();
    for t in 1..=2 {
        let out = learner.train_session(&plan.sessions[t], &data[t]).unwrap();
        assert_eq!(out.branch, Branch::Projection);
        assert_eq!(out.fresh_samples_per_epoch, 25);
        assert_eq!(out.memory_rows, 6 + 5 * (t - 1));
        assert_eq!(learner.feature_means().len(), 6 + 5 * t);
        let after = learner.model().backbone.forward_one(&probe).unwrap();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn memory_replay_alone_barely_moves_the_head() {
    let plan = stream::plan_fscil(6, 1, 2, 5, 8, 30).unwrap();
    let data = stream::materialize(&plan, &spec(8, 30), Split::Train).unwrap();
    let cfg = TrainerConfig { base_epochs: 60, epochs: 50, ..small_config(Regime::Fscil) };
    let mut learner = Learner::new(cfg, 16, plan.num_classes()).unwrap();
    learner.train_session(&plan.sessions[0], &data[0]).unwrap();
    let head_before = learner.model().head.clone().unwrap();

    // Same number of iterations on the memory only versus memory plus fresh data.
    let empty = SessionDescriptor { t: 1, classes: vec![], mode: SessionMode::Fewshot, counts: vec![] };
    let mut replay = learner.clone();
    replay.train_session(&empty, &stream::SessionBatch { t: 1, inputs: vec![], labels: vec![] }).unwrap();
    let mut fresh = learner.clone();
    fresh.train_session(&plan.sessions[1], &data[1]).unwrap();

    let delta = |l: &Learner| {
        let h = l.model().head.as_ref().unwrap();
        (0..h.num_params()).map(|i| (h.param(i) - head_before.param(i)).abs()).fold(0.0, f64::max)
    };
    assert!(delta(&replay) < delta(&fresh), "replay drift {} vs fresh {}", delta(&replay), delta(&fresh));
}

#[test]
fn generalized_sessions_branch_on_sample_count() {
    let mut plan = stream::plan_cil(4, 2, 2, 8, 30).unwrap();
    plan.sessions[1].mode = SessionMode::Normal;
    plan.sessions[2].mode = SessionMode::Fewshot;
    plan.sessions[2].counts = vec![5, 5];
    let data = stream::materialize(&plan, &spec(8, 30), Split::Train).unwrap();
    let cfg = TrainerConfig { base_epochs: 5, epochs: 5, ..small_config(Regime::Gcil) };
    let mut learner = Learner::new(cfg, 16, 8).unwrap();
    let branches: Vec<Branch> =
        (0..3).map(|t| learner.train_session(&plan.sessions[t], &data[t]).unwrap().branch).collect();
    assert_eq!(branches, [Branch::Joint, Branch::Backbone, Branch::Projection]);
    assert_eq!(learner.feature_means().len(), 8);
    assert_eq!(learner.exemplars().classes().count(), 8);
}

#[test]
fn sessions_must_arrive_in_order() {
    let plan = stream::plan_cil(4, 1, 2, 6, 10).unwrap();
    let data = stream::materialize(&plan, &spec(6, 10), Split::Train).unwrap();
    let mut learner = Learner::new(small_config(Regime::Cil), 16, 6).unwrap();
    let err = learner.train_session(&plan.sessions[1], &data[1]).unwrap_err();
    assert!(matches!(err, TrainError::OutOfOrder { expected: 0, got: 1 }));
}

#[test]
fn ltcil_shares_the_cil_path() {
    let mut cfg = ExperimentConfig { seed: 2, ..ExperimentConfig::default() };
    cfg.plan.steps = 2;
    cfg.trainer.base_epochs = 5;
    cfg.trainer.epochs = 5;
    cfg.trainer.regime = Regime::Ltcil;
    let lt = nct_core::run_experiment(&cfg).unwrap();
    assert!(lt.sessions.iter().skip(1).all(|s| s.branch == Branch::Backbone && s.lambda_eff > 0.0));
    assert!(lt.report.violations.is_empty());
}

#[test]
fn predictions_stay_inside_seen_classes() {
    let mut cfg = ExperimentConfig { seed: 8, ..ExperimentConfig::default() };
    cfg.plan.steps = 2;
    cfg.trainer.base_epochs = 3;
    cfg.trainer.epochs = 3;
    cfg.trainer.terminus_classes = 40;
    cfg.trainer.feature_dim = 40;
    let plan = cfg.build_plan().unwrap();
    let test = stream::materialize(&plan, &cfg.task_spec(), Split::Test).unwrap();
    run_experiment_with(&cfg, |l, o| {
        let seen = plan.seen_classes(o.t);
        let (xs, _) = union_upto(&test, plan.sessions.len() - 1);
        assert!(xs.iter().all(|x| seen.contains(&l.model().predict(x).unwrap())));
    })
    .unwrap();
}
