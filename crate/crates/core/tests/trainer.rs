use std::collections::BTreeSet;

use sleepstage::data::*;
use sleepstage::model::ModelConfig;
use sleepstage::stratify::*;
use sleepstage::train::*;

fn toy_cohort(n: usize, epochs: usize, seed: u64) -> Cohort {
    let spec = SyntheticSpec {
        n_subjects: n,
        epochs_per_subject: epochs,
        channels: 2,
        samples_per_epoch: 64,
        sample_rate_hz: 64.0,
        ..SyntheticSpec::default()
    };
    generate_synthetic_cohort(&spec, seed).unwrap()
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig { max_epochs, batch_size: 8, seed: 3, ..TrainConfig::pretrain() }
}

fn ids(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[test]
fn table_one_class_weights() {
    let w = class_weights_from_counts(&[20041, 8818, 39953, 2704, 8387]).unwrap();
    for (got, want) in w.iter().zip([0.797, 1.812, 0.400, 5.910, 1.905]) {
        assert!((got - want).abs() < 5e-4, "{w:?}");
    }
}

#[test]
fn class_weight_edge_cases() {
    assert_eq!(class_weights_from_counts(&[7; 5]).unwrap(), vec![1.0; 5]);
    let w = class_weights_from_counts(&[10, 0, 20, 40, 10]).unwrap();
    assert_eq!(w[1], 0.0);
    assert_eq!(w[0], 80.0 / (4.0 * 10.0));
    assert_eq!(w[3], 80.0 / (4.0 * 40.0));
    assert!(class_weights(std::iter::empty()).is_err());
    assert_eq!(class_weights([SleepStage::N3, SleepStage::N3]).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn pretrain_checkpoints_respect_their_folds() {
    let cohort = toy_cohort(10, 16, 1);
    let plan = plan_phase1(&cohort.ids(), 5, 0.1, 1).unwrap();
    let ckpts = pretrain(&cohort, &plan, &ModelConfig::toy(), &quick(2), 2).unwrap();
    assert_eq!(ckpts.iter().map(|c| c.phase1_fold_index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    for (c, f) in ckpts.iter().zip(&plan.folds) {
        assert_eq!(c.norm_stats.provenance, f.train);
        assert!(c.norm_stats.provenance.is_disjoint(&f.test));
        assert!(c.lineage.is_disjoint(&f.test));
        assert_eq!(c.log.epochs.len(), 2);
        let eval = evaluate(&c.to_model().unwrap(), &c.norm_stats, &c.lineage, &cohort, &f.test).unwrap();
        let scored: usize = f.test.iter().map(|id| cohort.subject(id).unwrap().epochs.len()).sum();
        assert_eq!(eval.report.confusion.total(), scored as u64);
        assert_eq!(eval.per_subject.len(), f.test.len());
    }
}

#[test]
fn leaky_plan_is_refused_before_training() {
    let cohort = toy_cohort(10, 8, 1);
    let mut plan = plan_phase1(&cohort.ids(), 5, 0.1, 1).unwrap();
    let s = plan.folds[0].test.iter().next().unwrap().clone();
    plan.folds[0].train.insert(s);
    assert!(matches!(pretrain(&cohort, &plan, &ModelConfig::toy(), &quick(1), 1), Err(TrainError::PlanViolations(_))));
}

#[test]
fn firewall_blocks_mismatch_and_training_subjects() {
    let cohort = toy_cohort(10, 16, 2);
    let plan = plan_phase1(&cohort.ids(), 5, 0.1, 2).unwrap();
    let ckpt = pretrain_fold(&cohort, &plan, 0, &ModelConfig::toy(), &quick(1)).unwrap();
    let model = ckpt.to_model().unwrap();

    let train_subject = plan.folds[0].train.iter().next().unwrap().clone();
    let err = evaluate(&model, &ckpt.norm_stats, &ckpt.lineage, &cohort, &[train_subject].into()).unwrap_err();
    assert!(matches!(err, TrainError::Leakage(_)), "{err}");

    let fold = Phase2Fold { checkpoint_index: 1, split: plan.folds[1].clone() };
    let key = SubgroupKey { axis: StratificationAxis::Gender, gender: Some(Gender::Male), age_group: None, ahi_severity: None };
    match finetune(&ckpt, key, 0, &fold, &cohort, &quick(1)) {
        Err(TrainError::CheckpointMismatch { expected: 1, found: 0 }) => {}
        Err(e) => panic!("wrong error {e}"),
        Ok(_) => panic!("mismatched checkpoint was accepted"),
    }
}

fn subgroup_fold(cohort: &Cohort, plan: &Phase1Plan) -> (SubgroupKey, Phase2Fold) {
    let key = SubgroupKey { axis: StratificationAxis::Age, gender: None, age_group: None, ahi_severity: None };
    let all: BTreeSet<String> = cohort.ids().into_iter().collect();
    let p2 = plan_phase2(key, &all, plan, 5, 0.1, 0).unwrap();
    let fold = p2.folds.into_iter().find(|f| f.checkpoint_index == 0).unwrap();
    (key, fold)
}

#[test]
fn zero_epoch_finetune_with_inherited_norm_matches_baseline() {
    let cohort = toy_cohort(10, 16, 4);
    let plan = plan_phase1(&cohort.ids(), 5, 0.1, 4).unwrap();
    let ckpt = pretrain_fold(&cohort, &plan, 0, &ModelConfig::toy(), &quick(2)).unwrap();
    let (key, fold) = subgroup_fold(&cohort, &plan);
    let cfg = TrainConfig { max_epochs: 0, inherit_norm_stats: true, ..TrainConfig::finetune() };
    let out = finetune(&ckpt, key, 0, &fold, &cohort, &cfg).unwrap();
    let (a, b) = (&out.result.evaluation.report, &out.result.baseline_evaluation.as_ref().unwrap().report);
    assert_eq!(a.confusion, b.confusion);
    assert!((a.kappa - b.kappa).abs() < 1e-6);

    let cfg = TrainConfig { max_epochs: 0, ..TrainConfig::finetune() };
    let out = finetune(&ckpt, key, 0, &fold, &cohort, &cfg).unwrap();
    assert_eq!(out.norm_stats.provenance, fold.split.train);
    assert!(out.result.lineage.is_disjoint(&fold.split.test));
}

#[test]
fn finetune_does_not_raise_training_loss() {
    let cohort = toy_cohort(10, 16, 5);
    let plan = plan_phase1(&cohort.ids(), 5, 0.1, 5).unwrap();
    let ckpt = pretrain_fold(&cohort, &plan, 0, &ModelConfig::toy(), &quick(3)).unwrap();
    let (key, fold) = subgroup_fold(&cohort, &plan);
    let cfg = TrainConfig { max_epochs: 5, batch_size: 8, early_stopping: false, ..TrainConfig::finetune() };
    let out = finetune(&ckpt, key, 0, &fold, &cohort, &cfg).unwrap();
    let log = &out.result.log;
    assert!(log.final_train_loss.unwrap() <= log.initial_train_loss.unwrap() + 1e-9, "{log:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cohort = toy_cohort(10, 16, 6);
    let plan = plan_phase1(&cohort.ids(), 5, 0.1, 6).unwrap();
    let ckpt = pretrain_fold(&cohort, &plan, 2, &ModelConfig::toy(), &quick(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fold2.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes(), ckpt.to_bytes());

    let test = &plan.folds[2].test;
    let a = evaluate(&ckpt.to_model().unwrap(), &ckpt.norm_stats, &ckpt.lineage, &cohort, test).unwrap();
    let b = evaluate(&loaded.to_model().unwrap(), &loaded.norm_stats, &loaded.lineage, &cohort, test).unwrap();
    assert_eq!(a, b);
    let (m1, m2) = (ckpt.to_model().unwrap(), loaded.to_model().unwrap());
    assert_eq!(m1.store.snapshot(), m2.store.snapshot());

    let bytes = ckpt.to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated { .. }) | Err(CheckpointError::Corrupt(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
}

#[test]
fn training_is_seed_deterministic() {
    let cohort = toy_cohort(10, 16, 7);
    let plan = plan_phase1(&cohort.ids(), 5, 0.1, 7).unwrap();
    let a = pretrain(&cohort, &plan, &ModelConfig::toy(), &quick(2), 1).unwrap();
    let b = pretrain(&cohort, &plan, &ModelConfig::toy(), &quick(2), 3).unwrap();
    assert_eq!(a, b);
    let c = pretrain_fold(&cohort, &plan, 0, &ModelConfig::toy(), &TrainConfig { seed: 4, ..quick(2) }).unwrap();
    assert_ne!(c.params, a[0].params);
}

#[test]
fn evaluation_is_repeatable() {
    let cohort = toy_cohort(6, 10, 8);
    let plan = plan_phase1(&cohort.ids(), 3, 0.0, 8).unwrap();
    let ckpt = pretrain_fold(&cohort, &plan, 1, &ModelConfig::toy(), &quick(1)).unwrap();
    let model = ckpt.to_model().unwrap();
    let test = &plan.folds[1].test;
    let first = evaluate(&model, &ckpt.norm_stats, &ckpt.lineage, &cohort, test).unwrap();
    assert_eq!(first, evaluate(&model, &ckpt.norm_stats, &ckpt.lineage, &cohort, test).unwrap());
    assert!(evaluate(&model, &ckpt.norm_stats, &ckpt.lineage, &cohort, &ids(&[])).is_err());
}

/// Four subjects, 200 epochs at a fixed learning rate and without dropout:
/// the toy model must fit its own training data.
#[test]
fn toy_model_overfits_four_subjects() {
    let cohort = toy_cohort(4, 24, 9);
    let train_ids = cohort.ids();
    let norm = compute_norm_stats(&cohort, &train_ids).unwrap();
    let train: Vec<SubjectRecord> = cohort.subjects().iter().map(|r| apply_normalization(r, &norm)).collect();
    let weights = class_weights(train.iter().flat_map(|r| r.labels())).unwrap();
    let mc = ModelConfig { dropout_p: 0.0, ..ModelConfig::toy() };
    let mut model = sleepstage::model::SleepStager::build(&mc, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 200,
        batch_size: 8,
        early_stopping: false,
        plateau_patience: usize::MAX,
        ..TrainConfig::pretrain()
    };
    fit(&mut model, &train, &[], &weights, &cfg).unwrap();
    let preds = predict_records(&model, &train, 64).unwrap();
    let (mut hit, mut total) = (0, 0);
    for (r, p) in train.iter().zip(preds) {
        for (e, q) in r.epochs.iter().zip(p) {
            hit += (e.stage.index() == q) as usize;
            total += 1;
        }
    }
    let acc = hit as f64 / total as f64;
    assert!(acc >= 0.99, "training accuracy {acc}");
}
