use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepstage::data::{Cohort, Demographics, Epoch, EpochGeometry, Gender, SleepStage, SubjectRecord};
use sleepstage::stratify::*;

fn cohort(demos: &[Demographics]) -> Cohort {
    let geometry = EpochGeometry { channels: 1, samples: 2 };
    let subjects = demos
        .iter()
        .enumerate()
        .map(|(i, d)| SubjectRecord {
            subject_id: format!("sub{:03}", i + 1),
            demographics: *d,
            recorded_epochs: 1,
            epochs: vec![Epoch { index: 0, stage: SleepStage::N2, signal: vec![0.0, 0.0] }],
        })
        .collect();
    Cohort::new(geometry, subjects).unwrap()
}

fn random_demos(rng: &mut ChaCha8Rng, n: usize) -> Vec<Demographics> {
    (0..n)
        .map(|_| Demographics {
            gender: if rng.gen_bool(0.5) { Gender::Male } else { Gender::Female },
            age: rng.gen_range(18..95),
            ahi: rng.gen_range(0.0..90.0),
        })
        .collect()
}

const AGES: [u32; 3] = [40, 58, 72];
const AHIS: [f64; 4] = [2.0, 10.0, 20.0, 40.0];

/// Counts per (age group, AHI severity) for each gender, chosen so that
/// every one- and two-way margin matches the reference cohort.
const MALE: [[usize; 4]; 3] = [[0, 0, 8, 5], [2, 5, 0, 6], [9, 8, 0, 2]];
const FEMALE: [[usize; 4]; 3] = [[8, 11, 1, 0], [7, 1, 5, 8], [0, 0, 10, 4]];

fn reference_cohort() -> Cohort {
    let mut demos = Vec::new();
    for (gender, table) in [(Gender::Male, MALE), (Gender::Female, FEMALE)] {
        for (a, row) in table.iter().enumerate() {
            for (s, &count) in row.iter().enumerate() {
                demos.extend((0..count).map(|_| Demographics { gender, age: AGES[a], ahi: AHIS[s] }));
            }
        }
    }
    cohort(&demos)
}

fn sizes(c: &Cohort, axis: StratificationAxis) -> Vec<usize> {
    let strata = stratify(c, axis);
    axis.keys().iter().map(|k| strata.get(k).map_or(0, |s| s.len())).collect()
}

#[test]
fn boundary_decision_table() {
    let cases = [
        (49, 4.9, AgeGroup::Under50, AhiSeverity::Normal),
        (50, 5.0, AgeGroup::From50To65, AhiSeverity::Mild),
        (65, 14.9, AgeGroup::From50To65, AhiSeverity::Mild),
        (66, 15.0, AgeGroup::Over65, AhiSeverity::Moderate),
        (56, 22.1, AgeGroup::From50To65, AhiSeverity::Moderate),
        (65, 29.9, AgeGroup::From50To65, AhiSeverity::Moderate),
        (65, 30.0, AgeGroup::From50To65, AhiSeverity::Severe),
        (0, 0.0, AgeGroup::Under50, AhiSeverity::Normal),
        (120, 150.0, AgeGroup::Over65, AhiSeverity::Severe),
    ];
    for (age, ahi, g, s) in cases {
        let d = Demographics { gender: Gender::Female, age, ahi };
        assert_eq!(classify_demographics(&d), (g, s), "age {age}, ahi {ahi}");
    }
}

#[test]
fn reference_cohort_margins() {
    let c = reference_cohort();
    assert_eq!(c.len(), 100);
    assert_eq!(sizes(&c, StratificationAxis::Gender), vec![45, 55]);
    assert_eq!(sizes(&c, StratificationAxis::Age), vec![33, 34, 33]);
    assert_eq!(sizes(&c, StratificationAxis::Ahi), vec![26, 25, 24, 25]);
    assert_eq!(sizes(&c, StratificationAxis::GenderXAhi), vec![11, 13, 8, 13, 15, 12, 16, 12]);
    assert_eq!(sizes(&c, StratificationAxis::GenderXAge), vec![13, 13, 19, 20, 21, 14]);
    assert_eq!(sizes(&c, StratificationAxis::AgeXAhi), vec![8, 11, 9, 5, 9, 6, 5, 14, 9, 8, 10, 6]);
}

#[test]
fn empty_subgroups_are_omitted() {
    let c = cohort(&[Demographics { gender: Gender::Male, age: 30, ahi: 1.0 }; 3]);
    let strata = stratify(&c, StratificationAxis::GenderXAhi);
    assert_eq!(strata.len(), 1);
}

#[test]
fn phase1_sizes_for_100_subjects() {
    let ids: Vec<String> = (1..=100).map(|i| format!("sub{i:03}")).collect();
    let plan = plan_phase1(&ids, 5, 0.1, 7).unwrap();
    for f in &plan.folds {
        assert_eq!((f.train.len(), f.validation.len(), f.test.len()), (72, 8, 20));
    }
    assert!(verify_no_leakage(&plan, &[]).is_empty());
}

#[test]
fn phase1_round_robin_remainder() {
    let ids: Vec<String> = (0..11).map(|i| format!("s{i}")).collect();
    let plan = plan_phase1(&ids, 5, 0.1, 3).unwrap();
    let mut sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
}

#[test]
fn phase1_errors() {
    let ids = ["a", "b", "c"];
    assert_eq!(plan_phase1(&ids, 5, 0.1, 0), Err(PlanError::TooFewSubjects { subjects: 3, k: 5 }));
    assert_eq!(plan_phase1(&ids, 1, 0.1, 0), Err(PlanError::BadFoldCount(1)));
    assert!(matches!(plan_phase1(&ids, 2, 1.0, 0), Err(PlanError::BadValidationFraction(_))));
}

#[test]
fn phase1_is_deterministic_and_order_free() {
    let ids: Vec<String> = (0..37).map(|i| format!("s{i:02}")).collect();
    let mut rev = ids.clone();
    rev.reverse();
    assert_eq!(plan_phase1(&ids, 5, 0.1, 9).unwrap(), plan_phase1(&rev, 5, 0.1, 9).unwrap());
    assert_ne!(plan_phase1(&ids, 5, 0.1, 9).unwrap(), plan_phase1(&ids, 5, 0.1, 10).unwrap());
}

fn key(axis: StratificationAxis, gender: Gender) -> SubgroupKey {
    SubgroupKey { axis, gender: Some(gender), age_group: None, ahi_severity: None }
}

#[test]
fn phase2_spread_subgroup_matches_checkpoints() {
    let c = reference_cohort();
    let p1 = plan_phase1(&c.ids(), 5, 0.1, 1).unwrap();
    let k = key(StratificationAxis::Gender, Gender::Female);
    let ids = stratify(&c, StratificationAxis::Gender)[&k].clone();
    let p2 = plan_phase2(k, &ids, &p1, 5, 0.1, 1).unwrap();
    assert_eq!(p2.folds.len(), 5);
    for f in &p2.folds {
        assert!(f.split.test.is_subset(&p1.folds[f.checkpoint_index].test));
        assert!(f.split.test.iter().all(|s| !f.split.train.contains(s)));
    }
    let cps: BTreeSet<usize> = p2.folds.iter().map(|f| f.checkpoint_index).collect();
    assert_eq!(cps.len(), 5);
    assert!(p2.untested.is_empty());
    assert!(verify_no_leakage(&p1, &[p2]).is_empty());
}

#[test]
fn phase2_single_fold_subgroup_shares_checkpoint() {
    let ids: Vec<String> = (0..50).map(|i| format!("s{i:02}")).collect();
    let p1 = plan_phase1(&ids, 5, 0.1, 4).unwrap();
    let inside = p1.folds[2].test.iter().take(6).cloned().collect();
    let k = key(StratificationAxis::Gender, Gender::Male);
    let p2 = plan_phase2(k, &inside, &p1, 3, 0.1, 4).unwrap();
    assert_eq!(p2.folds.len(), 3);
    assert!(p2.folds.iter().all(|f| f.checkpoint_index == 2));
    assert!(verify_no_leakage(&p1, &[p2]).is_empty());
}

#[test]
fn phase2_caps_fold_count_by_size() {
    let ids: Vec<String> = (0..50).map(|i| format!("s{i:02}")).collect();
    let p1 = plan_phase1(&ids, 5, 0.1, 4).unwrap();
    // 4, 3, 2, 1 and 1 subjects in Phase-1 folds 0..4.
    let mut sub = BTreeSet::new();
    for (fold, n) in [4, 3, 2, 1, 1].iter().enumerate() {
        sub.extend(p1.folds[fold].test.iter().take(*n).cloned());
    }
    let k = key(StratificationAxis::GenderXAhi, Gender::Male);
    let p2 = plan_phase2(k, &sub, &p1, 3, 0.1, 4).unwrap();
    let kept: Vec<(usize, usize)> = p2.folds.iter().map(|f| (f.checkpoint_index, f.split.test.len())).collect();
    assert_eq!(kept, vec![(0, 4), (1, 3), (2, 2)]);
    assert_eq!(p2.untested.len(), 2);
    assert!(verify_no_leakage(&p1, &[p2]).is_empty());
}

#[test]
fn phase2_rejects_tiny_subgroups() {
    let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
    let p1 = plan_phase1(&ids, 5, 0.1, 0).unwrap();
    let one: BTreeSet<String> = [ids[0].clone()].into();
    let err = plan_phase2(key(StratificationAxis::Gender, Gender::Female), &one, &p1, 5, 0.1, 0).unwrap_err();
    assert!(err.to_string().contains("insufficient subjects for leakage-safe fine-tuning"));
    let stranger: BTreeSet<String> = ["s0".to_string(), "zz".to_string()].into();
    assert!(matches!(
        plan_phase2(key(StratificationAxis::Gender, Gender::Female), &stranger, &p1, 5, 0.1, 0),
        Err(PlanError::UnplannedSubject { .. })
    ));
}

#[test]
fn injected_checkpoint_leak_is_named() {
    let c = reference_cohort();
    let p1 = plan_phase1(&c.ids(), 5, 0.1, 2).unwrap();
    let k = key(StratificationAxis::Gender, Gender::Male);
    let male = stratify(&c, StratificationAxis::Gender)[&k].clone();
    let mut p2 = plan_phase2(k, &male, &p1, 5, 0.1, 2).unwrap();
    let cp = p2.folds[0].checkpoint_index;
    let intruder = p1.folds[cp].train.iter().find(|s| !male.contains(*s)).unwrap().clone();
    p2.folds[0].split.test.insert(intruder.clone());
    let v = verify_no_leakage(&p1, &[p2]);
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(matches!(&v[0], Violation::Phase2TestSeenByCheckpoint { subject, .. } if *subject == intruder));
    assert!(v[0].to_string().contains(&intruder));
}

#[test]
fn injected_duplicate_test_is_flagged() {
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let p1 = Phase1Plan {
        seed: 0,
        validation_fraction: 0.0,
        folds: vec![
            FoldSplit { test: set(&["a", "b"]), train: set(&["c", "d"]), validation: set(&[]) },
            FoldSplit { test: set(&["c", "d"]), train: set(&["a", "b"]), validation: set(&[]) },
        ],
    };
    let fold = |test: &[&str], train: &[&str]| Phase2Fold {
        checkpoint_index: 0,
        split: FoldSplit { test: set(test), train: set(train), validation: set(&[]) },
    };
    let p2 = Phase2Plan {
        subgroup: key(StratificationAxis::Gender, Gender::Male),
        seed: 0,
        folds: vec![fold(&["a"], &["c"]), fold(&["a", "b"], &["d"])],
        untested: BTreeSet::new(),
    };
    let v = verify_no_leakage(&p1, &[p2]);
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(matches!(&v[0], Violation::Phase2DuplicateTest { subject, folds, .. } if subject == "a" && *folds == vec![0, 1]));
}

#[test]
fn injected_phase1_overlap_is_flagged() {
    let ids: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
    let mut p1 = plan_phase1(&ids, 4, 0.1, 5).unwrap();
    let moved = p1.folds[1].test.iter().next().unwrap().clone();
    p1.folds[1].train.insert(moved.clone());
    let v = verify_no_leakage(&p1, &[]);
    assert_eq!(v, vec![Violation::Phase1Overlap { fold: 1, subject: moved, roles: "train and test".into() }]);
}

#[test]
fn plans_round_trip_through_json() {
    let c = reference_cohort();
    let p1 = plan_phase1(&c.ids(), 5, 0.1, 8).unwrap();
    let k = key(StratificationAxis::Gender, Gender::Female);
    let p2 = plan_phase2(k, &stratify(&c, StratificationAxis::Gender)[&k], &p1, 5, 0.1, 8).unwrap();
    let t1 = serde_json::to_string_pretty(&p1).unwrap();
    let t2 = serde_json::to_string_pretty(&p2).unwrap();
    assert_eq!(serde_json::from_str::<Phase1Plan>(&t1).unwrap(), p1);
    assert_eq!(serde_json::from_str::<Phase2Plan>(&t2).unwrap(), p2);
    assert_eq!(serde_json::to_string_pretty(&serde_json::from_str::<Phase2Plan>(&t2).unwrap()).unwrap(), t2);
}

/// Random cohorts of 10 to 200 subjects, every axis, every subgroup with
/// at least two subjects.
#[test]
fn fuzzed_plans_are_leakage_free() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(10..=200);
        let c = cohort(&random_demos(&mut rng, n));
        let p1 = plan_phase1(&c.ids(), 5, 0.1, seed).unwrap();
        for id in c.ids() {
            assert_eq!(p1.folds.iter().filter(|f| f.test.contains(&id)).count(), 1);
        }
        let mut plans = Vec::new();
        for axis in StratificationAxis::ALL {
            let max = if axis.is_two_way() { 3 } else { 5 };
            for (k, ids) in stratify(&c, axis) {
                if ids.len() < 2 {
                    continue;
                }
                let p2 = plan_phase2(k, &ids, &p1, max, 0.1, seed).unwrap();
                for f in &p2.folds {
                    assert!(f.split.test.is_subset(&p1.folds[f.checkpoint_index].test));
                    assert!(!f.split.train.is_empty(), "seed {seed} {k}");
                }
                plans.push(p2);
            }
        }
        let v = verify_no_leakage(&p1, &plans);
        assert!(v.is_empty(), "seed {seed}: {v:?}");
    }
}

proptest! {
    #[test]
    fn stratify_is_a_disjoint_cover(seed in 0u64..1000, n in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cohort(&random_demos(&mut rng, n));
        let all: BTreeSet<String> = c.ids().into_iter().collect();
        for axis in StratificationAxis::ALL {
            let strata = stratify(&c, axis);
            let mut seen = BTreeSet::new();
            for (k, ids) in &strata {
                prop_assert!(!ids.is_empty());
                prop_assert!(axis.keys().contains(k));
                for id in ids {
                    prop_assert!(seen.insert(id.clone()), "{} in two subgroups", id);
                    prop_assert!(k.matches(&c.subject(id).unwrap().demographics));
                }
            }
            prop_assert_eq!(&seen, &all);
        }
    }

    #[test]
    fn classification_is_total(age in 0u32..150, ahi in 0.0f64..500.0) {
        let d = Demographics { gender: Gender::Male, age, ahi };
        let (g, s) = classify_demographics(&d);
        prop_assert_eq!(g, age_group(age));
        prop_assert_eq!(s, ahi_severity(ahi));
        prop_assert_eq!((g, s), classify_demographics(&d));
    }
}
