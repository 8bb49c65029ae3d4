use std::fs;

use mixres_core::augment::{derive_seed, Rng};
use mixres_core::data::{synthetic_dataset_with_noise, SplitName};
use mixres_core::model::ResNetConfig;
use mixres_core::sweep::{
    bracket_budget, correlation_report, hyperband, hyperband_brackets, pearson, s_max, sweep_report, Objective,
    ParamSpec, ParamValue, Rung, Scale, SearchSpace, TrainObjective, TrialStatus,
};
use mixres_core::trainer::TrainConfig;
use mixres_core::{Error, Result};
use proptest::prelude::*;

/// Metric per (trial, epoch) drawn from a hash; some trials fail on purpose.
struct Noise {
    seed: u64,
}

struct Progress {
    trial: usize,
    done: usize,
}

impl Objective for Noise {
    type State = Progress;

    fn init(&self, trial: usize, _config: &TrainConfig) -> Result<Progress> {
        if derive_seed(self.seed, &[trial as u64, 99]).is_multiple_of(9) {
            return Err(Error::Validation("refused".into()));
        }
        Ok(Progress { trial, done: 0 })
    }

    fn advance(&self, p: &mut Progress, epochs: usize) -> Result<Vec<f64>> {
        assert!(epochs > p.done, "resource must grow");
        if epochs > 1 && derive_seed(self.seed, &[p.trial as u64, 98]).is_multiple_of(13) {
            return Err(Error::Validation("diverged".into()));
        }
        let curve = (p.done + 1..=epochs)
            .map(|e| Rng::derive(self.seed, &[p.trial as u64, e as u64]).uniform())
            .collect();
        p.done = epochs;
        Ok(curve)
    }
}

/// Metric is the sampled learning rate, at every epoch.
struct ByLr;

impl Objective for ByLr {
    type State = f64;

    fn init(&self, _trial: usize, config: &TrainConfig) -> Result<f64> {
        Ok(config.lr)
    }

    fn advance(&self, lr: &mut f64, _epochs: usize) -> Result<Vec<f64>> {
        Ok(vec![*lr])
    }
}

fn lr_space(lo: f64, hi: f64) -> SearchSpace {
    SearchSpace {
        params: vec![(
            "lr".into(),
            ParamSpec::Continuous {
                scale: Scale::Log,
                lo,
                hi,
            },
        )],
    }
}

#[test]
fn reference_table_for_81_and_3() {
    let brackets = hyperband_brackets(81, 3).unwrap();
    let table: Vec<(usize, Vec<(usize, usize)>)> = brackets
        .iter()
        .map(|b| (b.s, b.rungs.iter().map(|r| (r.n_configs, r.resource)).collect()))
        .collect();
    let want = vec![
        (4, vec![(81, 1), (27, 3), (9, 9), (3, 27), (1, 81)]),
        (3, vec![(34, 3), (11, 9), (3, 27), (1, 81)]),
        (2, vec![(15, 9), (5, 27), (1, 81)]),
        (1, vec![(8, 27), (2, 81)]),
        (0, vec![(5, 81)]),
    ];
    assert_eq!(table, want);
    assert_eq!(bracket_budget(&brackets), 1902);
    assert!(bracket_budget(&brackets) <= 5 * 5 * 81);
}

#[test]
fn single_unit_of_resource() {
    let b = hyperband_brackets(1, 3).unwrap();
    assert_eq!(b.len(), 1);
    assert_eq!(
        b[0].rungs,
        vec![Rung {
            n_configs: 1,
            resource: 1
        }]
    );
    let result = hyperband(
        &lr_space(1e-3, 1e-1),
        &TrainConfig::default(),
        1,
        3,
        0,
        &ByLr,
        1,
        |_, _, _| {},
    )
    .unwrap();
    assert_eq!(result.trials.len(), 1);
    assert_eq!(result.trials[0].status, TrialStatus::Complete);
    assert_eq!(result.best, Some(0));
    assert!(hyperband_brackets(0, 3).is_err());
    assert!(hyperband_brackets(9, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bracket_shapes_are_consistent(r in 1usize..400, eta in 2usize..6) {
        let brackets = hyperband_brackets(r, eta).unwrap();
        let top = s_max(r, eta);
        prop_assert!(eta.pow(top as u32) <= r && eta.pow(top as u32 + 1) > r);
        prop_assert_eq!(brackets.len(), top + 1);
        for b in &brackets {
            prop_assert_eq!(b.rungs.len(), b.s + 1);
            prop_assert_eq!(b.rungs.last().unwrap().resource, r);
            prop_assert!(b.rungs.windows(2).all(|w| w[1].n_configs <= w[0].n_configs && w[1].resource >= w[0].resource));
            prop_assert!(b.rungs.iter().all(|g| g.n_configs >= 1 && g.resource >= 1));
            let spent: usize = b.rungs.iter().map(|g| g.n_configs * g.resource).sum();
            let bound = (top + 1) * r + (b.s + 1) * r / eta.pow(b.s as u32);
            prop_assert!(spent <= bound, "s={} spent {} bound {}", b.s, spent, bound);
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        xs in prop::collection::vec(-10.0f64..10.0, 3..30),
        a in 0.1f64..5.0, b in -5.0f64..5.0, flip in any::<bool>(),
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + (i as f64).sin()).collect();
        if let Some(r) = pearson(&xs, &ys) {
            let s = if flip { -a } else { a };
            let moved: Vec<f64> = xs.iter().map(|x| s * x + b).collect();
            let r2 = pearson(&moved, &ys).unwrap();
            prop_assert!((r2 - r.signum() * s.signum() * r.abs()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}

#[test]
fn pearson_reference_values() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    // deviations (-1.5, -0.5, 0.5, 1.5) and (-1.5, 0.5, -0.5, 1.5): 4 / 5
    let y = [1.0, 3.0, 2.0, 4.0];
    assert!((pearson(&x, &y).unwrap() - 0.8).abs() < 1e-12);
    assert!(pearson(&x, &[5.0; 4]).is_none());
}

#[test]
fn promotion_is_sound_on_random_objectives() {
    for case in 0..100u64 {
        let objective = Noise { seed: case };
        let jobs = 1 + (case % 3) as usize;
        let mut checked = 0;
        let result = hyperband(
            &lr_space(1e-3, 1.0),
            &TrainConfig::default(),
            9,
            3,
            case,
            &objective,
            jobs,
            |b, k, ts| {
                let resource = b.rungs[k].resource;
                if k + 1 == b.rungs.len() {
                    assert!(ts.iter().all(|t| t.status != TrialStatus::Running));
                    return;
                }
                let promoted: Vec<_> = ts.iter().filter(|t| t.status == TrialStatus::Running).collect();
                let stopped: Vec<_> = ts
                    .iter()
                    .filter(|t| t.status == TrialStatus::Stopped && t.resource == resource)
                    .collect();
                let survivors = ts
                    .iter()
                    .filter(|t| t.resource == resource && t.status != TrialStatus::Failed)
                    .count();
                assert_eq!(promoted.len(), b.rungs[k + 1].n_configs.min(survivors), "case {case}");
                for p in &promoted {
                    assert!(p.metric.is_some());
                    for s in &stopped {
                        let ahead = p.score() > s.score() || (p.score() == s.score() && p.trial_id < s.trial_id);
                        assert!(ahead, "case {case}: trial {} promoted over {}", p.trial_id, s.trial_id);
                    }
                }
                checked += 1;
            },
        )
        .unwrap();
        assert!(checked > 0);
        assert_eq!(result.trials.len(), 9 + 5 + 3);
        for t in &result.trials {
            match t.status {
                TrialStatus::Failed => assert!(t.error.is_some() && t.metric.is_none()),
                TrialStatus::Running => panic!("case {case}: trial {} left running", t.trial_id),
                _ => {
                    assert_eq!(t.curve.len(), t.resource);
                    assert_eq!(t.metric, t.curve.iter().copied().reduce(f64::max));
                }
            }
        }
        let best = result.best_trial().unwrap();
        assert!(result.trials.iter().all(|t| t.score() <= best.score()));
    }
}

#[test]
fn dominant_config_wins_every_rung() {
    let space = SearchSpace {
        params: vec![(
            "lr".into(),
            ParamSpec::Categorical {
                values: vec![ParamValue::Number(0.01), ParamValue::Number(0.2)],
            },
        )],
    };
    let result = hyperband(&space, &TrainConfig::default(), 27, 3, 4, &ByLr, 1, |_, _, ts| {
        let stopped_good = ts
            .iter()
            .any(|t| t.status == TrialStatus::Stopped && t.config.lr == 0.2);
        let kept_bad = ts
            .iter()
            .any(|t| t.status == TrialStatus::Running && t.config.lr == 0.01);
        assert!(!(stopped_good && kept_bad));
    })
    .unwrap();
    assert_eq!(result.best_trial().unwrap().config.lr, 0.2);
}

#[test]
fn log_uniform_sampling_is_uniform_in_log_space() {
    let spec = ParamSpec::Continuous {
        scale: Scale::Log,
        lo: 1e-4,
        hi: 1.0,
    };
    let mut rng = Rng::seed(21);
    let mut u: Vec<f64> = (0..10_000)
        .map(|_| match spec.sample(&mut rng) {
            ParamValue::Number(v) => {
                assert!((1e-4..=1.0).contains(&v));
                (v.ln() - 1e-4f64.ln()) / -(1e-4f64.ln())
            }
            other => panic!("{other}"),
        })
        .collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let ks = u
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "{ks}");
}

#[test]
fn same_seed_same_trials() {
    let run = |seed| {
        hyperband(
            &SearchSpace::default(),
            &TrainConfig::default(),
            9,
            3,
            seed,
            &ByLr,
            2,
            |_, _, _| {},
        )
        .unwrap()
        .trials
    };
    let (a, b, c) = (run(5), run(5), run(6));
    assert_eq!(a, b);
    assert_ne!(
        a.iter().map(|t| t.values.clone()).collect::<Vec<_>>(),
        c.iter().map(|t| t.values.clone()).collect::<Vec<_>>()
    );
    let seeds: std::collections::BTreeSet<u64> = a.iter().map(|t| t.config.seed).collect();
    assert_eq!(seeds.len(), a.len());
}

#[test]
fn report_files_follow_the_schema() {
    let space = SearchSpace::default();
    let objective = Noise { seed: 3 };
    let result = hyperband(&space, &TrainConfig::default(), 9, 3, 1, &objective, 1, |_, _, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_report(dir.path(), &space, &result).unwrap().unwrap();
    let trials = fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    let mut lines = trials.lines();
    assert_eq!(
        lines.next().unwrap(),
        "trial,lr,batch_size,mixup_alpha,momentum,weight_decay,resource,metric"
    );
    assert_eq!(lines.count(), result.trials.len());
    let rungs = fs::read_to_string(dir.path().join("rungs.csv")).unwrap();
    assert_eq!(rungs.lines().count(), 1 + 3 + 2 + 1);
    for t in &result.trials {
        let curve = fs::read_to_string(dir.path().join("curves").join(format!("trial_{}.csv", t.trial_id))).unwrap();
        assert_eq!(curve.lines().count(), 1 + t.curve.len());
    }
    let corr = fs::read_to_string(dir.path().join("correlation.csv")).unwrap();
    assert!(corr.starts_with("param,pearson_r,degenerate,rank\n"));
    // one column per batch size category, one per numeric parameter
    assert_eq!(rows.len(), 4 + 4);
    let mut ranks: Vec<usize> = rows.iter().map(|r| r.rank).collect();
    ranks.sort();
    assert_eq!(ranks, (1..=8).collect::<Vec<_>>());

    let few: Vec<_> = result
        .trials
        .iter()
        .filter(|t| t.status == TrialStatus::Complete)
        .take(2)
        .cloned()
        .collect();
    assert!(matches!(correlation_report(&space, &few), Err(Error::Validation(_))));
}

#[test]
fn train_objective_continues_instead_of_restarting() {
    let train = synthetic_dataset_with_noise(40, 10, 1, 0.2, SplitName::Train);
    let test = synthetic_dataset_with_noise(10, 10, 2, 0.2, SplitName::Test);
    let objective = TrainObjective::new(&train, &test, 10, false, 3).unwrap();
    let config = TrainConfig {
        batch_size: 10,
        seed: 3,
        model: ResNetConfig {
            base_width: 4,
            ..ResNetConfig::tiny()
        },
        ..TrainConfig::default()
    };
    let mut stepped = objective.init(0, &config).unwrap();
    let mut curve = objective.advance(&mut stepped, 1).unwrap();
    curve.extend(objective.advance(&mut stepped, 3).unwrap());
    let mut direct = objective.init(0, &config).unwrap();
    assert_eq!(objective.advance(&mut direct, 3).unwrap(), curve);
    assert_eq!(curve.len(), 3);
    assert!(curve.iter().all(|m| (0.0..=1.0).contains(m)));
    let log = objective.run_log(&stepped).unwrap();
    assert_eq!(
        log.to_jsonl().unwrap(),
        objective.run_log(&direct).unwrap().to_jsonl().unwrap()
    );
    assert_eq!(log.config.t_max, 3);
    assert!(TrainObjective::new(&train, &test, 40, false, 3).is_err());
}
