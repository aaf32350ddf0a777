use proptest::prelude::*;

use cachejoint::cachesim::{simulate, CacheConfig, Lru, SimOptions};
use cachejoint::pipeline::{
    evaluate_accuracy, label_trace, prepare_dataset, split_dataset, split_sizes, train_model, ClassCounts,
    ConstantPredictor, Mode, ModelPolicy, PipelineError, RunConfig,
};
use cachejoint::trace::{gen_synthetic, BlockGeometry, Trace, Workload};

fn small_cfg() -> RunConfig {
    RunConfig {
        num_sets: 8,
        associativity: 1,
        history: 4,
        embed_dim: 6,
        hidden_dim: 8,
        shared_dim: 8,
        proj_dim: 6,
        max_epochs: 6,
        pretrain_epochs: 2,
        patience: 2,
        ..RunConfig::default()
    }
}

proptest! {
    #[test]
    fn split_follows_floor_rule(n in 5usize..5000) {
        let v: Vec<usize> = (0..n).collect();
        let (a, b, c) = split_dataset(&v).unwrap();
        prop_assert_eq!(a.len(), n * 6 / 10);
        prop_assert_eq!(b.len(), n * 2 / 10);
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        let joined: Vec<usize> = a.iter().chain(b).chain(c).copied().collect();
        prop_assert_eq!(joined, v);
    }

    #[test]
    fn tiny_inputs_refused(n in 0usize..5) {
        prop_assert!(matches!(split_sizes(n), Err(PipelineError::DegenerateSplit(m)) if m == n));
    }

    #[test]
    fn all_friendly_policy_is_exactly_lru(
        blocks in prop::collection::vec(0u64..24, 1..200),
        sets_log in 0u32..3,
        assoc in 1usize..5,
    ) {
        let geo = BlockGeometry::default();
        let cfg = CacheConfig::new(1 << sets_log, assoc, geo, 0).unwrap();
        let trace = Trace::from_blocks(&blocks, &geo);
        let lru = simulate(&trace, &cfg, &mut Lru, None, &SimOptions::default()).unwrap();
        let mut p = ModelPolicy::new(ConstantPredictor(true), &cfg);
        let ours = simulate(&trace, &cfg, &mut p, None, &SimOptions::default()).unwrap();
        prop_assert_eq!(ours.events, lru.events);
    }

    #[test]
    fn constant_averse_accuracy_is_averse_fraction(truth in prop::collection::vec(any::<bool>(), 1..300)) {
        let pred = vec![false; truth.len()];
        let c = ClassCounts::from_predictions(&pred, &truth);
        let averse = truth.iter().filter(|t| !**t).count();
        prop_assert_eq!(c.accuracy(), averse as f64 / truth.len() as f64);
        prop_assert_eq!(c.total(), truth.len());
    }

    #[test]
    fn accuracy_is_a_fraction(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..300)) {
        let (pred, truth): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let c = ClassCounts::from_predictions(&pred, &truth);
        for x in [c.accuracy(), c.friendly_precision(), c.friendly_recall(), c.averse_precision(), c.averse_recall()] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn config_render_round_trips(history in 1usize..64, lr in 1e-5f64..1.0, finetune in any::<bool>(), seeds in prop::collection::vec(0u64..1000, 1..6)) {
        let mut cfg = RunConfig::default();
        cfg.history = history;
        cfg.lr = lr;
        cfg.finetune = finetune;
        cfg.seeds = seeds;
        let back = RunConfig::parse(&cfg.render()).unwrap();
        prop_assert_eq!(back.digest(), cfg.digest());
        prop_assert_eq!(back, cfg);
    }
}

fn coupled() -> Trace {
    gen_synthetic(&Workload::Coupled { phases: 6, phase_len: 40 }, &BlockGeometry::default(), 5).unwrap()
}

#[test]
fn report_counts_reconcile_and_selection_is_best() {
    let cfg = small_cfg();
    let trace = coupled();
    let labels = label_trace(&trace, &cfg).unwrap().insertions;
    let ds = prepare_dataset("c", &trace, &labels, &cfg).unwrap();

    let truth: Vec<bool> = ds.test.repl.iter().map(|s| s.is_friendly()).collect();
    let averse = truth.iter().filter(|t| !**t).count() as f64 / truth.len() as f64;
    assert_eq!(ClassCounts::from_predictions(&vec![false; truth.len()], &truth).accuracy(), averse);

    for mode in Mode::ALL {
        let out = train_model(mode, &ds, &cfg, 11).unwrap();
        let best = out.history[out.best_epoch - 1].val_accuracy;
        assert!(out.history.iter().all(|m| m.val_accuracy <= best), "{mode:?}");
        assert!(best >= out.history.last().unwrap().val_accuracy);
        let r = evaluate_accuracy(&out.model, &ds, 11, "d").unwrap();
        assert_eq!(r.n_train + r.n_val + r.n_test, labels.len());
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.method, mode.as_str());
    }
}

#[test]
fn empty_splits_are_errors() {
    let cfg = small_cfg();
    let trace = coupled();
    let labels = label_trace(&trace, &cfg).unwrap().insertions;
    let ds = prepare_dataset("c", &trace, &labels, &cfg).unwrap();
    let out = train_model(Mode::Joint, &ds, &cfg, 1).unwrap();

    let mut no_test = ds.clone();
    no_test.test.repl.clear();
    no_test.test.aligned.clear();
    assert!(matches!(
        evaluate_accuracy(&out.model, &no_test, 1, "d"),
        Err(PipelineError::EmptySplit("test"))
    ));

    let mut no_train = ds.clone();
    no_train.train.repl.clear();
    no_train.train.aligned.clear();
    for mode in Mode::ALL {
        assert!(matches!(train_model(mode, &no_train, &cfg, 1), Err(PipelineError::EmptySplit("train"))));
    }
}
