use proptest::prelude::*;

use trimodal::checkpoint::{restore_checkpoint, save_checkpoint};
use trimodal::data::{generate, make_folds, Dataset, ModalityWidths, SynthSpec};
use trimodal::nn::{FusionConfig, FusionNet};
use trimodal::objectives::LossWeights;
use trimodal::train::{
    aggregate, auc_rank, cross_validate, evaluate, fold_seed, train, MetricsReport, Summary, TrainConfig,
    TrainError,
};

fn dataset(n: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        n_samples: n,
        n_positive: n / 2 + 1,
        noise_sigma: 0.05,
        widths: ModalityWidths {
            vision: 12,
            radiomics: 10,
            clinical: 4,
        },
        seed,
        ..SynthSpec::default()
    };
    generate(&spec).unwrap().dataset
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 1e-3,
        model: FusionConfig::micro(),
        ..TrainConfig::default()
    }
}

fn tensors(model: &FusionNet) -> Vec<Vec<f64>> {
    model.params().tensors().iter().map(|t| t.data().to_vec()).collect()
}

#[test]
fn zero_alpha_matches_training_without_alignment() {
    let data = dataset(20, 1);
    let idx: Vec<usize> = (0..20).collect();
    let zero = TrainConfig {
        loss: LossWeights {
            alpha: 0.0,
            ..LossWeights::default()
        },
        ..config()
    };
    let off = TrainConfig {
        alignment: false,
        ..config()
    };
    let a = train(&data, &idx, &zero).unwrap();
    let b = train(&data, &idx, &off).unwrap();
    assert_eq!(tensors(&a.model), tensors(&b.model));
    for (x, y) in a.trace.iter().zip(&b.trace) {
        assert_eq!((x.task, x.total), (y.task, y.total));
        assert!(x.multi > 0.0);
        assert_eq!(y.multi, 0.0);
    }
}

#[test]
fn training_is_seed_deterministic() {
    let data = dataset(16, 2);
    let idx: Vec<usize> = (0..16).collect();
    let a = train(&data, &idx, &config()).unwrap();
    let b = train(&data, &idx, &config()).unwrap();
    assert_eq!(tensors(&a.model), tensors(&b.model));
    assert_eq!(a.trace, b.trace);
    let c = train(&data, &idx, &TrainConfig { seed: 9, ..config() }).unwrap();
    assert_ne!(tensors(&a.model), tensors(&c.model));
}

#[test]
fn parallel_folds_equal_sequential_folds() {
    let data = dataset(24, 3);
    let plan = make_folds(data.len(), &data.labels(), 3, 5, true).unwrap();
    let seq = cross_validate(&data, &plan, &config(), 1).unwrap();
    let par = cross_validate(&data, &plan, &config(), 3).unwrap();
    for (a, b) in seq.folds.iter().zip(&par.folds) {
        assert_eq!(a.fold, b.fold);
        assert_eq!(a.report, b.report);
        assert_eq!(a.trace, b.trace);
        assert_eq!(tensors(&a.model), tensors(&b.model));
    }
    assert_eq!(seq.aggregate, par.aggregate);
}

#[test]
fn two_folds_on_ten_samples() {
    let data = dataset(10, 4);
    let plan = make_folds(10, &data.labels(), 2, 0, true).unwrap();
    let cv = cross_validate(&data, &plan, &config(), 1).unwrap();
    assert_eq!(cv.folds.len(), 2);
    assert_eq!(cv.folds.iter().map(|f| f.report.n).sum::<usize>(), 10);
    assert_eq!(cv.aggregate.folds, 2);
}

#[test]
fn fold_seeds_are_distinct_and_wrap() {
    assert_eq!(fold_seed(7, 0), 7);
    assert_ne!(fold_seed(7, 1), fold_seed(7, 2));
    assert_eq!(fold_seed(u64::MAX, 1), 0x9E37_79B9_7F4A_7C14);
}

#[test]
fn odd_remainder_trains_and_small_sets_fail() {
    let data = dataset(9, 5);
    let cfg = TrainConfig {
        batch_size: 4,
        ..config()
    };
    let out = train(&data, &(0..9).collect::<Vec<_>>(), &cfg).unwrap();
    assert_eq!(out.trace.len(), 3);
    assert!(train(&data, &[0], &cfg).is_err());
    assert!(matches!(
        train(&data, &[0, 42], &cfg),
        Err(TrainError::IndexOutOfRange { index: 42, len: 9 })
    ));
    assert!(matches!(
        evaluate(&out.model, &data, &[], None),
        Err(TrainError::EmptyEvaluation)
    ));
}

#[test]
fn loss_falls_with_a_larger_step() {
    let data = dataset(24, 6);
    let cfg = TrainConfig {
        epochs: 15,
        learning_rate: 3e-3,
        ..config()
    };
    let out = train(&data, &(0..24).collect::<Vec<_>>(), &cfg).unwrap();
    let (first, last) = (out.trace[0].total, out.trace.last().unwrap().total);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = dataset(12, 7);
    let idx: Vec<usize> = (0..12).collect();
    let out = train(&data, &idx, &config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(out.model.params(), &path).unwrap();
    let mut fresh = FusionNet::new(
        FusionConfig::micro(),
        data.widths(),
        out.model.architecture().clone(),
        99,
    )
    .unwrap();
    restore_checkpoint(fresh.params_mut(), &path).unwrap();
    let batch = data.batch(&idx);
    assert_eq!(out.model.predict_proba(&batch).unwrap(), fresh.predict_proba(&batch).unwrap());
}

#[test]
fn aggregate_uses_sample_standard_deviation() {
    let s = Summary::of(&[0.5, 0.7, 0.9]).unwrap();
    assert!((s.mean - 0.7).abs() < 1e-15);
    assert!((s.std - 0.2).abs() < 1e-15);
    let single = Summary::of(&[0.4]).unwrap();
    assert_eq!(single.std, 0.0);

    let a = MetricsReport::from_scores(Some(0), &[0.9, 0.1, 0.8], &[1, 0, 1], &[1, 0, 0]);
    let b = MetricsReport::from_scores(Some(1), &[0.2, 0.3], &[0, 0], &[0, 0]);
    assert_eq!(b.auc, None);
    let agg = aggregate(&[a.clone(), b]).unwrap();
    assert_eq!(agg.auc_folds, 1);
    assert_eq!(agg.auc.unwrap().mean, a.auc.unwrap());
    assert!(aggregate(&[]).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(-2.0f64..2.0, 2..40),
        bits in prop::collection::vec(0usize..2, 40),
    ) {
        let labels = &bits[..scores.len()];
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 1.0).collect();
        prop_assert_eq!(auc_rank(&scores, labels), auc_rank(&cubed, labels));
    }

    #[test]
    fn metrics_stay_in_bounds(
        scores in prop::collection::vec(0.0f64..1.0, 1..40),
        bits in prop::collection::vec(0usize..2, 40),
    ) {
        let labels = &bits[..scores.len()];
        let predicted: Vec<usize> = scores.iter().map(|&s| usize::from(s > 0.5)).collect();
        let r = MetricsReport::from_scores(None, &scores, &predicted, labels);
        for v in [r.accuracy, r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Some(auc) = r.auc {
            prop_assert!((0.0..=1.0).contains(&auc));
        }
        prop_assert_eq!(r.confusion.total(), scores.len());
    }
}
