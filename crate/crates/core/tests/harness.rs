use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xtrap::dataset::{one_hot, DatasetBundle, Split};
use xtrap::harness::{
    build_model, emit_curves, evaluate, load_model, predict_indices, read_curves, read_report, save_model, train,
    training_indices, write_report, EpochRow, HarnessError, Method, MetricReport, RunConfig, TrainedModel,
};
use xtrap::splice::{run_gsplice, BridgeMode, SpliceConfig, SpliceModels, SpliceOptions};
use xtrap::synth::{generate, GenConfig, GenTask};

fn small(task: GenTask, seed: u64) -> DatasetBundle {
    let mut cfg = GenConfig::new(task, seed);
    cfg.counts = [90, 30, 30, 30, 30];
    generate(&cfg).unwrap()
}

fn quick(method: Method, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(method, seed);
    cfg.epochs = 4;
    cfg.hidden_dim = 16;
    cfg
}

fn untrained(bundle: &DatasetBundle) -> TrainedModel {
    let config = RunConfig::new(Method::Erm, 0).model_config(bundle);
    let (classifier, params) = build_model(&config, 0).unwrap();
    TrainedModel { config, classifier, params }
}

/// Option-3 augmentation with random bridges (needs no pretrained models).
fn augmented(bundle: &DatasetBundle) -> DatasetBundle {
    let mut cfg = SpliceConfig::new(SpliceOptions::parse("001").unwrap());
    cfg.bridge_mode = BridgeMode::Random;
    run_gsplice(bundle, &cfg, SpliceModels::default(), 3).unwrap()
}

fn row(epoch: usize, ood_val: f64, id_val: f64) -> EpochRow {
    EpochRow {
        epoch,
        train_loss: 1.0 / epoch as f64,
        id_val_acc: id_val,
        id_test_acc: 0.1 * epoch as f64,
        ood_val_acc: ood_val,
        ood_test_acc: 0.05 * epoch as f64,
    }
}

#[test]
fn selection_uses_the_first_best_validation_epoch() {
    let rows = vec![row(1, 0.2, 0.9), row(2, 0.6, 0.4), row(3, 0.6, 0.95), row(4, 0.5, 0.95)];
    let r = MetricReport::from_rows(Method::Erm, 0, rows);
    assert_eq!(r.selected_epoch, 2);
    assert_eq!(r.ood_ood, 0.1);
    assert_eq!(r.id_id_epoch, 3);
    assert!((r.id_id - 0.3).abs() < 1e-15);
}

#[test]
fn predictor_agreeing_with_labels_scores_one() {
    let mut bundle = small(GenTask::MotifSize, 1);
    let model = untrained(&bundle);
    let idx = bundle.split_indices(Split::OodTest);
    let preds = predict_indices(&model, &bundle, &idx).unwrap();
    for (&i, &p) in idx.iter().zip(&preds) {
        bundle.samples[i].label = one_hot(p, 3);
    }
    assert_eq!(evaluate(&model, &bundle, Split::OodTest).unwrap(), 1.0);
}

#[test]
fn labels_independent_of_predictions_score_one_third() {
    let mut cfg = GenConfig::new(GenTask::MotifSize, 2);
    cfg.counts = [30, 10, 900, 10, 10];
    let mut bundle = generate(&cfg).unwrap();
    let model = untrained(&bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let idx = bundle.split_indices(Split::IdTest);
    for &i in &idx {
        bundle.samples[i].label = one_hot(rng.random_range(0..3), 3);
    }
    let acc = evaluate(&model, &bundle, Split::IdTest).unwrap();
    // Three binomial standard deviations around 1/3 at n = 900.
    let sd = (1.0 / 3.0 * 2.0 / 3.0 / idx.len() as f64).sqrt();
    assert!((acc - 1.0 / 3.0).abs() < 3.0 * sd, "{acc}");
}

#[test]
fn empty_split_and_shape_mismatch_are_errors() {
    let mut bundle = small(GenTask::MotifSize, 3);
    let model = untrained(&bundle);
    bundle.samples.retain(|s| s.split != Split::OodVal);
    assert!(matches!(evaluate(&model, &bundle, Split::OodVal), Err(HarnessError::EmptySplit(_))));
    let color = small(GenTask::ColorGraph, 3);
    assert!(matches!(evaluate(&model, &color, Split::IdTest), Err(HarnessError::ShapeMismatch(_))));
}

#[test]
fn erm_ignores_augmented_samples() {
    let bundle = small(GenTask::MotifSize, 4);
    let aug = augmented(&bundle);
    let erm = training_indices(&aug, Method::Erm);
    let gs = training_indices(&aug, Method::Gsplice);
    assert_eq!(erm, training_indices(&bundle, Method::Erm));
    assert_eq!(gs.len(), 2 * erm.len());
    assert!(erm.iter().all(|&i| aug.samples[i].option().is_none()));
}

#[test]
fn zero_gamma_penalty_reproduces_plain_splicing() {
    let aug = augmented(&small(GenTask::MotifSize, 5));
    let plain = train(&aug, &quick(Method::Gsplice, 5)).unwrap();
    let mut cfg = quick(Method::GspliceR, 5);
    cfg.gamma = 0.0;
    let penalized = train(&aug, &cfg).unwrap();
    let losses = |r: &MetricReport| r.rows.iter().map(|x| x.train_loss).collect::<Vec<_>>();
    assert_eq!(losses(&plain.report), losses(&penalized.report));
    cfg.gamma = 10.0;
    let strong = train(&aug, &cfg).unwrap();
    assert_ne!(losses(&plain.report), losses(&strong.report));
}

#[test]
fn runs_are_deterministic() {
    let bundle = small(GenTask::MotifSize, 6);
    for method in [Method::Erm, Method::Featx] {
        let bundle = if method == Method::Featx { small(GenTask::ColorGraph, 6) } else { bundle.clone() };
        let a = train(&bundle, &quick(method, 6)).unwrap();
        let b = train(&bundle, &quick(method, 6)).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.featx, b.featx);
        assert_eq!(a.model.params.snapshot(), b.model.params.snapshot());
    }
}

#[test]
fn reported_selection_matches_the_returned_model() {
    let bundle = small(GenTask::MotifSize, 7);
    let out = train(&bundle, &quick(Method::Erm, 7)).unwrap();
    let r = &out.report;
    assert_eq!(r.rows.len(), 4);
    let best = r.rows.iter().map(|x| x.ood_val_acc).fold(f64::NEG_INFINITY, f64::max);
    let chosen = &r.rows[r.selected_epoch - 1];
    assert_eq!(chosen.ood_val_acc, best);
    assert_eq!(evaluate(&out.model, &bundle, Split::OodTest).unwrap(), r.ood_ood);
    assert_eq!(evaluate(&out.model, &bundle, Split::OodVal).unwrap(), best);
}

#[test]
fn artifacts_round_trip() {
    let bundle = small(GenTask::ColorGraph, 8);
    let out = train(&bundle, &quick(Method::Featx, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let report = dir.path().join("report.json");
    write_report(&out.report, &report).unwrap();
    assert_eq!(read_report(&report).unwrap(), out.report);

    let curves = dir.path().join("curves.csv");
    emit_curves(&out.report, &curves).unwrap();
    let text = std::fs::read_to_string(&curves).unwrap();
    assert_eq!(text.lines().next(), Some("epoch,train_loss,id_val_acc,id_test_acc,ood_val_acc,ood_test_acc"));
    assert_eq!(read_curves(&curves).unwrap(), out.report.rows);

    let ckpt = dir.path().join("ckpt.bin");
    let mask = out.featx.as_ref().map(|f| f.mask.clone());
    save_model(&out.model, mask.as_deref(), &ckpt).unwrap();
    let (back, back_mask) = load_model(&ckpt).unwrap();
    assert_eq!(back_mask, mask);
    assert_eq!(back.config, out.model.config);
    for split in [Split::IdTest, Split::OodTest] {
        assert_eq!(evaluate(&back, &bundle, split).unwrap(), evaluate(&out.model, &bundle, split).unwrap());
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_model(&dir.path().join("absent.bin")).err().unwrap();
    assert!(matches!(err, HarnessError::MissingCheckpoint(_)));
}

#[test]
fn node_level_runs_train_and_evaluate() {
    let bundle = generate(&GenConfig::new(GenTask::CbasNode, 9)).unwrap();
    for method in [Method::Erm, Method::Featx] {
        let out = train(&bundle, &quick(method, 9)).unwrap();
        assert!(out.report.rows.iter().all(|r| r.train_loss.is_finite()));
        let acc = evaluate(&out.model, &bundle, Split::IdTest).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn erm_on_size_shift_shows_an_ood_gap() {
    let bundle = generate(&GenConfig::new(GenTask::MotifSize, 0)).unwrap();
    let out = train(&bundle, &RunConfig::new(Method::Erm, 0)).unwrap();
    let r = &out.report;
    assert!(r.id_id >= 0.9, "id {}", r.id_id);
    assert!(r.id_id - r.ood_ood >= 0.1, "id {} ood {}", r.id_id, r.ood_ood);
}
