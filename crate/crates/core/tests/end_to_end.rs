use std::sync::OnceLock;

use r2dl::bioseq::{Item, Label, TaskDataset, TaskKind};
use r2dl::embeddings::PAD_ID;
use r2dl::labelmap::{fit_thresholds, LabelMapping};
use r2dl::sparse_map::sparse_code_all;
use r2dl::synthetic::{
    composition_task, source_fixture, SourceFixture, SourceTaskSpec, TargetTaskSpec,
};
use r2dl::training::{
    evaluate, random_target_init, train_r2dl, Prediction, Predictor, StepSchedule, TrainConfig,
    TrainError,
};

fn fixture() -> &'static SourceFixture {
    static FIXTURE: OnceLock<SourceFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| source_fixture(&SourceTaskSpec::default()).unwrap())
}

fn binary() -> LabelMapping {
    LabelMapping::classification([(0, "0"), (1, "1")]).unwrap()
}

fn config(outer_iters: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        outer_iters,
        schedule: StepSchedule::Constant(lr),
        batch_size: 500,
        k: 8,
        seed: 1,
        ..Default::default()
    }
}

#[test]
fn source_fixture_is_accurate() {
    assert!(
        fixture().source_accuracy >= 0.95,
        "{}",
        fixture().source_accuracy
    );
}

#[test]
fn reprogramming_learns_the_composition_rule() {
    let src = fixture();
    let ds = composition_task(&TargetTaskSpec::default());
    let h = binary();
    let cfg = config(200, 0.05);
    let init = random_target_init(21, 16, Some(PAD_ID), cfg.seed);
    let before = src.model.param_hash().to_string();
    let (theta, history) = train_r2dl(&ds, &src.dictionary, &init, &src.model, &h, &cfg).unwrap();
    assert_eq!(src.model.param_hash(), before);
    assert_eq!(history.len(), 200);
    assert!(theta.max_row_nnz() <= 8);
    assert!(history.records.iter().all(|r| r.nnz <= 21 * 8));
    let predictor = Predictor::new(&theta, &src.dictionary, &src.model, &h, ds.kind).unwrap();
    let report = evaluate(&predictor, &ds, "composition").unwrap();
    assert!(report.value >= 0.9, "test accuracy {}", report.value);
    report.check().unwrap();
}

#[test]
fn zero_step_returns_the_initial_code() {
    let src = fixture();
    let ds = composition_task(&TargetTaskSpec::default());
    let cfg = TrainConfig {
        batch_size: 64,
        ..config(12, 0.0)
    };
    let init = random_target_init(21, 16, Some(PAD_ID), 5);
    let (theta, history) =
        train_r2dl(&ds, &src.dictionary, &init, &src.model, &binary(), &cfg).unwrap();
    let (expected, _) = sparse_code_all(&init, &src.dictionary, &cfg.sparse_config()).unwrap();
    assert_eq!(theta, expected);
    // Full-training-set loss is recorded, so it is constant without updates.
    let first = history.records[0].loss;
    assert!(history.records.iter().all(|r| r.loss == first));
}

#[test]
fn training_is_deterministic() {
    let src = fixture();
    let ds = composition_task(&TargetTaskSpec::default());
    let cfg = TrainConfig {
        batch_size: 50,
        reproject_every: 3,
        ..config(15, 0.05)
    };
    let init = random_target_init(21, 16, Some(PAD_ID), 2);
    let run = || train_r2dl(&ds, &src.dictionary, &init, &src.model, &binary(), &cfg).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a.to_tsv(), b.to_tsv());
    assert_eq!(ha.to_csv(), hb.to_csv());
}

#[test]
fn prediction_contract() {
    let src = fixture();
    let h = binary();
    let init = random_target_init(21, 16, Some(PAD_ID), 3);
    let (theta, _) = sparse_code_all(&init, &src.dictionary, &Default::default()).unwrap();
    let p = Predictor::new(
        &theta,
        &src.dictionary,
        &src.model,
        &h,
        TaskKind::SequenceClassification,
    )
    .unwrap();
    assert!(matches!(
        p.predict(&[PAD_ID, PAD_ID]),
        Err(TrainError::NoTokens)
    ));
    assert!(matches!(
        p.predict(&[0, 40]),
        Err(TrainError::Vocabulary { token: 40, .. })
    ));
    let a = p.predict(&[0, 3, 7, 9]).unwrap();
    assert_eq!(a, p.predict(&[0, 3, 7, 9]).unwrap());
    assert!(matches!(a, Prediction::Class(ref c) if c == "0" || c == "1"));
}

#[test]
fn mismatched_label_sets_are_rejected() {
    let src = fixture();
    let ds = composition_task(&TargetTaskSpec::default());
    let h = LabelMapping::classification([(0, "AMP"), (1, "non-AMP")]).unwrap();
    let init = random_target_init(21, 16, Some(PAD_ID), 1);
    let err = train_r2dl(
        &ds,
        &src.dictionary,
        &init,
        &src.model,
        &h,
        &config(1, 0.05),
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::LabelSet(_)));
    let small = random_target_init(10, 16, None, 1);
    let err = train_r2dl(
        &ds,
        &src.dictionary,
        &small,
        &src.model,
        &binary(),
        &config(1, 0.05),
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::Vocabulary { .. }));
}

#[test]
fn regression_and_token_tasks_run() {
    let src = fixture();
    let base = composition_task(&TargetTaskSpec {
        n_train: 100,
        n_test: 40,
        ..Default::default()
    });

    let items: Vec<Item> = base
        .items
        .iter()
        .map(|it| Item {
            sequence: it.sequence.clone(),
            label: Label::Real(
                it.sequence.iter().filter(|&&r| r < 10).count() as f64 / it.sequence.len() as f64,
            ),
        })
        .collect();
    let reg = TaskDataset {
        items,
        kind: TaskKind::Regression,
        label_names: vec![],
        split: base.split.clone(),
    };
    let values: Vec<f64> = reg
        .train_items()
        .map(|i| match i.label {
            Label::Real(y) => y,
            _ => 0.0,
        })
        .collect();
    let h = fit_thresholds(&values, 2).unwrap();
    let cfg = TrainConfig {
        task_kind: TaskKind::Regression,
        ..config(10, 0.05)
    };
    let init = random_target_init(21, 16, Some(PAD_ID), 4);
    let (theta, history) = train_r2dl(&reg, &src.dictionary, &init, &src.model, &h, &cfg).unwrap();
    assert!(history.records.iter().all(|r| r.loss.is_finite()));
    let p = Predictor::new(
        &theta,
        &src.dictionary,
        &src.model,
        &h,
        TaskKind::Regression,
    )
    .unwrap();
    let report = evaluate(&p, &reg, "regression").unwrap();
    assert!((-1.0..=1.0).contains(&report.value));

    let items: Vec<Item> = base
        .items
        .iter()
        .map(|it| Item {
            sequence: it.sequence.clone(),
            label: Label::PerToken(it.sequence.iter().map(|&r| usize::from(r < 10)).collect()),
        })
        .collect();
    let tok = TaskDataset {
        items,
        kind: TaskKind::TokenClassification,
        label_names: vec!["0".into(), "1".into()],
        split: base.split.clone(),
    };
    let cfg = TrainConfig {
        task_kind: TaskKind::TokenClassification,
        ..config(10, 0.05)
    };
    let (theta, _) = train_r2dl(&tok, &src.dictionary, &init, &src.model, &binary(), &cfg).unwrap();
    let hb = binary();
    let p = Predictor::new(
        &theta,
        &src.dictionary,
        &src.model,
        &hb,
        TaskKind::TokenClassification,
    )
    .unwrap();
    let report = evaluate(&p, &tok, "tokens").unwrap();
    let residues: usize = tok.test_items().map(|i| i.sequence.len()).sum();
    assert_eq!(report.n_test, residues);
    report.check().unwrap();
}
