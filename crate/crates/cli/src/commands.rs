use std::fs;
use std::path::Path;

use r2dl::bioseq::{
    blosum62, distance_correlation_report, embedding_distance_matrix, evolutionary_distance_matrix,
    parse_csv_dataset, parse_fasta_str, pooled_embeddings, pooled_embeddings_csv,
    residue_embedding_distances, residue_substitution_distances, CsvSchema, LabelRule,
    ResiduePolicy,
};
use r2dl::embeddings::{
    amino_acid_vocabulary, load_bundle, save_bundle_with_meta, Bundle, BundleMeta, Vocabulary,
    PAD_ID,
};
use r2dl::evaluation::{data_efficiency, restricted_sweep, EvalReport, MetricKind};
use r2dl::frozen_model::{load_frozen_model, save_frozen_model};
use r2dl::labelmap::fit_thresholds;
use r2dl::synthetic::{composition_task, source_fixture, SourceTaskSpec, TargetTaskSpec};
use r2dl::training::{
    evaluate, evaluate_on, random_target_init, train_r2dl, train_r2dl_on, Predictor, StepSchedule,
};
use r2dl::{
    CoefficientMap, FrozenClassifier, Label, LabelMapping, TaskDataset, TaskKind, TrainConfig,
};
use serde_json::json;

use crate::args::{
    DistanceArgs, EvalArgs, ExportArgs, HyperArgs, InputArgs, InspectArgs, KindArg, ResidueArg,
    ScheduleArg, SplitArgs, SweepArgs, SynthArgs, TrainArgs,
};
use crate::artifacts::{atomic_write, file_sha256, RunManifest};
use crate::error::{CliError, CliResult};
use crate::presets::{preset, TaskPreset};

pub const THETA_FILE: &str = "theta.tsv";
pub const HISTORY_FILE: &str = "history.csv";
pub const MAPPING_FILE: &str = "mapping.json";

const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

struct Inputs {
    bundle: Bundle,
    model: FrozenClassifier,
    dataset: TaskDataset,
    dataset_hash: String,
    preset: Option<&'static TaskPreset>,
    task_name: String,
}

fn task_kind(inputs: &InputArgs, preset: Option<&TaskPreset>) -> TaskKind {
    match inputs.task_kind {
        Some(KindArg::Seqclass) => TaskKind::SequenceClassification,
        Some(KindArg::Tokclass) => TaskKind::TokenClassification,
        Some(KindArg::Regression) => TaskKind::Regression,
        None => preset.map_or(TaskKind::SequenceClassification, |p| p.kind),
    }
}

fn residue_policy(inputs: &InputArgs) -> ResiduePolicy {
    match inputs.residues {
        ResidueArg::Strict => ResiduePolicy::Strict,
        ResidueArg::XToPad => ResiduePolicy::MapXToPad,
    }
}

fn load_dataset(inputs: &InputArgs, kind: TaskKind) -> CliResult<TaskDataset> {
    let path = &inputs.dataset;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if matches!(ext.as_str(), "fasta" | "fa" | "faa") {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("--dataset {}: {e}", path.display())))?;
        return Ok(parse_fasta_str(
            &text,
            &LabelRule::default(),
            kind,
            residue_policy(inputs),
        )?);
    }
    let mut schema = if inputs.no_header {
        CsvSchema::headerless(kind)
    } else {
        CsvSchema::standard(kind)
    };
    schema.residues = residue_policy(inputs);
    Ok(parse_csv_dataset(path, &schema)?)
}

fn load_inputs(inputs: &InputArgs) -> CliResult<Inputs> {
    let preset = match &inputs.task {
        Some(name) => Some(
            preset(name)
                .ok_or_else(|| CliError::config(format!("--task: unknown preset {name:?}")))?,
        ),
        None => None,
    };
    let bundle = load_bundle(&inputs.source_bundle)?;
    let model = load_frozen_model(&inputs.model)?;
    if model.dim() != bundle.matrix.dim() {
        return Err(CliError::data(format!(
            "--model has input dim {} but --source-bundle rows have dim {}",
            model.dim(),
            bundle.matrix.dim()
        )));
    }
    let dataset = load_dataset(inputs, task_kind(inputs, preset))?;
    if dataset.is_empty() {
        return Err(CliError::data("--dataset contains no sequences"));
    }
    Ok(Inputs {
        bundle,
        model,
        dataset,
        dataset_hash: file_sha256(&inputs.dataset)?,
        preset,
        task_name: inputs.task.clone().unwrap_or_else(|| "custom".into()),
    })
}

/// Keeps a split given in the data; otherwise a seeded split using the
/// requested or preset sizes, falling back to 80/20 when the preset sizes
/// do not fit the dataset.
fn apply_split(
    ds: TaskDataset,
    split: &SplitArgs,
    preset: Option<&TaskPreset>,
) -> CliResult<TaskDataset> {
    let explicit = split.train_size.is_some() || split.test_size.is_some();
    if !ds.split.test.is_empty() {
        if explicit {
            return Err(CliError::config(
                "--train-size/--test-size conflict with the split column in --dataset",
            ));
        }
        return Ok(ds);
    }
    let train = split.train_size.or(preset.map(|p| p.train_size));
    let test = split.test_size.or(preset.map(|p| p.test_size));
    match (train, test) {
        (Some(tr), Some(te)) if tr + te <= ds.len() && tr > 0 => {
            Ok(ds.with_split_sizes(tr, te, split.seed)?)
        }
        (Some(tr), None) if tr < ds.len() && tr > 0 => {
            Ok(ds.with_split_sizes(tr, ds.len() - tr, split.seed)?)
        }
        _ if explicit => Err(CliError::config(format!(
            "--train-size/--test-size do not fit a dataset of {} sequences",
            ds.len()
        ))),
        _ => Ok(ds.with_train_fraction(DEFAULT_TRAIN_FRACTION, split.seed)?),
    }
}

fn train_config(
    hyper: &HyperArgs,
    split: &SplitArgs,
    preset: Option<&TaskPreset>,
    kind: TaskKind,
) -> CliResult<TrainConfig> {
    let defaults = TrainConfig::default();
    let lr = hyper.lr.unwrap_or(0.05);
    let cfg = TrainConfig {
        outer_iters: hyper.outer_iters.unwrap_or(defaults.outer_iters),
        inner_iters: hyper
            .inner_iters
            .or(preset.map(|p| p.inner_iters))
            .unwrap_or(defaults.inner_iters),
        schedule: match hyper.schedule {
            ScheduleArg::Constant => StepSchedule::Constant(lr),
            ScheduleArg::InvSqrt => StepSchedule::InvSqrt(lr),
        },
        batch_size: hyper.batch.unwrap_or(defaults.batch_size),
        k: hyper.k.unwrap_or(defaults.k),
        epsilon: hyper
            .epsilon
            .or(preset.map(|p| p.epsilon))
            .unwrap_or(defaults.epsilon),
        seed: split.seed,
        reproject_every: hyper.reproject_every,
        task_kind: kind,
        record_time: hyper.timing,
    };
    let checks = [
        (cfg.k == 0, "--k must be >= 1"),
        (
            !(cfg.epsilon.is_finite() && cfg.epsilon >= 0.0),
            "--epsilon must be finite and >= 0",
        ),
        (cfg.outer_iters == 0, "--outer-iters must be >= 1"),
        (cfg.inner_iters == 0, "--inner-iters must be >= 1"),
        (
            !(lr.is_finite() && lr >= 0.0),
            "--lr must be finite and >= 0",
        ),
        (cfg.batch_size == 0, "--batch must be >= 1"),
        (cfg.reproject_every == 0, "--reproject-every must be >= 1"),
    ];
    if let Some((_, msg)) = checks.iter().find(|(bad, _)| *bad) {
        return Err(CliError::config(*msg));
    }
    Ok(cfg)
}

fn train_values(ds: &TaskDataset, indices: &[usize]) -> Vec<f64> {
    indices
        .iter()
        .filter_map(|&i| match ds.items[i].label {
            Label::Real(y) => Some(y),
            _ => None,
        })
        .collect()
}

/// The mapping from `--mapping`, or one derived from the data: class `i`
/// of the model stands for the dataset's `i`-th label name, and regression
/// targets are binned at training-set quantiles.
fn resolve_mapping(
    inputs: &InputArgs,
    ds: &TaskDataset,
    model: &FrozenClassifier,
) -> CliResult<LabelMapping> {
    let mapping = match &inputs.mapping {
        Some(path) => LabelMapping::load(path)?,
        None if ds.kind == TaskKind::Regression => {
            fit_thresholds(&train_values(ds, &ds.split.train), model.n_classes())?
        }
        None => {
            if ds.n_classes() != model.n_classes() {
                return Err(CliError::config(format!(
                    "dataset has {} classes but the model has {}; pass --mapping",
                    ds.n_classes(),
                    model.n_classes()
                )));
            }
            LabelMapping::classification(ds.label_names.iter().cloned().enumerate())?
        }
    };
    mapping.check_model_classes(model.n_classes())?;
    Ok(mapping)
}

fn load_theta(path: &Path, bundle: &Bundle) -> CliResult<CoefficientMap> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("--theta {}: {e}", path.display())))?;
    let theta =
        CoefficientMap::from_tsv(&text, amino_acid_vocabulary().len(), bundle.matrix.rows())?;
    theta.check_dictionary(&bundle.matrix)?;
    Ok(theta)
}

fn record_inputs(manifest: &mut RunManifest, inputs: &Inputs) {
    manifest.input("source_bundle", inputs.bundle.hash());
    manifest.input("model", inputs.model.param_hash());
    manifest.input("dataset", inputs.dataset_hash.clone());
}

fn write_text(out: &Path, name: &str, text: &str) -> CliResult<()> {
    atomic_write(&out.join(name), text.as_bytes())
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("train", args.split.seed);
    let inputs = load_inputs(&args.inputs)?;
    let kind = inputs.dataset.kind;
    let cfg = train_config(&args.hyper, &args.split, inputs.preset, kind)?;
    let dataset = apply_split(inputs.dataset.clone(), &args.split, inputs.preset)?;
    let mapping = resolve_mapping(&args.inputs, &dataset, &inputs.model)?;
    let dictionary = &inputs.bundle.matrix;
    let init = random_target_init(
        amino_acid_vocabulary().len(),
        dictionary.dim(),
        Some(PAD_ID),
        cfg.seed,
    );
    let (theta, history) = train_r2dl(&dataset, dictionary, &init, &inputs.model, &mapping, &cfg)?;

    write_text(&args.out, THETA_FILE, &theta.to_tsv())?;
    write_text(&args.out, HISTORY_FILE, &history.to_csv())?;
    write_text(&args.out, MAPPING_FILE, &mapping.to_json())?;
    if let Some(last) = history.records.last() {
        println!(
            "trained {} iterations: loss {:.6}, train metric {:.4}, nnz {}",
            history.len(),
            last.loss,
            last.metric,
            last.nnz
        );
    }
    record_inputs(&mut manifest, &inputs);
    manifest.config = json!({
        "task": inputs.task_name,
        "train": cfg,
        "train_size": dataset.split.train.len(),
        "test_size": dataset.split.test.len(),
    });
    manifest.finish(&args.out)
}

fn with_efficiency(
    mut report: EvalReport,
    pretrain: Option<u64>,
    n_train: usize,
) -> CliResult<EvalReport> {
    if let Some(p) = pretrain {
        report.data_efficiency = Some(data_efficiency(report.value, p + n_train as u64)?);
    }
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("eval", args.split.seed);
    let inputs = load_inputs(&args.inputs)?;
    let dataset = apply_split(inputs.dataset.clone(), &args.split, inputs.preset)?;
    if dataset.split.test.is_empty() {
        return Err(CliError::data("the test split is empty"));
    }
    let theta = load_theta(&args.theta, &inputs.bundle)?;
    let mapping = resolve_mapping(&args.inputs, &dataset, &inputs.model)?;
    let predictor = Predictor::new(
        &theta,
        &inputs.bundle.matrix,
        &inputs.model,
        &mapping,
        dataset.kind,
    )?;
    let report = evaluate(&predictor, &dataset, &inputs.task_name)?;
    let report = with_efficiency(report, args.pretrain_corpus_size, dataset.split.train.len())?;
    report.check().map_err(CliError::internal)?;

    write_text(&args.out, "eval.json", &report.to_json())?;
    write_text(&args.out, "eval.csv", &report.to_csv())?;
    if let Some(c) = &report.confusion {
        write_text(&args.out, "confusion.csv", &c.to_csv())?;
    }
    let metric = match report.metric {
        MetricKind::Spearman => "spearman",
        _ => "top1_accuracy",
    };
    println!(
        "{} {metric} {:.4} on {} test items",
        report.task, report.value, report.n_test
    );
    record_inputs(&mut manifest, &inputs);
    manifest.input("theta", file_sha256(&args.theta)?);
    manifest.config = json!({
        "task": inputs.task_name,
        "pretrain_corpus_size": args.pretrain_corpus_size,
    });
    manifest.finish(&args.out)
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("sweep", args.split.seed);
    let inputs = load_inputs(&args.inputs)?;
    let kind = inputs.dataset.kind;
    let cfg = train_config(&args.hyper, &args.split, inputs.preset, kind)?;
    let dataset = apply_split(inputs.dataset.clone(), &args.split, inputs.preset)?;
    let mapping = resolve_mapping(&args.inputs, &dataset, &inputs.model)?;
    let dictionary = &inputs.bundle.matrix;
    let init = random_target_init(
        amino_acid_vocabulary().len(),
        dictionary.dim(),
        Some(PAD_ID),
        cfg.seed,
    );

    let test_labels: Vec<usize> = dataset
        .test_items()
        .filter_map(|i| match i.label {
            Label::Class(c) => Some(c),
            _ => None,
        })
        .collect();
    let chance = (kind == TaskKind::SequenceClassification)
        .then_some((test_labels.as_slice(), dataset.n_classes()));
    let mut failure: Option<CliError> = None;
    let report = restricted_sweep(
        &dataset.split.train,
        &args.fractions,
        cfg.seed,
        chance,
        |subset, fraction| {
            let run = || -> CliResult<EvalReport> {
                let (theta, _) = train_r2dl_on(
                    &dataset,
                    subset,
                    dictionary,
                    &init,
                    &inputs.model,
                    &mapping,
                    &cfg,
                )?;
                let p = Predictor::new(&theta, dictionary, &inputs.model, &mapping, kind)?;
                Ok(evaluate_on(
                    &p,
                    &dataset,
                    &dataset.split.test,
                    &inputs.task_name,
                )?)
            };
            run().unwrap_or_else(|e| {
                eprintln!("fraction {fraction}: {e}");
                failure.get_or_insert(e);
                EvalReport {
                    task: inputs.task_name.clone(),
                    metric: MetricKind::Top1Accuracy,
                    value: f64::NAN,
                    n_test: 0,
                    confusion: None,
                    data_efficiency: None,
                }
            })
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    write_text(&args.out, "sweep.csv", &report.to_csv())?;
    print!("{}", report.to_csv());
    record_inputs(&mut manifest, &inputs);
    manifest.config = json!({
        "task": inputs.task_name,
        "train": cfg,
        "fractions": args.fractions,
    });
    manifest.finish(&args.out)
}

pub fn cmd_distances(args: &DistanceArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("distances", 0);
    let inputs = load_inputs(&args.inputs)?;
    let theta = load_theta(&args.theta, &inputs.bundle)?;
    let sequences: Vec<Vec<usize>> = inputs
        .dataset
        .items
        .iter()
        .take(args.max_sequences)
        .map(|i| i.sequence.clone())
        .collect();
    let matrix = blosum62();
    let evo = evolutionary_distance_matrix(&sequences, &matrix)?;
    let emb = embedding_distance_matrix(&theta, &inputs.bundle.matrix, &inputs.model, &sequences)?;
    let report = distance_correlation_report(&evo, &emb)?;
    let residue = distance_correlation_report(
        &residue_substitution_distances(&matrix),
        &residue_embedding_distances(&theta, &inputs.bundle.matrix)?,
    )?;
    write_text(&args.out, "distances.csv", &report.to_csv())?;
    write_text(&args.out, "residue_distances.csv", &residue.to_csv())?;
    let summary = json!({
        "rho": report.rho,
        "n_sequences": sequences.len(),
        "n_pairs": report.pairs.len(),
        "residue_rho": residue.rho,
    });
    write_text(
        &args.out,
        "distances.json",
        &format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()),
    )?;
    println!(
        "spearman rho {:.4} over {} pairs",
        report.rho,
        report.pairs.len()
    );
    record_inputs(&mut manifest, &inputs);
    manifest.input("theta", file_sha256(&args.theta)?);
    manifest.config =
        json!({ "max_sequences": args.max_sequences, "gap_penalty": matrix.gap_penalty });
    manifest.finish(&args.out)
}

pub fn cmd_export_embeddings(args: &ExportArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("export-embeddings", 0);
    let inputs = load_inputs(&args.inputs)?;
    let theta = load_theta(&args.theta, &inputs.bundle)?;
    let sequences: Vec<Vec<usize>> = inputs
        .dataset
        .items
        .iter()
        .map(|i| i.sequence.clone())
        .collect();
    let pooled = pooled_embeddings(&theta, &inputs.bundle.matrix, &inputs.model, &sequences)?;
    let ids: Vec<String> = (0..sequences.len()).map(|i| i.to_string()).collect();
    write_text(
        &args.out,
        "embeddings.csv",
        &pooled_embeddings_csv(&ids, &pooled),
    )?;
    println!("exported {} embeddings", pooled.len());
    record_inputs(&mut manifest, &inputs);
    manifest.input("theta", file_sha256(&args.theta)?);
    manifest.finish(&args.out)
}

/// `target\tsource\tcoefficient` lines, largest magnitude first with ties
/// broken by source id.
pub fn inspect_lines(
    theta: &CoefficientMap,
    targets: &Vocabulary,
    sources: &Vocabulary,
    top: Option<usize>,
) -> String {
    let mut out = String::from("target\tsource\tcoefficient\n");
    for (t, row) in theta.rows.iter().enumerate() {
        let mut entries = row.entries().to_vec();
        entries.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        let target = targets
            .token(t)
            .map_or_else(|| t.to_string(), str::to_string);
        for (j, c) in entries.into_iter().take(top.unwrap_or(usize::MAX)) {
            let source = sources
                .token(j)
                .map_or_else(|| j.to_string(), str::to_string);
            out.push_str(&format!("{target}\t{source}\t{c}\n"));
        }
    }
    out
}

pub fn cmd_inspect_theta(args: &InspectArgs) -> CliResult<()> {
    let bundle = load_bundle(&args.source_bundle)?;
    let theta = load_theta(&args.theta, &bundle)?;
    let text = inspect_lines(&theta, &amino_acid_vocabulary(), &bundle.vocab, args.top);
    match &args.out {
        Some(path) => atomic_write(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("synth", args.seed);
    let spec = SourceTaskSpec::default();
    let fixture = source_fixture(&spec)?;
    let vocab = Vocabulary::new((0..spec.vocab).map(|i| format!("tok{i:02}")))?;
    let meta = BundleMeta {
        source_model: "synthetic-sentiment".into(),
        ..BundleMeta::default()
    };
    save_bundle_with_meta(&vocab, &fixture.dictionary, &meta, args.out.join("bundle"))?;
    save_frozen_model(&fixture.model, args.out.join("model"))?;
    let dataset = composition_task(&TargetTaskSpec {
        seed: args.seed,
        ..Default::default()
    });
    write_text(&args.out, "dataset.csv", &dataset.to_csv()?)?;
    println!(
        "synthetic source accuracy {:.4}; wrote bundle/, model/ and dataset.csv",
        fixture.source_accuracy
    );
    manifest.input("source_bundle", fixture.dictionary.content_hash());
    manifest.input("model", fixture.model.param_hash());
    manifest.config = json!({ "source_accuracy": fixture.source_accuracy });
    manifest.finish(&args.out)
}
