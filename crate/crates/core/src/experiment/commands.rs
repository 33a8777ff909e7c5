use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{restore_checkpoint, save_checkpoint};
use crate::data::{
    dataset_digest, generate, load_dataset, make_folds, save_dataset, write_atomic, Dataset, FoldPlan, Modality,
};
use crate::error::{Error, Result};
use crate::nn::{Architecture, FusionNet};
use crate::train::{aggregate, cross_validate, evaluate, fold_seed, AggregateReport, EpochLoss, MetricsReport, Summary};

use super::config::{Protocol, RunConfig};
use super::gradcheck::{run_gradcheck_suite, SuiteReport};

pub const DATASET_FILE: &str = "dataset.tmds";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EVAL_METRICS_JSONL: &str = "eval_metrics.jsonl";
pub const EVAL_METRICS_CSV: &str = "eval_metrics.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const GRADCHECK_JSON: &str = "gradcheck.json";

pub fn checkpoint_file(fold: usize) -> String {
    format!("checkpoint_fold{fold}.ckpt")
}

pub fn trace_file(fold: usize) -> String {
    format!("trace_fold{fold}.csv")
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out.as_path();
    if !out.is_dir() {
        return Err(Error::OutputDir(out.to_path_buf()));
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn manifest(command: &str, cfg: &RunConfig, extra: serde_json::Value, artifacts: &[String]) -> serde_json::Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
        "details": extra,
        "artifacts": artifacts,
    })
}

/// Source description recorded in manifests.
fn dataset_info(cfg: &RunConfig, data: &Dataset) -> serde_json::Value {
    let source = match &cfg.dataset.path {
        Some(p) => json!({ "path": p }),
        None => json!({ "spec": cfg.dataset.spec }),
    };
    json!({
        "source": source,
        "samples": data.len(),
        "positives": data.positives(),
        "widths": data.widths(),
        "sha256": dataset_digest(data),
    })
}

/// Loads `dataset.path` or generates `dataset.spec` in memory.
pub fn resolve_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.dataset.path, &cfg.dataset.spec) {
        (Some(p), None) => Ok(load_dataset(p)?),
        (None, Some(spec)) => Ok(generate(spec)?.dataset),
        _ => Err(super::ConfigError::Missing("dataset (exactly one of path or spec)".into()).into()),
    }
}

pub fn fold_plan(cfg: &RunConfig, data: &Dataset) -> Result<FoldPlan> {
    Ok(make_folds(data.len(), &data.labels(), cfg.train.folds, cfg.seed, cfg.train.stratified)?)
}

pub struct GenerateOutput {
    pub path: PathBuf,
    pub digest: String,
    pub samples: usize,
}

/// Writes `dataset.tmds` and `manifest.json` into the output directory.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateOutput> {
    cfg.validate()?;
    let spec = cfg
        .dataset
        .spec
        .as_ref()
        .ok_or_else(|| super::ConfigError::Missing("dataset.spec".into()))?;
    let out = out_dir(cfg)?;
    let data = generate(spec)?.dataset;
    let path = out.join(DATASET_FILE);
    save_dataset(&data, &path)?;
    let digest = dataset_digest(&data);
    let details = json!({ "dataset": dataset_info(cfg, &data), "file": DATASET_FILE });
    write_json(
        &out.join(MANIFEST_FILE),
        &manifest("generate", cfg, details, &[DATASET_FILE.to_string()]),
    )?;
    info!("wrote {} samples to {}", data.len(), path.display());
    Ok(GenerateOutput {
        path,
        digest,
        samples: data.len(),
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn metrics_jsonl(reports: &[MetricsReport], agg: &AggregateReport) -> Result<String> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    text.push_str(&serde_json::to_string(&json!({ "aggregate": agg }))?);
    text.push('\n');
    Ok(text)
}

/// Columns follow the usual results table: ACC, precision, recall, F1, AUC,
/// then confusion counts; trailing `mean` and `std` rows.
fn metrics_csv(reports: &[MetricsReport], agg: &AggregateReport) -> String {
    let mut text = String::from("fold,accuracy,precision,recall,f1,auc,tp,fp,tn,fn\n");
    for r in reports {
        let c = r.confusion;
        let fold = r.fold.map(|f| f.to_string()).unwrap_or_default();
        let _ = writeln!(
            text,
            "{fold},{},{},{},{},{},{},{},{},{}",
            fmt_f(r.accuracy),
            fmt_f(r.precision),
            fmt_f(r.recall),
            fmt_f(r.f1),
            fmt_opt(r.auc),
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        );
    }
    type Pick = fn(&Summary) -> f64;
    let rows: [(&str, Pick); 2] = [("mean", |s| s.mean), ("std", |s| s.std)];
    for (label, pick) in rows {
        let _ = writeln!(
            text,
            "{label},{},{},{},{},{},,,,",
            fmt_f(pick(&agg.accuracy)),
            fmt_f(pick(&agg.precision)),
            fmt_f(pick(&agg.recall)),
            fmt_f(pick(&agg.f1)),
            fmt_opt(agg.auc.as_ref().map(pick))
        );
    }
    text
}

fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut text = String::from("epoch,task,multi,total\n");
    for e in trace {
        let _ = writeln!(text, "{},{},{},{}", e.epoch, e.task, e.multi, e.total);
    }
    text
}

pub struct TrainRunOutput {
    pub reports: Vec<MetricsReport>,
    pub aggregate: AggregateReport,
    pub traces: Vec<Vec<EpochLoss>>,
    pub artifacts: Vec<PathBuf>,
}

/// Cross-validates the configured architecture and writes checkpoints,
/// metrics, loss traces, the fold plan, and a manifest.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRunOutput> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let data = resolve_dataset(cfg)?;
    let plan = fold_plan(cfg, &data)?;
    let cv = cross_validate(&data, &plan, &cfg.train_config(), cfg.workers)?;

    let mut names = vec![FOLDS_FILE.to_string()];
    write_json(&out.join(FOLDS_FILE), &plan)?;
    for f in &cv.folds {
        save_checkpoint(f.model.params(), &out.join(checkpoint_file(f.fold)))?;
        write_text(&out.join(trace_file(f.fold)), &trace_csv(&f.trace))?;
        names.push(checkpoint_file(f.fold));
        names.push(trace_file(f.fold));
    }
    let reports: Vec<MetricsReport> = cv.folds.iter().map(|f| f.report.clone()).collect();
    write_text(&out.join(METRICS_JSONL), &metrics_jsonl(&reports, &cv.aggregate)?)?;
    write_text(&out.join(METRICS_CSV), &metrics_csv(&reports, &cv.aggregate))?;
    names.push(METRICS_JSONL.into());
    names.push(METRICS_CSV.into());
    let details = json!({
        "dataset": dataset_info(cfg, &data),
        "parameters": cv.folds.first().map(|f| f.model.params().num_scalars()),
        "fold_seeds": plan.folds.iter().map(|f| fold_seed(cfg.seed, f.index)).collect::<Vec<_>>(),
    });
    write_json(&out.join(MANIFEST_FILE), &manifest("train", cfg, details, &names))?;
    info!(
        "mean accuracy {:.4} ± {:.4}",
        cv.aggregate.accuracy.mean, cv.aggregate.accuracy.std
    );
    Ok(TrainRunOutput {
        traces: cv.folds.iter().map(|f| f.trace.clone()).collect(),
        reports,
        aggregate: cv.aggregate,
        artifacts: names.iter().map(|n| out.join(n)).collect(),
    })
}

pub struct EvaluateOutput {
    pub reports: Vec<MetricsReport>,
    pub aggregate: AggregateReport,
}

/// Re-evaluates the per-fold checkpoints in the output directory on their
/// test folds, rebuilding the fold plan from the same config.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluateOutput> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let data = resolve_dataset(cfg)?;
    let plan = fold_plan(cfg, &data)?;
    let mut reports = Vec::with_capacity(plan.folds.len());
    for fold in &plan.folds {
        let mut model = FusionNet::new(
            cfg.model,
            data.widths(),
            cfg.architecture.clone(),
            fold_seed(cfg.seed, fold.index),
        )?;
        restore_checkpoint(model.params_mut(), &out.join(checkpoint_file(fold.index)))?;
        reports.push(evaluate(&model, &data, &fold.test, Some(fold.index))?);
    }
    let agg = aggregate(&reports).expect("at least two folds");
    write_text(&out.join(EVAL_METRICS_JSONL), &metrics_jsonl(&reports, &agg)?)?;
    write_text(&out.join(EVAL_METRICS_CSV), &metrics_csv(&reports, &agg))?;
    let names = [EVAL_METRICS_JSONL.to_string(), EVAL_METRICS_CSV.to_string()];
    write_json(
        &out.join("eval_manifest.json"),
        &manifest("evaluate", cfg, json!({ "dataset": dataset_info(cfg, &data) }), &names),
    )?;
    Ok(EvaluateOutput {
        reports,
        aggregate: agg,
    })
}

/// One cell of an ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub protocol: Protocol,
    pub setting: String,
    pub modalities: Vec<Modality>,
    pub ima: bool,
    pub tcaf: bool,
    pub lambda: f64,
    pub alpha: f64,
    pub parameters: usize,
    pub aggregate: AggregateReport,
}

/// The cells each protocol expands to, before running anything.
pub fn ablation_cells(cfg: &RunConfig) -> Vec<(Protocol, String, RunConfig)> {
    let mut cells = Vec::new();
    let a = &cfg.ablation;
    for &protocol in &a.protocols {
        match protocol {
            Protocol::Modality => {
                for subset in &a.modality_subsets {
                    let mut c = cfg.clone();
                    c.architecture = Architecture {
                        modalities: subset.clone(),
                        ima: cfg.architecture.ima,
                        tcaf: true,
                    };
                    let label = subset.iter().map(|m| m.name()).collect::<Vec<_>>().join("+");
                    cells.push((protocol, label, c));
                }
            }
            Protocol::Modules => {
                for s in &a.module_grid {
                    let mut c = cfg.clone();
                    c.architecture = Architecture {
                        modalities: Modality::ALL.to_vec(),
                        ima: s.ima,
                        tcaf: s.tcaf,
                    };
                    let on = |b: bool| if b { "on" } else { "off" };
                    cells.push((protocol, format!("ima={} tcaf={}", on(s.ima), on(s.tcaf)), c));
                }
            }
            Protocol::Lambda => {
                for &lambda in &a.lambdas {
                    let mut c = cfg.clone();
                    c.architecture = Architecture::full();
                    c.loss.lambda = lambda;
                    cells.push((protocol, format!("lambda={lambda}"), c));
                }
                if a.baseline {
                    let mut c = cfg.clone();
                    c.architecture = Architecture::full();
                    c.loss.alpha = 0.0;
                    cells.push((protocol, "alpha=0".into(), c));
                }
            }
        }
    }
    cells
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut text = String::from(
        "protocol,setting,modalities,ima,tcaf,lambda,alpha,parameters,\
         accuracy,accuracy_std,precision,precision_std,recall,recall_std,f1,f1_std,auc,auc_std\n",
    );
    for r in rows {
        let a = &r.aggregate;
        let protocol = serde_json::to_value(r.protocol).expect("enum serializes");
        let mods = r.modalities.iter().map(|m| m.name()).collect::<Vec<_>>().join("+");
        let _ = writeln!(
            text,
            "{},{},{mods},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            protocol.as_str().unwrap_or_default(),
            r.setting,
            r.ima,
            r.tcaf,
            r.lambda,
            r.alpha,
            r.parameters,
            a.accuracy.mean,
            a.accuracy.std,
            a.precision.mean,
            a.precision.std,
            a.recall.mean,
            a.recall.std,
            a.f1.mean,
            a.f1.std,
            fmt_opt(a.auc.map(|s| s.mean)),
            fmt_opt(a.auc.map(|s| s.std)),
        );
    }
    text
}

pub struct AblationOutput {
    pub rows: Vec<AblationRow>,
}

/// Runs every ablation cell as a full cross-validation on the same dataset
/// and folds, then writes `ablation.csv` and a manifest.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationOutput> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let data = resolve_dataset(cfg)?;
    let plan = fold_plan(cfg, &data)?;
    let mut rows = Vec::new();
    for (protocol, setting, cell) in ablation_cells(cfg) {
        info!("ablation cell {setting}");
        let cv = cross_validate(&data, &plan, &cell.train_config(), cfg.workers)?;
        rows.push(AblationRow {
            protocol,
            setting,
            modalities: cell.architecture.modalities.clone(),
            ima: cell.architecture.ima,
            tcaf: cell.architecture.tcaf,
            lambda: cell.loss.lambda,
            alpha: cell.loss.alpha,
            parameters: cv.folds[0].model.params().num_scalars(),
            aggregate: cv.aggregate,
        });
    }
    write_text(&out.join(ABLATION_CSV), &ablation_csv(&rows))?;
    let details = json!({ "dataset": dataset_info(cfg, &data), "rows": rows });
    write_json(
        &out.join(MANIFEST_FILE),
        &manifest("ablate", cfg, details, &[ABLATION_CSV.to_string()]),
    )?;
    Ok(AblationOutput { rows })
}

/// Runs the gradient-check suite and writes `gradcheck.json`; any failed
/// check becomes [`Error::GradCheckFailed`] after the report is written.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let report = run_gradcheck_suite(&cfg.gradcheck, cfg.seed)?;
    write_json(&out.join(GRADCHECK_JSON), &report)?;
    if !report.passed {
        return Err(Error::GradCheckFailed {
            failed: report.failures().iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(report)
}
