use log::info;
use rayon::prelude::*;

use crate::data::{Dataset, Fold, FoldPlan};
use crate::nn::FusionNet;

use super::metrics::{aggregate, AggregateReport, MetricsReport};
use super::trainer::{evaluate, train, EpochLoss, TrainConfig};
use super::TrainError;

pub struct FoldOutcome {
    pub fold: usize,
    pub report: MetricsReport,
    pub trace: Vec<EpochLoss>,
    pub model: FusionNet,
}

pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub aggregate: AggregateReport,
}

/// Seed used for fold `fold`'s initialization and shuffling.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_fold(dataset: &Dataset, fold: &Fold, cfg: &TrainConfig) -> Result<FoldOutcome, TrainError> {
    let wrap = |e: TrainError| TrainError::Fold {
        fold: fold.index,
        source: Box::new(e),
    };
    let cfg = TrainConfig {
        seed: fold_seed(cfg.seed, fold.index),
        ..cfg.clone()
    };
    let outcome = train(dataset, &fold.train, &cfg).map_err(wrap)?;
    let report = evaluate(&outcome.model, dataset, &fold.test, Some(fold.index)).map_err(wrap)?;
    info!(
        "fold {}: acc {:.4} auc {}",
        fold.index,
        report.accuracy,
        report.auc.map_or("undefined".to_string(), |a| format!("{a:.4}"))
    );
    Ok(FoldOutcome {
        fold: fold.index,
        report,
        trace: outcome.trace,
        model: outcome.model,
    })
}

/// Trains and evaluates one model per fold on at most `workers` threads.
///
/// Every fold owns its tape, model, and RNG streams, so the result does not
/// depend on `workers`.
pub fn cross_validate(
    dataset: &Dataset,
    plan: &FoldPlan,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<CvOutcome, TrainError> {
    cfg.validate()?;
    let folds: Vec<FoldOutcome> = if workers <= 1 {
        plan.folds
            .iter()
            .map(|f| run_fold(dataset, f, cfg))
            .collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TrainError::Pool(e.to_string()))?;
        pool.install(|| {
            plan.folds
                .par_iter()
                .map(|f| run_fold(dataset, f, cfg))
                .collect::<Result<Vec<_>, _>>()
        })?
    };
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    let aggregate = aggregate(&reports).ok_or_else(|| TrainError::InvalidConfig("fold plan has no folds".into()))?;
    Ok(CvOutcome { folds, aggregate })
}
