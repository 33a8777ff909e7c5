use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::nn::{Architecture, FusionConfig, FusionNet};
use crate::objectives::{build_match_matrix, total_loss, LossWeights, MatchMatrix, MatchMode};
use crate::tensor::Tensor;

use super::adam::{Adam, AdamConfig};
use super::metrics::MetricsReport;
use super::TrainError;

/// Keeps the shuffling stream distinct from the initialization stream.
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub match_mode: MatchMode,
    /// When false the alignment term is never built (the no-TMFF baseline).
    pub alignment: bool,
    pub loss: LossWeights,
    pub model: FusionConfig,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            match_mode: MatchMode::Aligned,
            alignment: true,
            loss: LossWeights::default(),
            model: FusionConfig::default(),
            architecture: Architecture::full(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "batch_size = {} must be at least 2",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        self.loss.validate()?;
        self.model.validate()?;
        Architecture::new(
            self.architecture.modalities.clone(),
            self.architecture.ima,
            self.architecture.tcaf,
        )?;
        Ok(())
    }
}

/// Sample-weighted epoch means of the batch losses. `multi` is the
/// unweighted alignment loss, 0 when none is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub task: f64,
    pub multi: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: FusionNet,
    pub trace: Vec<EpochLoss>,
}

/// Consecutive batch ranges of size `batch`; a trailing batch of one sample
/// joins the previous batch, since alignment needs two rows.
pub(crate) fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut ranges: Vec<_> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if ranges.len() > 1 && ranges.last().is_some_and(|r| r.len() == 1) {
        let last = ranges.pop().expect("non-empty");
        ranges.last_mut().expect("two ranges").end = last.end;
    }
    ranges
}

fn check_indices(dataset: &Dataset, indices: &[usize]) -> Result<(), TrainError> {
    match indices.iter().find(|&&i| i >= dataset.len()) {
        Some(&index) => Err(TrainError::IndexOutOfRange {
            index,
            len: dataset.len(),
        }),
        None => Ok(()),
    }
}

/// Mini-batch Adam on `CE + α·L_multi` over the samples in `train_idx`.
pub fn train(dataset: &Dataset, train_idx: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_indices(dataset, train_idx)?;
    if train_idx.len() < 2 {
        return Err(TrainError::InvalidConfig(format!(
            "need at least 2 training samples, got {}",
            train_idx.len()
        )));
    }
    let mut model = FusionNet::new(cfg.model, dataset.widths(), cfg.architecture.clone(), cfg.seed)?;
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order = train_idx.to_vec();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for (b, range) in batch_ranges(order.len(), cfg.batch_size).into_iter().enumerate() {
            let batch = dataset.batch(&order[range]);
            let labels = batch.labels();
            let mut g = Graph::new();
            let p = model.params().bind(&mut g);
            let out = model.forward(&mut g, &p, &batch)?;
            let aligned = if cfg.alignment { &out.aligned[..] } else { &[] };
            let q = if aligned.len() >= 2 {
                build_match_matrix(labels, cfg.match_mode)?
            } else {
                MatchMatrix::aligned(labels.len())
            };
            let terms = total_loss(&mut g, out.logits, labels, aligned, &q, &cfg.loss)?;
            let task = g.value(terms.task).item();
            let multi = terms.multi.map_or(0.0, |m| g.value(m).item());
            let total = g.value(terms.total).item();
            for (which, value) in [("task", task), ("multi", multi), ("total", total)] {
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        which,
                        epoch,
                        batch: b,
                        value,
                    });
                }
            }
            let n = labels.len() as f64;
            sums[0] += task * n;
            sums[1] += multi * n;
            sums[2] += total * n;

            let mut grads = g.backward(terms.total)?;
            let grads: Vec<Option<Tensor>> = p.iter().map(|&v| grads.take(v)).collect();
            adam.step(model.params_mut(), &grads)?;
        }
        let n = order.len() as f64;
        let entry = EpochLoss {
            epoch,
            task: sums[0] / n,
            multi: sums[1] / n,
            total: sums[2] / n,
        };
        debug!(
            "epoch {epoch}: task {:.6} multi {:.6} total {:.6}",
            entry.task, entry.multi, entry.total
        );
        trace.push(entry);
    }
    Ok(TrainOutcome { model, trace })
}

/// Class-1 probabilities and argmax predictions for `indices`.
pub fn predict_scores(model: &FusionNet, dataset: &Dataset, indices: &[usize]) -> Result<(Vec<f64>, Vec<usize>), TrainError> {
    check_indices(dataset, indices)?;
    let mut scores = Vec::with_capacity(indices.len());
    let mut predicted = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let probs = model.predict_proba(&dataset.batch(chunk))?;
        for i in 0..chunk.len() {
            let row = probs.row(i);
            let best = (1..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            scores.push(row[1]);
            predicted.push(best);
        }
    }
    Ok((scores, predicted))
}

pub fn evaluate(
    model: &FusionNet,
    dataset: &Dataset,
    indices: &[usize],
    fold: Option<usize>,
) -> Result<MetricsReport, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyEvaluation);
    }
    let (scores, predicted) = predict_scores(model, dataset, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples()[i].label as usize).collect();
    Ok(MetricsReport::from_scores(fold, &scores, &predicted, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remainder_of_one_joins_previous_batch() {
        assert_eq!(batch_ranges(17, 8), vec![0..8, 8..17]);
        assert_eq!(batch_ranges(18, 8), vec![0..8, 8..16, 16..18]);
        assert_eq!(batch_ranges(16, 8), vec![0..8, 8..16]);
        assert_eq!(batch_ranges(3, 8), vec![0..3]);
        for n in 2..60 {
            let r = batch_ranges(n, 4);
            assert!(r.iter().all(|r| r.len() >= 2));
            assert_eq!(r.iter().map(|r| r.len()).sum::<usize>(), n);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
