use serde::{Deserialize, Serialize};

/// Binary confusion counts with label 1 as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[usize], labels: &[usize]) -> Self {
        assert_eq!(predicted.len(), labels.len());
        let mut c = Confusion::default();
        for (&p, &l) in predicted.iter().zip(labels) {
            match (p == 1, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic on average ranks,
/// so tied scores count one half. `None` when only one class is present.
pub fn auc_rank(scores: &[f64], labels: &[usize]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold: Option<usize>,
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` (JSON `null`) when the evaluated set holds a single class.
    pub auc: Option<f64>,
    #[serde(flatten)]
    pub confusion: Confusion,
}

impl MetricsReport {
    /// `scores` are class-1 probabilities; predictions are the argmax, so a
    /// sample is positive when its class-1 probability is strictly larger.
    pub fn from_scores(fold: Option<usize>, scores: &[f64], predicted: &[usize], labels: &[usize]) -> Self {
        let confusion = Confusion::from_predictions(predicted, labels);
        Self {
            fold,
            n: labels.len(),
            accuracy: confusion.accuracy(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            f1: confusion.f1(),
            auc: auc_rank(scores, labels),
            confusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub accuracy: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
    /// Over the folds where AUC is defined; `None` if it never is.
    pub auc: Option<Summary>,
    pub auc_folds: usize,
}

/// Mean ± standard deviation of each metric across fold reports.
pub fn aggregate(reports: &[MetricsReport]) -> Option<AggregateReport> {
    let pick = |f: fn(&MetricsReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    Some(AggregateReport {
        folds: reports.len(),
        accuracy: pick(|r| r.accuracy)?,
        precision: pick(|r| r.precision)?,
        recall: pick(|r| r.recall)?,
        f1: pick(|r| r.f1)?,
        auc: Summary::of(&aucs),
        auc_folds: aucs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc_rank(&[0.9, 0.8, 0.3], &[1, 0, 1]), Some(0.5));
        assert_eq!(auc_rank(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), Some(1.0));
        assert_eq!(auc_rank(&[0.5, 0.5], &[0, 1]), Some(0.5));
        assert_eq!(auc_rank(&[0.1, 0.2], &[1, 1]), None);
    }

    #[test]
    fn perfect_predictions() {
        let r = MetricsReport::from_scores(None, &[0.9, 0.1, 0.7], &[1, 0, 1], &[1, 0, 1]);
        assert_eq!((r.accuracy, r.f1, r.auc), (1.0, 1.0, Some(1.0)));
        assert_eq!(r.confusion.total(), 3);
    }

    #[test]
    fn f1_zero_without_positives_predicted() {
        let c = Confusion::from_predictions(&[0, 0], &[1, 0]);
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn aggregate_means() {
        let mk = |acc: f64, auc: Option<f64>| MetricsReport {
            fold: None,
            n: 1,
            accuracy: acc,
            precision: acc,
            recall: acc,
            f1: acc,
            auc,
            confusion: Confusion::default(),
        };
        let agg = aggregate(&[mk(0.5, Some(1.0)), mk(1.0, None)]).unwrap();
        assert_eq!(agg.accuracy.mean, 0.75);
        assert!((agg.accuracy.std - 0.125f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg.auc, Some(Summary { mean: 1.0, std: 0.0 }));
        assert_eq!(agg.auc_folds, 1);
        assert!(aggregate(&[]).is_none());
    }

    #[test]
    fn report_json_uses_null_for_undefined_auc() {
        let r = MetricsReport::from_scores(Some(0), &[0.2], &[0], &[0]);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"auc\":null"), "{json}");
        assert!(json.contains("\"fn\":0"), "{json}");
    }
}
