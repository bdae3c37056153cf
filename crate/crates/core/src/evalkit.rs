//! Metrics and the subset-enumerating evaluation protocol.
//!
//! A fully observed test set is re-masked to every non-empty modality subset
//! in ascending bit order; each subset yields accuracy, macro-F1, per-class
//! F1 and macro one-vs-rest AUC. Predicted classes are argmaxes with ties
//! broken towards the lowest index, and a class whose F1 denominator is zero
//! scores 0.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::encoders::{ModalityMask, Sample};
use crate::error::{Error, Result};
use crate::model::{predict_samples, Inference, ModelParams};
use crate::rng::stream;

/// Largest modality count [`evaluate_all`] will enumerate.
pub const MAX_ENUMERATED_MODALITIES: usize = 8;

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `confusion[true][predicted]`.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

/// Per-class F1 from a confusion matrix; `2TP / (2TP + FP + FN)`, or 0 when
/// the class is never predicted and never present.
pub fn f1_from_confusion(confusion: &[Vec<usize>]) -> Vec<f64> {
    let c = confusion.len();
    (0..c)
        .map(|k| {
            let tp = confusion[k][k];
            let fn_: usize = confusion[k].iter().sum::<usize>() - tp;
            let fp: usize = (0..c).map(|r| confusion[r][k]).sum::<usize>() - tp;
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

/// Rank-based AUC of `scores` for the positive set. `None` without both
/// positives and negatives. Ties receive midranks.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    // U = R − p(p+1)/2, all doubled.
    let twice_u = twice_rank_sum - p * (p + 1);
    Some(twice_u as f64 / (2 * p * n) as f64)
}

/// Macro one-vs-rest AUC over the classes that have both positives and
/// negatives; `None` when no class qualifies.
pub fn auc(scores: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let num_classes = scores.first().map_or(0, Vec::len);
    let per_class: Vec<f64> = (0..num_classes)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auc(&s, &pos)
        })
        .collect();
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub auc: Option<f64>,
}

impl ClassificationMetrics {
    pub fn from_probabilities(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Self {
        assert_eq!(probs.len(), labels.len());
        let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let confusion = confusion_matrix(&predicted, labels, num_classes);
        let per_class_f1 = f1_from_confusion(&confusion);
        let n = labels.len();
        let correct = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
        Self {
            n,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            macro_f1: per_class_f1.iter().sum::<f64>() / num_classes as f64,
            per_class_f1,
            auc: auc(probs, labels),
        }
    }
}

/// Anything that maps samples (re-masked to `mask`) to class probabilities.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn num_modalities(&self) -> usize;
    fn predict(&self, samples: &[Sample], mask: ModalityMask, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>>;
}

/// A trained model under a fixed inference mode.
pub struct ModelPredictor<'a> {
    pub params: &'a ModelParams,
    pub inference: Inference,
}

impl Predictor for ModelPredictor<'_> {
    fn num_classes(&self) -> usize {
        self.params.config.num_classes
    }

    fn num_modalities(&self) -> usize {
        self.params.config.num_modalities()
    }

    fn predict(&self, samples: &[Sample], mask: ModalityMask, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        predict_samples(self.params, samples, Some(mask), self.inference, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetReport {
    pub mask: ModalityMask,
    pub n: usize,
    pub acc: f64,
    pub macro_f1: f64,
    pub auc: Option<f64>,
    pub per_class_f1: Vec<f64>,
}

/// Score `predictor` on the test set with every sample re-masked to `mask`.
pub fn evaluate_subset(
    predictor: &dyn Predictor,
    test: &[Sample],
    mask: ModalityMask,
    rng: &mut ChaCha8Rng,
) -> Result<SubsetReport> {
    let m = predictor.num_modalities();
    if mask.is_empty() {
        return Err(Error::Protocol("cannot evaluate the empty modality subset".into()));
    }
    if mask.len() != m {
        return Err(Error::Protocol(format!("mask {mask} does not cover {m} modalities")));
    }
    let full = ModalityMask::full(m);
    if let Some(s) = test.iter().find(|s| s.mask() != full) {
        return Err(Error::Protocol(format!("test sample {} is not fully observed", s.id)));
    }
    let probs = predictor.predict(test, mask, rng)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let metrics = ClassificationMetrics::from_probabilities(&probs, &labels, predictor.num_classes());
    Ok(SubsetReport {
        mask,
        n: metrics.n,
        acc: metrics.accuracy,
        macro_f1: metrics.macro_f1,
        auc: metrics.auc,
        per_class_f1: metrics.per_class_f1,
    })
}

/// Metrics averaged over subsets (or over seeds).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSet {
    pub acc: f64,
    pub macro_f1: f64,
    /// Mean over the entries that have an AUC.
    pub auc: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

fn average_reports(reports: &[SubsetReport]) -> MetricSet {
    let acc: Vec<f64> = reports.iter().map(|r| r.acc).collect();
    let f1: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    MetricSet {
        acc: mean(&acc),
        macro_f1: mean(&f1),
        auc: (!aucs.is_empty()).then(|| mean(&aucs)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<SubsetReport>,
    /// Unweighted mean over `reports`.
    pub average: MetricSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub runs: Vec<SeedRun>,
    pub mean: MetricSet,
    pub std: MetricSet,
}

impl EvalSummary {
    /// Combine runs; used both for evaluation seeds and for training seeds.
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let (acc_m, acc_s) = mean_std(&runs.iter().map(|r| r.average.acc).collect::<Vec<_>>());
        let (f1_m, f1_s) = mean_std(&runs.iter().map(|r| r.average.macro_f1).collect::<Vec<_>>());
        let aucs: Vec<f64> = runs.iter().filter_map(|r| r.average.auc).collect();
        let auc = (!aucs.is_empty()).then(|| mean_std(&aucs));
        Self {
            mean: MetricSet {
                acc: acc_m,
                macro_f1: f1_m,
                auc: auc.map(|a| a.0),
            },
            std: MetricSet {
                acc: acc_s,
                macro_f1: f1_s,
                auc: auc.map(|a| a.1),
            },
            runs,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }
}

/// Evaluate one seed over every non-empty subset.
pub fn evaluate_seed(predictor: &dyn Predictor, test: &[Sample], seed: u64) -> Result<SeedRun> {
    let m = predictor.num_modalities();
    if m > MAX_ENUMERATED_MODALITIES {
        return Err(Error::Protocol(format!(
            "subset enumeration is capped at {MAX_ENUMERATED_MODALITIES} modalities, got {m}"
        )));
    }
    let reports = ModalityMask::all_nonempty(m)
        .into_iter()
        .map(|mask| {
            let mut rng = stream(seed, "eval", u64::from(mask.bits()));
            evaluate_subset(predictor, test, mask, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedRun {
        seed,
        average: average_reports(&reports),
        reports,
    })
}

/// Evaluate every subset for each seed in `seeds` and aggregate.
pub fn evaluate_all(predictor: &dyn Predictor, test: &[Sample], seeds: &[u64]) -> Result<EvalSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    let runs = seeds
        .iter()
        .map(|&s| evaluate_seed(predictor, test, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_runs(runs))
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// `63.9 (0.4)`: percentages with one decimal.
pub fn percent_cell(mean: f64, std: f64) -> String {
    format!("{:.1} ({:.1})", 100.0 * mean, 100.0 * std)
}

fn percent_opt(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => percent_cell(m, s),
        _ => "NA".into(),
    }
}

/// Tab-separated report: one row per (seed, mask), then a summary block.
pub fn report_tsv(summary: &EvalSummary, num_classes: usize) -> String {
    let mut out = String::new();
    let mut header = vec!["seed", "mask", "n", "acc", "macro_f1", "auc"].join("\t");
    for c in 0..num_classes {
        let _ = write!(header, "\tf1_c{c}");
    }
    let _ = writeln!(out, "{header}");
    for run in &summary.runs {
        for r in &run.reports {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                run.seed, r.mask, r.n, r.acc, r.macro_f1, opt(r.auc)
            );
            for f in &r.per_class_f1 {
                let _ = write!(out, "\t{f:.6}");
            }
            out.push('\n');
        }
    }
    out.push('\n');
    let _ = writeln!(out, "summary\tmetric\tmean\tstd\tpercent");
    let m = &summary.mean;
    let s = &summary.std;
    let _ = writeln!(out, "summary\tacc\t{:.6}\t{:.6}\t{}", m.acc, s.acc, percent_cell(m.acc, s.acc));
    let _ = writeln!(
        out,
        "summary\tmacro_f1\t{:.6}\t{:.6}\t{}",
        m.macro_f1,
        s.macro_f1,
        percent_cell(m.macro_f1, s.macro_f1)
    );
    let _ = writeln!(
        out,
        "summary\tauc\t{}\t{}\t{}",
        opt(m.auc),
        opt(s.auc),
        percent_opt(m.auc, s.auc)
    );
    out
}

fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<width$}", width = widths[c]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Human-readable table: per-subset `mean (std)` over seeds, then the average row.
pub fn report_table(summary: &EvalSummary) -> String {
    let mut rows = vec![vec![
        "subset".to_string(),
        "n".into(),
        "ACC".into(),
        "Macro-F1".into(),
        "AUC".into(),
    ]];
    let Some(first) = summary.runs.first() else {
        return aligned(&rows);
    };
    for (i, r) in first.reports.iter().enumerate() {
        let per_seed: Vec<&SubsetReport> = summary.runs.iter().map(|run| &run.reports[i]).collect();
        let (am, as_) = mean_std(&per_seed.iter().map(|r| r.acc).collect::<Vec<_>>());
        let (fm, fs) = mean_std(&per_seed.iter().map(|r| r.macro_f1).collect::<Vec<_>>());
        let aucs: Vec<f64> = per_seed.iter().filter_map(|r| r.auc).collect();
        let auc_cell = if aucs.len() == per_seed.len() {
            let (m, s) = mean_std(&aucs);
            percent_cell(m, s)
        } else {
            "NA".into()
        };
        rows.push(vec![
            r.mask.to_string(),
            r.n.to_string(),
            percent_cell(am, as_),
            percent_cell(fm, fs),
            auc_cell,
        ]);
    }
    rows.push(vec![
        "average".into(),
        String::new(),
        percent_cell(summary.mean.acc, summary.std.acc),
        percent_cell(summary.mean.macro_f1, summary.std.macro_f1),
        percent_opt(summary.mean.auc, summary.std.auc),
    ]);
    aligned(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &p) in positive.iter().enumerate() {
            for (j, &q) in positive.iter().enumerate() {
                if p && !q {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
    }

    #[test]
    fn auc_examples() {
        let pos = [false, false, true, true];
        assert_eq!(binary_auc(&[0.1, 0.2, 0.3, 0.4], &pos), Some(1.0));
        assert_eq!(binary_auc(&[0.4, 0.3, 0.2, 0.1], &pos), Some(0.0));
        assert_eq!(binary_auc(&[0.5; 4], &pos), Some(0.5));
        assert_eq!(binary_auc(&[0.1, 0.2], &[true, true]), None);
        let s = [0.3, 0.3, 0.1, 0.9, 0.3];
        let p = [true, false, false, true, false];
        assert_eq!(binary_auc(&s, &p), pairwise_auc(&s, &p));
    }

    #[test]
    fn single_class_labels_have_no_auc() {
        let scores = vec![vec![0.5, 0.5]; 3];
        assert_eq!(auc(&scores, &[1, 1, 1]), None);
    }

    #[test]
    fn metrics_bounds_and_definitions() {
        let probs = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
            vec![0.6, 0.3, 0.1],
        ];
        let labels = [0, 1, 2, 1];
        let m = ClassificationMetrics::from_probabilities(&probs, &labels, 3);
        assert_eq!(m.accuracy, 0.75);
        // class 0: tp1 fp1 fn0 → 2/3; class 1: tp1 fn1 → 2/3; class 2: 1.
        assert_eq!(m.per_class_f1, vec![2.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!((m.macro_f1 - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn summary_formatting() {
        assert_eq!(percent_cell(0.639, 0.004), "63.9 (0.4)");
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
