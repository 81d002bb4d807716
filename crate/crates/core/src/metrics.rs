//! Recall-based stand-ins for per-bin average precision.

use alloc::vec;
use alloc::vec::Vec;

use crate::categories::{Bin, CategoryTable};
use crate::error::{Error, Result};
use crate::losses::{sigmoid, Label};
use crate::matrix::Matrix;
use crate::model::ClassifierParams;
use crate::synth::ProposalPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Background,
    Category(usize),
}

/// Per-category confidence in `[0, 1]`: sigmoid of the logits, or softmax
/// probabilities (background column dropped) when the model emits `C + 1`
/// logits.
pub fn category_scores(
    params: &ClassifierParams,
    features: &Matrix,
    num_categories: usize,
) -> Result<Matrix> {
    let logits = params.forward(features)?;
    let width = logits.cols();
    if width == num_categories {
        return Ok(logits.map(sigmoid));
    }
    if width != num_categories + 1 {
        return Err(Error::shape("model outputs", num_categories, width));
    }
    let mut scores = Matrix::zeros(logits.rows(), num_categories);
    for (r, z) in logits.iter_rows().enumerate() {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| libm::exp(v - max)).sum();
        for (s, &v) in scores.row_mut(r).iter_mut().zip(z) {
            *s = libm::exp(v - max) / sum;
        }
    }
    Ok(scores)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// Thresholded decision on a score matrix.
pub fn decide(scores: &Matrix, threshold: f64) -> Vec<Decision> {
    scores
        .iter_rows()
        .map(|row| match argmax(row) {
            Some(j) if row[j] >= threshold => Decision::Category(j),
            _ => Decision::Background,
        })
        .collect()
}

/// Background unless the top score reaches `threshold`; otherwise the
/// arg-max category, lowest index on ties.
pub fn predict(
    params: &ClassifierParams,
    features: &Matrix,
    num_categories: usize,
    threshold: f64,
) -> Result<Vec<Decision>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", "must lie in (0, 1)"));
    }
    Ok(decide(
        &category_scores(params, features, num_categories)?,
        threshold,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEval {
    pub category: usize,
    pub bin: Bin,
    pub instances: u64,
    /// Thresholded: correct decisions over instances.
    pub recall: Option<f64>,
    /// Threshold-free: arg-max over categories on the category's own rows.
    pub cls_recall: Option<f64>,
    /// Correct decisions over all rows decided as this category.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub categories: Vec<CategoryEval>,
    pub bin_recall: [Option<f64>; 3],
    pub bin_cls_recall: [Option<f64>; 3],
    pub macro_recall: Option<f64>,
    pub macro_cls_recall: Option<f64>,
    pub bg_as_fg_rate: Option<f64>,
    pub fg_as_bg_rate: Option<f64>,
    /// Categories with no foreground row in the evaluation set.
    pub absent: Vec<usize>,
}

impl EvalReport {
    /// Mean of the rare and common bin means (threshold-free recall).
    pub fn tail_metric(&self) -> Option<f64> {
        mean_of(self.bin_cls_recall[..2].iter().flatten().copied())
    }

    /// Frequent-bin mean (threshold-free recall).
    pub fn head_metric(&self) -> Option<f64> {
        self.bin_cls_recall[Bin::Frequent.index()]
    }

    pub fn overall_metric(&self) -> Option<f64> {
        self.macro_cls_recall
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Evaluation from precomputed scores (`rows × C`) and labels.
pub fn evaluate_scores(
    scores: &Matrix,
    labels: &[Label],
    table: &CategoryTable,
    threshold: f64,
) -> Result<EvalReport> {
    let c = table.num_categories();
    if scores.cols() != c || scores.rows() != labels.len() {
        return Err(Error::shape(
            "scores",
            alloc::format!("{}x{c}", labels.len()),
            alloc::format!("{}x{}", scores.rows(), scores.cols()),
        ));
    }
    let decisions = decide(scores, threshold);
    let mut instances = vec![0u64; c];
    let mut correct = vec![0u64; c];
    let mut cls_correct = vec![0u64; c];
    let mut predicted = vec![0u64; c];
    let (mut bg_rows, mut bg_as_fg, mut fg_rows, mut fg_as_bg) = (0u64, 0u64, 0u64, 0u64);
    for ((label, decision), row) in labels.iter().zip(&decisions).zip(scores.iter_rows()) {
        if let Decision::Category(j) = *decision {
            predicted[j] += 1;
        }
        match *label {
            Label::Background => {
                bg_rows += 1;
                bg_as_fg += u64::from(*decision != Decision::Background);
            }
            Label::Category(gt) => {
                fg_rows += 1;
                instances[gt] += 1;
                match *decision {
                    Decision::Background => fg_as_bg += 1,
                    Decision::Category(j) if j == gt => correct[gt] += 1,
                    Decision::Category(_) => {}
                }
                if argmax(row) == Some(gt) {
                    cls_correct[gt] += 1;
                }
            }
        }
    }

    let categories: Vec<CategoryEval> = (0..c)
        .map(|j| CategoryEval {
            category: j,
            bin: table.bin(j),
            instances: instances[j],
            recall: ratio(correct[j], instances[j]),
            cls_recall: ratio(cls_correct[j], instances[j]),
            precision: ratio(correct[j], predicted[j]),
        })
        .collect();
    let bin_mean = |bin: Bin, pick: fn(&CategoryEval) -> Option<f64>| {
        mean_of(categories.iter().filter(|e| e.bin == bin).filter_map(pick))
    };
    let bin_recall = Bin::ALL.map(|b| bin_mean(b, |e| e.recall));
    let bin_cls_recall = Bin::ALL.map(|b| bin_mean(b, |e| e.cls_recall));
    Ok(EvalReport {
        threshold,
        macro_recall: mean_of(categories.iter().filter_map(|e| e.recall)),
        macro_cls_recall: mean_of(categories.iter().filter_map(|e| e.cls_recall)),
        absent: (0..c).filter(|&j| instances[j] == 0).collect(),
        categories,
        bin_recall,
        bin_cls_recall,
        bg_as_fg_rate: ratio(bg_as_fg, bg_rows),
        fg_as_bg_rate: ratio(fg_as_bg, fg_rows),
    })
}

/// Recall and confusion report of `params` on `eval_pool`, binned by `table`
/// (the training table).
pub fn evaluate(
    params: &ClassifierParams,
    eval_pool: &ProposalPool,
    table: &CategoryTable,
    threshold: f64,
) -> Result<EvalReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", "must lie in (0, 1)"));
    }
    let scores = category_scores(params, eval_pool.features(), table.num_categories())?;
    evaluate_scores(&scores, eval_pool.labels(), table, threshold)
}
