//! Weighted sigmoid cross-entropy and the weight rules that distinguish the
//! loss family, plus a softmax cross-entropy baseline.
//!
//! Every sigmoid variant computes
//!
//! ```text
//! L = (1/N) Σ_r Σ_j −w_rj · log p̂_rj,   p̂ = σ(z) if y = 1 else 1 − σ(z)
//! ∂L/∂z_rj = w_rj · (σ(z_rj) − y_rj) / N
//! ```
//!
//! and only the weight matrix `w` changes between variants. Weights are
//! constants with respect to differentiation, including the BEQL weights that
//! are themselves functions of `σ(z)`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::categories::{Bin, CategoryTable};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Lower clamp for probabilities entering a logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Ground truth of one proposal row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Background,
    Category(usize),
}

impl Label {
    #[inline]
    pub fn category(self) -> Option<usize> {
        match self {
            Label::Category(c) => Some(c),
            Label::Background => None,
        }
    }

    /// `E(r)`.
    #[inline]
    pub fn is_foreground(self) -> bool {
        matches!(self, Label::Category(_))
    }
}

/// Logits together with the row labels they are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    logits: Matrix,
    labels: Vec<Label>,
}

impl LogitsBatch {
    /// Foreground labels must index a column of `logits`.
    pub fn new(logits: Matrix, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != logits.rows() {
            return Err(Error::shape("labels", logits.rows(), labels.len()));
        }
        if let Some(bad) = labels
            .iter()
            .filter_map(|l| l.category())
            .find(|&c| c >= logits.cols())
        {
            return Err(Error::invalid(
                "labels",
                format!("category {bad} out of range for {} logits", logits.cols()),
            ));
        }
        Ok(LogitsBatch { logits, labels })
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn rows(&self) -> usize {
        self.logits.rows()
    }

    pub fn cols(&self) -> usize {
        self.logits.cols()
    }

    /// `y_rj`.
    #[inline]
    pub fn target(&self, row: usize, category: usize) -> f64 {
        if self.labels[row] == Label::Category(category) {
            1.0
        } else {
            0.0
        }
    }

    pub fn into_parts(self) -> (Matrix, Vec<Label>) {
        (self.logits, self.labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    weights: Matrix,
}

impl WeightMatrix {
    pub fn ones(rows: usize, cols: usize) -> Self {
        WeightMatrix {
            weights: Matrix::filled(rows, cols, 1.0),
        }
    }

    /// Entries must lie in `[0, 1]`.
    pub fn from_matrix(weights: Matrix) -> Result<Self> {
        if let Some(w) = weights
            .as_slice()
            .iter()
            .find(|w| !(0.0..=1.0).contains(*w))
        {
            return Err(Error::invalid("weights", format!("{w} outside [0, 1]")));
        }
        Ok(WeightMatrix { weights })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.weights
    }

    #[inline]
    pub fn get(&self, row: usize, category: usize) -> f64 {
        self.weights[(row, category)]
    }
}

/// Bernoulli keep probabilities for background cells of tail and frequent
/// categories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuPair {
    pub mu_tail: f64,
    pub mu_freq: f64,
}

impl MuPair {
    pub fn new(mu_tail: f64, mu_freq: f64) -> Result<Self> {
        for (name, p) in [("mu_tail", mu_tail), ("mu_freq", mu_freq)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} is not a probability")));
            }
        }
        Ok(MuPair { mu_tail, mu_freq })
    }

    #[inline]
    fn for_tail(&self, tail: bool) -> f64 {
        if tail {
            self.mu_tail
        } else {
            self.mu_freq
        }
    }
}

/// Foreground occurrences in a batch, counted per bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BinCounts {
    pub rare: u64,
    pub common: u64,
    pub frequent: u64,
}

impl BinCounts {
    pub fn of_labels(labels: &[Label], table: &CategoryTable) -> Self {
        let mut counts = BinCounts::default();
        for c in labels.iter().filter_map(|l| l.category()) {
            match table.bin(c) {
                Bin::Rare => counts.rare += 1,
                Bin::Common => counts.common += 1,
                Bin::Frequent => counts.frequent += 1,
            }
        }
        counts
    }

    pub fn all(&self) -> u64 {
        self.rare + self.common + self.frequent
    }

    pub fn get(&self, bin: Bin) -> u64 {
        match bin {
            Bin::Rare => self.rare,
            Bin::Common => self.common,
            Bin::Frequent => self.frequent,
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `(σ(z), σ(−z))` from a single exponential.
#[inline]
fn sigmoid_pair(z: f64) -> (f64, f64) {
    let e = libm::exp(-z.abs());
    let big = 1.0 / (1.0 + e);
    let small = e / (1.0 + e);
    if z >= 0.0 {
        (big, small)
    } else {
        (small, big)
    }
}

/// Loss value and gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Matrix,
}

/// Mean-over-rows weighted sigmoid cross-entropy.
pub fn weighted_bce(batch: &LogitsBatch, weights: &WeightMatrix) -> Result<LossGrad> {
    let (n, c) = batch.logits.shape();
    if weights.weights.shape() != (n, c) {
        return Err(Error::shape(
            "weights",
            format!("{n}x{c}"),
            format!("{}x{}", weights.weights.rows(), weights.weights.cols()),
        ));
    }
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for r in 0..n {
        let target = batch.labels[r].category();
        let z = batch.logits.row(r);
        let w = weights.weights.row(r);
        let g = grad.row_mut(r);
        for j in 0..c {
            if w[j] == 0.0 {
                continue;
            }
            let positive = target == Some(j);
            let (p, q) = sigmoid_pair(z[j]);
            // p̂ = σ(z) for the target, σ(−z) = 1 − σ(z) otherwise.
            let p_hat = if positive { p } else { q };
            loss -= w[j] * libm::log(p_hat.max(PROB_EPS));
            let y = if positive { 1.0 } else { 0.0 };
            g[j] = w[j] * (p - y) * scale;
        }
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad,
    })
}

/// Weights shared by every rule on foreground rows:
/// `w_j = 1 − T_λ(f_j)(1 − y_j)`. Background rows are left at 1.
pub fn eql_weights(batch: &LogitsBatch, table: &CategoryTable) -> Result<WeightMatrix> {
    check_categories(batch, table)?;
    let (n, c) = batch.logits.shape();
    let mut w = Matrix::filled(n, c, 1.0);
    let tail = table.tail_mask();
    for (r, label) in batch.labels.iter().enumerate() {
        if let Label::Category(gt) = *label {
            let row = w.row_mut(r);
            for j in 0..c {
                if tail[j] && j != gt {
                    row[j] = 0.0;
                }
            }
        }
    }
    Ok(WeightMatrix { weights: w })
}

/// Background equalization weights with log base `base`: background rows get
/// `w_j = 1 − T_λ(f_j) · min(−log_b p_j, 1)`.
pub fn beql_weights(batch: &LogitsBatch, table: &CategoryTable, base: f64) -> Result<WeightMatrix> {
    if !(base > 1.0) || !base.is_finite() {
        return Err(Error::invalid(
            "base",
            format!("{base} must be a finite number > 1"),
        ));
    }
    let mut out = eql_weights(batch, table)?;
    let ln_base = libm::log(base);
    let tail = table.tail_mask();
    for (r, label) in batch.labels.iter().enumerate() {
        if label.is_foreground() {
            continue;
        }
        let z = batch.logits.row(r);
        let row = out.weights.row_mut(r);
        for j in 0..row.len() {
            if !tail[j] {
                continue;
            }
            let p = sigmoid(z[j]).clamp(PROB_EPS, 1.0 - PROB_EPS);
            let neg_log_b = -libm::log(p) / ln_base;
            row[j] = 1.0 - neg_log_b.min(1.0);
        }
    }
    Ok(out)
}

/// Keep probabilities from the bin composition of a batch's foreground.
/// With no foreground at all, the dataset-level tail share stands in for the
/// batch ratio.
pub fn droploss_mu(occurrences: BinCounts, table: &CategoryTable) -> MuPair {
    let all = occurrences.all();
    let mu_tail = if all > 0 {
        (occurrences.rare + occurrences.common) as f64 / all as f64
    } else {
        table
            .frequencies()
            .iter()
            .zip(table.bins())
            .filter(|(_, b)| b.is_tail())
            .map(|(f, _)| f)
            .sum::<f64>()
            .clamp(0.0, 1.0)
    };
    let mu_freq = if all > 0 {
        occurrences.frequent as f64 / all as f64
    } else {
        1.0 - mu_tail
    };
    MuPair { mu_tail, mu_freq }
}

/// Realized background draws of one batch, per bin of the category column.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DropStats {
    pub cells: [u64; 3],
    pub kept: [u64; 3],
    /// Sum of keep probabilities over the drawn cells.
    pub expected: [f64; 3],
    pub mu: Option<MuPair>,
    pub occurrences: BinCounts,
}

impl DropStats {
    pub fn keep_rate(&self, bin: Bin) -> Option<f64> {
        let i = bin.index();
        (self.cells[i] > 0).then(|| self.kept[i] as f64 / self.cells[i] as f64)
    }

    /// Keep rate over all tail (rare + common) cells.
    pub fn tail_keep_rate(&self) -> Option<f64> {
        let cells = self.cells[0] + self.cells[1];
        (cells > 0).then(|| (self.kept[0] + self.kept[1]) as f64 / cells as f64)
    }
}

fn bernoulli_background<R: Rng + ?Sized>(
    batch: &LogitsBatch,
    table: &CategoryTable,
    keep: impl Fn(bool) -> f64,
    rng: &mut R,
) -> Result<(WeightMatrix, DropStats)> {
    let mut out = eql_weights(batch, table)?;
    let mut stats = DropStats {
        occurrences: BinCounts::of_labels(&batch.labels, table),
        ..DropStats::default()
    };
    let tail = table.tail_mask();
    for (r, label) in batch.labels.iter().enumerate() {
        if label.is_foreground() {
            continue;
        }
        let row = out.weights.row_mut(r);
        for (j, w) in row.iter_mut().enumerate() {
            let p = keep(tail[j]);
            let kept = rng.random_bool(p);
            *w = if kept { 1.0 } else { 0.0 };
            let b = table.bin(j).index();
            stats.cells[b] += 1;
            stats.kept[b] += u64::from(kept);
            stats.expected[b] += p;
        }
    }
    Ok((out, stats))
}

/// DropLoss weights: every background cell draws `w ~ Ber(μ)` independently,
/// with `μ` chosen by the category's tail indicator.
pub fn droploss_weights<R: Rng + ?Sized>(
    batch: &LogitsBatch,
    table: &CategoryTable,
    mu: MuPair,
    rng: &mut R,
) -> Result<WeightMatrix> {
    droploss_weights_with_stats(batch, table, mu, rng).map(|(w, _)| w)
}

pub fn droploss_weights_with_stats<R: Rng + ?Sized>(
    batch: &LogitsBatch,
    table: &CategoryTable,
    mu: MuPair,
    rng: &mut R,
) -> Result<(WeightMatrix, DropStats)> {
    let mu = MuPair::new(mu.mu_tail, mu.mu_freq)?;
    let (w, mut stats) = bernoulli_background(batch, table, |t| mu.for_tail(t), rng)?;
    stats.mu = Some(mu);
    Ok((w, stats))
}

/// Constant keep probability for background tail cells; background frequent
/// cells are always kept.
pub fn fixed_drop_weights<R: Rng + ?Sized>(
    batch: &LogitsBatch,
    table: &CategoryTable,
    keep_prob: f64,
    rng: &mut R,
) -> Result<WeightMatrix> {
    fixed_drop_weights_with_stats(batch, table, keep_prob, rng).map(|(w, _)| w)
}

pub fn fixed_drop_weights_with_stats<R: Rng + ?Sized>(
    batch: &LogitsBatch,
    table: &CategoryTable,
    keep_prob: f64,
    rng: &mut R,
) -> Result<(WeightMatrix, DropStats)> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::invalid(
            "keep_prob",
            format!("{keep_prob} is not a probability"),
        ));
    }
    bernoulli_background(batch, table, |t| if t { keep_prob } else { 1.0 }, rng)
}

/// Softmax cross-entropy over `C + 1` logits, the last column being the
/// explicit background class. Averaged over rows.
pub fn softmax_ce(batch: &LogitsBatch, num_categories: usize) -> Result<LossGrad> {
    let (n, width) = batch.logits.shape();
    if width != num_categories + 1 {
        return Err(Error::shape("softmax logits", num_categories + 1, width));
    }
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut grad = Matrix::zeros(n, width);
    let mut loss = 0.0;
    for r in 0..n {
        let z = batch.logits.row(r);
        let target = batch.labels[r].category().unwrap_or(num_categories);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(r);
        let mut sum = 0.0;
        for (gj, &zj) in g.iter_mut().zip(z) {
            *gj = libm::exp(zj - max);
            sum += *gj;
        }
        let log_sum = max + libm::log(sum);
        loss += log_sum - z[target];
        for gj in g.iter_mut() {
            *gj *= scale / sum;
        }
        g[target] -= scale;
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad,
    })
}

fn check_categories(batch: &LogitsBatch, table: &CategoryTable) -> Result<()> {
    if batch.cols() != table.num_categories() {
        return Err(Error::shape(
            "logits width",
            table.num_categories(),
            batch.cols(),
        ));
    }
    Ok(())
}

/// The loss variants under study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossRule {
    Bce,
    Softmax,
    Eql,
    Beql { base: f64 },
    DropLoss,
    FixedDrop { keep_prob: f64 },
}

/// Everything one loss evaluation produces.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Matrix,
    pub drop: Option<DropStats>,
}

impl LossRule {
    pub fn name(&self) -> &'static str {
        match self {
            LossRule::Bce => "bce",
            LossRule::Softmax => "softmax",
            LossRule::Eql => "eql",
            LossRule::Beql { .. } => "beql",
            LossRule::DropLoss => "droploss",
            LossRule::FixedDrop { .. } => "fixed_drop",
        }
    }

    /// The rule's hyperparameter, if it has one.
    pub fn param(&self) -> Option<f64> {
        match *self {
            LossRule::Beql { base } => Some(base),
            LossRule::FixedDrop { keep_prob } => Some(keep_prob),
            _ => None,
        }
    }

    pub fn is_softmax(&self) -> bool {
        matches!(self, LossRule::Softmax)
    }

    /// Number of logits the model must emit for `num_categories` classes.
    pub fn output_width(&self, num_categories: usize) -> usize {
        if self.is_softmax() {
            num_categories + 1
        } else {
            num_categories
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossRule::Beql { base } if !(base > 1.0) || !base.is_finite() => Err(Error::invalid(
                "base",
                format!("{base} must be a finite number > 1"),
            )),
            LossRule::FixedDrop { keep_prob } if !(0.0..=1.0).contains(&keep_prob) => Err(
                Error::invalid("keep_prob", format!("{keep_prob} is not a probability")),
            ),
            _ => Ok(()),
        }
    }

    /// Weight matrix for sigmoid rules; `None` for softmax.
    pub fn weights<R: Rng + ?Sized>(
        &self,
        batch: &LogitsBatch,
        table: &CategoryTable,
        rng: &mut R,
    ) -> Result<Option<(WeightMatrix, Option<DropStats>)>> {
        let out = match *self {
            LossRule::Softmax => return Ok(None),
            LossRule::Bce => {
                check_categories(batch, table)?;
                (WeightMatrix::ones(batch.rows(), batch.cols()), None)
            }
            LossRule::Eql => (eql_weights(batch, table)?, None),
            LossRule::Beql { base } => (beql_weights(batch, table, base)?, None),
            LossRule::DropLoss => {
                let mu = droploss_mu(BinCounts::of_labels(&batch.labels, table), table);
                let (w, s) = droploss_weights_with_stats(batch, table, mu, rng)?;
                (w, Some(s))
            }
            LossRule::FixedDrop { keep_prob } => {
                let (w, s) = fixed_drop_weights_with_stats(batch, table, keep_prob, rng)?;
                (w, Some(s))
            }
        };
        Ok(Some(out))
    }

    /// Loss and logit gradient. Stochastic rules draw from `rng`.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        batch: &LogitsBatch,
        table: &CategoryTable,
        rng: &mut R,
    ) -> Result<LossOutput> {
        match self.weights(batch, table, rng)? {
            None => {
                let LossGrad { loss, grad } = softmax_ce(batch, table.num_categories())?;
                Ok(LossOutput {
                    loss,
                    grad,
                    drop: None,
                })
            }
            Some((w, drop)) => {
                let LossGrad { loss, grad } = weighted_bce(batch, &w)?;
                Ok(LossOutput { loss, grad, drop })
            }
        }
    }
}
