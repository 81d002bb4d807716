//! Where discouraging gradients come from, how background scores are
//! suppressed per category, whether stochastic rules keep what they promise,
//! and the rare/frequent tradeoff across hyperparameter sweeps.

use alloc::vec;
use alloc::vec::Vec;

use crate::categories::{Bin, CategoryTable};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ExperimentSpec};
use crate::losses::{Label, LossRule};
use crate::matrix::Matrix;
use crate::metrics::category_scores;
use crate::model::ClassifierParams;
use crate::train::IterationRecord;

/// Per-category L1 mass of logit gradients, split by origin.
///
/// Every `(row, category)` cell lands in exactly one accumulator: encouraging
/// when the row's label is that category, background-discouraging when the
/// row is background, incorrect-foreground-discouraging otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientLedger {
    pub encouraging: Vec<f64>,
    pub bg_discouraging: Vec<f64>,
    pub fg_discouraging: Vec<f64>,
    /// Number of cells routed to each accumulator, summed over categories.
    pub cells: [u64; 3],
}

impl GradientLedger {
    pub fn new(num_categories: usize) -> Self {
        GradientLedger {
            encouraging: vec![0.0; num_categories],
            bg_discouraging: vec![0.0; num_categories],
            fg_discouraging: vec![0.0; num_categories],
            cells: [0; 3],
        }
    }

    pub fn num_categories(&self) -> usize {
        self.encouraging.len()
    }

    pub fn total(&self) -> f64 {
        self.encouraging
            .iter()
            .chain(&self.bg_discouraging)
            .chain(&self.fg_discouraging)
            .sum()
    }
}

/// Adds `|grad|` of every cell to its origin accumulator. Columns past the
/// ledger's category count (the softmax background logit) are ignored.
pub fn account_gradients(labels: &[Label], grad: &Matrix, ledger: &mut GradientLedger) {
    let c = ledger.num_categories().min(grad.cols());
    for (label, row) in labels.iter().zip(grad.iter_rows()) {
        match *label {
            Label::Background => {
                for (acc, g) in ledger.bg_discouraging.iter_mut().zip(&row[..c]) {
                    *acc += g.abs();
                }
                ledger.cells[1] += c as u64;
            }
            Label::Category(gt) => {
                for (j, g) in row[..c].iter().enumerate() {
                    if j == gt {
                        ledger.encouraging[j] += g.abs();
                    } else {
                        ledger.fg_discouraging[j] += g.abs();
                    }
                }
                ledger.cells[0] += u64::from(gt < c);
                ledger.cells[2] += (c - usize::from(gt < c)) as u64;
            }
        }
    }
}

/// Background share of each category's discouraging gradient; `None` where
/// the category received no discouraging gradient at all.
pub fn bg_origin_fraction(ledger: &GradientLedger) -> Vec<Option<f64>> {
    ledger
        .bg_discouraging
        .iter()
        .zip(&ledger.fg_discouraging)
        .map(|(&bg, &fg)| {
            let total = bg + fg;
            (total > 0.0).then(|| bg / total)
        })
        .collect()
}

/// Mean score of every category over background proposals.
pub fn bg_score_profile(
    params: &ClassifierParams,
    background: &Matrix,
    table: &CategoryTable,
) -> Result<Vec<f64>> {
    let c = table.num_categories();
    let scores = category_scores(params, background, c)?;
    let mut sums = vec![0.0; c];
    for row in scores.iter_rows() {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = background.rows().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// Median of the present values over the categories of one bin.
pub fn bin_median(values: &[Option<f64>], table: &CategoryTable, bin: Bin) -> Option<f64> {
    let mut v: Vec<f64> = table
        .members(bin)
        .into_iter()
        .filter_map(|j| values[j])
        .collect();
    median(&mut v)
}

/// Mean of the values over the categories of one bin.
pub fn bin_mean(values: &[f64], table: &CategoryTable, bin: Bin) -> Option<f64> {
    let members = table.members(bin);
    (!members.is_empty())
        .then(|| members.iter().map(|&j| values[j]).sum::<f64>() / members.len() as f64)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Realized keep rate of one bin against the rate the rule asked for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinKeepAudit {
    pub bin: Bin,
    pub cells: u64,
    pub kept: u64,
    pub empirical: Option<f64>,
    pub expected: Option<f64>,
    pub deviation: Option<f64>,
    /// Deviation above [`KEEP_RATE_TOLERANCE`] on at least
    /// [`AUDIT_MIN_CELLS`] cells.
    pub flagged: bool,
}

pub const KEEP_RATE_TOLERANCE: f64 = 0.02;
pub const AUDIT_MIN_CELLS: u64 = 10_000;

/// Pooled over all iterations of a stochastic run; `None` when the log holds
/// no drop events (deterministic rules).
pub fn drop_rate_audit(records: &[IterationRecord]) -> Option<[BinKeepAudit; 3]> {
    let mut cells = [0u64; 3];
    let mut kept = [0u64; 3];
    let mut expected = [0.0; 3];
    let mut any = false;
    for d in records.iter().filter_map(|r| r.drop.as_ref()) {
        any = true;
        for b in 0..3 {
            cells[b] += d.cells[b];
            kept[b] += d.kept[b];
            expected[b] += d.expected[b];
        }
    }
    any.then(|| {
        Bin::ALL.map(|bin| {
            let b = bin.index();
            let n = cells[b];
            let empirical = (n > 0).then(|| kept[b] as f64 / n as f64);
            let exp = (n > 0).then(|| expected[b] / n as f64);
            let deviation = empirical.zip(exp).map(|(e, x)| (e - x).abs());
            BinKeepAudit {
                bin,
                cells: n,
                kept: kept[b],
                empirical,
                expected: exp,
                deviation,
                flagged: n >= AUDIT_MIN_CELLS && deviation.is_some_and(|d| d > KEEP_RATE_TOLERANCE),
            }
        })
    })
}

/// Mean realized tail keep rate over batches that contained rare foreground
/// versus batches that did not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RarePresenceSplit {
    pub with_rare: Option<f64>,
    pub without_rare: Option<f64>,
    pub batches_with: usize,
    pub batches_without: usize,
}

pub fn keep_rate_by_rare_presence(records: &[IterationRecord]) -> RarePresenceSplit {
    let (mut sw, mut nw, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for r in records {
        let Some(rate) = r.drop.as_ref().and_then(|d| d.tail_keep_rate()) else {
            continue;
        };
        if r.occurrences.rare > 0 {
            sw += rate;
            nw += 1;
        } else {
            so += rate;
            no += 1;
        }
    }
    RarePresenceSplit {
        with_rare: (nw > 0).then(|| sw / nw as f64),
        without_rare: (no > 0).then(|| so / no as f64),
        batches_with: nw,
        batches_without: no,
    }
}

/// Loss families of a tradeoff sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepFamily {
    Beql,
    FixedDrop,
    Eql,
    DropLoss,
    Bce,
    Softmax,
}

impl SweepFamily {
    pub const ALL: [SweepFamily; 6] = [
        SweepFamily::Beql,
        SweepFamily::FixedDrop,
        SweepFamily::Eql,
        SweepFamily::DropLoss,
        SweepFamily::Bce,
        SweepFamily::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepFamily::Beql => "beql",
            SweepFamily::FixedDrop => "fixed_drop",
            SweepFamily::Eql => "eql",
            SweepFamily::DropLoss => "droploss",
            SweepFamily::Bce => "bce",
            SweepFamily::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SweepFamily::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn is_parameterized(self) -> bool {
        matches!(self, SweepFamily::Beql | SweepFamily::FixedDrop)
    }

    /// One rule per grid value; a single rule for families without a
    /// hyperparameter (the grid is ignored).
    pub fn rules(self, grid: &[f64]) -> Result<Vec<LossRule>> {
        if self.is_parameterized() && grid.is_empty() {
            return Err(Error::invalid(
                "grid",
                "empty grid for a parameterized family",
            ));
        }
        let rules: Vec<LossRule> = match self {
            SweepFamily::Beql => grid.iter().map(|&base| LossRule::Beql { base }).collect(),
            SweepFamily::FixedDrop => grid
                .iter()
                .map(|&keep_prob| LossRule::FixedDrop { keep_prob })
                .collect(),
            SweepFamily::Eql => vec![LossRule::Eql],
            SweepFamily::DropLoss => vec![LossRule::DropLoss],
            SweepFamily::Bce => vec![LossRule::Bce],
            SweepFamily::Softmax => vec![LossRule::Softmax],
        };
        for r in &rules {
            r.validate()?;
        }
        Ok(rules)
    }
}

/// Tail/head/overall metrics of one trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedMetrics {
    pub tail: f64,
    pub head: f64,
    pub overall: f64,
}

impl SeedMetrics {
    pub fn from_report(report: &crate::metrics::EvalReport) -> Result<Self> {
        match (
            report.tail_metric(),
            report.head_metric(),
            report.overall_metric(),
        ) {
            (Some(tail), Some(head), Some(overall)) => Ok(SeedMetrics {
                tail,
                head,
                overall,
            }),
            _ => Err(Error::invalid("eval", "a bin has no evaluated categories")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepJob {
    pub point: usize,
    pub rule: LossRule,
    pub seed: u64,
}

pub fn sweep_jobs(rules: &[LossRule], seeds: &[u64]) -> Vec<SweepJob> {
    rules
        .iter()
        .enumerate()
        .flat_map(|(point, &rule)| {
            seeds
                .iter()
                .map(move |&seed| SweepJob { point, rule, seed })
        })
        .collect()
}

pub fn run_job(base: &ExperimentSpec, job: &SweepJob) -> Result<SeedMetrics> {
    let artifacts = run_experiment(&base.with_rule(job.rule), job.seed)?;
    SeedMetrics::from_report(&artifacts.report)
}

/// Seed-aggregated metrics of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub tail: f64,
    pub head: f64,
    pub overall: f64,
    /// Across-seed standard deviation of the tail and head metrics.
    pub tail_spread: f64,
    pub head_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub family: SweepFamily,
    pub rule: LossRule,
    pub seed_count: usize,
    pub failed_seeds: usize,
    /// Medians across the successful seeds; `None` when every seed failed.
    pub metrics: Option<PointMetrics>,
}

impl ParetoPoint {
    pub fn param(&self) -> Option<f64> {
        self.rule.param()
    }

    pub fn flagged(&self) -> bool {
        self.failed_seeds > 0
    }

    pub fn objectives(&self) -> Option<(f64, f64)> {
        self.metrics.map(|m| (m.tail, m.head))
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    libm::sqrt(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64)
}

/// Reduces per-job results into one point per rule.
pub fn aggregate(
    family: SweepFamily,
    rules: &[LossRule],
    results: &[(SweepJob, Result<SeedMetrics>)],
) -> Vec<ParetoPoint> {
    rules
        .iter()
        .enumerate()
        .map(|(point, &rule)| {
            let mut ok = Vec::new();
            let mut failed = 0;
            for (job, res) in results.iter().filter(|(j, _)| j.point == point) {
                debug_assert_eq!(job.rule, rule);
                match res {
                    Ok(m) => ok.push(*m),
                    Err(_) => failed += 1,
                }
            }
            let metrics = (!ok.is_empty()).then(|| {
                let mut tail: Vec<f64> = ok.iter().map(|m| m.tail).collect();
                let mut head: Vec<f64> = ok.iter().map(|m| m.head).collect();
                let mut overall: Vec<f64> = ok.iter().map(|m| m.overall).collect();
                PointMetrics {
                    tail_spread: std_dev(&tail),
                    head_spread: std_dev(&head),
                    tail: median(&mut tail).unwrap_or(0.0),
                    head: median(&mut head).unwrap_or(0.0),
                    overall: median(&mut overall).unwrap_or(0.0),
                }
            });
            ParetoPoint {
                family,
                rule,
                seed_count: ok.len(),
                failed_seeds: failed,
                metrics,
            }
        })
        .collect()
}

/// Trains one model per (grid value, seed), sequentially. A failed run marks
/// its point flagged and the sweep carries on.
pub fn pareto_sweep(
    base: &ExperimentSpec,
    family: SweepFamily,
    grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<ParetoPoint>> {
    let rules = family.rules(grid)?;
    let results: Vec<_> = sweep_jobs(&rules, seeds)
        .into_iter()
        .map(|job| {
            let r = run_job(base, &job);
            (job, r)
        })
        .collect();
    Ok(aggregate(family, &rules, &results))
}

/// `a` dominates `b`: at least as good in both objectives, better in one.
#[inline]
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Indices of the non-dominated points (higher is better in both
/// coordinates), in input order. Exact duplicates are all kept.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .0
            .total_cmp(&points[a].0)
            .then(points[b].1.total_cmp(&points[a].1))
    });
    let mut front = Vec::new();
    // best head among points with strictly larger first objective
    let mut best_above = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let x = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == x {
            j += 1;
        }
        // within a group of equal x, order[i] has the largest y
        let group_max = points[order[i]].1;
        for &k in &order[i..j] {
            let y = points[k].1;
            if y == group_max && y > best_above {
                front.push(k);
            }
        }
        best_above = best_above.max(group_max);
        i = j;
    }
    front.sort_unstable();
    front
}

/// Front membership flag per sweep point; points without metrics are never on it.
pub fn front_flags(points: &[ParetoPoint]) -> Vec<bool> {
    let indexed: Vec<(usize, (f64, f64))> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.objectives().map(|o| (i, o)))
        .collect();
    let objectives: Vec<(f64, f64)> = indexed.iter().map(|&(_, o)| o).collect();
    let mut flags = vec![false; points.len()];
    for k in pareto_front(&objectives) {
        flags[indexed[k].0] = true;
    }
    flags
}

/// Spearman rank correlation; average ranks on ties. `None` for fewer than
/// two values or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / libm::sqrt(sxx * syy))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categories::LambdaMode;
    use crate::losses::{weighted_bce, LogitsBatch, WeightMatrix};
    use proptest::prelude::*;

    #[test]
    fn ledger_hand_built_batch() {
        // row 0: category 1, row 1: background; all weights 1, N = 2
        let z = [[0.0, libm::log(3.0)], [libm::log(3.0), 0.0]];
        let labels = vec![Label::Category(1), Label::Background];
        let b = LogitsBatch::new(Matrix::from_rows(&[&z[0], &z[1]]), labels.clone()).unwrap();
        let out = weighted_bce(&b, &WeightMatrix::ones(2, 2)).unwrap();
        let mut ledger = GradientLedger::new(2);
        account_gradients(&labels, &out.grad, &mut ledger);
        // cell (0,0): σ=0.5, y=0 → 0.25 (fg-incorrect); (0,1): σ=0.75, y=1 → 0.125
        // cell (1,0): 0.75/2 = 0.375 (bg); (1,1): 0.25 (bg)
        assert!((ledger.fg_discouraging[0] - 0.25).abs() < 1e-15);
        assert!((ledger.encouraging[1] - 0.125).abs() < 1e-15);
        assert!((ledger.bg_discouraging[0] - 0.375).abs() < 1e-15);
        assert!((ledger.bg_discouraging[1] - 0.25).abs() < 1e-15);
        assert_eq!(ledger.encouraging[0], 0.0);
        assert_eq!(ledger.fg_discouraging[1], 0.0);
        assert_eq!(ledger.cells, [1, 2, 1]);
    }

    #[test]
    fn ledger_background_only_and_zero_weights() {
        let labels = vec![Label::Background; 3];
        let g = Matrix::filled(3, 2, -0.1);
        let mut ledger = GradientLedger::new(2);
        account_gradients(&labels, &g, &mut ledger);
        assert_eq!(ledger.encouraging, [0.0, 0.0]);
        assert_eq!(ledger.fg_discouraging, [0.0, 0.0]);
        assert!(ledger.bg_discouraging.iter().all(|&v| v > 0.0));

        let before = ledger.clone();
        let labels = vec![Label::Category(0), Label::Background];
        let b = LogitsBatch::new(Matrix::filled(2, 2, 0.3), labels.clone()).unwrap();
        let w = WeightMatrix::from_matrix(Matrix::zeros(2, 2)).unwrap();
        let out = weighted_bce(&b, &w).unwrap();
        let mut after = before.clone();
        account_gradients(&labels, &out.grad, &mut after);
        assert_eq!(after.encouraging, before.encouraging);
        assert_eq!(after.bg_discouraging, before.bg_discouraging);
        assert_eq!(after.fg_discouraging, before.fg_discouraging);
    }

    #[test]
    fn fractions() {
        let mut l = GradientLedger::new(3);
        l.bg_discouraging = vec![3.0, 0.0, 0.0];
        l.fg_discouraging = vec![1.0, 2.0, 0.0];
        assert_eq!(bg_origin_fraction(&l), vec![Some(0.75), Some(0.0), None]);
    }

    #[test]
    fn untrained_background_scores_are_half() {
        let t = CategoryTable::from_counts(&[1, 20, 300], LambdaMode::BinAligned).unwrap();
        let p = ClassifierParams::zeros(4, 0, 3);
        let prof = bg_score_profile(&p, &Matrix::filled(1000, 4, 0.7), &t).unwrap();
        assert_eq!(prof, vec![0.5; 3]);
    }

    #[test]
    fn front_examples() {
        assert_eq!(pareto_front(&[(0.4, 0.4)]), vec![0]);
        assert_eq!(pareto_front(&[(0.2, 0.8), (0.3, 0.9)]), vec![1]);
        assert_eq!(
            pareto_front(&[(0.5, 0.5), (0.5, 0.5), (0.1, 0.9)]),
            vec![0, 1, 2]
        );
        assert_eq!(pareto_front(&[(0.5, 0.4), (0.5, 0.5)]), vec![1]);
        assert!(pareto_front(&[]).is_empty());
    }

    fn brute_front(points: &[(f64, f64)]) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| !points.iter().any(|&q| dominates(q, points[i])))
            .collect()
    }

    proptest! {
        #[test]
        fn front_matches_brute_force(
            pts in proptest::collection::vec((0u8..20, 0u8..20), 0..50)
        ) {
            // coarse grid forces plenty of ties
            let points: Vec<(f64, f64)> =
                pts.iter().map(|&(a, b)| (a as f64 / 20.0, b as f64 / 20.0)).collect();
            let front = pareto_front(&points);
            prop_assert_eq!(&front, &brute_front(&points));
            for &i in &front {
                for &j in &front {
                    prop_assert!(!dominates(points[i], points[j]));
                }
            }
        }
    }

    #[test]
    fn spearman_signs() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[2.0, 4.0, 6.0, 8.0]), Some(1.0));
        assert_eq!(spearman(&x, &[8.0, 4.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]), None);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn family_rules() {
        assert_eq!(SweepFamily::Eql.rules(&[]).unwrap(), vec![LossRule::Eql]);
        assert!(SweepFamily::Beql.rules(&[]).is_err());
        assert!(SweepFamily::FixedDrop.rules(&[1.5]).is_err());
        assert_eq!(
            SweepFamily::FixedDrop
                .rules(&[0.0, 0.25, 0.5, 0.75, 1.0])
                .unwrap()
                .len(),
            5
        );
        assert_eq!(
            SweepFamily::parse("fixed_drop"),
            Some(SweepFamily::FixedDrop)
        );
        assert_eq!(SweepFamily::parse("focal"), None);
    }

    #[test]
    fn aggregate_flags_failures() {
        let rules = [LossRule::Beql { base: 2.0 }, LossRule::Beql { base: 3.0 }];
        let jobs = sweep_jobs(&rules, &[1, 2]);
        let m = |t| SeedMetrics {
            tail: t,
            head: 0.5,
            overall: 0.5,
        };
        let results = vec![
            (jobs[0], Ok(m(0.2))),
            (jobs[1], Ok(m(0.4))),
            (jobs[2], Err(Error::NonFiniteLoss { iteration: 3 })),
            (jobs[3], Err(Error::NonFiniteLoss { iteration: 5 })),
        ];
        let pts = aggregate(SweepFamily::Beql, &rules, &results);
        assert_eq!(pts.len(), 2);
        assert!(!pts[0].flagged());
        assert!((pts[0].metrics.unwrap().tail - 0.3).abs() < 1e-15);
        assert!(pts[1].flagged() && pts[1].metrics.is_none());
        assert_eq!(front_flags(&pts), vec![true, false]);
    }
}
