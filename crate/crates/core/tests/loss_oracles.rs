//! Loss values and gradients against independent reference implementations,
//! plus the reduction identities between weight rules.

use droploss_core::losses::{
    beql_weights, droploss_weights, eql_weights, fixed_drop_weights, softmax_ce, weighted_bce,
    LossOutput,
};
use droploss_core::rng::{stream, Stream};
use droploss_core::{
    CategoryTable, Label, LambdaMode, LogitsBatch, LossRule, Matrix, MuPair, WeightMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Plain textbook sigmoid cross-entropy, written without any of the
/// stabilization tricks of the library version.
fn reference_bce(z: &[f64], y: &[f64], w: &[f64], rows: usize) -> f64 {
    let mut total = 0.0;
    for ((&z, &y), &w) in z.iter().zip(y).zip(w) {
        let p = 1.0 / (1.0 + (-z).exp());
        total -= w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    total / rows as f64
}

fn reference_softmax(z: &[f64], target: &[usize], cols: usize) -> f64 {
    let rows = target.len();
    let mut total = 0.0;
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let sum: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[target[r]].exp() / sum).ln();
    }
    total / rows as f64
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cats: usize, cols: usize) -> LogitsBatch {
    let labels: Vec<Label> = (0..rows)
        .map(|_| {
            if rng.random_bool(0.4) {
                Label::Category(rng.random_range(0..cats))
            } else {
                Label::Background
            }
        })
        .collect();
    let z = (0..rows * cols)
        .map(|_| rng.random_range(-4.0..4.0))
        .collect();
    LogitsBatch::new(Matrix::from_vec(rows, cols, z), labels).unwrap()
}

fn targets(batch: &LogitsBatch) -> Vec<f64> {
    let mut y = Vec::new();
    for r in 0..batch.rows() {
        for j in 0..batch.cols() {
            y.push(batch.target(r, j));
        }
    }
    y
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn table6() -> CategoryTable {
    CategoryTable::from_counts(&[1, 9, 30, 100, 400, 5000], LambdaMode::BinAligned).unwrap()
}

#[test]
fn bce_matches_reference_and_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let (rows, cols) = if trial % 2 == 0 { (3, 4) } else { (8, 6) };
        let batch = random_batch(&mut rng, rows, cols, cols);
        let w: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let wm = WeightMatrix::from_matrix(Matrix::from_vec(rows, cols, w.clone())).unwrap();
        let out = weighted_bce(&batch, &wm).unwrap();
        let y = targets(&batch);
        let z = batch.logits().as_slice().to_vec();
        assert!(relative(out.loss, reference_bce(&z, &y, &w, rows)) < 1e-12);

        for i in 0..z.len() {
            let mut up = z.clone();
            up[i] += H;
            let mut down = z.clone();
            down[i] -= H;
            let numeric =
                (reference_bce(&up, &y, &w, rows) - reference_bce(&down, &y, &w, rows)) / (2.0 * H);
            let analytic = out.grad.as_slice()[i];
            assert!(
                relative(analytic, numeric) < 1e-6,
                "cell {i}: {analytic} vs {numeric}"
            );
        }
    }
}

#[test]
fn softmax_matches_reference_and_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = 5;
    for _ in 0..10 {
        let batch = random_batch(&mut rng, 8, c, c + 1);
        let target: Vec<usize> = batch
            .labels()
            .iter()
            .map(|l| l.category().unwrap_or(c))
            .collect();
        let out = softmax_ce(&batch, c).unwrap();
        let z = batch.logits().as_slice().to_vec();
        assert!(relative(out.loss, reference_softmax(&z, &target, c + 1)) < 1e-12);
        for i in 0..z.len() {
            let mut up = z.clone();
            up[i] += H;
            let mut down = z.clone();
            down[i] -= H;
            let numeric = (reference_softmax(&up, &target, c + 1)
                - reference_softmax(&down, &target, c + 1))
                / (2.0 * H);
            assert!(relative(out.grad.as_slice()[i], numeric) < 1e-6);
        }
    }
}

/// The same weight rule computed cell by cell from its definition.
fn reference_eql(batch: &LogitsBatch, table: &CategoryTable) -> Vec<f64> {
    let mut w = Vec::new();
    for (r, l) in batch.labels().iter().enumerate() {
        for j in 0..batch.cols() {
            let e = if l.is_foreground() { 1.0 } else { 0.0 };
            let t = if table.frequencies()[j] < table.lambda() {
                1.0
            } else {
                0.0
            };
            let y = batch.target(r, j);
            w.push(1.0 - e * t * (1.0 - y));
        }
    }
    w
}

#[test]
fn eql_weights_follow_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let table = table6();
    for _ in 0..20 {
        let batch = random_batch(&mut rng, 16, 6, 6);
        let w = eql_weights(&batch, &table).unwrap();
        assert_eq!(
            w.matrix().as_slice(),
            reference_eql(&batch, &table).as_slice()
        );
    }
}

fn bits(out: &LossOutput) -> (u64, Vec<u64>) {
    (
        out.loss.to_bits(),
        out.grad.as_slice().iter().map(|v| v.to_bits()).collect(),
    )
}

#[test]
fn eql_with_zero_lambda_is_bce_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let table = table6().with_lambda(LambdaMode::Explicit(0.0)).unwrap();
    let mut unused = stream(0, Stream::DropWeights);
    for _ in 0..20 {
        let batch = random_batch(&mut rng, 32, 6, 6);
        let bce = LossRule::Bce.apply(&batch, &table, &mut unused).unwrap();
        let eql = LossRule::Eql.apply(&batch, &table, &mut unused).unwrap();
        assert_eq!(bits(&bce), bits(&eql));
    }
}

#[test]
fn droploss_with_certain_keep_is_eql_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let table = table6();
    let mut draws = stream(1, Stream::DropWeights);
    for _ in 0..20 {
        let batch = random_batch(&mut rng, 32, 6, 6);
        let eql = eql_weights(&batch, &table).unwrap();
        let drop =
            droploss_weights(&batch, &table, MuPair::new(1.0, 1.0).unwrap(), &mut draws).unwrap();
        assert_eq!(eql, drop);
        let fixed = fixed_drop_weights(&batch, &table, 1.0, &mut draws).unwrap();
        assert_eq!(eql, fixed);
        let a = weighted_bce(&batch, &eql).unwrap();
        let b = weighted_bce(&batch, &drop).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad, b.grad);
    }
}

#[test]
fn fixed_drop_rule_at_one_matches_eql_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let table = table6();
    let mut draws = stream(2, Stream::DropWeights);
    for _ in 0..10 {
        let batch = random_batch(&mut rng, 64, 6, 6);
        let eql = LossRule::Eql.apply(&batch, &table, &mut draws).unwrap();
        let fixed = LossRule::FixedDrop { keep_prob: 1.0 }
            .apply(&batch, &table, &mut draws)
            .unwrap();
        assert_eq!(bits(&eql), bits(&fixed));
    }
}

/// Largest gap between BEQL and EQL weights over background tail cells whose
/// score is at least `p_min`.
fn beql_gap(base: f64, p_min: f64) -> f64 {
    let table = table6();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let labels: Vec<Label> = (0..16)
            .map(|r| {
                if r % 3 == 0 {
                    Label::Category(r % 6)
                } else {
                    Label::Background
                }
            })
            .collect();
        let z = (0..16 * 6).map(|_| rng.random_range(-6.9..8.0)).collect();
        let batch = LogitsBatch::new(Matrix::from_vec(16, 6, z), labels).unwrap();
        let beql = beql_weights(&batch, &table, base).unwrap();
        let eql = eql_weights(&batch, &table).unwrap();
        for (r, row) in batch.logits().iter_rows().enumerate() {
            for (j, &z) in row.iter().enumerate() {
                let p = 1.0 / (1.0 + (-z).exp());
                if p >= p_min {
                    worst = worst.max((beql.get(r, j) - eql.get(r, j)).abs());
                }
            }
        }
    }
    worst
}

#[test]
fn large_base_beql_converges_to_eql_pointwise() {
    // The gap is −log_b(p) at the smallest score, so it shrinks like 1/ln b.
    let mut last = f64::INFINITY;
    for base in [10.0, 1e3, 1e6, 1e12, 1e48, 1e192] {
        let gap = beql_gap(base, 1e-3);
        assert!(gap < last, "b = {base}: {gap} !< {last}");
        assert!(gap <= 1e-3f64.ln() / -base.ln() + 1e-12);
        last = gap;
    }
    assert!(beql_gap(1e192, 1e-3) < 2e-2);
    // scores near 1 are already within the tight band at b = 1e6
    assert!(beql_gap(1e6, 0.975) < 2e-3);
}

#[test]
fn weights_stay_in_unit_interval_and_protect_ground_truth() {
    let table = table6();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut draws = stream(3, Stream::DropWeights);
    let rules = [
        LossRule::Bce,
        LossRule::Eql,
        LossRule::Beql { base: 3.0 },
        LossRule::DropLoss,
        LossRule::FixedDrop { keep_prob: 0.2 },
    ];
    for _ in 0..20 {
        let batch = random_batch(&mut rng, 32, 6, 6);
        for rule in rules {
            let (w, _) = rule.weights(&batch, &table, &mut draws).unwrap().unwrap();
            for (r, l) in batch.labels().iter().enumerate() {
                for j in 0..6 {
                    let v = w.get(r, j);
                    assert!((0.0..=1.0).contains(&v));
                    if l.category() == Some(j) {
                        assert_eq!(v, 1.0, "{rule:?}");
                    }
                }
            }
        }
    }
}
