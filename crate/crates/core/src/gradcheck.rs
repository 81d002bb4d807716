//! Central finite-difference checks of every loss variant, both on the
//! logits directly and end to end through the classifier. Weight matrices are
//! drawn once per instance and held fixed while differencing.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::categories::{CategoryTable, LambdaMode};
use crate::error::Result;
use crate::losses::{softmax_ce, weighted_bce, Label, LogitsBatch, LossRule, WeightMatrix};
use crate::matrix::Matrix;
use crate::model::ClassifierParams;
use crate::rng::RunRng;

pub const STEP: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;
pub const INSTANCES: u64 = 5;
/// Entries where both gradients are below this magnitude are compared
/// against it instead of their own size.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

const ROWS: usize = 8;
const CATEGORIES: usize = 6;
const FEATURES: usize = 5;
const HIDDEN: usize = 4;

/// Every rule checked, each exactly once.
pub fn variants() -> Vec<LossRule> {
    vec![
        LossRule::Bce,
        LossRule::Eql,
        LossRule::Beql { base: 2.0 },
        LossRule::Beql { base: 5.0 },
        LossRule::Beql { base: 10.0 },
        LossRule::DropLoss,
        LossRule::FixedDrop { keep_prob: 0.5 },
        LossRule::Softmax,
    ]
}

pub fn variant_label(rule: &LossRule) -> alloc::string::String {
    match rule.param() {
        Some(p) => alloc::format!("{}({p})", rule.name()),
        None => alloc::string::String::from(rule.name()),
    }
}

/// Where the largest relative error of a check was found.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Worst {
    pub rel_error: f64,
    pub instance: u64,
    /// Flat index into the differentiated vector (logit cell or parameter).
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantReport {
    pub rule: LossRule,
    pub loss_level: Worst,
    pub end_to_end: Worst,
}

impl VariantReport {
    pub fn passed(&self) -> bool {
        self.loss_level.rel_error <= LOSS_TOLERANCE && self.end_to_end.rel_error <= MODEL_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub variants: Vec<VariantReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.variants.iter().all(VariantReport::passed)
    }
}

/// Deliberate corruption of the analytic gradient, for negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Perturbation {
    pub amount: f64,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Six categories: two rare, two common, two frequent.
pub fn check_table() -> CategoryTable {
    CategoryTable::from_counts(&[2, 7, 40, 90, 300, 1000], LambdaMode::BinAligned)
        .expect("fixed counts")
}

struct Instance {
    labels: Vec<Label>,
    logits: Matrix,
    features: Matrix,
    params: ClassifierParams,
    weights: Option<WeightMatrix>,
}

fn instance(rule: LossRule, table: &CategoryTable, seed: u64) -> Result<Instance> {
    use rand::SeedableRng;
    let mut rng = RunRng::seed_from_u64(0x6772_6164 ^ seed.wrapping_mul(0x9e37_79b9));
    let width = rule.output_width(CATEGORIES);
    // two foreground rows per background row would starve the background
    // terms; keep the 1:3 ratio of training batches
    let labels: Vec<Label> = (0..ROWS)
        .map(|r| {
            if r % 4 == 0 {
                Label::Category(rng.random_range(0..CATEGORIES))
            } else {
                Label::Background
            }
        })
        .collect();
    let spread = Normal::new(0.0, 1.5).expect("valid");
    let logits = Matrix::from_vec(
        ROWS,
        width,
        (0..ROWS * width).map(|_| spread.sample(&mut rng)).collect(),
    );
    let features = Matrix::from_vec(
        ROWS,
        FEATURES,
        (0..ROWS * FEATURES)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    );
    let mut params = ClassifierParams::init(FEATURES, HIDDEN, width, &mut rng);
    // non-zero biases so every parameter matters
    let biases: Vec<f64> = params
        .values()
        .iter()
        .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut values = params.values();
    for (v, b) in values.iter_mut().zip(&biases) {
        *v += b;
    }
    params.set_values(&values)?;
    let batch = LogitsBatch::new(logits.clone(), labels.clone())?;
    let weights = rule.weights(&batch, table, &mut rng)?.map(|(w, _)| w);
    Ok(Instance {
        labels,
        logits,
        features,
        params,
        weights,
    })
}

fn loss_and_grad(
    logits: Matrix,
    labels: &[Label],
    weights: Option<&WeightMatrix>,
) -> Result<(f64, Matrix)> {
    let batch = LogitsBatch::new(logits, labels.to_vec())?;
    let out = match weights {
        Some(w) => weighted_bce(&batch, w)?,
        None => softmax_ce(&batch, CATEGORIES)?,
    };
    Ok((out.loss, out.grad))
}

fn central_differences(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe)?;
        probe[i] = x[i] - STEP;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

fn worst_of(analytic: &[f64], numeric: &[f64], instance: u64, acc: &mut Option<Worst>) {
    for (index, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_error(a, n);
        if acc.is_none_or(|w| e > w.rel_error) {
            *acc = Some(Worst {
                rel_error: e,
                instance,
                index,
                analytic: a,
                numeric: n,
            });
        }
    }
}

/// Logit-level and end-to-end checks of one rule over [`INSTANCES`] random
/// instances.
pub fn check_variant(rule: LossRule, perturb: Perturbation) -> Result<VariantReport> {
    let table = check_table();
    let mut loss_worst = None;
    let mut model_worst = None;
    for seed in 0..INSTANCES {
        let inst = instance(rule, &table, seed)?;
        let w = inst.weights.as_ref();

        let (_, mut grad) = loss_and_grad(inst.logits.clone(), &inst.labels, w)?;
        grad.as_mut_slice()[0] += perturb.amount;
        let (rows, cols) = inst.logits.shape();
        let numeric = central_differences(inst.logits.as_slice(), |z| {
            loss_and_grad(Matrix::from_vec(rows, cols, z.to_vec()), &inst.labels, w).map(|o| o.0)
        })?;
        worst_of(grad.as_slice(), &numeric, seed, &mut loss_worst);

        let fwd = inst.params.forward_cached(&inst.features)?;
        let (_, upstream) = loss_and_grad(fwd.logits.clone(), &inst.labels, w)?;
        let mut analytic = inst
            .params
            .backward(&inst.features, &fwd, &upstream)?
            .values();
        analytic[0] += perturb.amount;
        let mut scratch = inst.params.clone();
        let numeric = central_differences(&inst.params.values(), |theta| {
            scratch.set_values(theta)?;
            let z = scratch.forward(&inst.features)?;
            loss_and_grad(z, &inst.labels, w).map(|o| o.0)
        })?;
        worst_of(&analytic, &numeric, seed, &mut model_worst);
    }
    Ok(VariantReport {
        rule,
        loss_level: loss_worst.expect("at least one instance"),
        end_to_end: model_worst.expect("at least one instance"),
    })
}

pub fn run_gradcheck(perturb: Perturbation) -> Result<GradcheckReport> {
    let variants = variants()
        .into_iter()
        .map(|rule| check_variant(rule, perturb))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { variants })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(1.0, 0.999) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn every_variant_passes() {
        let report = run_gradcheck(Perturbation::default()).unwrap();
        for v in &report.variants {
            assert!(v.passed(), "{}: {:?}", variant_label(&v.rule), v);
        }
        assert_eq!(report.variants.len(), variants().len());
    }

    #[test]
    fn perturbed_gradient_is_caught() {
        let report = check_variant(LossRule::Bce, Perturbation { amount: 1e-3 }).unwrap();
        assert!(!report.passed());
        assert_eq!(report.loss_level.index, 0);
    }
}
