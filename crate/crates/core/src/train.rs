//! The training loop: batch → logits → weights → loss → backward → SGD.

use alloc::vec::Vec;

use crate::categories::CategoryTable;
use crate::diagnostics::{account_gradients, GradientLedger};
use crate::error::{Error, Result};
use crate::losses::{BinCounts, DropStats, LogitsBatch, LossRule};
use crate::model::{sgd_step, ClassifierParams, MomentumState, TrainSchedule};
use crate::rng::{stream, Stream};
use crate::synth::{sample_batch, ProposalPool};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// 0 gives the linear model.
    pub hidden_units: usize,
    /// Ledger snapshot period in iterations; 0 disables snapshots.
    pub snapshot_every: usize,
    /// Fraction of the run after which the early checkpoint is taken.
    pub early_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            hidden_units: 64,
            snapshot_every: 500,
            early_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub occurrences: BinCounts,
    pub drop: Option<DropStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub rule: LossRule,
    pub records: Vec<IterationRecord>,
    /// Cumulative over the whole run.
    pub ledger: GradientLedger,
    pub snapshots: Vec<(usize, GradientLedger)>,
    pub early_iteration: usize,
    pub early_params: ClassifierParams,
}

impl TrainLog {
    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.loss)
    }
}

/// Initial parameters of a run; depend only on the seed and shapes, never on
/// the loss rule (beyond the softmax background column).
pub fn initial_params(
    feature_dim: usize,
    hidden_units: usize,
    outputs: usize,
    seed: u64,
) -> ClassifierParams {
    ClassifierParams::init(
        feature_dim,
        hidden_units,
        outputs,
        &mut stream(seed, Stream::Init),
    )
}

pub fn train(
    pool: &ProposalPool,
    table: &CategoryTable,
    rule: LossRule,
    schedule: &TrainSchedule,
    seed: u64,
    options: &TrainOptions,
) -> Result<(ClassifierParams, TrainLog)> {
    rule.validate()?;
    schedule.validate()?;
    let c = table.num_categories();
    let mut params = initial_params(
        pool.features().cols(),
        options.hidden_units,
        rule.output_width(c),
        seed,
    );
    let mut momentum = MomentumState::new(&params);
    let mut batch_rng = stream(seed, Stream::Batches);
    let mut drop_rng = stream(seed, Stream::DropWeights);

    let t = schedule.iterations;
    let early_iteration = (libm::round(options.early_fraction * t as f64) as usize).min(t);
    let mut early_params = (early_iteration == 0).then(|| params.clone());
    let mut ledger = GradientLedger::new(c);
    let mut snapshots = Vec::new();
    let mut records = Vec::with_capacity(t);

    for iteration in 0..t {
        let batch = sample_batch(pool, schedule.batch_size, &mut batch_rng)?;
        let forward = params.forward_cached(&batch.features)?;
        let logits = LogitsBatch::new(forward.logits.clone(), batch.labels)?;
        let out = rule.apply(&logits, table, &mut drop_rng)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        account_gradients(logits.labels(), &out.grad, &mut ledger);
        let grads = params.backward(&batch.features, &forward, &out.grad)?;
        let lr = schedule.lr_at(iteration);
        sgd_step(&mut params, &grads, schedule, iteration, &mut momentum);
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        records.push(IterationRecord {
            iteration,
            loss: out.loss,
            lr,
            occurrences: BinCounts::of_labels(logits.labels(), table),
            drop: out.drop,
        });
        let done = iteration + 1;
        if done == early_iteration {
            early_params = Some(params.clone());
        }
        if options.snapshot_every > 0 && done % options.snapshot_every == 0 {
            snapshots.push((done, ledger.clone()));
        }
    }

    let log = TrainLog {
        rule,
        records,
        ledger,
        snapshots,
        early_iteration,
        early_params: early_params.unwrap_or_else(|| params.clone()),
    };
    Ok((params, log))
}
