//! One complete run: pool → train → evaluate → diagnostics.

use alloc::vec::Vec;

use crate::categories::{CategoryTable, LambdaMode};
use crate::diagnostics::{bg_origin_fraction, bg_score_profile};
use crate::error::Result;
use crate::losses::LossRule;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ClassifierParams, TrainSchedule};
use crate::rng::{stream, Stream};
use crate::synth::{
    generate_eval_pool, generate_pool_in, repeat_factor_resample, ProposalPool, SynthConfig, World,
};
use crate::train::{train, TrainLog, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Foreground proposals per category in the evaluation pool.
    pub per_category: usize,
    /// Background proposals scored for the background-score profile.
    pub background_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            per_category: 50,
            background_samples: 5000,
        }
    }
}

/// Everything that determines a run except the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub synth: SynthConfig,
    pub rule: LossRule,
    /// Tail threshold of the category table the loss rules see.
    pub lambda: LambdaMode,
    pub schedule: TrainSchedule,
    pub train: TrainOptions,
    pub eval: EvalConfig,
    /// Repeat factor sampling threshold; `None` disables resampling.
    pub rfs_threshold: Option<f64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            synth: SynthConfig::default(),
            rule: LossRule::Bce,
            lambda: LambdaMode::BinAligned,
            schedule: TrainSchedule::default(),
            train: TrainOptions::default(),
            eval: EvalConfig::default(),
            rfs_threshold: None,
        }
    }
}

impl ExperimentSpec {
    pub fn with_rule(&self, rule: LossRule) -> Self {
        ExperimentSpec {
            rule,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.rule.validate()?;
        self.schedule.validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(crate::Error::invalid(
                "eval.threshold",
                "must lie in (0, 1)",
            ));
        }
        Ok(())
    }
}

/// The data side of a run, independent of the loss rule.
#[derive(Debug, Clone)]
pub struct RunData {
    pub world: World,
    /// Frequency statistics of the original (not resampled) training pool.
    pub table: CategoryTable,
    pub train_pool: ProposalPool,
    pub eval_pool: ProposalPool,
    pub background: crate::Matrix,
}

pub fn build_data(spec: &ExperimentSpec, seed: u64) -> Result<RunData> {
    let synth = SynthConfig {
        seed,
        ..spec.synth.clone()
    };
    synth.validate()?;
    let world = World::from_seed(&synth);
    let pool = generate_pool_in(&world, &synth, &mut stream(seed, Stream::TrainPool))?;
    let table = pool.table().with_lambda(spec.lambda)?;
    let train_pool = match spec.rfs_threshold {
        Some(t) => repeat_factor_resample(&pool, t, &mut stream(seed, Stream::Resample))?,
        None => pool,
    };
    let held_out = build_held_out(spec, seed, &world)?;
    Ok(RunData {
        world,
        table,
        train_pool,
        eval_pool: held_out.eval_pool,
        background: held_out.background,
    })
}

/// Evaluation proposals and scored background of a run.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub eval_pool: ProposalPool,
    pub background: crate::Matrix,
}

/// The held-out side of [`build_data`] alone; `world` must be the world of
/// `seed`.
pub fn build_held_out(spec: &ExperimentSpec, seed: u64, world: &World) -> Result<HeldOut> {
    let synth = SynthConfig {
        seed,
        ..spec.synth.clone()
    };
    let mut eval_rng = stream(seed, Stream::EvalPool);
    let eval_pool = generate_eval_pool(world, &synth, spec.eval.per_category, &mut eval_rng)?;
    let background = world.background_samples(&synth, spec.eval.background_samples, &mut eval_rng);
    Ok(HeldOut {
        eval_pool,
        background,
    })
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub seed: u64,
    pub table: CategoryTable,
    pub params: ClassifierParams,
    pub log: TrainLog,
    pub report: EvalReport,
    pub bg_fraction: Vec<Option<f64>>,
    pub early_scores: Vec<f64>,
    pub late_scores: Vec<f64>,
}

pub fn run_experiment(spec: &ExperimentSpec, seed: u64) -> Result<RunArtifacts> {
    spec.validate()?;
    let data = build_data(spec, seed)?;
    run_on(spec, seed, &data)
}

/// Trains and evaluates on prebuilt data; lets several rules share one pool.
pub fn run_on(spec: &ExperimentSpec, seed: u64, data: &RunData) -> Result<RunArtifacts> {
    let (params, log) = train(
        &data.train_pool,
        &data.table,
        spec.rule,
        &spec.schedule,
        seed,
        &spec.train,
    )?;
    let report = evaluate(&params, &data.eval_pool, &data.table, spec.eval.threshold)?;
    let early_scores = bg_score_profile(&log.early_params, &data.background, &data.table)?;
    let late_scores = bg_score_profile(&params, &data.background, &data.table)?;
    Ok(RunArtifacts {
        seed,
        table: data.table.clone(),
        bg_fraction: bg_origin_fraction(&log.ledger),
        params,
        log,
        report,
        early_scores,
        late_scores,
    })
}
