use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{Context, Result};
use droploss_core::diagnostics::{
    aggregate, bg_origin_fraction, bg_score_profile, bin_mean, bin_median, drop_rate_audit,
    front_flags, run_job, sweep_jobs, ParetoPoint, SweepFamily, SweepJob,
};
use droploss_core::experiment::{build_data, build_held_out, run_on, RunArtifacts, RunData};
use droploss_core::gradcheck::{run_gradcheck, variant_label, Perturbation, Worst};
use droploss_core::metrics::evaluate;
use droploss_core::rng::{stream, Stream};
use droploss_core::synth::{repeat_factor_resample, CountProfile, SynthConfig, World};
use droploss_core::{Bin, CategoryTable, LossRule};

use crate::config::{self, RunConfig};
use crate::formats::{self, SweepRun};

/// Bad flags or flag combinations; reported like a config error.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, thiserror::Error)]
#[error("gradcheck failed: {0}")]
pub struct GradcheckFailed(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(config::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set `output.dir`"))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Generated data of `seed`, with the training pool swapped for the imported
/// one when the config names a file.
fn prepare_data(cfg: &RunConfig, seed: u64) -> Result<RunData> {
    let mut data = build_data(&cfg.spec, seed)?;
    if let Some(path) = &cfg.train_pool {
        let pool = formats::read_pool(path, cfg.spec.synth.num_categories)
            .with_context(|| format!("reading pool {}", path.display()))?;
        anyhow::ensure!(
            pool.features().cols() == cfg.spec.synth.feature_dim,
            "pool has {} features, config says {}",
            pool.features().cols(),
            cfg.spec.synth.feature_dim
        );
        data.table = pool.table().with_lambda(cfg.spec.lambda)?;
        data.train_pool = match cfg.spec.rfs_threshold {
            Some(t) => repeat_factor_resample(&pool, t, &mut stream(seed, Stream::Resample))?,
            None => pool,
        };
    }
    Ok(data)
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn train(args: TrainArgs, out_text: &mut dyn Write) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let out = output_dir(args.out, &cfg)?;
    let started = Instant::now();

    let data = prepare_data(&cfg, seed)?;
    let run = run_on(&cfg.spec, seed, &data)?;
    write_run(&out, &cfg, &data, &run)?;

    let r = &run.report;
    writeln!(
        out_text,
        "{} seed {seed}: tail {} head {} overall {} ({:.1}s) -> {}",
        variant_label(&cfg.spec.rule),
        fmt3(r.tail_metric()),
        fmt3(r.head_metric()),
        fmt3(r.overall_metric()),
        started.elapsed().as_secs_f64(),
        out.display()
    )?;
    Ok(())
}

fn fmt3(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.3}"))
}

fn write_run(out: &Path, cfg: &RunConfig, data: &RunData, run: &RunArtifacts) -> Result<()> {
    let profile_counts = match &cfg.spec.synth.profile {
        CountProfile::Explicit(counts) => {
            formats::write_counts(&out.join("profile_counts.csv"), counts)?;
            Some("profile_counts.csv")
        }
        _ => None,
    };
    std::fs::write(
        out.join("config.cfg"),
        config::render(cfg, &[run.seed], profile_counts),
    )?;
    formats::write_counts(&out.join("counts.csv"), run.table.counts())?;
    formats::write_train_log(&out.join("train_log.csv"), &run.log.records)?;
    formats::write_ledger(&out.join("ledger.csv"), &run.log.ledger, &run.table)?;
    formats::write_ledger_snapshots(
        &out.join("ledger_snapshots.csv"),
        &run.log.snapshots,
        &run.table,
    )?;
    formats::write_params(&out.join("params.csv"), &run.params)?;
    formats::write_params(&out.join("early_params.csv"), &run.log.early_params)?;
    formats::write_grad_origin(&out.join("grad_origin.csv"), &run.bg_fraction, &run.table)?;
    formats::write_bg_scores(
        &out.join("bg_scores.csv"),
        &run.early_scores,
        &run.late_scores,
        &run.table,
    )?;
    formats::write_eval(&out.join("eval.csv"), &run.report)?;
    if let Some(audit) = drop_rate_audit(&run.log.records) {
        formats::write_drop_audit(&out.join("drop_audit.csv"), &audit)?;
    }
    if cfg.export_pool {
        formats::write_pool(&out.join("train_pool.csv"), &data.train_pool)?;
        formats::write_pool(&out.join("eval_pool.csv"), &data.eval_pool)?;
    }
    Ok(())
}

pub struct DiagnoseArgs {
    pub run_dir: PathBuf,
    pub out: Option<PathBuf>,
}

/// Recomputes the diagnostics of a finished run from its stored artifacts.
/// Only the held-out data is regenerated, from the stored config and seed.
pub fn diagnose(args: DiagnoseArgs, out_text: &mut dyn Write) -> Result<()> {
    let dir = &args.run_dir;
    let cfg = config::load(&dir.join("config.cfg"))?;
    let seed = cfg.seeds[0];
    let out = args.out.clone().unwrap_or_else(|| dir.clone());
    std::fs::create_dir_all(&out)?;

    let counts = formats::read_counts(&dir.join("counts.csv"))?;
    let table = CategoryTable::from_counts(&counts, cfg.spec.lambda)?;
    let ledger = formats::read_ledger(&dir.join("ledger.csv"))?;
    anyhow::ensure!(
        ledger.num_categories() == table.num_categories(),
        "ledger and counts disagree on the number of categories"
    );
    let records = formats::read_train_log(&dir.join("train_log.csv"))?;
    let params = formats::read_params(&dir.join("params.csv"))?;
    let early = formats::read_params(&dir.join("early_params.csv"))?;

    let synth = SynthConfig {
        seed,
        ..cfg.spec.synth.clone()
    };
    let world = World::from_seed(&synth);
    let held = build_held_out(&cfg.spec, seed, &world)?;

    let fractions = bg_origin_fraction(&ledger);
    let early_scores = bg_score_profile(&early, &held.background, &table)?;
    let late_scores = bg_score_profile(&params, &held.background, &table)?;
    let report = evaluate(&params, &held.eval_pool, &table, cfg.spec.eval.threshold)?;

    formats::write_grad_origin(&out.join("grad_origin.csv"), &fractions, &table)?;
    formats::write_bg_scores(
        &out.join("bg_scores.csv"),
        &early_scores,
        &late_scores,
        &table,
    )?;
    formats::write_eval(&out.join("eval.csv"), &report)?;
    let audit = drop_rate_audit(&records);
    if let Some(audit) = &audit {
        formats::write_drop_audit(&out.join("drop_audit.csv"), audit)?;
    }

    writeln!(
        out_text,
        "bin       bg_fraction  early_score  late_score  cls_recall"
    )?;
    for bin in Bin::ALL {
        writeln!(
            out_text,
            "{:<9} {:>11}  {:>11}  {:>10}  {:>10}",
            bin.name(),
            fmt3(bin_median(&fractions, &table, bin)),
            fmt_small(bin_mean(&early_scores, &table, bin)),
            fmt_small(bin_mean(&late_scores, &table, bin)),
            fmt3(report.bin_cls_recall[bin.index()]),
        )?;
    }
    if let Some(audit) = audit {
        for a in audit {
            writeln!(
                out_text,
                "keep rate {:<9} {} of {} cells (expected {}){}",
                a.bin.name(),
                fmt3(a.empirical),
                a.cells,
                fmt3(a.expected),
                if a.flagged { "  FLAGGED" } else { "" }
            )?;
        }
    }
    Ok(())
}

fn fmt_small(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.2e}"))
}

pub struct SweepArgs {
    pub config: Option<PathBuf>,
    pub families: Vec<String>,
    pub grids: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    /// No per-run progress on stderr.
    pub quiet: bool,
}

/// `2,3,4.5`; an empty or blank string is an empty grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| usage(format!("bad grid value `{s}`")))
        })
        .collect()
}

/// Families with their grids. Grids pair up, in order, with the
/// parameterized families.
pub fn plan_sweep(families: &[String], grids: &[String]) -> Result<Vec<(SweepFamily, Vec<f64>)>> {
    let names: Vec<&str> = families
        .iter()
        .flat_map(|f| f.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(usage("no sweep family given (--family)"));
    }
    let mut grids = grids.iter();
    let mut plan = Vec::new();
    for name in names {
        let family = SweepFamily::parse(name).ok_or_else(|| {
            usage(format!(
                "unknown family `{name}` (expected one of {})",
                SweepFamily::ALL.map(|f| f.name()).join(", ")
            ))
        })?;
        let grid = if family.is_parameterized() {
            let grid = grids
                .next()
                .map(|g| parse_grid(g))
                .transpose()?
                .unwrap_or_default();
            if grid.is_empty() {
                return Err(usage(format!("empty grid for family `{name}`")));
            }
            grid
        } else {
            Vec::new()
        };
        plan.push((family, grid));
    }
    if grids.next().is_some() {
        return Err(usage("more --grid values than parameterized families"));
    }
    Ok(plan)
}

/// Applies `f` to every item on at most `width` threads; results come back in
/// input order.
pub fn run_pool<T: Sync, R: Send>(items: &[T], width: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let width = width.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..width {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

pub fn sweep(args: SweepArgs, out_text: &mut dyn Write) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let plan = plan_sweep(&args.families, &args.grids)?;
    if cfg.train_pool.is_some() {
        return Err(usage(
            "`synth.train_pool` is not supported by sweep; every seed generates its own pool",
        ));
    }
    let seeds = args.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let out = output_dir(args.out, &cfg)?;

    let mut blocks: Vec<(SweepFamily, Vec<LossRule>)> = Vec::new();
    for (family, grid) in &plan {
        blocks.push((
            *family,
            family.rules(grid).map_err(|e| usage(e.to_string()))?,
        ));
    }
    let all_rules: Vec<LossRule> = blocks.iter().flat_map(|(_, r)| r.iter().copied()).collect();
    let family_of: Vec<SweepFamily> = blocks
        .iter()
        .flat_map(|(f, r)| std::iter::repeat_n(*f, r.len()))
        .collect();
    let jobs = sweep_jobs(&all_rules, &seeds);
    let started = Instant::now();
    let results = run_pool(&jobs, args.jobs, |job| {
        let r = run_job(&cfg.spec, job);
        match &r {
            _ if args.quiet => {}
            Ok(m) => eprintln!(
                "  {} seed {}: tail {:.3} head {:.3}",
                variant_label(&job.rule),
                job.seed,
                m.tail,
                m.head
            ),
            Err(e) => eprintln!(
                "  {} seed {}: failed: {e}",
                variant_label(&job.rule),
                job.seed
            ),
        }
        r
    });
    let paired: Vec<(SweepJob, droploss_core::Result<_>)> =
        jobs.iter().copied().zip(results).collect();

    let mut points: Vec<ParetoPoint> = Vec::new();
    let mut offset = 0;
    for (family, rules) in &blocks {
        let local: Vec<_> = paired
            .iter()
            .filter(|(j, _)| j.point >= offset && j.point < offset + rules.len())
            .map(|(j, r)| {
                (
                    SweepJob {
                        point: j.point - offset,
                        ..*j
                    },
                    r.clone(),
                )
            })
            .collect();
        points.extend(aggregate(*family, rules, &local));
        offset += rules.len();
    }
    let flags = front_flags(&points);
    formats::write_pareto(&out.join("pareto.csv"), &points, &flags)?;
    let runs: Vec<SweepRun<'_>> = paired
        .iter()
        .map(|(j, r)| SweepRun {
            family: family_of[j.point].name(),
            param: j.rule.param(),
            seed: j.seed,
            outcome: r.clone().map_err(|e| e.to_string()),
        })
        .collect();
    formats::write_sweep_runs(&out.join("sweep_runs.csv"), &runs)?;
    std::fs::write(out.join("config.cfg"), config::render(&cfg, &seeds, None))?;

    for (p, on_front) in points.iter().zip(&flags) {
        let m = p.metrics;
        writeln!(
            out_text,
            "{:<16} seeds {}/{}  tail {}  head {}  overall {}{}",
            variant_label(&p.rule),
            p.seed_count,
            p.seed_count + p.failed_seeds,
            fmt3(m.map(|m| m.tail)),
            fmt3(m.map(|m| m.head)),
            fmt3(m.map(|m| m.overall)),
            if *on_front { "  front" } else { "" }
        )?;
    }
    writeln!(
        out_text,
        "{} runs in {:.1}s -> {}",
        jobs.len(),
        started.elapsed().as_secs_f64(),
        out.join("pareto.csv").display()
    )?;
    Ok(())
}

pub fn gradcheck(perturb: f64, out_text: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let report = run_gradcheck(Perturbation { amount: perturb })?;
    let show = |w: &Worst| {
        format!(
            "{:.2e} (instance {}, index {})",
            w.rel_error, w.instance, w.index
        )
    };
    writeln!(
        out_text,
        "{:<16} {:<36} {:<36} result",
        "variant", "loss-level", "end-to-end"
    )?;
    let mut failures = Vec::new();
    for v in &report.variants {
        let label = variant_label(&v.rule);
        let ok = v.passed();
        writeln!(
            out_text,
            "{label:<16} {:<36} {:<36} {}",
            show(&v.loss_level),
            show(&v.end_to_end),
            if ok { "ok" } else { "FAIL" }
        )?;
        if !ok {
            let (level, w) = if v.loss_level.rel_error > droploss_core::gradcheck::LOSS_TOLERANCE {
                ("logit", &v.loss_level)
            } else {
                ("parameter", &v.end_to_end)
            };
            failures.push(format!(
                "{label} {level} cell {} of instance {}: analytic {} vs numeric {} (relative error {:.3e})",
                w.index, w.instance, w.analytic, w.numeric, w.rel_error
            ));
        }
    }
    writeln!(out_text, "{:.2}s", started.elapsed().as_secs_f64())?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(GradcheckFailed(failures.join("; ")).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_pair_with_parameterized_families() {
        let plan = plan_sweep(
            &["beql,eql".into(), "fixed_drop".into()],
            &["2,3".into(), "0.5".into()],
        )
        .unwrap();
        assert_eq!(
            plan,
            vec![
                (SweepFamily::Beql, vec![2.0, 3.0]),
                (SweepFamily::Eql, vec![]),
                (SweepFamily::FixedDrop, vec![0.5]),
            ]
        );
        let five = plan_sweep(&["fixed_drop".into()], &["0,0.25,0.5,0.75,1".into()]).unwrap();
        assert_eq!(five[0].1.len(), 5);
    }

    #[test]
    fn bad_sweeps_are_usage_errors() {
        for (families, grids) in [
            (vec!["beql"], vec![]),
            (vec!["beql"], vec![""]),
            (vec!["focal"], vec![]),
            (vec!["eql"], vec!["1"]),
            (vec![], vec![]),
        ] {
            let f: Vec<String> = families.into_iter().map(String::from).collect();
            let g: Vec<String> = grids.into_iter().map(String::from).collect();
            let err = plan_sweep(&f, &g).unwrap_err();
            assert!(err.is::<UsageError>(), "{err}");
        }
    }

    #[test]
    fn pool_keeps_input_order() {
        let items: Vec<u64> = (0..37).collect();
        for width in [1, 3, 8] {
            let out = run_pool(&items, width, |x| x * x);
            assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
        assert!(run_pool(&Vec::<u8>::new(), 4, |x| *x).is_empty());
    }
}
