//! CSV files of a run. Every file has a header row, `\n` line endings and
//! floats printed in their shortest round-trip form, so identical runs give
//! identical bytes and a file read back yields the exact values written.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use droploss_core::diagnostics::{BinKeepAudit, GradientLedger, ParetoPoint};
use droploss_core::losses::{BinCounts, DropStats};
use droploss_core::metrics::EvalReport;
use droploss_core::model::{ClassifierParams, Layer};
use droploss_core::synth::ProposalPool;
use droploss_core::train::IterationRecord;
use droploss_core::{Bin, CategoryTable, Label, LambdaMode, Matrix, MuPair};

pub fn float(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[&str]) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(Table { writer })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    fn save(self, path: &Path) -> Result<()> {
        let bytes = self.writer.into_inner().map_err(|e| e.into_error())?;
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
}

fn expect_header(r: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let header = r.headers()?;
    ensure!(
        header.iter().eq(expected.iter().copied()),
        "header is `{}`, expected `{}`",
        header.iter().collect::<Vec<_>>().join(","),
        expected.join(",")
    );
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec
        .get(i)
        .with_context(|| format!("line {line}: missing `{name}`"))?;
    raw.parse()
        .with_context(|| format!("line {line}: bad `{name}` value `{raw}`"))
}

fn opt_field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    name: &str,
) -> Result<Option<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    match rec.get(i) {
        Some("") | None => Ok(None),
        Some(_) => field(rec, i, name).map(Some),
    }
}

// ---- category counts ------------------------------------------------------

const COUNTS_HEADER: &[&str] = &["category_id", "count"];

pub fn write_counts(path: &Path, counts: &[u64]) -> Result<()> {
    let mut t = Table::new(COUNTS_HEADER)?;
    for (j, c) in counts.iter().enumerate() {
        t.row([j.to_string(), c.to_string()])?;
    }
    t.save(path)
}

/// Counts indexed by category id; ids must cover `0..n` exactly once, in any
/// order.
pub fn read_counts(path: &Path) -> Result<Vec<u64>> {
    let mut r = reader(path)?;
    expect_header(&mut r, COUNTS_HEADER)?;
    let mut pairs: Vec<(usize, u64)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        pairs.push((field(&rec, 0, "category_id")?, field(&rec, 1, "count")?));
    }
    ensure!(!pairs.is_empty(), "no categories");
    let mut counts = vec![None; pairs.len()];
    for (id, c) in pairs {
        let slot = counts
            .get_mut(id)
            .with_context(|| format!("category id {id} out of range"))?;
        ensure!(slot.is_none(), "category id {id} listed twice");
        *slot = Some(c);
    }
    Ok(counts.into_iter().map(|c| c.unwrap_or_default()).collect())
}

// ---- proposal pools -------------------------------------------------------

/// Feature columns `f0..f{d-1}` then `label`, which is a category id or `bg`.
pub fn write_pool(path: &Path, pool: &ProposalPool) -> Result<()> {
    let d = pool.features().cols();
    let mut header: Vec<String> = (0..d).map(|k| format!("f{k}")).collect();
    header.push("label".into());
    let mut t = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    for (row, label) in pool.features().iter_rows().zip(pool.labels()) {
        let mut fields: Vec<String> = row.iter().map(|&x| float(x)).collect();
        fields.push(match label {
            Label::Background => "bg".into(),
            Label::Category(c) => c.to_string(),
        });
        t.row(fields)?;
    }
    t.save(path)
}

pub fn read_pool(path: &Path, num_categories: usize) -> Result<ProposalPool> {
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    let d = header.len().saturating_sub(1);
    ensure!(d > 0, "pool file needs at least one feature column");
    for (k, name) in header.iter().take(d).enumerate() {
        ensure!(
            name == format!("f{k}"),
            "column {k} is `{name}`, expected `f{k}`"
        );
    }
    ensure!(&header[d] == "label", "last column must be `label`");
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for k in 0..d {
            data.push(field::<f64>(&rec, k, "feature")?);
        }
        labels.push(match &rec[d] {
            "bg" => Label::Background,
            _ => Label::Category(field(&rec, d, "label")?),
        });
    }
    let rows = labels.len();
    Ok(ProposalPool::new(
        Matrix::from_vec(rows, d, data),
        labels,
        num_categories,
        LambdaMode::BinAligned,
    )?)
}

// ---- training log ---------------------------------------------------------

const LOG_HEADER: &[&str] = &[
    "iteration",
    "loss",
    "lr",
    "fg_rare",
    "fg_common",
    "fg_frequent",
    "mu_tail",
    "mu_freq",
    "cells_rare",
    "kept_rare",
    "expected_rare",
    "cells_common",
    "kept_common",
    "expected_common",
    "cells_frequent",
    "kept_frequent",
    "expected_frequent",
];

/// One row per iteration. Drop columns are empty for deterministic rules.
pub fn write_train_log(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut t = Table::new(LOG_HEADER)?;
    for r in records {
        let mut f = vec![
            r.iteration.to_string(),
            float(r.loss),
            float(r.lr),
            r.occurrences.rare.to_string(),
            r.occurrences.common.to_string(),
            r.occurrences.frequent.to_string(),
        ];
        match &r.drop {
            Some(d) => {
                f.push(opt(d.mu.map(|m| m.mu_tail)));
                f.push(opt(d.mu.map(|m| m.mu_freq)));
                for b in 0..3 {
                    f.push(d.cells[b].to_string());
                    f.push(d.kept[b].to_string());
                    f.push(float(d.expected[b]));
                }
            }
            None => f.extend(std::iter::repeat_n(String::new(), 11)),
        }
        t.row(f)?;
    }
    t.save(path)
}

pub fn read_train_log(path: &Path) -> Result<Vec<IterationRecord>> {
    let mut r = reader(path)?;
    expect_header(&mut r, LOG_HEADER)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let occurrences = BinCounts {
            rare: field(&rec, 3, "fg_rare")?,
            common: field(&rec, 4, "fg_common")?,
            frequent: field(&rec, 5, "fg_frequent")?,
        };
        let drop = match opt_field::<u64>(&rec, 8, "cells_rare")? {
            None => None,
            Some(_) => {
                let mu = match (
                    opt_field(&rec, 6, "mu_tail")?,
                    opt_field(&rec, 7, "mu_freq")?,
                ) {
                    (Some(t), Some(f)) => Some(MuPair::new(t, f)?),
                    _ => None,
                };
                let mut d = DropStats {
                    mu,
                    occurrences,
                    ..DropStats::default()
                };
                for b in 0..3 {
                    d.cells[b] = field(&rec, 8 + 3 * b, "cells")?;
                    d.kept[b] = field(&rec, 9 + 3 * b, "kept")?;
                    d.expected[b] = field(&rec, 10 + 3 * b, "expected")?;
                }
                Some(d)
            }
        };
        out.push(IterationRecord {
            iteration: field(&rec, 0, "iteration")?,
            loss: field(&rec, 1, "loss")?,
            lr: field(&rec, 2, "lr")?,
            occurrences,
            drop,
        });
    }
    Ok(out)
}

// ---- gradient ledger ------------------------------------------------------

const LEDGER_HEADER: &[&str] = &[
    "category",
    "bin",
    "encouraging",
    "bg_discouraging",
    "fg_discouraging",
];

pub fn write_ledger(path: &Path, ledger: &GradientLedger, table: &CategoryTable) -> Result<()> {
    let mut t = Table::new(LEDGER_HEADER)?;
    for j in 0..ledger.num_categories() {
        t.row([
            j.to_string(),
            table.bin(j).name().to_string(),
            float(ledger.encouraging[j]),
            float(ledger.bg_discouraging[j]),
            float(ledger.fg_discouraging[j]),
        ])?;
    }
    t.save(path)
}

/// Accumulators only; cell counts are not stored.
pub fn read_ledger(path: &Path) -> Result<GradientLedger> {
    let mut r = reader(path)?;
    expect_header(&mut r, LEDGER_HEADER)?;
    let rows: Vec<csv::StringRecord> = r.records().collect::<Result<_, _>>()?;
    let mut ledger = GradientLedger::new(rows.len());
    for (j, rec) in rows.iter().enumerate() {
        ensure!(
            field::<usize>(rec, 0, "category")? == j,
            "ledger rows out of order"
        );
        ledger.encouraging[j] = field(rec, 2, "encouraging")?;
        ledger.bg_discouraging[j] = field(rec, 3, "bg_discouraging")?;
        ledger.fg_discouraging[j] = field(rec, 4, "fg_discouraging")?;
    }
    Ok(ledger)
}

pub fn write_ledger_snapshots(
    path: &Path,
    snapshots: &[(usize, GradientLedger)],
    table: &CategoryTable,
) -> Result<()> {
    let mut t = Table::new(&[
        "iteration",
        "category",
        "bin",
        "encouraging",
        "bg_discouraging",
        "fg_discouraging",
    ])?;
    for (it, ledger) in snapshots {
        for j in 0..ledger.num_categories() {
            t.row([
                it.to_string(),
                j.to_string(),
                table.bin(j).name().to_string(),
                float(ledger.encouraging[j]),
                float(ledger.bg_discouraging[j]),
                float(ledger.fg_discouraging[j]),
            ])?;
        }
    }
    t.save(path)
}

// ---- diagnostics ----------------------------------------------------------

pub fn write_grad_origin(
    path: &Path,
    fractions: &[Option<f64>],
    table: &CategoryTable,
) -> Result<()> {
    let mut t = Table::new(&["category", "bin", "bg_fraction"])?;
    for (j, f) in fractions.iter().enumerate() {
        t.row([j.to_string(), table.bin(j).name().to_string(), opt(*f)])?;
    }
    t.save(path)
}

/// Rows in descending frequency order; `freq_rank` 1 is the most frequent.
pub fn write_bg_scores(
    path: &Path,
    early: &[f64],
    late: &[f64],
    table: &CategoryTable,
) -> Result<()> {
    let mut t = Table::new(&["category", "freq_rank", "bin", "early_mean", "late_mean"])?;
    for (rank, j) in table.frequency_order().into_iter().enumerate() {
        t.row([
            j.to_string(),
            (rank + 1).to_string(),
            table.bin(j).name().to_string(),
            float(early[j]),
            float(late[j]),
        ])?;
    }
    t.save(path)
}

pub fn write_drop_audit(path: &Path, audit: &[BinKeepAudit; 3]) -> Result<()> {
    let mut t = Table::new(&[
        "bin",
        "cells",
        "kept",
        "empirical",
        "expected",
        "deviation",
        "flagged",
    ])?;
    for a in audit {
        t.row([
            a.bin.name().to_string(),
            a.cells.to_string(),
            a.kept.to_string(),
            opt(a.empirical),
            opt(a.expected),
            opt(a.deviation),
            a.flagged.to_string(),
        ])?;
    }
    t.save(path)
}

// ---- evaluation -----------------------------------------------------------

/// Per-category rows, then per-bin, macro, tail/head and confusion rows.
/// Columns not meaningful for a row kind are left empty.
pub fn write_eval(path: &Path, report: &EvalReport) -> Result<()> {
    let mut t = Table::new(&[
        "scope",
        "id",
        "bin",
        "instances",
        "recall",
        "cls_recall",
        "precision",
    ])?;
    for e in &report.categories {
        t.row([
            "category".to_string(),
            e.category.to_string(),
            e.bin.name().to_string(),
            e.instances.to_string(),
            opt(e.recall),
            opt(e.cls_recall),
            opt(e.precision),
        ])?;
    }
    for bin in Bin::ALL {
        let instances: u64 = report
            .categories
            .iter()
            .filter(|e| e.bin == bin)
            .map(|e| e.instances)
            .sum();
        t.row([
            "bin".to_string(),
            bin.name().to_string(),
            bin.name().to_string(),
            instances.to_string(),
            opt(report.bin_recall[bin.index()]),
            opt(report.bin_cls_recall[bin.index()]),
            String::new(),
        ])?;
    }
    let tail_recall = {
        let v: Vec<f64> = report.bin_recall[..2].iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let summary = [
        ("macro", report.macro_recall, report.macro_cls_recall),
        ("tail", tail_recall, report.tail_metric()),
        (
            "head",
            report.bin_recall[Bin::Frequent.index()],
            report.head_metric(),
        ),
    ];
    for (id, recall, cls) in summary {
        t.row([
            "summary".to_string(),
            id.to_string(),
            String::new(),
            String::new(),
            opt(recall),
            opt(cls),
            String::new(),
        ])?;
    }
    for (id, rate) in [
        ("bg_as_fg_rate", report.bg_as_fg_rate),
        ("fg_as_bg_rate", report.fg_as_bg_rate),
    ] {
        t.row([
            "confusion".to_string(),
            id.to_string(),
            String::new(),
            String::new(),
            opt(rate),
            String::new(),
            String::new(),
        ])?;
    }
    t.save(path)
}

// ---- parameters -----------------------------------------------------------

const PARAMS_HEADER: &[&str] = &["tensor", "row", "col", "value"];

/// One row per scalar. Weights are `(outputs, inputs)`; biases use column 0.
pub fn write_params(path: &Path, params: &ClassifierParams) -> Result<()> {
    let mut t = Table::new(PARAMS_HEADER)?;
    let layer = |t: &mut Table, name: &str, l: &Layer| -> Result<()> {
        for (r, row) in l.weight.iter_rows().enumerate() {
            for (c, v) in row.iter().enumerate() {
                t.row([
                    format!("{name}_weight"),
                    r.to_string(),
                    c.to_string(),
                    float(*v),
                ])?;
            }
        }
        for (r, v) in l.bias.iter().enumerate() {
            t.row([format!("{name}_bias"), r.to_string(), "0".into(), float(*v)])?;
        }
        Ok(())
    };
    if let Some(h) = &params.hidden {
        layer(&mut t, "hidden", h)?;
    }
    layer(&mut t, "output", &params.output)?;
    t.save(path)
}

pub fn read_params(path: &Path) -> Result<ClassifierParams> {
    let mut r = reader(path)?;
    expect_header(&mut r, PARAMS_HEADER)?;
    let mut cells: Vec<(String, usize, usize, f64)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        cells.push((
            rec[0].to_string(),
            field(&rec, 1, "row")?,
            field(&rec, 2, "col")?,
            field(&rec, 3, "value")?,
        ));
    }
    let build = |name: &str| -> Result<Option<Layer>> {
        let w: Vec<_> = cells
            .iter()
            .filter(|c| c.0 == format!("{name}_weight"))
            .collect();
        let b: Vec<_> = cells
            .iter()
            .filter(|c| c.0 == format!("{name}_bias"))
            .collect();
        if w.is_empty() && b.is_empty() {
            return Ok(None);
        }
        let rows = w.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let cols = w.iter().map(|c| c.2 + 1).max().unwrap_or(0);
        ensure!(
            w.len() == rows * cols,
            "{name} weights are not a full matrix"
        );
        ensure!(
            b.len() == rows,
            "{name} has {} biases for {rows} outputs",
            b.len()
        );
        let mut weight = Matrix::zeros(rows, cols);
        for c in w {
            weight.as_mut_slice()[c.1 * cols + c.2] = c.3;
        }
        let mut bias = vec![0.0; rows];
        for c in b {
            *bias.get_mut(c.1).context("bias row out of range")? = c.3;
        }
        Ok(Some(Layer { weight, bias }))
    };
    let Some(output) = build("output")? else {
        bail!("no output layer in {}", path.display());
    };
    let hidden = build("hidden")?;
    if let Some(h) = &hidden {
        ensure!(
            h.outputs() == output.inputs(),
            "hidden and output layers do not chain"
        );
    }
    Ok(ClassifierParams { hidden, output })
}

// ---- sweeps ---------------------------------------------------------------

pub fn write_pareto(path: &Path, points: &[ParetoPoint], on_front: &[bool]) -> Result<()> {
    let mut t = Table::new(&[
        "family",
        "param",
        "seed_count",
        "failed_seeds",
        "tail",
        "head",
        "overall",
        "tail_spread",
        "head_spread",
        "on_front",
        "status",
    ])?;
    for (p, front) in points.iter().zip(on_front) {
        let m = p.metrics;
        let status = match (p.metrics.is_some(), p.flagged()) {
            (false, _) => "failed",
            (true, true) => "flagged",
            (true, false) => "ok",
        };
        t.row([
            p.family.name().to_string(),
            opt(p.param()),
            p.seed_count.to_string(),
            p.failed_seeds.to_string(),
            opt(m.map(|m| m.tail)),
            opt(m.map(|m| m.head)),
            opt(m.map(|m| m.overall)),
            opt(m.map(|m| m.tail_spread)),
            opt(m.map(|m| m.head_spread)),
            front.to_string(),
            status.to_string(),
        ])?;
    }
    t.save(path)
}

/// Per (point, seed) outcome of a sweep.
pub struct SweepRun<'a> {
    pub family: &'a str,
    pub param: Option<f64>,
    pub seed: u64,
    pub outcome: std::result::Result<droploss_core::diagnostics::SeedMetrics, String>,
}

pub fn write_sweep_runs(path: &Path, runs: &[SweepRun<'_>]) -> Result<()> {
    let mut t = Table::new(&[
        "family", "param", "seed", "status", "tail", "head", "overall", "error",
    ])?;
    for r in runs {
        let (status, tail, head, overall, err) = match &r.outcome {
            Ok(m) => (
                "ok",
                float(m.tail),
                float(m.head),
                float(m.overall),
                String::new(),
            ),
            Err(e) => (
                "failed",
                String::new(),
                String::new(),
                String::new(),
                e.clone(),
            ),
        };
        t.row([
            r.family.to_string(),
            opt(r.param),
            r.seed.to_string(),
            status.to_string(),
            tail,
            head,
            overall,
            err,
        ])?;
    }
    t.save(path)
}
