//! Flat `key = value` experiment configuration with dotted section prefixes.
//!
//! Every key is optional and defaults to the library defaults. Unknown keys,
//! duplicates and malformed values are rejected with the offending line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use droploss_core::experiment::ExperimentSpec;
use droploss_core::synth::CountProfile;
use droploss_core::{LambdaMode, LossRule};

use crate::formats;

#[derive(Debug, thiserror::Error)]
#[error("{}:{line}: {message}", path.display())]
pub struct ConfigError {
    pub path: PathBuf,
    /// 1-based; 0 when the problem is not tied to one line.
    pub line: usize,
    pub message: String,
}

/// Everything a run needs besides the seed and the command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ExperimentSpec,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    /// Source of explicit category counts, when the profile is `file`.
    pub counts_file: Option<PathBuf>,
    /// Imported training pool replacing the generated one.
    pub train_pool: Option<PathBuf>,
    pub export_pool: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            spec: ExperimentSpec::default(),
            seeds: vec![0],
            out_dir: None,
            counts_file: None,
            train_pool: None,
            export_pool: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seeds",
    "output.dir",
    "output.export_pool",
    "synth.num_categories",
    "synth.zipf_exponent",
    "synth.feature_dim",
    "synth.fg_noise_sigma",
    "synth.near_miss_sigma",
    "synth.near_miss_fraction",
    "synth.dataset_size",
    "synth.fg_fraction",
    "synth.profile",
    "synth.counts_file",
    "synth.clusters",
    "synth.cluster_spread",
    "synth.train_pool",
    "synth.rfs_threshold",
    "loss.rule",
    "loss.base",
    "loss.keep_prob",
    "loss.lambda",
    "schedule.iterations",
    "schedule.base_lr",
    "schedule.decay",
    "schedule.milestones",
    "schedule.momentum",
    "schedule.weight_decay",
    "schedule.batch_size",
    "model.hidden_units",
    "train.snapshot_every",
    "train.early_fraction",
    "eval.threshold",
    "eval.per_category",
    "eval.background_samples",
];

struct Entry {
    line: usize,
    value: String,
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        path: path.to_path_buf(),
        line: 0,
        message: format!("cannot read config: {e}"),
    })?;
    parse(&text, path)
}

/// Parses `text`; relative paths inside are resolved against the directory
/// of `origin`.
pub fn parse(text: &str, origin: &Path) -> Result<RunConfig, ConfigError> {
    let fail = |line: usize, message: String| ConfigError {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut entries: BTreeMap<&str, Entry> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(fail(
                line,
                format!("expected `key = value`, found `{content}`"),
            ));
        };
        let key = key.trim();
        let Some(&known) = KEYS.iter().find(|k| **k == key) else {
            return Err(fail(line, format!("unknown key `{key}`")));
        };
        if let Some(prev) = entries.get(known) {
            return Err(fail(
                line,
                format!("duplicate key `{key}` (first set on line {})", prev.line),
            ));
        }
        entries.insert(
            known,
            Entry {
                line,
                value: value.trim().to_string(),
            },
        );
    }

    let base_dir = origin.parent().unwrap_or(Path::new(""));
    let mut cfg = RunConfig::default();
    let mut rule_name = String::from("bce");
    let mut base = None;
    let mut keep_prob = None;
    let mut profile_name = None;
    for (&key, entry) in &entries {
        let v = entry.value.as_str();
        let at = |message: String| fail(entry.line, format!("`{key}`: {message}"));
        let spec = &mut cfg.spec;
        match key {
            "seeds" => cfg.seeds = parse_list(v).map_err(at)?,
            "output.dir" => cfg.out_dir = Some(base_dir.join(v)),
            "output.export_pool" => cfg.export_pool = parse_value(v).map_err(at)?,
            "synth.num_categories" => spec.synth.num_categories = parse_value(v).map_err(at)?,
            "synth.zipf_exponent" => spec.synth.zipf_exponent = parse_value(v).map_err(at)?,
            "synth.feature_dim" => spec.synth.feature_dim = parse_value(v).map_err(at)?,
            "synth.fg_noise_sigma" => spec.synth.fg_noise_sigma = parse_value(v).map_err(at)?,
            "synth.near_miss_sigma" => spec.synth.near_miss_sigma = parse_value(v).map_err(at)?,
            "synth.near_miss_fraction" => {
                spec.synth.near_miss_fraction = parse_value(v).map_err(at)?
            }
            "synth.dataset_size" => spec.synth.dataset_size = parse_value(v).map_err(at)?,
            "synth.fg_fraction" => spec.synth.fg_fraction = parse_value(v).map_err(at)?,
            "synth.profile" => profile_name = Some(v.to_string()),
            "synth.counts_file" => cfg.counts_file = Some(base_dir.join(v)),
            "synth.clusters" => spec.synth.clusters = parse_value(v).map_err(at)?,
            "synth.cluster_spread" => spec.synth.cluster_spread = parse_value(v).map_err(at)?,
            "synth.train_pool" => cfg.train_pool = Some(base_dir.join(v)),
            "synth.rfs_threshold" => {
                spec.rfs_threshold = match v {
                    "none" => None,
                    _ => Some(parse_value(v).map_err(at)?),
                }
            }
            "loss.rule" => rule_name = v.to_string(),
            "loss.base" => base = Some(parse_value(v).map_err(at)?),
            "loss.keep_prob" => keep_prob = Some(parse_value(v).map_err(at)?),
            "loss.lambda" => {
                spec.lambda = match v {
                    "bin_aligned" => LambdaMode::BinAligned,
                    _ => LambdaMode::Explicit(parse_value(v).map_err(at)?),
                }
            }
            "schedule.iterations" => spec.schedule.iterations = parse_value(v).map_err(at)?,
            "schedule.base_lr" => spec.schedule.base_lr = parse_value(v).map_err(at)?,
            "schedule.decay" => spec.schedule.decay = parse_value(v).map_err(at)?,
            "schedule.milestones" => spec.schedule.milestones = parse_list(v).map_err(at)?,
            "schedule.momentum" => spec.schedule.momentum = parse_value(v).map_err(at)?,
            "schedule.weight_decay" => spec.schedule.weight_decay = parse_value(v).map_err(at)?,
            "schedule.batch_size" => spec.schedule.batch_size = parse_value(v).map_err(at)?,
            "model.hidden_units" => spec.train.hidden_units = parse_value(v).map_err(at)?,
            "train.snapshot_every" => spec.train.snapshot_every = parse_value(v).map_err(at)?,
            "train.early_fraction" => spec.train.early_fraction = parse_value(v).map_err(at)?,
            "eval.threshold" => spec.eval.threshold = parse_value(v).map_err(at)?,
            "eval.per_category" => spec.eval.per_category = parse_value(v).map_err(at)?,
            "eval.background_samples" => {
                spec.eval.background_samples = parse_value(v).map_err(at)?
            }
            _ => unreachable!("key list and match arms out of sync: {key}"),
        }
    }

    let line_of = |key: &str| entries.get(key).map_or(0, |e| e.line);
    cfg.spec.rule = match rule_name.as_str() {
        "bce" => LossRule::Bce,
        "softmax" => LossRule::Softmax,
        "eql" => LossRule::Eql,
        "droploss" => LossRule::DropLoss,
        "beql" => LossRule::Beql {
            base: base
                .ok_or_else(|| fail(line_of("loss.rule"), "beql needs `loss.base`".into()))?,
        },
        "fixed_drop" => LossRule::FixedDrop {
            keep_prob: keep_prob.ok_or_else(|| {
                fail(
                    line_of("loss.rule"),
                    "fixed_drop needs `loss.keep_prob`".into(),
                )
            })?,
        },
        other => {
            return Err(fail(
                line_of("loss.rule"),
                format!("unknown loss rule `{other}`"),
            ))
        }
    };
    for (key, used) in [
        ("loss.base", matches!(cfg.spec.rule, LossRule::Beql { .. })),
        (
            "loss.keep_prob",
            matches!(cfg.spec.rule, LossRule::FixedDrop { .. }),
        ),
    ] {
        if entries.contains_key(key) && !used {
            return Err(fail(
                line_of(key),
                format!("`{key}` does not apply to rule `{rule_name}`"),
            ));
        }
    }

    let profile_line = line_of("synth.profile");
    cfg.spec.synth.profile = match profile_name.as_deref().unwrap_or("bin_balanced") {
        "bin_balanced" => CountProfile::BinBalanced,
        "zipf" => CountProfile::Zipf,
        "file" => {
            let Some(file) = &cfg.counts_file else {
                return Err(fail(
                    profile_line,
                    "profile `file` needs `synth.counts_file`".into(),
                ));
            };
            let counts = formats::read_counts(file).map_err(|e| {
                fail(
                    line_of("synth.counts_file"),
                    format!("{}: {e:#}", file.display()),
                )
            })?;
            CountProfile::Explicit(counts)
        }
        other => return Err(fail(profile_line, format!("unknown profile `{other}`"))),
    };
    if cfg.counts_file.is_some() && !matches!(cfg.spec.synth.profile, CountProfile::Explicit(_)) {
        return Err(fail(
            line_of("synth.counts_file"),
            "`synth.counts_file` needs `synth.profile = file`".into(),
        ));
    }
    if cfg.seeds.is_empty() {
        return Err(fail(
            line_of("seeds"),
            "`seeds` must list at least one seed".into(),
        ));
    }

    if let Err(e) = cfg.spec.validate() {
        let line = match &e {
            droploss_core::Error::InvalidArgument { arg, .. } => KEYS
                .iter()
                .filter(|k| **k == *arg || k.rsplit('.').next() == Some(*arg))
                .map(|k| line_of(k))
                .find(|&l| l > 0)
                .unwrap_or(0),
            _ => 0,
        };
        return Err(fail(line, e.to_string()));
    }
    Ok(cfg)
}

fn parse_value<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_value(s.trim())).collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Canonical text of a run, as stored next to its outputs. `counts_file`
/// replaces the explicit counts path (it is written alongside).
pub fn render(cfg: &RunConfig, seeds: &[u64], counts_file: Option<&str>) -> String {
    let s = &cfg.spec;
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    put("seeds", join(seeds));
    put("synth.num_categories", s.synth.num_categories.to_string());
    put("synth.zipf_exponent", s.synth.zipf_exponent.to_string());
    put("synth.feature_dim", s.synth.feature_dim.to_string());
    put("synth.fg_noise_sigma", s.synth.fg_noise_sigma.to_string());
    put("synth.near_miss_sigma", s.synth.near_miss_sigma.to_string());
    put(
        "synth.near_miss_fraction",
        s.synth.near_miss_fraction.to_string(),
    );
    put("synth.dataset_size", s.synth.dataset_size.to_string());
    put("synth.fg_fraction", s.synth.fg_fraction.to_string());
    match &s.synth.profile {
        CountProfile::BinBalanced => put("synth.profile", "bin_balanced".into()),
        CountProfile::Zipf => put("synth.profile", "zipf".into()),
        CountProfile::Explicit(_) => {
            put("synth.profile", "file".into());
            put(
                "synth.counts_file",
                counts_file.unwrap_or("counts.csv").into(),
            );
        }
    }
    put("synth.clusters", s.synth.clusters.to_string());
    put("synth.cluster_spread", s.synth.cluster_spread.to_string());
    if let Some(p) = &cfg.train_pool {
        let p = std::path::absolute(p).unwrap_or_else(|_| p.clone());
        put("synth.train_pool", p.display().to_string());
    }
    put(
        "synth.rfs_threshold",
        s.rfs_threshold.map_or("none".into(), |t| t.to_string()),
    );
    put("loss.rule", s.rule.name().into());
    match s.rule {
        LossRule::Beql { base } => put("loss.base", base.to_string()),
        LossRule::FixedDrop { keep_prob } => put("loss.keep_prob", keep_prob.to_string()),
        _ => {}
    }
    put(
        "loss.lambda",
        match s.lambda {
            LambdaMode::BinAligned => "bin_aligned".into(),
            LambdaMode::Explicit(l) => l.to_string(),
        },
    );
    put("schedule.iterations", s.schedule.iterations.to_string());
    put("schedule.base_lr", s.schedule.base_lr.to_string());
    put("schedule.decay", s.schedule.decay.to_string());
    put("schedule.milestones", join(&s.schedule.milestones));
    put("schedule.momentum", s.schedule.momentum.to_string());
    put("schedule.weight_decay", s.schedule.weight_decay.to_string());
    put("schedule.batch_size", s.schedule.batch_size.to_string());
    put("model.hidden_units", s.train.hidden_units.to_string());
    put("train.snapshot_every", s.train.snapshot_every.to_string());
    put("train.early_fraction", s.train.early_fraction.to_string());
    put("eval.threshold", s.eval.threshold.to_string());
    put("eval.per_category", s.eval.per_category.to_string());
    put(
        "eval.background_samples",
        s.eval.background_samples.to_string(),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
        parse(text, Path::new("exp.cfg"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_str("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let cfg = parse_str(
            "loss.rule = beql   # tradeoff knob\nloss.base = 4\nseeds = 1, 2,3\nschedule.milestones = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.spec.rule, LossRule::Beql { base: 4.0 });
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.spec.schedule.milestones, vec![0.5]);
    }

    #[test]
    fn unknown_key_names_its_line() {
        let err = parse_str("seeds = 1\n\nsynth.colour = red\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert_eq!(err.to_string(), "exp.cfg:3: unknown key `synth.colour`");
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert_eq!(parse_str("seeds 1\n").unwrap_err().line, 1);
        assert_eq!(parse_str("seeds = 1\nseeds = 2\n").unwrap_err().line, 2);
        assert_eq!(
            parse_str("\nschedule.iterations = many\n")
                .unwrap_err()
                .line,
            2
        );
        assert_eq!(parse_str("loss.rule = focal\n").unwrap_err().line, 1);
        assert_eq!(parse_str("loss.rule = beql\n").unwrap_err().line, 1);
        assert_eq!(parse_str("loss.keep_prob = 0.5\n").unwrap_err().line, 1);
        assert_eq!(parse_str("seeds =\n").unwrap_err().line, 1);
    }

    #[test]
    fn library_validation_points_at_the_key() {
        let err = parse_str("seeds = 1\nschedule.base_lr = -1\n").unwrap_err();
        assert_eq!(err.line, 2, "{err}");
        let err = parse_str("loss.rule = fixed_drop\nloss.keep_prob = 1.5\n").unwrap_err();
        assert_eq!(err.line, 2, "{err}");
    }

    #[test]
    fn rendered_config_parses_back() {
        let cfg = parse_str(
            "loss.rule = fixed_drop\nloss.keep_prob = 0.25\nloss.lambda = 0.001\nsynth.rfs_threshold = 0.01\nschedule.iterations = 7\n",
        )
        .unwrap();
        let back = parse_str(&render(&cfg, &[5], None)).unwrap();
        assert_eq!(back.spec, cfg.spec);
        assert_eq!(back.seeds, vec![5]);
    }
}
