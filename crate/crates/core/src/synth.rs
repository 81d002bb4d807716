//! Synthetic long-tailed proposal data.
//!
//! A "world" is a set of unit-norm class prototypes. Foreground proposals sit
//! close to their category's prototype; background proposals are either raw
//! isotropic noise or near-misses drawn around a random prototype with a wider
//! spread than foreground, the feature-space analog of a box that overlaps an
//! object but not enough to count as a hit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::categories::{CategoryTable, LambdaMode};
use crate::error::{Error, Result};
use crate::losses::Label;
use crate::matrix::Matrix;
use crate::rng::{stream, Stream};

/// How per-category foreground counts are produced.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CountProfile {
    /// Labels drawn i.i.d. from the Zipf distribution.
    Zipf,
    /// Deterministic counts with a third of the categories in each of the
    /// rare, common and frequent bins. Rare and common counts are spaced
    /// geometrically across their bin ranges; the frequent bin takes the
    /// rest of the foreground budget in Zipf proportions.
    #[default]
    BinBalanced,
    /// Fixed per-category counts, e.g. loaded from a file. `fg_fraction` is
    /// ignored; background fills the rest of `dataset_size`.
    Explicit(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_categories: usize,
    pub zipf_exponent: f64,
    pub feature_dim: usize,
    pub fg_noise_sigma: f64,
    pub near_miss_sigma: f64,
    pub near_miss_fraction: f64,
    pub dataset_size: usize,
    pub fg_fraction: f64,
    pub profile: CountProfile,
    /// Number of prototype clusters; 0 draws every prototype independently.
    pub clusters: usize,
    /// Spread of prototypes around their cluster center before normalization.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_categories: 60,
            zipf_exponent: 1.2,
            feature_dim: 32,
            fg_noise_sigma: 0.15,
            near_miss_sigma: 0.5,
            near_miss_fraction: 0.1,
            dataset_size: 60_000,
            fg_fraction: 0.25,
            profile: CountProfile::BinBalanced,
            clusters: 0,
            cluster_spread: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 {
            return Err(Error::invalid("num_categories", "must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be positive"));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::invalid("zipf_exponent", "must be >= 0"));
        }
        if !(self.fg_noise_sigma >= 0.0) {
            return Err(Error::invalid("fg_noise_sigma", "must be >= 0"));
        }
        if !(self.near_miss_sigma > self.fg_noise_sigma) {
            return Err(Error::invalid(
                "near_miss_sigma",
                "must exceed fg_noise_sigma",
            ));
        }
        for (name, v) in [
            ("near_miss_fraction", self.near_miss_fraction),
            ("fg_fraction", self.fg_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, "must lie in [0, 1]"));
            }
        }
        match &self.profile {
            CountProfile::BinBalanced if self.num_categories < 3 => {
                return Err(Error::invalid(
                    "num_categories",
                    "bin-balanced profile needs at least 3 categories",
                ));
            }
            CountProfile::Explicit(counts) => {
                if counts.len() != self.num_categories {
                    return Err(Error::shape(
                        "explicit counts",
                        self.num_categories,
                        counts.len(),
                    ));
                }
                if counts.iter().sum::<u64>() > self.dataset_size as u64 {
                    return Err(Error::invalid(
                        "dataset_size",
                        "smaller than the sum of the explicit counts",
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn foreground_total(&self) -> usize {
        match &self.profile {
            CountProfile::Explicit(counts) => counts.iter().sum::<u64>() as usize,
            _ => libm::round(self.dataset_size as f64 * self.fg_fraction) as usize,
        }
    }
}

/// `p_k ∝ k^{-s}` for ranks `k = 1..=C`, normalized; descending.
pub fn zipf_category_distribution(num_categories: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=num_categories)
        .map(|k| libm::pow(k as f64, -exponent))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Per-category foreground counts for [`CountProfile::BinBalanced`].
pub fn bin_balanced_counts(
    num_categories: usize,
    exponent: f64,
    foreground_total: usize,
) -> Result<Vec<u64>> {
    let n_rare = num_categories / 3;
    let n_common = num_categories / 3;
    let n_freq = num_categories - n_rare - n_common;
    let geometric = |hi: f64, lo: f64, n: usize| -> Vec<u64> {
        (0..n)
            .map(|i| {
                let t = if n > 1 {
                    i as f64 / (n - 1) as f64
                } else {
                    0.0
                };
                libm::round(hi * libm::pow(lo / hi, t)) as u64
            })
            .collect()
    };
    let common = geometric(100.0, 11.0, n_common);
    let rare = geometric(10.0, 1.0, n_rare);
    let tail_total: u64 = common.iter().chain(&rare).sum();
    let budget = (foreground_total as u64).saturating_sub(tail_total);
    if budget < 101 * n_freq as u64 {
        return Err(Error::invalid(
            "dataset_size",
            format!(
                "foreground budget {foreground_total} too small for {n_freq} frequent categories"
            ),
        ));
    }
    let shares = zipf_category_distribution(n_freq, exponent);
    let mut freq: Vec<u64> = shares
        .iter()
        .map(|s| (libm::floor(s * budget as f64) as u64).max(101))
        .collect();
    let assigned: u64 = freq.iter().sum();
    // rounding residue goes to the head category
    if assigned <= budget {
        freq[0] += budget - assigned;
    } else {
        let excess = assigned - budget;
        if freq[0] < excess + 101 {
            return Err(Error::invalid(
                "dataset_size",
                "foreground budget too small",
            ));
        }
        freq[0] -= excess;
    }
    let mut counts = freq;
    counts.extend(common);
    counts.extend(rare);
    Ok(counts)
}

/// Class prototypes shared by a training pool and its evaluation pool.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    prototypes: Matrix,
}

impl World {
    /// Independent unit-norm Gaussian prototypes.
    pub fn new<R: Rng + ?Sized>(num_categories: usize, feature_dim: usize, rng: &mut R) -> Self {
        Self::clustered(num_categories, feature_dim, 0, 0.0, rng)
    }

    /// Category `j` belongs to cluster `j % clusters`; its prototype is the
    /// normalized sum of a unit cluster center and `spread` times a unit
    /// Gaussian direction. Categories are indexed by frequency rank, so every
    /// cluster mixes head and tail categories.
    pub fn clustered<R: Rng + ?Sized>(
        num_categories: usize,
        feature_dim: usize,
        clusters: usize,
        spread: f64,
        rng: &mut R,
    ) -> Self {
        let centers: Vec<Vec<f64>> = (0..clusters)
            .map(|_| unit_gaussian(feature_dim, rng))
            .collect();
        let mut prototypes = Matrix::zeros(num_categories, feature_dim);
        for r in 0..num_categories {
            let dir = unit_gaussian(feature_dim, rng);
            let row = prototypes.row_mut(r);
            match centers.get(r % clusters.max(1)) {
                Some(center) if clusters > 0 => {
                    for ((x, c), u) in row.iter_mut().zip(center).zip(&dir) {
                        *x = c + spread * u;
                    }
                    normalize(row);
                }
                _ => row.copy_from_slice(&dir),
            }
        }
        World { prototypes }
    }

    pub fn from_seed(config: &SynthConfig) -> Self {
        World::clustered(
            config.num_categories,
            config.feature_dim,
            config.clusters,
            config.cluster_spread,
            &mut stream(config.seed, Stream::Prototypes),
        )
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn num_categories(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    fn around<R: Rng + ?Sized>(&self, category: usize, sigma: f64, out: &mut [f64], rng: &mut R) {
        let proto = self.prototypes.row(category);
        if sigma == 0.0 {
            out.copy_from_slice(proto);
            return;
        }
        let noise = Normal::new(0.0, sigma).expect("sigma validated");
        for (o, p) in out.iter_mut().zip(proto) {
            *o = p + noise.sample(rng);
        }
    }

    fn background<R: Rng + ?Sized>(&self, config: &SynthConfig, out: &mut [f64], rng: &mut R) {
        if rng.random_bool(config.near_miss_fraction) {
            let c = rng.random_range(0..self.num_categories());
            self.around(c, config.near_miss_sigma, out, rng);
        } else {
            for o in out.iter_mut() {
                *o = StandardNormal.sample(rng);
            }
        }
    }

    /// `n` background proposals drawn like a pool's background subset.
    pub fn background_samples<R: Rng + ?Sized>(
        &self,
        config: &SynthConfig,
        n: usize,
        rng: &mut R,
    ) -> Matrix {
        let mut features = Matrix::zeros(n, self.feature_dim());
        for r in 0..n {
            self.background(config, features.row_mut(r), rng);
        }
        features
    }
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
        true
    } else {
        false
    }
}

/// Proposal features with labels and the frequency table of the foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalPool {
    features: Matrix,
    labels: Vec<Label>,
    table: CategoryTable,
    foreground: Vec<usize>,
    background: Vec<usize>,
}

impl ProposalPool {
    /// Derives the category table from the realized foreground histogram.
    pub fn new(
        features: Matrix,
        labels: Vec<Label>,
        num_categories: usize,
        lambda: LambdaMode,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape("pool labels", features.rows(), labels.len()));
        }
        let mut counts = vec![0u64; num_categories];
        let mut foreground = Vec::new();
        let mut background = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            match *l {
                Label::Category(c) if c < num_categories => {
                    counts[c] += 1;
                    foreground.push(i);
                }
                Label::Category(c) => {
                    return Err(Error::invalid(
                        "labels",
                        format!("category {c} out of range for {num_categories}"),
                    ))
                }
                Label::Background => background.push(i),
            }
        }
        let table = CategoryTable::from_counts(&counts, lambda)?;
        Ok(ProposalPool {
            features,
            labels,
            table,
            foreground,
            background,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn table(&self) -> &CategoryTable {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn foreground_indices(&self) -> &[usize] {
        &self.foreground
    }

    pub fn background_indices(&self) -> &[usize] {
        &self.background
    }

    /// Rows of the background subset as a matrix.
    pub fn background_features(&self) -> Matrix {
        self.gather(&self.background)
    }

    fn gather(&self, rows: &[usize]) -> Matrix {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(self.features.row(i));
        }
        Matrix::from_vec(rows.len(), d, data)
    }
}

/// A training pool drawn from the world of `config.seed`.
pub fn generate_pool(config: &SynthConfig) -> Result<ProposalPool> {
    config.validate()?;
    let world = World::from_seed(config);
    generate_pool_in(&world, config, &mut stream(config.seed, Stream::TrainPool))
}

pub fn generate_pool_in<R: Rng + ?Sized>(
    world: &World,
    config: &SynthConfig,
    rng: &mut R,
) -> Result<ProposalPool> {
    config.validate()?;
    let c = config.num_categories;
    let fg_total = config.foreground_total();
    let bg_total = config.dataset_size.saturating_sub(fg_total);

    let mut labels = Vec::with_capacity(fg_total + bg_total);
    match &config.profile {
        CountProfile::Explicit(counts) => {
            for (j, &n) in counts.iter().enumerate() {
                labels.extend(core::iter::repeat_n(Label::Category(j), n as usize));
            }
        }
        CountProfile::BinBalanced => {
            let counts = bin_balanced_counts(c, config.zipf_exponent, fg_total)?;
            for (j, &n) in counts.iter().enumerate() {
                labels.extend(core::iter::repeat_n(Label::Category(j), n as usize));
            }
        }
        CountProfile::Zipf => {
            let dist = WeightedIndex::new(zipf_category_distribution(c, config.zipf_exponent))
                .map_err(|e| Error::invalid("zipf_exponent", format!("{e}")))?;
            labels.extend((0..fg_total).map(|_| Label::Category(dist.sample(rng))));
        }
    }
    labels.extend(core::iter::repeat_n(Label::Background, bg_total));

    let mut features = Matrix::zeros(labels.len(), config.feature_dim);
    for (r, l) in labels.iter().enumerate() {
        match *l {
            Label::Category(j) => world.around(j, config.fg_noise_sigma, features.row_mut(r), rng),
            Label::Background => world.background(config, features.row_mut(r), rng),
        }
    }
    ProposalPool::new(features, labels, c, LambdaMode::BinAligned)
}

/// Evaluation pool: `per_category` foreground proposals of every category and
/// three background proposals per foreground one, from the same world.
pub fn generate_eval_pool<R: Rng + ?Sized>(
    world: &World,
    config: &SynthConfig,
    per_category: usize,
    rng: &mut R,
) -> Result<ProposalPool> {
    let c = world.num_categories();
    let fg_total = c * per_category;
    let n = 4 * fg_total;
    let mut labels = Vec::with_capacity(n);
    for j in 0..c {
        labels.extend(core::iter::repeat_n(Label::Category(j), per_category));
    }
    labels.extend(core::iter::repeat_n(Label::Background, 3 * fg_total));
    let mut features = Matrix::zeros(n, world.feature_dim());
    for (r, l) in labels.iter().enumerate() {
        match *l {
            Label::Category(j) => world.around(j, config.fg_noise_sigma, features.row_mut(r), rng),
            Label::Background => world.background(config, features.row_mut(r), rng),
        }
    }
    ProposalPool::new(features, labels, c, LambdaMode::BinAligned)
}

/// Rows of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBatch {
    pub features: Matrix,
    pub labels: Vec<Label>,
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A 1:3 foreground/background batch, sampled without replacement within the
/// batch and shuffled.
pub fn sample_batch<R: Rng + ?Sized>(
    pool: &ProposalPool,
    batch_size: usize,
    rng: &mut R,
) -> Result<ProposalBatch> {
    if !batch_size.is_multiple_of(4) {
        return Err(Error::invalid("batch_size", "must be divisible by 4"));
    }
    let n_fg = batch_size / 4;
    let n_bg = batch_size - n_fg;
    for (subset, requested, available) in [
        ("foreground", n_fg, pool.foreground.len()),
        ("background", n_bg, pool.background.len()),
    ] {
        if requested > available {
            return Err(Error::PoolTooSmall {
                subset,
                requested,
                available,
            });
        }
    }
    let mut rows: Vec<usize> = index::sample(rng, pool.foreground.len(), n_fg)
        .into_iter()
        .map(|i| pool.foreground[i])
        .collect();
    rows.extend(
        index::sample(rng, pool.background.len(), n_bg)
            .into_iter()
            .map(|i| pool.background[i]),
    );
    rows.shuffle(rng);
    Ok(ProposalBatch {
        features: pool.gather(&rows),
        labels: rows.iter().map(|&i| pool.labels[i]).collect(),
    })
}

/// Repeat factor of a category with frequency `f` under threshold `t`.
pub fn repeat_factor(frequency: f64, threshold: f64) -> f64 {
    if frequency <= 0.0 {
        return 1.0;
    }
    libm::sqrt(threshold / frequency).max(1.0)
}

/// Replicates each foreground proposal `r(c) = max(1, sqrt(t / f_c))` times in
/// expectation; the fractional part is realized with a Bernoulli draw.
/// Background rows are copied through untouched and the table is recomputed.
pub fn repeat_factor_resample<R: Rng + ?Sized>(
    pool: &ProposalPool,
    threshold: f64,
    rng: &mut R,
) -> Result<ProposalPool> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid("threshold", "must lie in (0, 1]"));
    }
    let freqs = pool.table.frequencies();
    let mut rows = Vec::with_capacity(pool.len());
    for (i, l) in pool.labels.iter().enumerate() {
        match *l {
            Label::Background => rows.push(i),
            Label::Category(c) => {
                let r = repeat_factor(freqs[c], threshold);
                let whole = libm::floor(r);
                let frac = r - whole;
                let mut copies = whole as usize;
                if frac > 0.0 && rng.random_bool(frac) {
                    copies += 1;
                }
                rows.extend(core::iter::repeat_n(i, copies));
            }
        }
    }
    let features = pool.gather(&rows);
    let labels = rows.iter().map(|&i| pool.labels[i]).collect();
    ProposalPool::new(
        features,
        labels,
        pool.table.num_categories(),
        LambdaMode::BinAligned,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categories::Bin;
    use crate::rng::RunRng;
    use rand::SeedableRng;

    fn small_config() -> SynthConfig {
        SynthConfig {
            num_categories: 6,
            feature_dim: 16,
            dataset_size: 4000,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zipf_vectors() {
        let u = zipf_category_distribution(5, 0.0);
        assert!(u.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let p = zipf_category_distribution(2, 1.0);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = zipf_category_distribution(60, 1.2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn default_profile_fills_each_bin_equally() {
        let cfg = SynthConfig::default();
        let counts = bin_balanced_counts(60, 1.2, cfg.foreground_total()).unwrap();
        assert_eq!(counts.iter().sum::<u64>(), 15_000);
        let t = CategoryTable::from_counts(&counts, LambdaMode::BinAligned).unwrap();
        for bin in Bin::ALL {
            assert_eq!(t.members(bin).len(), 20, "{bin}");
        }
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pool_table_matches_histogram() {
        let cfg = small_config();
        let pool = generate_pool(&cfg).unwrap();
        let mut hist = [0u64; 6];
        for c in pool.labels().iter().filter_map(|l| l.category()) {
            hist[c] += 1;
        }
        assert_eq!(pool.table().counts(), &hist);
        assert_eq!(pool.foreground_indices().len(), 1000);
        assert_eq!(pool.background_indices().len(), 3000);
        assert_eq!(generate_pool(&cfg).unwrap(), pool);
    }

    #[test]
    fn zero_noise_foreground_equals_prototype() {
        let cfg = SynthConfig {
            fg_noise_sigma: 0.0,
            ..small_config()
        };
        let world = World::from_seed(&cfg);
        let pool = generate_pool(&cfg).unwrap();
        for &i in pool.foreground_indices() {
            let c = pool.labels()[i].category().unwrap();
            assert_eq!(pool.features().row(i), world.prototypes().row(c));
        }
    }

    #[test]
    fn batches_keep_ratio_and_repeat() {
        let pool = generate_pool(&small_config()).unwrap();
        for size in [4, 64, 512] {
            let b = sample_batch(&pool, size, &mut RunRng::seed_from_u64(1)).unwrap();
            let fg = b.labels.iter().filter(|l| l.is_foreground()).count();
            assert_eq!((fg, b.len() - fg), (size / 4, 3 * size / 4));
        }
        let a = sample_batch(&pool, 64, &mut RunRng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&pool, 64, &mut RunRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_batch(&pool, 6, &mut RunRng::seed_from_u64(9)).is_err());
        assert!(matches!(
            sample_batch(&pool, 8000, &mut RunRng::seed_from_u64(9)),
            Err(Error::PoolTooSmall { .. })
        ));
    }

    #[test]
    fn repeat_factor_values() {
        assert_eq!(repeat_factor(0.25, 1.0), 2.0);
        assert_eq!(repeat_factor(0.5, 0.1), 1.0);
    }

    #[test]
    fn resample_below_min_frequency_is_identity() {
        let pool = generate_pool(&small_config()).unwrap();
        let min_f = pool
            .table()
            .frequencies()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let out = repeat_factor_resample(&pool, min_f, &mut RunRng::seed_from_u64(2)).unwrap();
        assert_eq!(out.table().counts(), pool.table().counts());
        assert_eq!(out.len(), pool.len());
        assert!(repeat_factor_resample(&pool, 0.0, &mut RunRng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.near_miss_sigma = cfg.fg_noise_sigma;
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig {
            fg_fraction: 1.5,
            ..small_config()
        };
        assert!(cfg.validate().is_err());
    }
}
