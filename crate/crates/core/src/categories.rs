//! Category frequency statistics and the rare/common/frequent split.

use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Frequency bin of a category, by absolute occurrence count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bin {
    Rare,
    Common,
    Frequent,
}

impl Bin {
    pub const ALL: [Bin; 3] = [Bin::Rare, Bin::Common, Bin::Frequent];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Bin::Rare => "rare",
            Bin::Common => "common",
            Bin::Frequent => "frequent",
        }
    }

    pub fn is_tail(self) -> bool {
        self != Bin::Frequent
    }
}

impl fmt::Display for Bin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// 1–10 is rare, 11–100 common, above that frequent. An unseen category
/// (count 0) is treated as rare.
pub fn bin_of(count: u64) -> Bin {
    match count {
        0..=10 => Bin::Rare,
        11..=100 => Bin::Common,
        _ => Bin::Frequent,
    }
}

/// `T_λ(f)`: 1 iff `f < λ`.
#[inline]
pub fn tail_indicator(frequency: f64, lambda: f64) -> u8 {
    u8::from(frequency < lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Explicit(f64),
    /// Place λ between the largest tail frequency and the smallest frequent one.
    BinAligned,
}

/// What a count measures. Only recorded; the arithmetic is the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountUnit {
    #[default]
    Instances,
    Images,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTable {
    counts: Vec<u64>,
    frequencies: Vec<f64>,
    bins: Vec<Bin>,
    lambda: f64,
    unit: CountUnit,
}

impl CategoryTable {
    pub fn from_counts(counts: &[u64], lambda_mode: LambdaMode) -> Result<Self> {
        Self::from_counts_with_unit(counts, lambda_mode, CountUnit::Instances)
    }

    pub fn from_counts_with_unit(
        counts: &[u64],
        lambda_mode: LambdaMode,
        unit: CountUnit,
    ) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("counts", "no categories"));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyCounts);
        }
        let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let bins: Vec<Bin> = counts.iter().map(|&c| bin_of(c)).collect();
        let lambda = match lambda_mode {
            LambdaMode::Explicit(l) => {
                if !(0.0..=1.0).contains(&l) {
                    return Err(Error::invalid("lambda", "must lie in [0, 1]"));
                }
                l
            }
            LambdaMode::BinAligned => bin_aligned_lambda(&frequencies, &bins),
        };
        Ok(CategoryTable {
            counts: counts.to_vec(),
            frequencies,
            bins,
            lambda,
            unit,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }

    pub fn bin(&self, category: usize) -> Bin {
        self.bins[category]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn unit(&self) -> CountUnit {
        self.unit
    }

    /// `T_λ(f_j)` for category `j`.
    #[inline]
    pub fn is_tail(&self, category: usize) -> bool {
        tail_indicator(self.frequencies[category], self.lambda) == 1
    }

    pub fn tail_mask(&self) -> Vec<bool> {
        (0..self.num_categories())
            .map(|j| self.is_tail(j))
            .collect()
    }

    /// Share of all counted instances that belong to tail categories.
    pub fn tail_mass(&self) -> f64 {
        (0..self.num_categories())
            .filter(|&j| self.is_tail(j))
            .map(|j| self.frequencies[j])
            .sum()
    }

    /// Same counts with a different λ.
    pub fn with_lambda(&self, lambda_mode: LambdaMode) -> Result<Self> {
        Self::from_counts_with_unit(&self.counts, lambda_mode, self.unit)
    }

    /// Categories of a bin, in index order.
    pub fn members(&self, bin: Bin) -> Vec<usize> {
        (0..self.num_categories())
            .filter(|&j| self.bins[j] == bin)
            .collect()
    }

    /// Categories ordered by descending count (ties by index): rank 0 is the
    /// most frequent.
    pub fn frequency_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_categories()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        order
    }
}

fn bin_aligned_lambda(frequencies: &[f64], bins: &[Bin]) -> f64 {
    let max_tail = frequencies
        .iter()
        .zip(bins)
        .filter(|(_, b)| b.is_tail())
        .map(|(&f, _)| f)
        .fold(None, |m: Option<f64>, f| Some(m.map_or(f, |m| m.max(f))));
    let min_freq = frequencies
        .iter()
        .zip(bins)
        .filter(|(_, b)| !b.is_tail())
        .map(|(&f, _)| f)
        .fold(None, |m: Option<f64>, f| Some(m.map_or(f, |m| m.min(f))));
    match (max_tail, min_freq) {
        // Counts are bin-monotone, so max_tail < min_freq whenever both exist.
        (Some(t), Some(f)) => 0.5 * (t + f),
        // Everything is tail. A lone category has f = 1 and cannot sit below
        // any λ in [0, 1]; it is the one case where λ leaves the unit interval.
        (Some(t), None) if t < 1.0 => 1.0,
        (Some(_), None) => 1.0 + f64::EPSILON,
        (None, _) => 0.0,
    }
}
