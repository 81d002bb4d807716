use droploss_core::rng::{stream, Stream};
use droploss_core::synth::{
    generate_pool, repeat_factor_resample, sample_batch, zipf_category_distribution, CountProfile,
    SynthConfig, World,
};
use droploss_core::Label;
use proptest::prelude::*;

fn zipf_config(seed: u64) -> SynthConfig {
    SynthConfig {
        profile: CountProfile::Zipf,
        dataset_size: 200_000,
        fg_fraction: 0.25,
        feature_dim: 4,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn zipf_histogram_converges() {
    let cfg = zipf_config(1);
    let pool = generate_pool(&cfg).unwrap();
    let counts = pool.table().counts();
    let n: u64 = counts.iter().sum();
    assert_eq!(n, 50_000);
    let target = zipf_category_distribution(cfg.num_categories, cfg.zipf_exponent);
    let tv: f64 = counts
        .iter()
        .zip(&target)
        .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn table_matches_realized_histogram() {
    let pool = generate_pool(&zipf_config(2)).unwrap();
    let mut hist = vec![0u64; 60];
    for l in pool.labels() {
        if let Label::Category(c) = l {
            hist[*c] += 1;
        }
    }
    assert_eq!(pool.table().counts(), hist.as_slice());
    let n: u64 = hist.iter().sum();
    for (f, h) in pool.table().frequencies().iter().zip(&hist) {
        assert_eq!(*f, *h as f64 / n as f64);
    }
}

#[test]
fn pure_background_stays_away_from_prototypes() {
    for d in [16, 32] {
        let cfg = SynthConfig {
            feature_dim: d,
            near_miss_fraction: 0.0,
            ..SynthConfig::default()
        };
        let world = World::from_seed(&cfg);
        let bg = world.background_samples(&cfg, 5000, &mut stream(3, Stream::EvalPool));
        let radius = 3.0 * cfg.fg_noise_sigma;
        let mut closest = f64::INFINITY;
        for row in bg.iter_rows() {
            for proto in world.prototypes().iter_rows() {
                let dist: f64 = row
                    .iter()
                    .zip(proto)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                closest = closest.min(dist);
            }
        }
        assert!(closest > radius, "d = {d}: closest {closest}");
    }
}

#[test]
fn repeat_factor_sampling_raises_tail_mass() {
    for seed in 0..10 {
        let cfg = SynthConfig {
            dataset_size: 40_000,
            ..zipf_config(seed)
        };
        let pool = generate_pool(&cfg).unwrap();
        let table = pool.table();
        let threshold = 0.01;
        assert!(table
            .frequencies()
            .iter()
            .any(|&f| f > 0.0 && f < threshold));
        let resampled =
            repeat_factor_resample(&pool, threshold, &mut stream(seed, Stream::Resample)).unwrap();

        // mass of the original tail categories, before and after
        let tail_mass = |counts: &[u64]| -> f64 {
            let total: u64 = counts.iter().sum();
            let tail: u64 = counts
                .iter()
                .enumerate()
                .filter(|(j, _)| table.is_tail(*j))
                .map(|(_, c)| c)
                .sum();
            tail as f64 / total as f64
        };
        assert!(tail_mass(resampled.table().counts()) > tail_mass(table.counts()));

        assert_eq!(
            resampled.background_indices().len(),
            pool.background_indices().len()
        );
        for (after, before) in resampled.table().counts().iter().zip(table.counts()) {
            assert!(after >= before);
        }
        // background rows are copied verbatim and in order
        let bg_before = pool.background_features();
        assert_eq!(resampled.background_features(), bg_before);
    }
}

#[test]
fn repeat_factor_never_fires_above_threshold() {
    let pool = generate_pool(&zipf_config(4)).unwrap();
    let min = pool
        .table()
        .frequencies()
        .iter()
        .copied()
        .filter(|&f| f > 0.0)
        .fold(f64::INFINITY, f64::min);
    let resampled = repeat_factor_resample(&pool, min, &mut stream(4, Stream::Resample)).unwrap();
    assert_eq!(resampled, pool);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batches_keep_one_to_three(quarter in 1usize..64, seed in 0u64..1000) {
        let cfg = SynthConfig {
            num_categories: 9,
            feature_dim: 2,
            dataset_size: 2000,
            seed: 5,
            ..SynthConfig::default()
        };
        let pool = generate_pool(&cfg).unwrap();
        let batch = sample_batch(&pool, 4 * quarter, &mut stream(seed, Stream::Batches)).unwrap();
        let fg = batch.labels.iter().filter(|l| l.is_foreground()).count();
        prop_assert_eq!(batch.len(), 4 * quarter);
        prop_assert_eq!(fg, quarter);
    }
}
