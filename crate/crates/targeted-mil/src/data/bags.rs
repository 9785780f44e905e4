//! Bag synthesis from an instance pool under the standard multi-instance
//! assumption: positive bags carry `max(1, round(witness_rate·size))`
//! target-class instances, negative bags none.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::{Bag, BagDataset, DataError, GenerationConfig, InstancePool};

/// Bag size drawn from a rounded Gaussian, floored at 2.
fn draw_bag_size(normal: &Normal<f64>, rng: &mut ChaCha12Rng) -> usize {
    let s = normal.sample(rng).round();
    s.max(2.0) as usize
}

/// Witness count for a positive bag: round half-up, floor at 1.
pub(crate) fn witness_count(witness_rate: f64, size: usize) -> usize {
    ((witness_rate * size as f64).round() as usize).max(1)
}

/// Generates `config.n_bags` bags from `pool`, reproducibly from
/// `config.seed`. Exactly `round(positive_fraction·n_bags)` bags are
/// positive; instances are sampled with replacement.
pub fn make_bags(
    pool: &InstancePool,
    target_class: u8,
    config: &GenerationConfig,
) -> Result<BagDataset, DataError> {
    if config.n_bags == 0 {
        return Err(DataError::InvalidConfig("n_bags must be ≥ 1".into()));
    }
    if !(config.mean_size >= 2.0) {
        return Err(DataError::InvalidConfig(format!(
            "mean_size must be ≥ 2, got {}",
            config.mean_size
        )));
    }
    if !(config.std_size >= 0.0) {
        return Err(DataError::InvalidConfig(format!(
            "std_size must be ≥ 0, got {}",
            config.std_size
        )));
    }
    if !(config.witness_rate > 0.0 && config.witness_rate < 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "witness_rate must lie in (0,1), got {}",
            config.witness_rate
        )));
    }
    if !(0.0..=1.0).contains(&config.positive_fraction) {
        return Err(DataError::InvalidConfig(format!(
            "positive_fraction must lie in [0,1], got {}",
            config.positive_fraction
        )));
    }
    let (target_idx, other_idx) = pool.partition_by_class(target_class);
    if target_idx.is_empty() {
        return Err(DataError::ClassAbsent {
            class: target_class,
        });
    }
    if other_idx.is_empty() {
        return Err(DataError::InvalidConfig(format!(
            "pool holds no instances outside class {target_class}"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let normal = Normal::new(config.mean_size, config.std_size)
        .map_err(|e| DataError::InvalidConfig(e.to_string()))?;

    let n_pos = (config.positive_fraction * config.n_bags as f64).round() as usize;
    let mut positives: Vec<bool> = (0..config.n_bags).map(|i| i < n_pos).collect();
    positives.shuffle(&mut rng);

    let m = pool.m();
    let mut bags = Vec::with_capacity(config.n_bags);
    for positive in positives {
        let s = draw_bag_size(&normal, &mut rng);
        let mut witness_slot = vec![false; s];
        if positive {
            let w = witness_count(config.witness_rate, s);
            for j in rand::seq::index::sample(&mut rng, s, w) {
                witness_slot[j] = true;
            }
        }
        let mut data = Vec::with_capacity(s * m);
        let mut labels = Vec::with_capacity(s);
        for &is_witness in &witness_slot {
            let source = if is_witness {
                target_idx[rng.random_range(0..target_idx.len())]
            } else {
                other_idx[rng.random_range(0..other_idx.len())]
            };
            data.extend_from_slice(pool.instance(source));
            labels.push(is_witness as u8);
        }
        bags.push(Bag::new(data, m, labels)?);
    }
    BagDataset::new(bags, target_class, config.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    /// Pool where the target class (5) is all-ones pixels and every other
    /// class is all-zeros, so class membership is readable off the data.
    fn marker_pool() -> InstancePool {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60u8 {
            let class = i % 10;
            images.push(if class == 5 { 1.0 } else { 0.0 });
            labels.push(class);
        }
        InstancePool::new(images, 1, labels, Split::Train).unwrap()
    }

    fn config(n_bags: usize, seed: u64) -> GenerationConfig {
        GenerationConfig {
            n_bags,
            mean_size: 10.0,
            std_size: 2.0,
            witness_rate: 0.1,
            positive_fraction: 0.5,
            seed,
        }
    }

    #[test]
    fn witness_counts_follow_the_paper_rule() {
        // One tenth of the bag size, rounded, floored at one.
        assert_eq!(witness_count(0.1, 50), 5);
        assert_eq!(witness_count(0.1, 4), 1);
        assert_eq!(witness_count(0.1, 46), 5);
        assert_eq!(witness_count(0.3, 7), 2);
    }

    #[test]
    fn exact_positive_bag_count_and_mil_assumption() {
        let ds = make_bags(&marker_pool(), 5, &config(40, 3)).unwrap();
        let n_pos = ds.bags().iter().filter(|b| b.bag_label() == 1).count();
        assert_eq!(n_pos, 20);
        for bag in ds.bags() {
            let any_pos = bag.instance_labels().contains(&1);
            assert_eq!(bag.bag_label() == 1, any_pos);
        }
    }

    #[test]
    fn negative_bags_contain_no_target_instances() {
        let ds = make_bags(&marker_pool(), 5, &config(30, 11)).unwrap();
        for bag in ds.bags().iter().filter(|b| b.bag_label() == 0) {
            assert!(bag.data().iter().all(|&px| px == 0.0));
            assert!(bag.instance_labels().iter().all(|&l| l == 0));
        }
        // And positive bags mark exactly the target-class instances.
        for bag in ds.bags().iter().filter(|b| b.bag_label() == 1) {
            for (j, label) in bag.instance_labels().iter().enumerate() {
                assert_eq!(*label == 1, bag.instance(j)[0] == 1.0);
            }
        }
    }

    #[test]
    fn witness_rate_shapes_positive_bags() {
        let mut cfg = config(30, 21);
        cfg.mean_size = 50.0;
        cfg.std_size = 0.0;
        let ds = make_bags(&marker_pool(), 5, &cfg).unwrap();
        for bag in ds.bags().iter().filter(|b| b.bag_label() == 1) {
            assert_eq!(bag.n_instances(), 50);
            let w = bag.instance_labels().iter().filter(|&&l| l == 1).count();
            assert_eq!(w, 5);
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = make_bags(&marker_pool(), 5, &config(25, 77)).unwrap();
        let b = make_bags(&marker_pool(), 5, &config(25, 77)).unwrap();
        assert_eq!(a, b);
        let c = make_bags(&marker_pool(), 5, &config(25, 78)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn absent_target_class_is_an_error() {
        let pool = InstancePool::new(vec![0.0, 0.1], 1, vec![1, 2], Split::Train).unwrap();
        assert!(matches!(
            make_bags(&pool, 5, &config(4, 0)).unwrap_err(),
            DataError::ClassAbsent { class: 5 }
        ));
    }

    #[test]
    fn size_statistics_track_the_configured_gaussian() {
        let mut cfg = config(400, 9);
        cfg.mean_size = 50.0;
        cfg.std_size = 10.0;
        let ds = make_bags(&marker_pool(), 5, &cfg).unwrap();
        let sizes: Vec<f64> = ds.bags().iter().map(|b| b.n_instances() as f64).collect();
        let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
        let var = sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sizes.len() as f64;
        assert!((47.0..=53.0).contains(&mean), "mean {mean}");
        assert!((7.0..=13.0).contains(&var.sqrt()), "std {}", var.sqrt());
    }
}
