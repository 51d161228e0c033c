use std::time::Instant;

use mindstream::features::{
    series_mean, BaseFeature, BaseFeatureVector, ScoredFeatures, SlotId, Statistic, UserHistory, SLOT_COUNT,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Nearest-rank quartile by sorting and indexing with round-half-up.
fn oracle_quartile(series: &[f64], q: u8) -> f64 {
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = (f64::from(q) * sorted.len() as f64 / 4.0 + 0.5).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Scores on a 1/1024 grid and small integer counters keep every partial sum
/// exact, so the mean is a single correctly rounded division.
fn dyadic_session(rng: &mut ChaCha8Rng) -> BaseFeatureVector {
    let scores: [f64; 20] = std::array::from_fn(|_| f64::from(rng.random_range(0..=1024u32)) / 1024.0);
    BaseFeatureVector::new(ScoredFeatures::new(scores), rng.random_range(1..30), rng.random_range(1..400))
}

#[test]
fn expansion_matches_brute_force_on_1000_histories() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let len = rng.random_range(1..=50);
        let mut history = UserHistory::new("u");
        let mut raw: Vec<[f64; 22]> = Vec::new();
        for _ in 0..len {
            let v = dyadic_session(&mut rng);
            raw.push(v.to_array());
            history.append(&v);
            let x = history.expand(&v).unwrap();
            assert_eq!(x.len(), SLOT_COUNT);
            for feature in BaseFeature::ALL {
                let series: Vec<f64> = raw.iter().map(|r| r[feature.index()]).collect();
                let mean = series.iter().sum::<f64>() / series.len() as f64;
                assert_eq!(history.running_average(feature).unwrap(), mean);
                assert_eq!(x.get(SlotId::new(feature, Statistic::Avg)), Some(mean));
                assert_eq!(x.get(SlotId::new(feature, Statistic::Current)), Some(v.value(feature)));
                for (q, stat) in [(1, Statistic::Q1), (2, Statistic::Q2), (3, Statistic::Q3)] {
                    let expected = oracle_quartile(&series, q);
                    assert_eq!(history.quartile(feature, q).unwrap(), expected);
                    assert_eq!(x.get(SlotId::new(feature, stat)), Some(expected));
                }
            }
        }
    }
    assert!(started.elapsed().as_secs_f64() < 5.0, "took {:?}", started.elapsed());
}

#[test]
fn documented_quartile_examples() {
    let s = [0.1, 0.3, 0.5, 0.7];
    assert_eq!(oracle_quartile(&s, 2), 0.5);
    assert_eq!(mindstream::features::series_quartile(&s, 2).unwrap(), 0.5);
    assert_eq!(mindstream::features::series_quartile(&[0.4], 3).unwrap(), 0.4);
}

proptest! {
    #[test]
    fn mean_stays_in_range_for_arbitrary_scores(series in prop::collection::vec(0.0f64..=1.0, 1..50)) {
        let m = series_mean(&series).unwrap();
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
        let naive = series.iter().sum::<f64>() / series.len() as f64;
        prop_assert!((m - naive).abs() <= 1e-12);
    }

    #[test]
    fn quartiles_are_ordered_members(series in prop::collection::vec(-1e6f64..1e6, 1..60)) {
        let q: Vec<f64> = (1..=3).map(|q| mindstream::features::series_quartile(&series, q).unwrap()).collect();
        prop_assert!(q[0] <= q[1] && q[1] <= q[2]);
        for (i, v) in q.iter().enumerate() {
            prop_assert!(series.contains(v));
            prop_assert_eq!(*v, oracle_quartile(&series, i as u8 + 1));
        }
    }

    #[test]
    fn constant_history_expands_to_that_constant(value in 0.0f64..=1.0, n in 1usize..30) {
        let v = BaseFeatureVector::new(ScoredFeatures::uniform(value), 4, 40);
        let mut h = UserHistory::new("c");
        for _ in 0..n {
            h.append(&v);
        }
        let x = h.expand(&v).unwrap();
        for (slot, got) in x.iter() {
            let want = if slot.is_counter() { v.value(slot.feature()) } else { value };
            prop_assert_eq!(got, want, "{}", slot);
        }
    }
}
