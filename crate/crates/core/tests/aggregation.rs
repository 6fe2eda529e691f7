//! Weighted aggregation against an exact rational oracle.

use std::sync::Arc;

mod common;

use common::{aggregation_fuzz, small_layout};
use fedpart::federation::{aggregate, aggregate_updates, ClientUpdate};
use fedpart::nets::{Layout, ParameterVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layout() -> Arc<Layout> {
    small_layout()
}

#[test]
fn fuzzed_cases_match_exact_weighted_mean() {
    let s = aggregation_fuzz(2, 1000);
    assert_eq!(s.cases, 1000);
    assert!(s.worst <= 1e-12, "worst scaled deviation {:e}", s.worst);
    assert!(s.single_client_cases > 0 && s.single_client_exact);
}

#[test]
fn order_of_arrival_does_not_matter() {
    let layout = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let k = rng.random_range(2..=7);
        let mut updates: Vec<ClientUpdate> = (0..k)
            .map(|id| {
                let v = (0..layout.total_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                ClientUpdate {
                    client_id: id,
                    weights: ParameterVector::load(layout.clone(), v).unwrap(),
                    num_samples: rng.random_range(1..100),
                    train_loss: 0.0,
                }
            })
            .collect();
        let canonical = aggregate_updates(&updates).unwrap();
        updates.shuffle(&mut rng);
        assert_eq!(aggregate_updates(&updates).unwrap(), canonical);
        // Mathematical permutation invariance of the plain weighted mean.
        let pairs: Vec<(&ParameterVector, usize)> = updates.iter().map(|u| (&u.weights, u.num_samples)).collect();
        let shuffled = aggregate(&pairs).unwrap();
        for (a, b) in shuffled.values().iter().zip(canonical.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn identical_inputs_come_back_exactly(
        value in -1e6f64..1e6,
        ns in prop::collection::vec(1usize..1000, 1..8),
    ) {
        let layout = layout();
        let w = ParameterVector::load(layout.clone(), (0..layout.total_len()).map(|i| value / (1 + i) as f64).collect()).unwrap();
        let pairs: Vec<(&ParameterVector, usize)> = ns.iter().map(|&n| (&w, n)).collect();
        prop_assert_eq!(aggregate(&pairs).unwrap(), w);
    }
}
