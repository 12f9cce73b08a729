mod common;

use common::{bit_identical, both_routes, epoch_config, fixture};
use innet::bandwidth::CostModel;
use innet::nn::Activation;
use innet::protocol::{Direction, Phase};
use proptest::prelude::*;

#[test]
fn five_protocol_steps_match_monolithic_descent() {
    for j in 1..=3 {
        for seed in 0..4 {
            // 20 samples in batches of 4: one epoch is five steps
            let f = fixture(j, 20, 100 * j as u64 + seed, Activation::Tanh);
            let (dist, mono, _) = both_routes(&f, &epoch_config(4, 0.7), 1, seed);
            assert!(bit_identical(&dist, &mono), "J={j} seed={seed}");
            assert_ne!(dist, f.stack.params());
        }
    }
}

#[test]
fn degenerate_star() {
    let f = fixture(1, 12, 5, Activation::Relu);
    let (dist, mono, _) = both_routes(&f, &epoch_config(3, 0.0), 2, 9);
    assert!(bit_identical(&dist, &mono));
}

#[test]
fn metering_matches_closed_form() {
    for j in 1..=3 {
        let f = fixture(j, 18, 40 + j as u64, Activation::Tanh);
        let (_, _, log) = both_routes(&f, &epoch_config(5, 1.0), 2, 1);
        let p: usize = f.stack.widths().iter().sum();
        let cost = CostModel {
            p: p as u64,
            q: (18 * j) as u64,
            j: j as u64,
            n: 0,
            s_bits: 32,
            eta_frac: 0.0,
        };
        for e in 0..2 {
            assert_eq!(log.epoch_bits(e) as f64, cost.inl_bits());
        }
        let m = log.meter();
        assert_eq!(m.get(Phase::Train, Direction::Fwd), m.get(Phase::Train, Direction::Bwd));
    }
}

#[test]
fn message_log_audit() {
    let f = fixture(3, 10, 77, Activation::Tanh);
    let widths = f.stack.widths();
    let (_, _, log) = both_routes(&f, &epoch_config(4, 0.5), 1, 3);
    let mut per_batch = std::collections::BTreeMap::new();
    for r in log.records() {
        assert!((1..=3).contains(&r.node), "only encoder nodes appear as endpoints");
        assert!(matches!(r.direction, Direction::Fwd | Direction::Bwd));
        // every message carries exactly one latent slice per sample: never
        // raw features, labels or another node's values
        assert_eq!(r.elements % widths[r.node - 1] as u64, 0);
        let rows = r.elements / widths[r.node - 1] as u64;
        per_batch.entry((r.batch, r.node, r.direction)).or_insert(rows);
    }
    assert_eq!(per_batch.len(), 3 * 3 * 2);
    let total_rows: u64 = per_batch
        .iter()
        .filter(|((_, n, d), _)| *n == 1 && *d == Direction::Fwd)
        .map(|(_, r)| r)
        .sum();
    assert_eq!(total_rows, 10);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn split_equivalence_random_shapes(j in 1usize..=3, seed in any::<u64>(), s in 0.0f64..2.0, batch in 1usize..=7) {
        let f = fixture(j, 14, seed, Activation::Tanh);
        let (dist, mono, _) = both_routes(&f, &epoch_config(batch, s), 1, seed ^ 1);
        prop_assert!(bit_identical(&dist, &mono));
    }
}
