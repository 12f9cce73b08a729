use innet::datagen::{self, partition, DatasetParams, Scheme};
use innet::Tensor;
use proptest::prelude::*;

/// Multinomial logistic regression by full-batch gradient descent, written
/// independently of the library's network code.
fn logistic_accuracy(x: &Tensor, y: &[usize], test_x: &Tensor, test_y: &[usize], k: usize) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mut w = vec![vec![0.0; d + 1]; k];
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for r in 0..n {
            let row = x.row(r);
            let logits: Vec<f64> = w.iter().map(|wc| wc[d] + wc[..d].iter().zip(row).map(|(a, b)| a * b).sum::<f64>()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..k {
                let p = (logits[c] - m).exp() / z - if c == y[r] { 1.0 } else { 0.0 };
                for f in 0..d {
                    grad[c][f] += p * row[f];
                }
                grad[c][d] += p;
            }
        }
        for c in 0..k {
            for f in 0..=d {
                w[c][f] -= 0.5 * grad[c][f] / n as f64;
            }
        }
    }
    let hits = (0..test_x.rows())
        .filter(|&r| {
            let row = test_x.row(r);
            let score = |c: usize| w[c][d] + w[c][..d].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            (0..k).fold(0, |b, c| if score(c) > score(b) { c } else { b }) == test_y[r]
        })
        .count();
    hits as f64 / test_x.rows() as f64
}

#[test]
fn separation_controls_learnability() {
    for (sep, check) in [(0.0, 0usize), (10.0, 1)] {
        let p = DatasetParams {
            q: 2000,
            test_q: 2000,
            d: 8,
            classes: 4,
            separation: sep,
            sigmas: vec![0.0],
            seed: 21,
        };
        let (train, test) = p.generate().unwrap();
        let acc = logistic_accuracy(&train.base, &train.labels, &test.base, &test.labels, 4);
        if check == 0 {
            assert!((acc - 0.25).abs() <= 0.05, "sep 0: {acc}");
        } else {
            assert!(acc >= 0.99, "sep 10: {acc}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn partitions_cover_and_align(q in 1usize..60, j in 1usize..6, seed in any::<u64>()) {
        let (base, labels) = datagen::synth_gaussian_classes(q, 4, 2, 1.0, seed).unwrap();
        let sigmas: Vec<f64> = (0..j).map(|i| i as f64 * 0.5).collect();
        let ds = datagen::make_views(&base, &labels, &sigmas, seed).unwrap();
        for scheme in [Scheme::Inl, Scheme::SharedExp2, Scheme::FlExp1, Scheme::SlExp1] {
            let Ok(p) = partition(&ds, scheme) else {
                prop_assert!(q < j);
                continue;
            };
            let again = partition(&ds, scheme).unwrap();
            prop_assert_eq!(&p, &again);
            for shard in &p.shards {
                for (pos, &i) in shard.indices.iter().enumerate() {
                    prop_assert_eq!(shard.labels[pos], ds.labels[i]);
                }
            }
            if matches!(scheme, Scheme::FlExp1 | Scheme::SlExp1) {
                let mut all: Vec<usize> = p.shards.iter().flat_map(|s| s.indices.clone()).collect();
                all.sort();
                all.dedup();
                prop_assert_eq!(all.len() + p.dropped, q);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes(seed in any::<u64>()) {
        let p = DatasetParams { q: 16, test_q: 8, d: 4, classes: 2, seed, ..Default::default() };
        let (a, _) = p.generate().unwrap();
        let (b, _) = p.generate().unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
