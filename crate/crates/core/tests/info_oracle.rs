mod common;

use common::brute_force;
use std::f64::consts::LN_2;

use innet::info::{self, JointPmf, Source, Variational};
use innet::nn::Activation;
use innet::stack::{InlStack, NoiseSource, StackShape};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_brute_force_on_random_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..20 {
        let pmf = JointPmf::random(2, &[2, 2], &[2, 2], &mut rng).unwrap();
        let s = [0.0, 0.3, 1.0, 2.5][trial % 4];
        let lib = info::optimal_lagrangian(&pmf, s).unwrap();
        let oracle = brute_force(&pmf, s);
        assert!((lib - oracle).abs() < 1e-10, "trial {trial}: {lib} vs {oracle}");
    }
    for _ in 0..5 {
        let pmf = JointPmf::random(3, &[2, 4, 3], &[3, 2, 2], &mut rng).unwrap();
        let (lib, oracle) = (info::optimal_lagrangian(&pmf, 0.7).unwrap(), brute_force(&pmf, 0.7));
        assert!((lib - oracle).abs() < 1e-10);
    }
}

#[test]
fn copies_value() {
    assert_eq!(info::optimal_lagrangian(&info::copies(2), 1.0).unwrap(), -2.0 * LN_2);
    assert!((brute_force(&info::copies(2), 1.0) + 2.0 * LN_2).abs() < 1e-15);
}

fn permute(v: &[f64], perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p] = v[i];
    }
    out
}

fn arb_pmf() -> impl Strategy<Value = (u64, f64)> {
    (any::<u64>(), 0.0f64..3.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn information_inequalities((seed, s) in arb_pmf()) {
        let pmf = info::random_instance(seed, 2, 3);
        let t = info::lagrangian_terms(&pmf, s).unwrap();
        for k in 0..2 {
            prop_assert!(t.mi_u_x[k] >= -1e-12);
            prop_assert!(t.h_y_given_u[k] >= -1e-12);
            prop_assert!(t.h_y_given_all <= t.h_y_given_u[k] + 1e-12);
        }
        prop_assert!(t.h_y_given_all >= -1e-12);
    }

    #[test]
    fn relabeling_invariance((seed, s) in arb_pmf()) {
        let pmf = info::random_instance(seed, 2, 3);
        let base = info::optimal_lagrangian(&pmf, s).unwrap();
        let py = [2, 0, 1];
        let px = [1, 2, 0];
        let pu = [2, 1, 0];
        let p_y = permute(&pmf.source.p_y, &py);
        // relabel Y, X_1 and U_2
        let mut pxy = pmf.source.p_x_given_y.clone();
        let mut chan1 = vec![vec![]; 3];
        for y in 0..3 {
            chan1[py[y]] = permute(&pmf.source.p_x_given_y[0][y], &px);
        }
        pxy[0] = chan1;
        let mut chan2 = vec![vec![]; 3];
        for y in 0..3 {
            chan2[py[y]] = pmf.source.p_x_given_y[1][y].clone();
        }
        pxy[1] = chan2;
        let mut pux = pmf.p_u_given_x.clone();
        let mut enc1 = vec![vec![]; 3];
        for x in 0..3 {
            enc1[px[x]] = pmf.p_u_given_x[0][x].clone();
        }
        pux[0] = enc1;
        pux[1] = pmf.p_u_given_x[1].iter().map(|r| permute(r, &pu)).collect();
        let relabeled = JointPmf::new(Source::new(p_y, pxy).unwrap(), pux).unwrap();
        let v = info::optimal_lagrangian(&relabeled, s).unwrap();
        prop_assert!((v - base).abs() < 1e-10);
    }

    #[test]
    fn plug_in_decoders_never_beat_true_conditionals((seed, s) in arb_pmf()) {
        let pmf = info::random_instance(seed, 2, 2);
        let truth = info::population_objective(&pmf, s, &Variational::default()).unwrap();
        prop_assert!((truth - info::optimal_lagrangian(&pmf, s).unwrap()).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let plug = Variational {
            joint_decoder: Some((0..4).map(|_| info::random_pmf(2, &mut rng)).collect()),
            marginal_decoders: Some((0..2).map(|_| (0..2).map(|_| info::random_pmf(2, &mut rng)).collect()).collect()),
            priors: Some((0..2).map(|_| info::random_pmf(2, &mut rng)).collect()),
        };
        prop_assert!(info::population_objective(&pmf, s, &plug).unwrap() <= truth + 1e-12);
    }
}

fn train(source: &Source, s: f64, n: usize, steps: usize, seed: u64) -> (InlStack, Vec<innet::Tensor>, Vec<usize>) {
    let (views, labels) = info::enumerate_dataset(source, n);
    let shape = StackShape {
        view_widths: views.iter().map(|v| v.cols()).collect(),
        encoder_hidden: vec![16],
        latent: 1,
        fusion_hidden: vec![16],
        classes: source.p_y.len(),
        activation: Activation::Tanh,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack = InlStack::new(&shape, &mut rng).unwrap();
    let mut noise = NoiseSource::seeded(seed, shape.branches());
    let idx: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..steps {
        let eps: Vec<_> = (0..shape.branches()).map(|k| noise.draw(k, &idx, 1).unwrap()).collect();
        stack.step(&views, &labels, &eps, s, 0.2).unwrap();
    }
    (stack, views, labels)
}

#[test]
fn trained_stack_approaches_copies_value_from_below() {
    let law = info::copies(2);
    let (stack, views, labels) = train(&law.source, 1.0, 16, 3000, 1);
    let value = info::stack_objective(&stack, &views, &labels, 1.0, 200, 7).unwrap();
    let gap = info::empirical_bound_gap(&stack, &law.source, &[2, 2], 1.0, &views, &labels, 0.25).unwrap();
    eprintln!("copies: value {value}, gap {gap}");
    assert!(value <= -2.0 * LN_2 + 1e-2);
    // better than sending nothing, which scores −3 ln 2
    assert!(value > -3.0 * LN_2 + 0.1, "{value}");
    assert!(gap >= -1e-2);
}

#[test]
fn gap_nonnegative_on_noisy_laws() {
    let sources = [
        Source::new(
            vec![0.5, 0.5],
            vec![vec![vec![0.75, 0.25], vec![0.25, 0.75]], vec![vec![0.875, 0.125], vec![0.25, 0.75]]],
        )
        .unwrap(),
        Source::new(
            vec![0.25, 0.75],
            vec![vec![vec![0.5, 0.5], vec![0.125, 0.875]], vec![vec![1.0, 0.0], vec![0.5, 0.5]]],
        )
        .unwrap(),
    ];
    for (i, src) in sources.iter().enumerate() {
        for s in [0.0, 0.5] {
            let (stack, views, labels) = train(src, s, 64, 3000, 10 + i as u64);
            let gap = info::empirical_bound_gap(&stack, src, &[2, 2], s, &views, &labels, 0.25).unwrap();
            eprintln!("law {i} s={s}: gap {gap}");
            assert!(gap >= -1e-2, "law {i} s={s}: gap {gap}");
        }
    }
}

#[test]
fn zero_s_gap_is_conditional_entropy_check() {
    // at s = 0 the optimum is −H(Y | X_1, X_2): identity encoders are on the grid
    let src = Source::new(
        vec![0.5, 0.5],
        vec![vec![vec![0.75, 0.25], vec![0.25, 0.75]], vec![vec![0.75, 0.25], vec![0.25, 0.75]]],
    )
    .unwrap();
    let (best, _) = info::best_on_grid(&src, &[2, 2], 0.0, 0.25).unwrap();
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let pmf = JointPmf::new(src, vec![eye.clone(), eye]).unwrap();
    assert!((best + info::lagrangian_terms(&pmf, 0.0).unwrap().h_y_given_all).abs() < 1e-12);
}
