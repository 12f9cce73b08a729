//! Shared oracles for the integration tests and the acceptance target.
#![allow(dead_code)]

use std::collections::HashMap;

use innet::info::JointPmf;
use innet::nn::Activation;
use innet::protocol::{self, EpochConfig, MessageLog, Quantizer};
use innet::stack::{InlStack, NoiseSource, StackShape};
use innet::vloss::standard_normal;
use innet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub stack: InlStack,
    pub views: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub noise: NoiseSource,
}

/// Random stack with every layer width at most 16, random data and a fixed
/// noise table.
pub fn fixture(j: usize, samples: usize, seed: u64, activation: Activation) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view_widths: Vec<usize> = (0..j).map(|_| rng.random_range(1..=6)).collect();
    let shape = StackShape {
        view_widths: view_widths.clone(),
        encoder_hidden: vec![rng.random_range(2..=8)],
        latent: rng.random_range(1..=3),
        fusion_hidden: vec![rng.random_range(2..=8)],
        classes: rng.random_range(2..=4),
        activation,
    };
    let stack = InlStack::new(&shape, &mut rng).unwrap();
    let views = view_widths.iter().map(|&w| standard_normal(samples, w, &mut rng)).collect();
    let labels = (0..samples).map(|_| rng.random_range(0..shape.classes)).collect();
    let noise = NoiseSource::fixed_from_rng(samples, &stack.widths(), &mut rng);
    Fixture {
        stack,
        views,
        labels,
        noise,
    }
}

pub fn epoch_config(batch_size: usize, s: f64) -> EpochConfig {
    EpochConfig {
        batch_size,
        lr: 0.1,
        s,
        s_bits: 32,
        quantizer: Quantizer::Off,
        samples: 1,
        shuffle: true,
    }
}

/// Trains the same fixture through the message-passing protocol and through
/// monolithic gradient descent on the glued stack, over identical batches
/// and noise. Returns both parameter vectors and the protocol's message log.
pub fn both_routes(f: &Fixture, cfg: &EpochConfig, epochs: usize, order_seed: u64) -> (Vec<f64>, Vec<f64>, MessageLog) {
    let (mut nodes, mut fusion) = protocol::deploy(&f.stack, f.views.clone(), f.labels.clone()).unwrap();
    let mut order = ChaCha8Rng::seed_from_u64(order_seed);
    let mut noise = f.noise.clone();
    let mut log = MessageLog::new();
    for e in 0..epochs {
        protocol::train_epoch(&mut nodes, &mut fusion, cfg, e, &mut order, &mut noise, &mut log).unwrap();
    }
    let distributed = protocol::collect(&nodes, &fusion).unwrap().params();

    let mut mono = f.stack.clone();
    let mut order = ChaCha8Rng::seed_from_u64(order_seed);
    let mut noise = f.noise.clone();
    let widths = mono.widths();
    for _ in 0..epochs {
        for idx in protocol::batches(f.labels.len(), cfg, &mut order) {
            let xb: Vec<Tensor> = f.views.iter().map(|v| v.select_rows(&idx)).collect();
            let yb: Vec<usize> = idx.iter().map(|&i| f.labels[i]).collect();
            let eps: Vec<Tensor> = widths
                .iter()
                .enumerate()
                .map(|(k, &w)| noise.draw(k, &idx, w).unwrap())
                .collect();
            mono.step(&xb, &yb, &eps, cfg.s, cfg.lr).unwrap();
        }
    }
    (distributed, mono.params(), log)
}

pub fn bit_identical(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Central-difference gradient of `−total` with respect to every parameter,
/// at fixed noise, compared against the analytic gradient. Returns the worst
/// `|fd − analytic| / max(|fd|, |analytic|)` over parameters whose gradient
/// magnitude exceeds `floor`, the worst absolute error below it, and the
/// parameter count.
pub fn finite_difference(f: &Fixture, s: f64, step: f64, floor: f64) -> (f64, f64, usize) {
    let idx: Vec<usize> = (0..f.labels.len()).collect();
    let mut noise = f.noise.clone();
    let eps: Vec<Tensor> = f
        .stack
        .widths()
        .iter()
        .enumerate()
        .map(|(k, &w)| noise.draw(k, &idx, w).unwrap())
        .collect();
    let (_, grads) = f.stack.loss_and_gradients(&f.views, &f.labels, &eps, s).unwrap();
    let analytic = grads.flatten();
    let theta = f.stack.params();
    assert_eq!(analytic.len(), theta.len());
    let objective = |p: &[f64]| {
        let mut st = f.stack.clone();
        st.set_params(p).unwrap();
        -st.evaluate(&f.views, &f.labels, &eps, s).unwrap().total
    };
    let (mut worst_rel, mut worst_abs) = (0.0f64, 0.0f64);
    let mut p = theta.clone();
    for i in 0..theta.len() {
        p[i] = theta[i] + step;
        let up = objective(&p);
        p[i] = theta[i] - step;
        let down = objective(&p);
        p[i] = theta[i];
        let fd = (up - down) / (2.0 * step);
        let scale = fd.abs().max(analytic[i].abs());
        if scale > floor {
            worst_rel = worst_rel.max((fd - analytic[i]).abs() / scale);
        } else {
            worst_abs = worst_abs.max((fd - analytic[i]).abs());
        }
    }
    (worst_rel, worst_abs, theta.len())
}

/// Brute-force reference: walk every (y, x, u) tuple of the factorized law,
/// accumulate each needed marginal in a hash map keyed by the tuple, then
/// sum -p ln p. Shares nothing with the library's tensor code.
pub fn brute_force(pmf: &JointPmf, s: f64) -> f64 {
    let py = &pmf.source.p_y;
    let pxy = &pmf.source.p_x_given_y;
    let pux = &pmf.p_u_given_x;
    let j = pxy.len();
    let mut cells: Vec<(Vec<usize>, Vec<usize>, usize, f64)> = Vec::new();
    fn rec(
        k: usize,
        y: usize,
        p: f64,
        xs: &mut Vec<usize>,
        us: &mut Vec<usize>,
        pxy: &[Vec<Vec<f64>>],
        pux: &[Vec<Vec<f64>>],
        out: &mut Vec<(Vec<usize>, Vec<usize>, usize, f64)>,
    ) {
        if k == pxy.len() {
            out.push((xs.clone(), us.clone(), y, p));
            return;
        }
        for x in 0..pxy[k][y].len() {
            for u in 0..pux[k][x].len() {
                xs.push(x);
                us.push(u);
                rec(k + 1, y, p * pxy[k][y][x] * pux[k][x][u], xs, us, pxy, pux, out);
                xs.pop();
                us.pop();
            }
        }
    }
    for (y, &p) in py.iter().enumerate() {
        rec(0, y, p, &mut vec![], &mut vec![], pxy, pux, &mut cells);
    }
    let h = |key: &dyn Fn(&(Vec<usize>, Vec<usize>, usize, f64)) -> Vec<usize>| {
        let mut m: HashMap<Vec<usize>, f64> = HashMap::new();
        for c in &cells {
            *m.entry(key(c)).or_default() += c.3;
        }
        m.values().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>()
    };
    let h_yu = h(&|c| {
        let mut k = c.1.clone();
        k.push(c.2);
        k
    });
    let h_u = h(&|c| c.1.clone());
    let mut value = -(h_yu - h_u);
    for k in 0..j {
        let h_uk = h(&|c| vec![c.1[k]]);
        let h_yuk = h(&|c| vec![c.1[k], c.2]);
        let h_xk = h(&|c| vec![c.0[k]]);
        let h_xuk = h(&|c| vec![c.0[k], c.1[k]]);
        value -= s * ((h_yuk - h_uk) + (h_uk + h_xk - h_xuk));
    }
    value
}
