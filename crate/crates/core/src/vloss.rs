//! The in-network training objective.
//!
//! For a batch of `n` samples the objective is
//!
//! ```text
//! total = (1/n) Σ_i log Q(y_i | u_1i..u_Ji)
//!       + (s/n) Σ_i Σ_j [ log Q_j(y_i | u_ji) − log P_j(u_ji | x_ji) / Q_j(u_ji) ]
//! ```
//!
//! which is maximised; trainers minimise `−total`. `P_j` is a diagonal
//! Gaussian encoder sampled with the reparametrization `u = μ + e^{lv/2} ε`
//! and `Q_j(u)` is the node's prior. All logs are natural.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
const DIST_TOL: f64 = 1e-9;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidDistribution(format!("negative or non-finite entry in {p:?}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// `−ln p̂[y]`, with `p̂[y]` floored at [`PROB_FLOOR`].
pub fn log_loss(y: usize, p_hat: &[f64]) -> Result<f64> {
    check_distribution(p_hat)?;
    let p = *p_hat
        .get(y)
        .ok_or_else(|| Error::InvalidDistribution(format!("label {y} outside {} classes", p_hat.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `H(Y) − E[d(Y, Ŷ)]`.
pub fn relevance(h_y: f64, mean_log_loss: f64) -> f64 {
    h_y - mean_log_loss
}

/// Empirical label entropy in nats.
pub fn label_entropy(labels: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEncoderOutput {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub sample: Tensor,
    pub noise: Tensor,
}

/// Draws standard-normal noise of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

/// Reparametrized sample with caller-supplied noise.
pub fn encode_with_noise(mean: &Tensor, log_var: &Tensor, noise: &Tensor) -> Result<GaussianEncoderOutput> {
    if mean.shape() != log_var.shape() || mean.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "mean {:?}, log-variance {:?} and noise {:?} must agree",
            mean.shape(),
            log_var.shape(),
            noise.shape()
        )));
    }
    let mut sample = mean.clone();
    for ((u, &lv), &e) in sample.data_mut().iter_mut().zip(log_var.data()).zip(noise.data()) {
        *u += (0.5 * lv).exp() * e;
    }
    Ok(GaussianEncoderOutput {
        mean: mean.clone(),
        log_var: log_var.clone(),
        sample,
        noise: noise.clone(),
    })
}

pub fn encode_reparam<R: Rng + ?Sized>(
    mean: &Tensor,
    log_var: &Tensor,
    rng: &mut R,
) -> Result<GaussianEncoderOutput> {
    let noise = standard_normal(mean.rows(), mean.cols(), rng);
    encode_with_noise(mean, log_var, &noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    #[default]
    StandardNormal,
    FixedDiagonalGaussian { mean: Vec<f64>, log_var: Vec<f64> },
}

impl Prior {
    fn params(&self, k: usize) -> (f64, f64) {
        match self {
            Prior::StandardNormal => (0.0, 0.0),
            Prior::FixedDiagonalGaussian { mean, log_var } => (mean[k], log_var[k]),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        match self {
            Prior::StandardNormal => Ok(()),
            Prior::FixedDiagonalGaussian { mean, log_var } => {
                if mean.len() != dim || log_var.len() != dim {
                    return Err(Error::Shape(format!(
                        "prior has dimension {}/{} but encoder has {dim}",
                        mean.len(),
                        log_var.len()
                    )));
                }
                if mean.iter().chain(log_var).any(|v| !v.is_finite()) {
                    return Err(Error::Validation("prior parameters must be finite".into()));
                }
                Ok(())
            }
        }
    }

    /// `log Q(u)` for a single vector.
    pub fn log_density(&self, u: &[f64]) -> f64 {
        u.iter()
            .enumerate()
            .map(|(k, &v)| {
                let (m, lv) = self.params(k);
                -0.5 * (LN_2PI + lv + (v - m).powi(2) * (-lv).exp())
            })
            .sum()
    }
}

/// Per-sample `log P(u|x) − log Q(u)` at the drawn sample.
pub fn rate_term(enc: &GaussianEncoderOutput, prior: &Prior) -> Result<Vec<f64>> {
    prior.check(enc.sample.cols())?;
    Ok((0..enc.sample.rows())
        .map(|r| {
            let (u, mu, lv) = (enc.sample.row(r), enc.mean.row(r), enc.log_var.row(r));
            let log_p: f64 = u
                .iter()
                .zip(mu)
                .zip(lv)
                .map(|((&u, &m), &lv)| -0.5 * (LN_2PI + lv + (u - m).powi(2) * (-lv).exp()))
                .sum();
            log_p - prior.log_density(u)
        })
        .collect())
}

/// Partial derivatives of one sample's rate with respect to the sample, the
/// mean and the log-variance, each holding the other two fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct RateGradients {
    pub sample: Tensor,
    pub mean: Tensor,
    pub log_var: Tensor,
}

pub fn rate_gradients(enc: &GaussianEncoderOutput, prior: &Prior) -> Result<RateGradients> {
    prior.check(enc.sample.cols())?;
    let cols = enc.sample.cols();
    let mut g_u = Tensor::zeros(enc.sample.shape());
    let mut g_mu = Tensor::zeros(enc.sample.shape());
    let mut g_lv = Tensor::zeros(enc.sample.shape());
    for i in 0..enc.sample.len() {
        let k = i % cols;
        let (u, m, lv) = (enc.sample.data()[i], enc.mean.data()[i], enc.log_var.data()[i]);
        let (pm, plv) = prior.params(k);
        let inv = (-lv).exp();
        g_u.data_mut()[i] = -(u - m) * inv + (u - pm) * (-plv).exp();
        g_mu.data_mut()[i] = (u - m) * inv;
        g_lv.data_mut()[i] = -0.5 + 0.5 * (u - m).powi(2) * inv;
    }
    Ok(RateGradients {
        sample: g_u,
        mean: g_mu,
        log_var: g_lv,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean `log Q(y|u_1..u_J)`.
    pub joint_ll: f64,
    /// Mean `log Q_j(y|u_j)` per node.
    pub marginal_ll: Vec<f64>,
    /// Mean rate per node.
    pub rate: Vec<f64>,
    pub s: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn marginal_sum(&self) -> f64 {
        self.marginal_ll.iter().sum()
    }

    pub fn rate_sum(&self) -> f64 {
        self.rate.iter().sum()
    }

    /// Weighted running mean: merges `other` (over `n_other` samples) into
    /// `self` (over `n_self`).
    pub fn merge(&mut self, n_self: usize, other: &LossBreakdown, n_other: usize) {
        if n_self == 0 {
            *self = other.clone();
            return;
        }
        let (a, b) = (n_self as f64, n_other as f64);
        let mix = |x: f64, y: f64| (x * a + y * b) / (a + b);
        self.joint_ll = mix(self.joint_ll, other.joint_ll);
        for (x, &y) in self.marginal_ll.iter_mut().zip(&other.marginal_ll) {
            *x = mix(*x, y);
        }
        for (x, &y) in self.rate.iter_mut().zip(&other.rate) {
            *x = mix(*x, y);
        }
        self.total = mix(self.total, other.total);
    }
}

fn mean_log_likelihood(pred: &Tensor, labels: &[usize]) -> Result<f64> {
    if pred.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.rows(),
            labels.len()
        )));
    }
    let mut acc = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        acc -= log_loss(y, pred.row(r))?;
    }
    Ok(acc / labels.len() as f64)
}

/// Evaluates the objective on a batch. `joint_pred` and each entry of
/// `marginal_preds` are `[batch, classes]` distributions; `rates[j]` holds
/// per-sample rate values for node `j`.
pub fn inl_loss(
    joint_pred: &Tensor,
    marginal_preds: &[Tensor],
    rates: &[Vec<f64>],
    labels: &[usize],
    s: f64,
) -> Result<LossBreakdown> {
    if marginal_preds.len() != rates.len() {
        return Err(Error::Validation(format!(
            "{} marginal predictions but {} rate vectors",
            marginal_preds.len(),
            rates.len()
        )));
    }
    let joint_ll = mean_log_likelihood(joint_pred, labels)?;
    let marginal_ll = marginal_preds
        .iter()
        .map(|p| mean_log_likelihood(p, labels))
        .collect::<Result<Vec<_>>>()?;
    let rate = rates
        .iter()
        .map(|r| {
            if r.len() != labels.len() {
                return Err(Error::Shape(format!("{} rates for {} labels", r.len(), labels.len())));
            }
            Ok(r.iter().sum::<f64>() / labels.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let penalty: f64 = marginal_ll.iter().zip(&rate).map(|(m, r)| m - r).sum();
    Ok(LossBreakdown {
        joint_ll,
        total: joint_ll + s * penalty,
        marginal_ll,
        rate,
        s,
    })
}

/// Per-sample gradient of `−log p[y]` with respect to softmax logits,
/// scaled by `weight`: `weight · (p − onehot(y))`.
pub fn logit_gradient(pred: &Tensor, labels: &[usize], weight: f64) -> Tensor {
    let mut g = pred.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = g.row_mut(r);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= weight;
        }
    }
    g
}

/// Splits the fusion node's input error into contiguous per-node slices in
/// node order.
pub fn split_error(fusion_input_error: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = widths.iter().sum();
    if fusion_input_error.rank() != 2 || total != fusion_input_error.cols() {
        return Err(Error::protocol(
            0,
            format!(
                "slice widths {widths:?} sum to {total} but the fusion input has width {}",
                fusion_input_error.cols()
            ),
        ));
    }
    fusion_input_error.split_features(widths)
}

/// Node-side correction of a received error slice: adds `s · ∂rate/∂u`.
/// The result is the gradient of `−total` with respect to the node's sample.
pub fn apply_rate_correction(slice: &Tensor, rate_grad_sample: &Tensor, s: f64) -> Result<Tensor> {
    if slice.shape() != rate_grad_sample.shape() {
        return Err(Error::Shape(format!(
            "error slice {:?} and rate gradient {:?} disagree",
            slice.shape(),
            rate_grad_sample.shape()
        )));
    }
    let mut out = slice.clone();
    for (o, &g) in out.data_mut().iter_mut().zip(rate_grad_sample.data()) {
        *o += s * g;
    }
    Ok(out)
}

/// Splits the fusion input error and applies each node's rate correction.
pub fn split_output_grad(
    fusion_input_error: &Tensor,
    widths: &[usize],
    rate_grads: &[Tensor],
    s: f64,
) -> Result<Vec<Tensor>> {
    if rate_grads.len() != widths.len() {
        return Err(Error::protocol(
            0,
            format!("{} slices but {} rate gradients", widths.len(), rate_grads.len()),
        ));
    }
    split_error(fusion_input_error, widths)?
        .iter()
        .zip(rate_grads)
        .map(|(slice, g)| apply_rate_correction(slice, g, s))
        .collect()
}

/// Chain rule from `∂(−total)/∂u` to the encoder's `[μ, log σ²]` outputs,
/// including the direct rate partials. Returns a `[batch, 2·d_u]` tensor laid
/// out as the encoder's output layer.
pub fn encoder_output_grad(
    enc: &GaussianEncoderOutput,
    sample_grad: &Tensor,
    rate: &RateGradients,
    s: f64,
) -> Result<Tensor> {
    if sample_grad.shape() != enc.sample.shape() {
        return Err(Error::Shape(format!(
            "sample gradient {:?} does not match sample {:?}",
            sample_grad.shape(),
            enc.sample.shape()
        )));
    }
    let (batch, d) = (enc.sample.rows(), enc.sample.cols());
    let mut out = Tensor::zeros(&[batch, 2 * d]);
    for r in 0..batch {
        let g = sample_grad.row(r);
        let (lv, e) = (enc.log_var.row(r), enc.noise.row(r));
        let (rm, rl) = (rate.mean.row(r), rate.log_var.row(r));
        let row = out.row_mut(r);
        for k in 0..d {
            row[k] = g[k] + s * rm[k];
            row[d + k] = g[k] * 0.5 * (0.5 * lv[k]).exp() * e[k] + s * rl[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn log_loss_values() {
        assert_eq!(log_loss(0, &[1.0, 0.0]).unwrap(), 0.0);
        assert!((log_loss(1, &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        assert!((log_loss(3, &[0.1; 10]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((log_loss(1, &[1.0, 0.0]).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        assert!(log_loss(0, &[0.6, 0.6]).is_err());
        assert!(log_loss(0, &[1.5, -0.5]).is_err());
        assert!(log_loss(2, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn relevance_values() {
        assert_eq!(relevance(LN_2, 0.0), LN_2);
        let k = 4.0f64;
        assert!(relevance(k.ln(), -(1.0 / k).ln()).abs() < 1e-15);
        let labels = [0, 1, 1, 0, 2, 2, 2, 0];
        // counts 3,2,3 over 8
        let h = -(2.0 * (3.0 / 8.0) * (3.0f64 / 8.0).ln() + (2.0 / 8.0) * (2.0f64 / 8.0).ln());
        assert!((label_entropy(&labels, 3) - h).abs() < 1e-15);
    }

    #[test]
    fn reparam_identity() {
        let mu = Tensor::from_rows(&[vec![0.3, -1.0]]);
        let lv = Tensor::from_rows(&[vec![-60.0, -60.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = encode_reparam(&mu, &lv, &mut rng).unwrap();
        for (u, m) in enc.sample.data().iter().zip(mu.data()) {
            assert!((u - m).abs() < 1e-10);
        }
        let enc = encode_with_noise(
            &Tensor::from_rows(&[vec![0.0]]),
            &Tensor::from_rows(&[vec![0.0]]),
            &Tensor::from_rows(&[vec![1.5]]),
        )
        .unwrap();
        assert_eq!(enc.sample.data(), &[1.5]);
    }

    #[test]
    fn reparam_sample_mean_converges() {
        let n = 100_000;
        let mu = Tensor::matrix(n, 1, vec![0.7; n]).unwrap();
        let lv = Tensor::matrix(n, 1, vec![(0.5f64).ln(); n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let enc = encode_reparam(&mu, &lv, &mut rng).unwrap();
        let mean = enc.sample.data().iter().sum::<f64>() / n as f64;
        let sigma = 0.5f64.sqrt();
        assert!((mean - 0.7).abs() < 4.0 * sigma / (n as f64).sqrt());
    }

    fn textbook_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
        let coef = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
        (coef * (-(x - mean) * (x - mean) / (2.0 * var)).exp()).ln()
    }

    #[test]
    fn rate_closed_forms() {
        let zero = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let noise = Tensor::from_rows(&[vec![0.4, -1.2], vec![2.0, 0.1]]);
        let enc = encode_with_noise(&zero, &zero, &noise).unwrap();
        for r in rate_term(&enc, &Prior::StandardNormal).unwrap() {
            assert_eq!(r, 0.0);
        }
        let mu = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]);
        let enc = encode_with_noise(&mu, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3])).unwrap();
        let r = rate_term(&enc, &Prior::StandardNormal).unwrap()[0];
        assert!((r - (1.0 + 4.0 + 0.25) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rate_matches_textbook_pdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let d = 3;
            let mu = Tensor::from_rows(&[(0..d).map(|_| rng.random_range(-2.0..2.0)).collect()]);
            let lv = Tensor::from_rows(&[(0..d).map(|_| rng.random_range(-2.0..1.0)).collect()]);
            let prior = Prior::FixedDiagonalGaussian {
                mean: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                log_var: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let enc = encode_reparam(&mu, &lv, &mut rng).unwrap();
            let Prior::FixedDiagonalGaussian { mean: pm, log_var: plv } = &prior else { unreachable!() };
            let expect: f64 = (0..d)
                .map(|k| {
                    let u = enc.sample.data()[k];
                    textbook_log_pdf(u, mu.data()[k], lv.data()[k].exp())
                        - textbook_log_pdf(u, pm[k], plv[k].exp())
                })
                .sum();
            let got = rate_term(&enc, &prior).unwrap()[0];
            assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        }
        let bad = Prior::FixedDiagonalGaussian { mean: vec![0.0], log_var: vec![0.0] };
        let enc = encode_with_noise(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2])).unwrap();
        assert!(rate_term(&enc, &bad).is_err());
    }

    #[test]
    fn rate_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let prior = Prior::FixedDiagonalGaussian { mean: vec![0.2, -0.4], log_var: vec![0.3, -0.2] };
        let mu = Tensor::from_rows(&[vec![0.5, -0.3]]);
        let lv = Tensor::from_rows(&[vec![-0.4, 0.2]]);
        let enc = encode_reparam(&mu, &lv, &mut rng).unwrap();
        let g = rate_gradients(&enc, &prior).unwrap();
        let h = 1e-5;
        let eval = |u: &Tensor, m: &Tensor, l: &Tensor| {
            let e = GaussianEncoderOutput { mean: m.clone(), log_var: l.clone(), sample: u.clone(), noise: enc.noise.clone() };
            rate_term(&e, &prior).unwrap()[0]
        };
        for k in 0..2 {
            for (which, analytic) in [(0, &g.sample), (1, &g.mean), (2, &g.log_var)] {
                let mut parts = [enc.sample.clone(), enc.mean.clone(), enc.log_var.clone()];
                parts[which].data_mut()[k] += h;
                let plus = eval(&parts[0], &parts[1], &parts[2]);
                parts[which].data_mut()[k] -= 2.0 * h;
                let minus = eval(&parts[0], &parts[1], &parts[2]);
                let fd = (plus - minus) / (2.0 * h);
                assert!((fd - analytic.data()[k]).abs() < 1e-7, "{which}/{k}: {fd} vs {}", analytic.data()[k]);
            }
        }
    }

    #[test]
    fn inl_loss_substitutions() {
        let half = Tensor::from_rows(&[vec![0.5, 0.5]]);
        let b = inl_loss(&half, &[half.clone()], &[vec![0.0]], &[1], 1.0).unwrap();
        assert!((b.total + 2.0 * LN_2).abs() < 1e-15);

        let joint = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        let b = inl_loss(&joint, &[half.clone(), half.clone()], &[vec![3.0], vec![1.0]], &[1], 0.0);
        assert!(b.is_err(), "batch mismatch must be rejected");
        let m = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let b = inl_loss(&joint, &[m.clone()], &[vec![3.0, 1.0]], &[1, 0], 0.0).unwrap();
        assert!((b.total - (0.8f64.ln() + 0.6f64.ln()) / 2.0).abs() < 1e-15);
        assert!(inl_loss(&joint, &[m.clone()], &[], &[1, 0], 0.0).is_err());
    }

    #[test]
    fn inl_loss_matches_direct_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, k, j) = (5, 3, 3);
        let dist = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let joint: Vec<Vec<f64>> = (0..n).map(|_| dist(&mut rng)).collect();
        let margs: Vec<Vec<Vec<f64>>> = (0..j).map(|_| (0..n).map(|_| dist(&mut rng)).collect()).collect();
        let rates: Vec<Vec<f64>> = (0..j).map(|_| (0..n).map(|_| rng.random_range(-1.0..3.0)).collect()).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let s = 0.7;
        // direct transcription: (1/n) Σ log Qjoint + (s/n) Σ_i Σ_j (log Q_j − rate)
        let mut first = 0.0;
        let mut second = 0.0;
        for i in 0..n {
            first += joint[i][y[i]].ln();
            for jj in 0..j {
                second += margs[jj][i][y[i]].ln() - rates[jj][i];
            }
        }
        let expect = first / n as f64 + s / n as f64 * second;
        let got = inl_loss(
            &Tensor::from_rows(&joint),
            &margs.iter().map(|m| Tensor::from_rows(m)).collect::<Vec<_>>(),
            &rates,
            &y,
            s,
        )
        .unwrap();
        assert!((got.total - expect).abs() < 1e-12);
    }

    #[test]
    fn split_without_correction_is_partition() {
        let err = Tensor::from_rows(&[(0..12).map(f64::from).collect()]);
        let zeros: Vec<Tensor> = [3, 4, 5].iter().map(|&w| Tensor::zeros(&[1, w])).collect();
        let parts = split_output_grad(&err, &[3, 4, 5], &zeros, 0.0).unwrap();
        assert_eq!(parts[0].data(), &[0.0, 1.0, 2.0]);
        assert_eq!(parts[1].data(), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(parts[2].data(), &[7.0, 8.0, 9.0, 10.0, 11.0]);
        assert!(matches!(split_output_grad(&err, &[3, 4], &zeros[..2], 0.0), Err(Error::Protocol { .. })));
    }

    #[test]
    fn logit_gradient_is_p_minus_onehot() {
        let p = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        let g = logit_gradient(&p, &[1, 0], 2.0);
        let expect = [0.4, -0.4, -0.8, 0.8];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn log_loss_nonnegative(raw in proptest::collection::vec(0.0f64..1.0, 2..8), y in 0usize..8) {
            let sum: f64 = raw.iter().sum();
            proptest::prop_assume!(sum > 1e-6);
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let y = y % p.len();
            let l = log_loss(y, &p).unwrap();
            proptest::prop_assert!(l >= 0.0);
            if p[y] == 1.0 { proptest::prop_assert_eq!(l, 0.0); }
        }
    }
}
