//! Exact information measures on small discrete alphabets.
//!
//! A [`JointPmf`] factorizes as `P_Y · Π_j P_{X_j|Y} · Π_j P_{U_j|X_j}`, so
//! each `U_j` sees `Y` only through `X_j`. On such laws the best achievable
//! value of the distributed objective is
//!
//! ```text
//! L = −H(Y | U_1..U_J) − s Σ_j [ H(Y | U_j) + I(U_j; X_j) ]
//! ```
//!
//! evaluated here by building the full joint tensor and marginalizing it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stack::{InlStack, NoiseSource};
use crate::tensor::Tensor;

/// Largest joint tensor we are willing to materialize.
pub const MAX_CELLS: u128 = 10_000_000;
const PMF_TOL: f64 = 1e-12;

fn check_pmf(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidDistribution(format!("{what}: entries must be finite and ≥ 0")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PMF_TOL {
        return Err(Error::InvalidDistribution(format!("{what}: sums to {sum}")));
    }
    Ok(())
}

fn plogp_sum(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_pmf(p, "pmf")?;
    Ok(plogp_sum(p.iter().copied()))
}

/// `P_Y` and the observation channels `P_{X_j|Y}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub p_y: Vec<f64>,
    /// `[j][y][x]`
    pub p_x_given_y: Vec<Vec<Vec<f64>>>,
}

impl Source {
    pub fn new(p_y: Vec<f64>, p_x_given_y: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        check_pmf(&p_y, "P_Y")?;
        if p_x_given_y.is_empty() {
            return Err(Error::Validation("need at least one observation".into()));
        }
        for (j, channel) in p_x_given_y.iter().enumerate() {
            if channel.len() != p_y.len() {
                return Err(Error::Validation(format!("P_X{}|Y has {} rows", j + 1, channel.len())));
            }
            let width = channel[0].len();
            for (y, row) in channel.iter().enumerate() {
                if row.len() != width {
                    return Err(Error::Validation(format!("P_X{}|Y is ragged", j + 1)));
                }
                check_pmf(row, &format!("P_X{}|Y={y}", j + 1))?;
            }
        }
        Ok(Self { p_y, p_x_given_y })
    }

    pub fn observers(&self) -> usize {
        self.p_x_given_y.len()
    }

    pub fn x_size(&self, j: usize) -> usize {
        self.p_x_given_y[j][0].len()
    }

    /// Random source with the given alphabet sizes.
    pub fn random<R: Rng + ?Sized>(y_size: usize, x_sizes: &[usize], rng: &mut R) -> Result<Self> {
        let p_y = random_pmf(y_size, rng);
        let p_x_given_y = x_sizes
            .iter()
            .map(|&nx| (0..y_size).map(|_| random_pmf(nx, rng)).collect())
            .collect();
        Self::new(p_y, p_x_given_y)
    }
}

pub fn random_pmf<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// A source together with stochastic encoders `P_{U_j|X_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPmf {
    pub source: Source,
    /// `[j][x][u]`
    pub p_u_given_x: Vec<Vec<Vec<f64>>>,
}

impl JointPmf {
    pub fn new(source: Source, p_u_given_x: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if p_u_given_x.len() != source.observers() {
            return Err(Error::Validation(format!(
                "{} encoders for {} observations",
                p_u_given_x.len(),
                source.observers()
            )));
        }
        for (j, enc) in p_u_given_x.iter().enumerate() {
            if enc.len() != source.x_size(j) {
                return Err(Error::Validation(format!("P_U{}|X has {} rows", j + 1, enc.len())));
            }
            let width = enc[0].len();
            for (x, row) in enc.iter().enumerate() {
                if row.len() != width {
                    return Err(Error::Validation(format!("P_U{}|X is ragged", j + 1)));
                }
                check_pmf(row, &format!("P_U{}|X={x}", j + 1))?;
            }
        }
        Ok(Self { source, p_u_given_x })
    }

    pub fn random<R: Rng + ?Sized>(y_size: usize, x_sizes: &[usize], u_sizes: &[usize], rng: &mut R) -> Result<Self> {
        let source = Source::random(y_size, x_sizes, rng)?;
        let enc = x_sizes
            .iter()
            .zip(u_sizes)
            .map(|(&nx, &nu)| (0..nx).map(|_| random_pmf(nu, rng)).collect())
            .collect();
        Self::new(source, enc)
    }

    pub fn observers(&self) -> usize {
        self.source.observers()
    }

    pub fn u_size(&self, j: usize) -> usize {
        self.p_u_given_x[j][0].len()
    }

    /// Axis sizes in the order `Y, X_1..X_J, U_1..U_J`.
    pub fn dims(&self) -> Vec<usize> {
        let j = self.observers();
        let mut dims = vec![self.source.p_y.len()];
        dims.extend((0..j).map(|i| self.source.x_size(i)));
        dims.extend((0..j).map(|i| self.u_size(i)));
        dims
    }

    /// Materializes the joint probability tensor.
    pub fn tensor(&self) -> Result<FullJoint> {
        let dims = self.dims();
        let cells: u128 = dims.iter().map(|&d| d as u128).product();
        if cells > MAX_CELLS {
            return Err(Error::AlphabetOverflow {
                cells,
                limit: MAX_CELLS,
            });
        }
        let j = self.observers();
        let mut probs = Vec::with_capacity(cells as usize);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..cells {
            let y = idx[0];
            let mut p = self.source.p_y[y];
            for k in 0..j {
                let x = idx[1 + k];
                p *= self.source.p_x_given_y[k][y][x] * self.p_u_given_x[k][x][idx[1 + j + k]];
            }
            probs.push(p);
            advance(&mut idx, &dims);
        }
        Ok(FullJoint { dims, probs })
    }
}

/// Row-major mixed-radix increment, last axis fastest.
fn advance(idx: &mut [usize], dims: &[usize]) {
    for a in (0..dims.len()).rev() {
        idx[a] += 1;
        if idx[a] < dims[a] {
            return;
        }
        idx[a] = 0;
    }
}

/// A dense joint distribution over several finite axes.
#[derive(Debug, Clone, PartialEq)]
pub struct FullJoint {
    pub dims: Vec<usize>,
    pub probs: Vec<f64>,
}

impl FullJoint {
    /// Marginal over `keep` (in the given order), flattened row-major.
    pub fn marginal(&self, keep: &[usize]) -> Vec<f64> {
        let size: usize = keep.iter().map(|&a| self.dims[a]).product();
        let mut out = vec![0.0; size];
        let mut idx = vec![0usize; self.dims.len()];
        for &p in &self.probs {
            let mut flat = 0;
            for &a in keep {
                flat = flat * self.dims[a] + idx[a];
            }
            out[flat] += p;
            advance(&mut idx, &self.dims);
        }
        out
    }

    pub fn entropy_of(&self, axes: &[usize]) -> f64 {
        plogp_sum(self.marginal(axes))
    }
}

/// Ingredients and value of the optimal Lagrangian.
#[derive(Debug, Clone, PartialEq)]
pub struct Lagrangian {
    pub h_y_given_all: f64,
    pub h_y_given_u: Vec<f64>,
    pub mi_u_x: Vec<f64>,
    pub value: f64,
}

pub fn lagrangian_terms(pmf: &JointPmf, s: f64) -> Result<Lagrangian> {
    let full = pmf.tensor()?;
    let j = pmf.observers();
    let u_axes: Vec<usize> = (1 + j..1 + 2 * j).collect();
    let mut y_and_u = vec![0];
    y_and_u.extend(&u_axes);
    let h_y_given_all = full.entropy_of(&y_and_u) - full.entropy_of(&u_axes);
    let mut h_y_given_u = Vec::with_capacity(j);
    let mut mi_u_x = Vec::with_capacity(j);
    for k in 0..j {
        let (x, u) = (1 + k, 1 + j + k);
        let h_u = full.entropy_of(&[u]);
        h_y_given_u.push(full.entropy_of(&[0, u]) - h_u);
        mi_u_x.push(h_u + full.entropy_of(&[x]) - full.entropy_of(&[x, u]));
    }
    let penalty: f64 = h_y_given_u.iter().zip(&mi_u_x).map(|(h, i)| h + i).sum();
    Ok(Lagrangian {
        value: -h_y_given_all - s * penalty,
        h_y_given_all,
        h_y_given_u,
        mi_u_x,
    })
}

/// `−H(Y|U_1..U_J) − s Σ_j [H(Y|U_j) + I(U_j;X_j)]`.
pub fn optimal_lagrangian(pmf: &JointPmf, s: f64) -> Result<f64> {
    Ok(lagrangian_terms(pmf, s)?.value)
}

/// Variational distributions plugged into the population objective. `None`
/// means "use the true conditional induced by the joint law".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Variational {
    /// `[flat u tuple][y]`
    pub joint_decoder: Option<Vec<Vec<f64>>>,
    /// `[j][u][y]`
    pub marginal_decoders: Option<Vec<Vec<Vec<f64>>>>,
    /// `[j][u]`
    pub priors: Option<Vec<Vec<f64>>>,
}

/// Population value of the training objective,
/// `E[log Q(Y|U) + s Σ_j (log Q_j(Y|U_j) − log P(U_j|X_j)/Q_j(U_j))]`,
/// by exact enumeration.
pub fn population_objective(pmf: &JointPmf, s: f64, plug: &Variational) -> Result<f64> {
    let full = pmf.tensor()?;
    let j = pmf.observers();
    let ny = pmf.source.p_y.len();
    let u_axes: Vec<usize> = (1 + j..1 + 2 * j).collect();
    let u_sizes: Vec<usize> = (0..j).map(|k| pmf.u_size(k)).collect();
    let flat_u = |idx: &[usize]| u_axes.iter().fold(0, |acc, &a| acc * full.dims[a] + idx[a]);

    let joint_decoder = match &plug.joint_decoder {
        Some(t) => t.clone(),
        None => {
            let mut y_and_u = vec![0];
            y_and_u.extend(&u_axes);
            let p_yu = full.marginal(&y_and_u);
            let nu = p_yu.len() / ny;
            (0..nu)
                .map(|u| {
                    let col: Vec<f64> = (0..ny).map(|y| p_yu[y * nu + u]).collect();
                    normalize(col)
                })
                .collect()
        }
    };
    let marginal_decoders = match &plug.marginal_decoders {
        Some(t) => t.clone(),
        None => (0..j)
            .map(|k| {
                let p_yu = full.marginal(&[0, 1 + j + k]);
                let nu = u_sizes[k];
                (0..nu)
                    .map(|u| normalize((0..ny).map(|y| p_yu[y * nu + u]).collect()))
                    .collect()
            })
            .collect(),
    };
    let priors = match &plug.priors {
        Some(t) => t.clone(),
        None => (0..j).map(|k| full.marginal(&[1 + j + k])).collect(),
    };

    let mut total = 0.0;
    let mut idx = vec![0usize; full.dims.len()];
    for &p in &full.probs {
        if p > 0.0 {
            let y = idx[0];
            let mut term = joint_decoder[flat_u(&idx)][y].ln();
            let mut per_node = 0.0;
            for k in 0..j {
                let (x, u) = (idx[1 + k], idx[1 + j + k]);
                per_node += marginal_decoders[k][u][y].ln() - (pmf.p_u_given_x[k][x][u].ln() - priors[k][u].ln());
            }
            term += s * per_node;
            total += p * term;
        }
        advance(&mut idx, &full.dims);
    }
    Ok(total)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.into_iter().map(|x| x / sum).collect()
    } else {
        let n = v.len() as f64;
        vec![1.0 / n; v.len()]
    }
}

/// Every `[x][u]` stochastic matrix whose entries are multiples of `step`.
pub fn grid_channels(x_size: usize, u_size: usize, step: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    let units = (1.0 / step).round() as usize;
    if units == 0 || ((units as f64) * step - 1.0).abs() > 1e-12 {
        return Err(Error::Validation(format!("grid step {step} must divide 1")));
    }
    let rows = compositions(units, u_size)
        .into_iter()
        .map(|c| c.into_iter().map(|k| k as f64 / units as f64).collect::<Vec<f64>>())
        .collect::<Vec<_>>();
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
    for _ in 0..x_size {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                rows.iter().map(move |r| {
                    let mut m = prefix.clone();
                    m.push(r.clone());
                    m
                })
            })
            .collect();
    }
    Ok(out)
}

/// All ways to write `total` as an ordered sum of `parts` non-negative ints.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    (0..=total)
        .flat_map(|first| {
            compositions(total - first, parts - 1).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

/// Maximizes the optimal Lagrangian over encoders on a probability grid.
pub fn best_on_grid(source: &Source, u_sizes: &[usize], s: f64, step: f64) -> Result<(f64, JointPmf)> {
    if u_sizes.len() != source.observers() {
        return Err(Error::Validation("one U alphabet per observation".into()));
    }
    let grids = (0..source.observers())
        .map(|k| grid_channels(source.x_size(k), u_sizes[k], step))
        .collect::<Result<Vec<_>>>()?;
    let combos: u128 = grids.iter().map(|g| g.len() as u128).product();
    if combos > MAX_CELLS {
        return Err(Error::AlphabetOverflow {
            cells: combos,
            limit: MAX_CELLS,
        });
    }
    let dims: Vec<usize> = grids.iter().map(Vec::len).collect();
    let mut idx = vec![0usize; dims.len()];
    let mut best: Option<(f64, JointPmf)> = None;
    for _ in 0..combos {
        let enc = idx.iter().zip(&grids).map(|(&i, g)| g[i].clone()).collect();
        let pmf = JointPmf::new(source.clone(), enc)?;
        let v = optimal_lagrangian(&pmf, s)?;
        if best.as_ref().map_or(true, |(b, _)| v > *b) {
            best = Some((v, pmf));
        }
        advance(&mut idx, &dims);
    }
    Ok(best.expect("grid is never empty"))
}

/// Finite dataset that reproduces `source`: each `(y, x_1..x_J)` tuple is
/// repeated `round(P · n)` times. Views are one-hot encoded.
pub fn enumerate_dataset(source: &Source, n: usize) -> (Vec<Tensor>, Vec<usize>) {
    let j = source.observers();
    let mut dims = vec![source.p_y.len()];
    dims.extend((0..j).map(|k| source.x_size(k)));
    let cells: usize = dims.iter().product();
    let mut idx = vec![0usize; dims.len()];
    let mut labels = Vec::new();
    let mut xs: Vec<Vec<usize>> = vec![Vec::new(); j];
    for _ in 0..cells {
        let y = idx[0];
        let mut p = source.p_y[y];
        for k in 0..j {
            p *= source.p_x_given_y[k][y][idx[1 + k]];
        }
        let reps = (p * n as f64).round() as usize;
        for _ in 0..reps {
            labels.push(y);
            for k in 0..j {
                xs[k].push(idx[1 + k]);
            }
        }
        advance(&mut idx, &dims);
    }
    let views = xs
        .iter()
        .enumerate()
        .map(|(k, col)| {
            let width = source.x_size(k);
            let mut data = vec![0.0; col.len() * width];
            for (r, &x) in col.iter().enumerate() {
                data[r * width + x] = 1.0;
            }
            Tensor::matrix(col.len(), width, data).expect("sized above")
        })
        .collect();
    (views, labels)
}

/// Monte-Carlo estimate of a stack's objective on a dataset, averaged over
/// `draws` independent noise samples.
pub fn stack_objective(stack: &InlStack, views: &[Tensor], labels: &[usize], s: f64, draws: usize, seed: u64) -> Result<f64> {
    let mut noise = NoiseSource::seeded(seed, stack.branches());
    let idx: Vec<usize> = (0..labels.len()).collect();
    let widths = stack.widths();
    let mut acc = 0.0;
    for _ in 0..draws {
        let eps = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| noise.draw(k, &idx, w))
            .collect::<Result<Vec<_>>>()?;
        acc += stack.evaluate(views, labels, &eps, s)?.total;
    }
    Ok(acc / draws as f64)
}

/// Grid-searched optimum minus the trained stack's objective on the
/// enumerated dataset. Non-negative up to grid and sampling error.
pub fn empirical_bound_gap(
    stack: &InlStack,
    source: &Source,
    u_sizes: &[usize],
    s: f64,
    views: &[Tensor],
    labels: &[usize],
    step: f64,
) -> Result<f64> {
    let (best, _) = best_on_grid(source, u_sizes, s, step)?;
    let value = stack_objective(stack, views, labels, s, 200, 0x5eed)?;
    Ok(best - value)
}

/// Deterministic-copy law: `Y` uniform on `{0,1}` and `U_j = X_j = Y`.
pub fn copies(j: usize) -> JointPmf {
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let source = Source::new(vec![0.5, 0.5], vec![eye.clone(); j]).expect("valid");
    JointPmf::new(source, vec![eye; j]).expect("valid")
}

/// Random instance for demos and tests.
pub fn random_instance(seed: u64, j: usize, size: usize) -> JointPmf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    JointPmf::random(size, &vec![size; j], &vec![size; j], &mut rng).expect("valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.5, 0.5]).unwrap(), LN_2);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((entropy(&[0.25, 0.75]).unwrap() - 0.5623).abs() < 1e-4);
        assert_eq!(entropy(&[0.25, 0.75]).unwrap(), h);
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[-0.5, 1.5]).is_err());
    }

    #[test]
    fn copies_case() {
        let v = optimal_lagrangian(&copies(2), 1.0).unwrap();
        assert_eq!(v, -2.0 * LN_2);
        let v3 = optimal_lagrangian(&copies(3), 0.5).unwrap();
        assert!((v3 + 0.5 * 3.0 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn useless_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let source = Source::random(3, &[2, 4], &mut rng).unwrap();
        // every row identical: U independent of X
        let enc = vec![vec![vec![0.3, 0.7]; 2], vec![vec![0.1, 0.2, 0.7]; 4]];
        let pmf = JointPmf::new(source.clone(), enc).unwrap();
        let hy = entropy(&source.p_y).unwrap();
        let s = 0.8;
        let v = optimal_lagrangian(&pmf, s).unwrap();
        assert!((v - (-hy - s * 2.0 * hy)).abs() < 1e-12);
    }

    #[test]
    fn overflow_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pmf = JointPmf::random(10, &[10; 4], &[10; 4], &mut rng).unwrap();
        assert!(matches!(optimal_lagrangian(&pmf, 1.0), Err(Error::AlphabetOverflow { .. })));
    }

    #[test]
    fn construction_checks() {
        let source = Source::new(vec![0.5, 0.5], vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]]).unwrap();
        assert!(JointPmf::new(source.clone(), vec![vec![vec![0.5, 0.6], vec![1.0, 0.0]]]).is_err());
        assert!(JointPmf::new(source.clone(), vec![]).is_err());
        assert!(Source::new(vec![0.5, 0.5], vec![vec![vec![1.0]]]).is_err());
    }

    #[test]
    fn grid_enumeration() {
        let g = grid_channels(2, 2, 0.25).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(grid_channels(1, 3, 0.25).unwrap().len(), 15);
        assert!(grid_channels(2, 2, 0.3).is_err());
        for m in &g {
            for row in m {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grid_optimum_at_zero_s_is_conditional_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let source = Source::random(2, &[2, 2], &mut rng).unwrap();
        let (best, _) = best_on_grid(&source, &[2, 2], 0.0, 0.25).unwrap();
        // identity encoders: −H(Y|X1,X2)
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pmf = JointPmf::new(source, vec![eye.clone(), eye]).unwrap();
        let expect = -lagrangian_terms(&pmf, 0.0).unwrap().h_y_given_all;
        assert!((best - expect).abs() < 1e-12);
    }

    #[test]
    fn enumerated_dataset_reproduces_law() {
        let source = Source::new(
            vec![0.5, 0.5],
            vec![vec![vec![0.75, 0.25], vec![0.25, 0.75]]],
        )
        .unwrap();
        let (views, labels) = enumerate_dataset(&source, 8);
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(views[0].rows(), 8);
        let ones: usize = (0..4).filter(|&r| views[0].get(r, 0) == 1.0).count();
        assert_eq!(ones, 3);
    }

    #[test]
    fn population_objective_with_true_conditionals() {
        for seed in 0..5 {
            let pmf = random_instance(seed, 2, 2);
            for s in [0.0, 0.5, 1.0, 2.0] {
                let a = population_objective(&pmf, s, &Variational::default()).unwrap();
                let b = optimal_lagrangian(&pmf, s).unwrap();
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}
