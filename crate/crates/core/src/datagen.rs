//! Synthetic multi-view classification data.
//!
//! A labeled base sample is drawn from one of `K` Gaussian blobs, the base
//! features are standardized, and each of the `J` nodes observes its own copy
//! corrupted by i.i.d. Gaussian noise of standard deviation `σ_j`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMAS: [f64; 5] = [0.4, 1.0, 2.0, 3.0, 4.0];
const MAGIC: &[u8; 6] = b"INNDS1";
/// Stream offset separating test-set randomness from training randomness.
const TEST_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub base: Tensor,
    pub labels: Vec<usize>,
    pub views: Vec<Tensor>,
    pub sigmas: Vec<f64>,
    pub classes: usize,
    pub seed: u64,
}

impl MultiViewDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.base.cols()
    }

    pub fn nodes(&self) -> usize {
        self.views.len()
    }

    /// Row-major little-endian export.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.len(), self.dim(), self.classes, self.nodes()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for s in &self.sigmas {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        for &y in &self.labels {
            w.write_all(&(y as u64).to_le_bytes())?;
        }
        for t in std::iter::once(&self.base).chain(&self.views) {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |msg: &str| Error::Format {
            what: "dataset",
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let q = next_u64(&mut r)? as usize;
        let d = next_u64(&mut r)? as usize;
        let classes = next_u64(&mut r)? as usize;
        let j = next_u64(&mut r)? as usize;
        if q.checked_mul(d).is_none_or(|n| n > 1 << 32) || j > 1 << 16 {
            return Err(fmt("implausible header"));
        }
        let sigmas = (0..j)
            .map(|_| next_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let seed = next_u64(&mut r)?;
        let labels = (0..q)
            .map(|_| next_u64(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if labels.iter().any(|&y| y >= classes) {
            return Err(fmt("label out of range"));
        }
        let mut matrix = |r: &mut R| -> Result<Tensor> {
            let data = (0..q * d)
                .map(|_| next_u64(r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            Tensor::matrix(q, d, data)
        };
        let base = matrix(&mut r)?;
        let views = (0..j).map(|_| matrix(&mut r)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            labels,
            views,
            sigmas,
            classes,
            seed,
        })
    }

    /// SHA-256 of the exported bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// `q` samples from `k` unit-variance blobs in `d` dimensions whose
/// centroids are pairwise `separation` apart. Labels are balanced within one
/// and shuffled.
pub fn synth_gaussian_classes(q: usize, d: usize, k: usize, separation: f64, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    synth_stream(q, d, k, separation, seed, 0)
}

fn synth_stream(q: usize, d: usize, k: usize, separation: f64, seed: u64, stream: u64) -> Result<(Tensor, Vec<usize>)> {
    if k < 2 {
        return Err(Error::Validation(format!("need at least 2 classes, got {k}")));
    }
    if k > d {
        return Err(Error::Validation(format!("{k} classes need at least {k} features, got {d}")));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::Validation(format!("separation must be finite and ≥ 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..q).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let offset = separation / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(q * d);
    for &y in &labels {
        for f in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(z + if f == y { offset } else { 0.0 });
        }
    }
    Ok((Tensor::matrix(q, d, data)?, labels))
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows().max(1) as f64, x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Self { mean, std }
    }

    /// Constant features are centered but not scaled.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let f = i % d;
            let s = if self.std[f] > 0.0 { self.std[f] } else { 1.0 };
            *v = (*v - self.mean[f]) / s;
        }
        out
    }
}

pub fn normalize(x: &Tensor) -> Tensor {
    Standardizer::fit(x).apply(x)
}

/// View `j` is `base + N(0, σ_j² I)`, drawn from stream `j + 1` of `seed`.
pub fn make_views(base: &Tensor, labels: &[usize], sigmas: &[f64], seed: u64) -> Result<MultiViewDataset> {
    make_views_stream(base, labels, sigmas, seed, 0)
}

fn make_views_stream(base: &Tensor, labels: &[usize], sigmas: &[f64], seed: u64, stream: u64) -> Result<MultiViewDataset> {
    if labels.len() != base.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), base.rows())));
    }
    if sigmas.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(Error::Validation("noise levels must be finite and ≥ 0".into()));
    }
    let views = sigmas
        .iter()
        .enumerate()
        .map(|(j, &sigma)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream + j as u64 + 1);
            let mut v = base.clone();
            if sigma > 0.0 {
                for x in v.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += sigma * z;
                }
            }
            v
        })
        .collect();
    Ok(MultiViewDataset {
        base: base.clone(),
        labels: labels.to_vec(),
        views,
        sigmas: sigmas.to_vec(),
        classes: labels.iter().max().map_or(0, |m| m + 1),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub q: usize,
    #[serde(default = "default_test_q")]
    pub test_q: usize,
    pub d: usize,
    pub classes: usize,
    pub separation: f64,
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

fn default_test_q() -> usize {
    1000
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            q: 4000,
            test_q: default_test_q(),
            d: 16,
            classes: 4,
            separation: 4.0,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            seed: 1,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.test_q == 0 {
            return Err(Error::Validation("q and test_q must be positive".into()));
        }
        if self.sigmas.is_empty() {
            return Err(Error::Validation("need at least one view".into()));
        }
        if self.classes < 2 || self.classes > self.d {
            return Err(Error::Validation(format!("classes must be in [2, d], got {}", self.classes)));
        }
        Ok(())
    }

    /// Training and test sets. Both are standardized with training-set
    /// statistics before noise is added.
    pub fn generate(&self) -> Result<(MultiViewDataset, MultiViewDataset)> {
        self.validate()?;
        let (train_raw, train_y) = synth_stream(self.q, self.d, self.classes, self.separation, self.seed, 0)?;
        let (test_raw, test_y) = synth_stream(self.test_q, self.d, self.classes, self.separation, self.seed, TEST_STREAM)?;
        let scaler = Standardizer::fit(&train_raw);
        let mut train = make_views_stream(&scaler.apply(&train_raw), &train_y, &self.sigmas, self.seed, 0)?;
        let mut test = make_views_stream(&scaler.apply(&test_raw), &test_y, &self.sigmas, self.seed, TEST_STREAM)?;
        train.classes = self.classes;
        test.classes = self.classes;
        Ok((train, test))
    }

    /// Monte-Carlo accuracy of the Bayes classifier on one noisy view, with
    /// standardization taken from the population moments.
    pub fn bayes_view_accuracy(&self, sigma: f64, samples: usize, seed: u64) -> Result<f64> {
        self.bayes_accuracy(&[sigma], samples, seed)
    }

    /// Bayes accuracy when all of the given noisy views are available.
    pub fn bayes_accuracy(&self, sigmas: &[f64], samples: usize, seed: u64) -> Result<f64> {
        let k = self.classes;
        let offset = self.separation / std::f64::consts::SQRT_2;
        let p = 1.0 / k as f64;
        // centroid coordinate f < k is offset·[y == f]: mean offset/k
        let class_var = offset * offset * p * (1.0 - p);
        let pop_std = |f: usize| if f < k { (1.0 + class_var).sqrt() } else { 1.0 };
        let (raw, labels) = synth_stream(samples, self.d, k, self.separation, seed, 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        // Per feature the views are x·1 + noise with covariance
        // a·11ᵀ + diag(σ²), a = within-class variance of x. The class score is
        // linear in Σ⁻¹1, which has a closed form.
        let prec: Vec<f64> = sigmas.iter().map(|&s| 1.0 / (s * s).max(1e-24)).collect();
        let total_prec: f64 = prec.iter().sum();
        let mut hits = 0;
        let mut score = vec![0.0; k];
        for (r, &y) in labels.iter().enumerate() {
            score.iter_mut().for_each(|v| *v = 0.0);
            // features ≥ k have the same mean under every class
            for f in 0..k {
                let sd = pop_std(f);
                let a = 1.0 / (sd * sd);
                let x = (raw.get(r, f) - offset * p) / sd;
                let shrink = 1.0 + a * total_prec;
                let mut stat = 0.0;
                for (&sigma, &w) in sigmas.iter().zip(&prec) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    stat += w / shrink * (x + sigma * z);
                }
                let quad = total_prec / shrink;
                for (c, sc) in score.iter_mut().enumerate() {
                    let mu = ((if c == f { offset } else { 0.0 }) - offset * p) / sd;
                    *sc += mu * stat - 0.5 * mu * mu * quad;
                }
            }
            let best = (0..k).fold(0, |b, c| if score[c] > score[b] { c } else { b });
            if best == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples as f64)
    }
}

/// Data layouts for the compared schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Node `j` holds view `j` of every sample.
    Inl,
    /// Client `j` holds all views of a disjoint `q/J` block, stacked.
    FlExp1,
    SlExp1,
    /// Client `j` holds view `j` of every sample.
    SharedExp2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    /// Sample indices into the dataset.
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub scheme: Scheme,
    pub shards: Vec<Shard>,
    /// Samples left out because `q` is not a multiple of `J`.
    pub dropped: usize,
}

pub fn partition(data: &MultiViewDataset, scheme: Scheme) -> Result<Partition> {
    let (q, j) = (data.len(), data.nodes());
    if j == 0 {
        return Err(Error::Validation("dataset has no views".into()));
    }
    match scheme {
        Scheme::Inl | Scheme::SharedExp2 => Ok(Partition {
            scheme,
            shards: data
                .views
                .iter()
                .map(|v| Shard {
                    indices: (0..q).collect(),
                    features: v.clone(),
                    labels: data.labels.clone(),
                })
                .collect(),
            dropped: 0,
        }),
        Scheme::FlExp1 | Scheme::SlExp1 => {
            let chunk = q / j;
            if chunk == 0 {
                return Err(Error::Validation(format!("{q} samples cannot cover {j} clients")));
            }
            let stacked = Tensor::concat_features(&data.views.iter().collect::<Vec<_>>())?;
            let shards = (0..j)
                .map(|c| {
                    let indices: Vec<usize> = (c * chunk..(c + 1) * chunk).collect();
                    Shard {
                        features: stacked.select_rows(&indices),
                        labels: indices.iter().map(|&i| data.labels[i]).collect(),
                        indices,
                    }
                })
                .collect();
            Ok(Partition {
                scheme,
                shards,
                dropped: q - chunk * j,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(q: usize, sigmas: &[f64]) -> MultiViewDataset {
        let (base, labels) = synth_gaussian_classes(q, 4, 2, 3.0, 5).unwrap();
        make_views(&normalize(&base), &labels, sigmas, 9).unwrap()
    }

    #[test]
    fn zero_noise_view_is_base() {
        let ds = small(50, &[0.0, 1.0]);
        assert_eq!(ds.views[0], ds.base);
        assert_ne!(ds.views[1], ds.base);
    }

    #[test]
    fn noise_variance() {
        let (base, labels) = synth_gaussian_classes(10_000, 4, 2, 2.0, 3).unwrap();
        let ds = make_views(&base, &labels, &DEFAULT_SIGMAS, 4).unwrap();
        for (v, &sigma) in ds.views.iter().zip(&DEFAULT_SIGMAS) {
            let diff: Vec<f64> = v.data().iter().zip(base.data()).map(|(a, b)| a - b).collect();
            let n = diff.len() as f64;
            let mean = diff.iter().sum::<f64>() / n;
            let var = diff.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "σ={sigma}: {var}");
        }
    }

    #[test]
    fn balanced_labels() {
        for (q, k) in [(4000, 4), (103, 4), (7, 3)] {
            let (_, labels) = synth_gaussian_classes(q, 8, k, 1.0, 1).unwrap();
            let mut hist = vec![0usize; k];
            labels.iter().for_each(|&y| hist[y] += 1);
            let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
            assert!(hi - lo <= 1, "{hist:?}");
        }
        assert!(synth_gaussian_classes(10, 4, 1, 1.0, 1).is_err());
        assert!(synth_gaussian_classes(10, 2, 3, 1.0, 1).is_err());
    }

    #[test]
    fn centroid_distances() {
        let (x, labels) = synth_gaussian_classes(40_000, 4, 4, 4.0, 2).unwrap();
        let mut means = vec![vec![0.0; 4]; 4];
        let mut counts = [0.0; 4];
        for (r, &y) in labels.iter().enumerate() {
            counts[y] += 1.0;
            for f in 0..4 {
                means[y][f] += x.get(r, f);
            }
        }
        for y in 0..4 {
            means[y].iter_mut().for_each(|m| *m /= counts[y]);
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((dist(&means[0], &means[3]) - 4.0).abs() < 0.1);
    }

    #[test]
    fn reproducible() {
        let p = DatasetParams {
            q: 60,
            test_q: 20,
            ..Default::default()
        };
        let (a, at) = p.generate().unwrap();
        let (b, bt) = p.generate().unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(at.content_hash(), bt.content_hash());
        assert_ne!(a.content_hash(), at.content_hash());
        let other = DatasetParams { seed: 2, ..p }.generate().unwrap().0;
        assert_ne!(a.content_hash(), other.content_hash());
    }

    #[test]
    fn round_trip() {
        let ds = small(12, &[0.5, 2.0, 0.0]);
        let bytes = ds.to_bytes();
        assert_eq!(&bytes[..6], b"INNDS1");
        assert_eq!(bytes.len(), 6 + 8 * 4 + 8 * 3 + 8 + 8 * 12 + 8 * 12 * 4 * 4);
        assert_eq!(MultiViewDataset::read_from(&bytes[..]).unwrap(), ds);
        assert!(MultiViewDataset::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MultiViewDataset::read_from(&bad[..]).is_err());
    }

    #[test]
    fn partitions() {
        let ds = small(4, &[0.1, 0.2]);
        let inl = partition(&ds, Scheme::Inl).unwrap();
        assert_eq!(inl.shards.len(), 2);
        assert_eq!(inl.shards[0].indices, vec![0, 1, 2, 3]);
        assert_eq!(inl.shards[1].features, ds.views[1]);
        let fl = partition(&ds, Scheme::FlExp1).unwrap();
        assert_eq!(fl.shards[0].indices, vec![0, 1]);
        assert_eq!(fl.shards[1].indices, vec![2, 3]);
        assert_eq!(fl.shards[1].features.cols(), 8);
        assert_eq!(fl.shards[1].features.row(0)[4..], ds.views[1].row(2)[..]);
        assert_eq!(fl.shards[1].labels, ds.labels[2..].to_vec());

        let odd = small(7, &[0.1, 0.2, 0.3]);
        let p = partition(&odd, Scheme::SlExp1).unwrap();
        assert_eq!(p.dropped, 1);
        let mut all: Vec<usize> = p.shards.iter().flat_map(|s| s.indices.clone()).collect();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(partition(&small(2, &[0.1, 0.2, 0.3]), Scheme::FlExp1).is_err());
    }

    #[test]
    fn desk_preset_bayes_levels() {
        let p = DatasetParams::default();
        let single = p.bayes_view_accuracy(1.0, 40_000, 11).unwrap();
        assert!((single - 0.70).abs() < 0.02, "{single}");
        let fused = p.bayes_accuracy(&DEFAULT_SIGMAS, 40_000, 11).unwrap();
        assert!(fused > 0.88, "{fused}");
        let chance = DatasetParams { separation: 0.0, ..p }.bayes_view_accuracy(0.0, 40_000, 3).unwrap();
        assert!((chance - 0.25).abs() < 0.02);
    }
}
