//! Dense row-major tensors.
//!
//! Everything in the engine is a rank-1 or rank-2 array of `f64`. Batched
//! quantities use `[batch, features]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::Shape(format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows.len(), width]` matrix. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let width = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == width), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self {
            shape: vec![rows.len(), width],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension of a matrix, 1 for a vector.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Interprets a rank-1 tensor as a single-row matrix.
    pub fn as_batch(&self) -> Tensor {
        if self.rank() == 2 {
            self.clone()
        } else {
            Tensor {
                shape: vec![1, self.len()],
                data: self.data.clone(),
            }
        }
    }

    /// Stacks the feature columns of equally-batched matrices side by side,
    /// in the given order.
    pub fn concat_features(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape("nothing to concatenate".into()));
        };
        let batch = first.rows();
        if let Some(bad) = parts.iter().find(|p| p.rank() != 2 || p.rows() != batch) {
            return Err(Error::Shape(format!(
                "cannot concatenate shape {:?} with batch {batch}",
                bad.shape()
            )));
        }
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(batch * width);
        for r in 0..batch {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::matrix(batch, width, data)
    }

    /// Inverse of [`Tensor::concat_features`]: splits columns into contiguous
    /// blocks of the given widths.
    pub fn split_features(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        let total: usize = widths.iter().sum();
        if self.rank() != 2 || total != self.cols() {
            return Err(Error::Shape(format!(
                "cannot split shape {:?} into widths {widths:?}",
                self.shape
            )));
        }
        let batch = self.rows();
        let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * batch)).collect();
        for r in 0..batch {
            let row = self.row(r);
            let mut at = 0;
            for (block, &w) in out.iter_mut().zip(widths) {
                block.extend_from_slice(&row[at..at + w]);
                at += w;
            }
        }
        out.into_iter()
            .zip(widths)
            .map(|(d, &w)| Tensor::matrix(batch, w, d))
            .collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    /// Row index of the largest entry per row (first wins on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
