//! Dense row-major float64 tensors.
//!
//! Rank 0 (scalar), 1 (vector) and 2 (matrix) cover everything the toolkit
//! needs. Data is a flat `Vec<f64>`; a tensor is valid when the product of
//! its shape equals the data length and every entry is finite.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor construction",
                format!(
                    "shape {:?} implies {} entries, got {}",
                    shape,
                    expect,
                    data.len()
                ),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor construction (entry {pos})"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(
                "item()",
                format!("expected a single element, shape is {:?}", self.shape),
            ))
        }
    }

    pub fn nrows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => 1,
        }
    }

    pub fn ncols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    /// Row `r` of a matrix (or the whole vector for rank 1).
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.ncols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gather rows by index into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("gather_rows", "expected a matrix"));
        }
        let cols = self.ncols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= self.nrows() {
                return Err(Error::InvalidData(format!(
                    "row index {} out of range ({} rows)",
                    i,
                    self.nrows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor::from_parts(vec![indices.len(), cols], data))
    }
}

// Kernels shared by the expression graph and the direct encoder forward.
// All assume shapes were validated by the caller.

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape[0], a.shape[1]);
    let m = b.shape[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (n, m) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data[i * m + j];
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape.clone(), data)
}

pub(crate) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
}

/// matrix + row-broadcast bias vector
pub(crate) fn add_bias(a: &Tensor, bias: &Tensor) -> Tensor {
    let cols = a.ncols();
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bias.data[i % cols])
        .collect();
    Tensor::from_parts(a.shape.clone(), data)
}

/// row i of the matrix scaled by v[i]
pub(crate) fn scale_rows(a: &Tensor, v: &Tensor) -> Tensor {
    let cols = a.ncols();
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| x * v.data[i / cols])
        .collect();
    Tensor::from_parts(a.shape.clone(), data)
}

/// Stable log-sum-exp over the last axis. Rank 1 input collapses to a
/// scalar, rank 2 collapses each row.
pub(crate) fn logsumexp_last(a: &Tensor) -> Tensor {
    let cols = a.ncols();
    let rows = a.data.len() / cols;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &a.data[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        out.push(m + s.ln());
    }
    let shape = if a.rank() == 2 { vec![rows] } else { vec![] };
    Tensor::from_parts(shape, out)
}

pub(crate) fn row_sum(a: &Tensor) -> Tensor {
    let cols = a.ncols();
    let rows = a.data.len() / cols;
    let out = (0..rows)
        .map(|r| a.data[r * cols..(r + 1) * cols].iter().sum())
        .collect();
    let shape = if a.rank() == 2 { vec![rows] } else { vec![] };
    Tensor::from_parts(shape, out)
}

pub(crate) fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let cols = a.shape[1];
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_parts(vec![a.shape[0] + b.shape[0], cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn logsumexp_is_stable() {
        let t = Tensor::vector(vec![1000.0, 0.0]);
        let v = logsumexp_last(&t).item().unwrap();
        assert!((v - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn gather_rows_checks_bounds() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = a.gather_rows(&[1, 0, 1]).unwrap();
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.row(0), &[3.0, 4.0]);
        assert!(a.gather_rows(&[2]).is_err());
    }
}
