use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major f64 array with an explicit shape. The substrate for all
/// parameters, activations, and gradients in this crate.
///
/// All reductions run in a fixed left-to-right order so results are
/// bit-reproducible per platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// 1-D tensor from raw values.
    pub fn vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim("dims2", other, &[])),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn at2_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        let cols = self.shape[1];
        &mut self.data[r * cols + c]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Matrix product of two 2-D tensors. Summation runs left-to-right over
    /// the inner dimension.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += self.data[i * k + p] * other.data[p * n + j];
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self * v` for a 2-D `self` and 1-D `v`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        if v.shape != [k] {
            return Err(Error::dim("matvec", &self.shape, &v.shape));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            let row = &self.data[i * k..(i + 1) * k];
            for p in 0..k {
                acc += row[p] * v.data[p];
            }
            out[i] = acc;
        }
        Ok(Tensor::vector(out))
    }

    /// `self^T * v` for a 2-D `self` and 1-D `v`.
    pub fn matvec_t(&self, v: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        if v.shape != [m] {
            return Err(Error::dim("matvec_t", &self.shape, &v.shape));
        }
        let mut out = vec![0.0; k];
        for j in 0..k {
            let mut acc = 0.0;
            for i in 0..m {
                acc += self.data[i * k + j] * v.data[i];
            }
            out[j] = acc;
        }
        Ok(Tensor::vector(out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += other`, shapes must already agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Rank-1 update on a 2-D tensor: `self[i][j] += u[i] * v[j]`.
    pub fn add_outer(&mut self, u: &Tensor, v: &Tensor) {
        let (m, n) = self.dims2().expect("add_outer target must be 2-D");
        debug_assert_eq!(u.len(), m);
        debug_assert_eq!(v.len(), n);
        for i in 0..m {
            let ui = u.data[i];
            let row = &mut self.data[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += ui * v.data[j];
            }
        }
    }

    /// Concatenate 1-D tensors into one vector.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::vector(data)
    }

    /// Index of the maximal element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.data.len() {
            if self.data[i] > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for &x in &self.data {
            m = m.max(x.abs());
        }
        m
    }
}

/// Sum of absolute values.
pub fn l1_penalty(t: &Tensor) -> f64 {
    let mut acc = 0.0;
    for &x in t.data() {
        acc += x.abs();
    }
    acc
}

/// Sum of squares.
pub fn l2_penalty(t: &Tensor) -> f64 {
    let mut acc = 0.0;
    for &x in t.data() {
        acc += x * x;
    }
    acc
}

/// L1 subgradient; sign(0) is defined as 0.
pub fn sign(t: &Tensor) -> Tensor {
    t.map(|x| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}
