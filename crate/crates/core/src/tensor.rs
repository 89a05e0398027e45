//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, Range, SubAssign};

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag, also the LTF dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn cast(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn cast(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}


#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Debug> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} need {} values, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn filled(dims: &[usize], value: S) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn size_bytes(&self) -> u64 {
        (self.data.len() * S::DTYPE.size()) as u64
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Row count of a 2-D tensor. Panics on other ranks.
    pub fn rows(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "rows() on a {}-D tensor", self.dims.len());
        self.dims[0]
    }

    /// Column count of a 2-D tensor. Panics on other ranks.
    pub fn cols(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "cols() on a {}-D tensor", self.dims.len());
        self.dims[1]
    }

    pub fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.dims.len() != 2 {
            return Err(Error::Shape(format!("{what} must be 2-D, got dims {:?}", self.dims)));
        }
        Ok((self.dims[0], self.dims[1]))
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<S> {
        (0..self.rows()).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor { dims: vec![c, r], data: out }
    }

    /// `self (m×k) · other (k×n)`; rows are computed independently, so the
    /// result does not depend on the thread count.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Self> {
        let (m, k) = self.expect_matrix("matmul lhs")?;
        let (k2, n) = other.expect_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![S::zero(); m * n];
        if n > 0 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
                let arow = &self.data[i * k..(i + 1) * k];
                for (p, &a) in arow.iter().enumerate() {
                    let brow = &other.data[p * n..(p + 1) * n];
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o += a * b;
                    }
                }
            });
        }
        Ok(Tensor { dims: vec![m, n], data: out })
    }

    /// `selfᵀ (k×m)ᵀ · other (k×n)` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor<S>) -> Result<Self> {
        let (k, m) = self.expect_matrix("t_matmul lhs")?;
        let (k2, n) = other.expect_matrix("t_matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("t_matmul {k}x{m}ᵀ by {k2}x{n}")));
        }
        let mut out = vec![S::zero(); m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { dims: vec![m, n], data: out })
    }

    /// `self (m×k) · otherᵀ` where `other` is n×k.
    pub fn matmul_t(&self, other: &Tensor<S>) -> Result<Self> {
        let (m, k) = self.expect_matrix("matmul_t lhs")?;
        let (n, k2) = other.expect_matrix("matmul_t rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_t {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![S::zero(); m * n];
        if n > 0 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
                let arow = &self.data[i * k..(i + 1) * k];
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = dot(arow, &other.data[j * k..(j + 1) * k]);
                }
            });
        }
        Ok(Tensor { dims: vec![m, n], data: out })
    }

    /// Concatenates 2-D tensors along rows.
    pub fn concat_rows(parts: &[Tensor<S>]) -> Result<Self> {
        let cols = match parts.first() {
            Some(p) => p.expect_matrix("concat part")?.1,
            None => return Err(Error::Shape("concat of zero tensors".into())),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            let (r, c) = p.expect_matrix("concat part")?;
            if c != cols {
                return Err(Error::Shape(format!("concat part {i} has {c} columns, expected {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        let c = self.cols();
        Tensor {
            dims: vec![range.len(), c],
            data: self.data[range.start * c..range.end * c].to_vec(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { dims: vec![idx.len(), c], data }
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * range.len());
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + range.start..i * c + range.end]);
        }
        Tensor { dims: vec![r, range.len()], data }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let r = self.rows();
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = self.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Tensor { dims: vec![r, idx.len()], data }
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(parts: &[Tensor<S>]) -> Result<Self> {
        let rows = match parts.first() {
            Some(p) => p.expect_matrix("concat part")?.0,
            None => return Err(Error::Shape("concat of zero tensors".into())),
        };
        let mut cols = 0;
        for (i, p) in parts.iter().enumerate() {
            let (r, c) = p.expect_matrix("concat part")?;
            if r != rows {
                return Err(Error::Shape(format!("concat part {i} has {r} rows, expected {rows}")));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::new(vec![rows, cols], data)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::cast(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&mut self, s: S) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Tensor<S>, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what} (flat index {i})"))),
            None => Ok(()),
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == S::zero())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.dims == other.dims
            && self.data.iter().zip(&other.data).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn sq_norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a)
}

/// Largest `|a−b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error<S: Scalar>(a: &[S], b: &[S], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
