use crate::error::{Error, Result};

/// Dense row-major `f64` array. Most of the crate uses rank 1 (vectors,
/// biases) and rank 2 (`[batch, features]`, weight matrices).
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("NdArray::new", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "NdArray::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(NdArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        NdArray {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        NdArray {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("NdArray::from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdArray {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub(crate) fn zip(&self, other: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
        debug_assert_eq!(self.shape, other.shape);
        NdArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &NdArray) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, format!("expected rank 2, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · other`
    pub fn matmul(&self, other: &NdArray) -> Result<NdArray> {
        let (n, k) = self.require_matrix("matmul")?;
        let (k2, m) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        NdArray::matrix(n, m, out)
    }

    /// `self · otherᵀ`
    pub(crate) fn matmul_nt(&self, other: &NdArray) -> NdArray {
        let (n, k) = (self.shape[0], self.shape[1]);
        let m = other.shape[0];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        NdArray { shape: vec![n, m], data: out }
    }

    /// `selfᵀ · other`
    pub(crate) fn matmul_tn(&self, other: &NdArray) -> NdArray {
        let (n, k) = (self.shape[0], self.shape[1]);
        let m = other.shape[1];
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let brow = &other.data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        NdArray { shape: vec![k, m], data: out }
    }
}

/// Dense affine map `x·W + b` over a `[batch, in]` input.
pub fn linear_forward(x: &NdArray, w: &NdArray, b: &NdArray) -> Result<NdArray> {
    let mut out = x.matmul(w)?;
    let cols = out.cols();
    if b.len() != cols {
        return Err(Error::shape(
            "linear_forward",
            format!("bias of {} for output width {cols}", b.len()),
        ));
    }
    for row in out.data.chunks_mut(cols) {
        for (o, bv) in row.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    Ok(out)
}
