use crate::error::{Error, Result};

/// Dense row-major array of 32-bit floats.
///
/// The only non-finite value a tensor may hold is `-inf`, and only when
/// built through [`Tensor::with_sentinels`] (relation matrices headed for
/// [`softmax_rows`](super::softmax_rows)).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let t = Self::with_sentinels(shape, data)?;
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] but admits `-inf` entries.
    pub fn with_sentinels(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor construction",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a `rows x cols` matrix from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_parts(vec![rows, cols], data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix. Panics when the tensor is not 2-D.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let cols = self.cols();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn col(&self, c: usize) -> Vec<f32> {
        let cols = self.cols();
        (0..self.rows()).map(|r| self.data[r * cols + c]).collect()
    }

    /// Copy of rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Tensor {
        let cols = self.cols();
        Tensor::from_parts(
            vec![end - start, cols],
            self.data[start * cols..end * cols].to_vec(),
        )
    }

    /// Copy of columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Tensor {
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor::from_parts(vec![rows, end - start], data)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bit pattern of every element; equality on this is byte identity.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
