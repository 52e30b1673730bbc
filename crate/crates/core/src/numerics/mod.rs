//! Tensor container and the numerically stable primitives the rest of the
//! crate builds on. Storage is `f32`; every reduction accumulates in `f64`.

mod rng;
mod tensor;

pub use rng::{Rng, ALGORITHM as RNG_ALGORITHM};
pub use tensor::Tensor;

use crate::error::{Error, Result};

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok(())
}

/// Row-wise softmax with per-row max subtraction. `-inf` entries map to an
/// exact zero; a row made only of `-inf` is an error.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    require_matrix("softmax_rows", m)?;
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = Vec::with_capacity(rows * cols);
    let mut buf = vec![0.0f64; cols];
    for r in 0..rows {
        softmax_row_into(m.row(r), &mut buf).ok_or(Error::DegenerateRow { row: r })?;
        out.extend(buf.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

/// Softmax of one row into `out`; `None` when the row is entirely `-inf`.
pub(crate) fn softmax_row_into(row: &[f32], out: &mut [f64]) -> Option<()> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return None;
    }
    let max = max as f64;
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = if v == f32::NEG_INFINITY {
            0.0
        } else {
            (v as f64 - max).exp()
        };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Some(())
}

/// Column norms of a `d x n` matrix, in `f64`.
pub(crate) fn column_norms(a: &Tensor) -> Vec<f64> {
    let (d, n) = (a.rows(), a.cols());
    let mut norms = vec![0.0f64; n];
    for p in 0..d {
        for (acc, &v) in norms.iter_mut().zip(a.row(p)) {
            *acc += v as f64 * v as f64;
        }
    }
    norms.iter_mut().for_each(|v| *v = v.sqrt());
    norms
}

/// Cosine similarity between the columns of `a` (`d x n`) and `b` (`d x m`),
/// returned as an `n x m` matrix.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("cosine_matrix", a)?;
    require_matrix("cosine_matrix", b)?;
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "cosine_matrix",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let na = column_norms(a);
    let nb = column_norms(b);
    if let Some(index) = na.iter().position(|&v| v < 1e-12) {
        return Err(Error::ZeroNorm { index });
    }
    if let Some(index) = nb.iter().position(|&v| v < 1e-12) {
        return Err(Error::ZeroNorm { index });
    }
    let dots = gram_f64(a, b);
    let (n, m) = (a.cols(), b.cols());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let c = dots[i * m + j] / (na[i] * nb[j]);
            out.push(c.clamp(-1.0, 1.0) as f32);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// `aᵀ b` for column-vector matrices, accumulated in `f64`.
pub(crate) fn gram_f64(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (d, n, m) = (a.rows(), a.cols(), b.cols());
    let mut acc = vec![0.0f64; n * m];
    for p in 0..d {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let x = x as f64;
            let out = &mut acc[i * m..(i + 1) * m];
            for (o, &y) in out.iter_mut().zip(br) {
                *o += x * y as f64;
            }
        }
    }
    acc
}

/// Min-max normalization to `[0, 1]`. A constant input maps to all zeros.
pub fn minmax_norm(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::Empty("minmax_norm"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("minmax_norm input".into()));
    }
    let min = v.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = max - min;
    if span == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v.iter().map(|&x| ((x as f64 - min) / span) as f32).collect())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul", a)?;
    require_matrix("matmul", b)?;
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Vec::with_capacity(n * m);
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.fill(0.0);
        for (p, &x) in a.row(i).iter().enumerate().take(k) {
            if x == 0.0 {
                continue;
            }
            let x = x as f64;
            for (o, &y) in acc.iter_mut().zip(b.row(p)) {
                *o += x * y as f64;
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// `aᵀ b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_tn", a)?;
    require_matrix("matmul_tn", b)?;
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let acc = gram_f64(a, b);
    Ok(Tensor::from_parts(
        vec![a.cols(), b.cols()],
        acc.into_iter().map(|v| v as f32).collect(),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    require_matrix("transpose", a)?;
    let (r, c) = (a.rows(), a.cols());
    Ok(Tensor::from_fn(c, r, |i, j| a.at(j, i)))
}

/// Concatenates matrices along `axis` (0 stacks rows, 1 stacks columns).
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    for p in parts {
        require_matrix("concat", p)?;
    }
    match axis {
        0 => {
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                if p.cols() != cols {
                    return Err(Error::Shape {
                        op: "concat",
                        left: first.shape().to_vec(),
                        right: p.shape().to_vec(),
                    });
                }
                rows += p.rows();
                data.extend_from_slice(p.data());
            }
            Ok(Tensor::from_parts(vec![rows, cols], data))
        }
        1 => {
            let rows = first.rows();
            if let Some(p) = parts.iter().find(|p| p.rows() != rows) {
                return Err(Error::Shape {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            let cols: usize = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Ok(Tensor::from_parts(vec![rows, cols], data))
        }
        _ => Err(Error::InvalidArgument(format!("concat axis {axis}"))),
    }
}

/// Mean of every element.
pub fn mean(a: &Tensor) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Empty("mean"));
    }
    Ok(a.data().iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_tensor(a: &Tensor) -> Tensor {
    a.map(|v| sigmoid(v as f64) as f32)
}
