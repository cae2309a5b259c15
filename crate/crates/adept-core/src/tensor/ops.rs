//! Differentiable operations.
//!
//! Each op computes its forward value eagerly and registers a closure with
//! the per-parent gradient contributions. Rules read input values through
//! `ctx.parents`, so closures only capture small configuration (dims,
//! scalars, index lists).

use super::{kernels, BackwardCtx, Result, Tensor, TensorError};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// View a 1-D `[n]` tensor as one row, a 2-D `[r, c]` tensor as-is.
fn rows_cols(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [c] => Ok((1, *c)),
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::InvalidShape {
            op,
            expected: "1-D or 2-D tensor",
            shape: shape.to_vec(),
        }),
    }
}

fn two_d(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::InvalidShape {
            op,
            expected: "2-D tensor",
            shape: shape.to_vec(),
        }),
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data: Vec<f64> = self
            .data_ref()
            .iter()
            .zip(other.data_ref().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![
                    Some(ctx.out_grad.to_vec()),
                    Some(ctx.out_grad.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data: Vec<f64> = self
            .data_ref()
            .iter()
            .zip(other.data_ref().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![
                    Some(ctx.out_grad.to_vec()),
                    Some(ctx.out_grad.iter().map(|g| -g).collect()),
                ]
            }),
        ))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data: Vec<f64> = self
            .data_ref()
            .iter()
            .zip(other.data_ref().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let a = ctx.parents[0].data_ref();
                let b = ctx.parents[1].data_ref();
                let da = ctx.out_grad.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
                let db = ctx.out_grad.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data: Vec<f64> = self.data_ref().iter().map(|a| a * s).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![Some(ctx.out_grad.iter().map(|g| g * s).collect())]
            }),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data: Vec<f64> = self.data_ref().iter().map(|a| a + s).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.out_grad.to_vec())]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// `self [m,k] . other [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = two_d(self.shape(), "matmul")?;
        let (k2, n) = two_d(other.shape(), "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = kernels::matmul_nn(&self.data_ref(), &other.data_ref(), m, k, n);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let a = ctx.parents[0].data_ref();
                let b = ctx.parents[1].data_ref();
                // dA = G . B^T, dB = A^T . G
                let da = kernels::matmul_nt(ctx.out_grad, &b, m, n, k);
                let db = kernels::matmul_tn(&a, ctx.out_grad, k, m, n);
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// `self [m,k] . other [n,k]^T -> [m,n]` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = two_d(self.shape(), "matmul_t")?;
        let (n, k2) = two_d(other.shape(), "matmul_t")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = kernels::matmul_nt(&self.data_ref(), &other.data_ref(), m, k, n);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let a = ctx.parents[0].data_ref();
                let b = ctx.parents[1].data_ref();
                // dA = G . B, dB = G^T . A
                let da = kernels::matmul_nn(ctx.out_grad, &b, m, n, k);
                let db = kernels::matmul_tn(ctx.out_grad, &a, n, m, k);
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = two_d(self.shape(), "transpose")?;
        let src = self.data_ref();
        let mut data = vec![0.0; src.len()];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = ctx.out_grad[j * r + i];
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if super::numel(new_shape) != self.len() {
            return Err(TensorError::LengthMismatch {
                len: self.len(),
                shape: new_shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            new_shape.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.out_grad.to_vec())]),
        ))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = two_d(self.shape(), "narrow_rows")?;
        if start + len > r {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                size: r,
            });
        }
        let data = self.data_ref()[start * c..(start + len) * c].to_vec();
        Ok(Tensor::from_op(
            data,
            vec![len, c],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut da = vec![0.0; r * c];
                da[start * c..(start + len) * c].copy_from_slice(ctx.out_grad);
                vec![Some(da)]
            }),
        ))
    }

    pub fn row(&self, index: usize) -> Result<Tensor> {
        self.narrow_rows(index, 1)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = two_d(self.shape(), "narrow_cols")?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                size: c,
            });
        }
        let src = self.data_ref();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![r, len],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len]
                        .copy_from_slice(&ctx.out_grad[i * len..(i + 1) * len]);
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Embedding lookup: rows of a `[vocab, d]` table selected by index, with
    /// scatter-add on the way back.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (v, d) = two_d(self.shape(), "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange { index: bad, size: v });
        }
        let src = self.data_ref();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        drop(src);
        let captured: Vec<usize> = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![indices.len(), d],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut da = vec![0.0; v * d];
                for (n, &i) in captured.iter().enumerate() {
                    for j in 0..d {
                        da[i * d + j] += ctx.out_grad[n * d + j];
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Stack 2-D blocks (or 1-D rows) with matching width along axis 0.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat_rows",
            expected: "at least one tensor",
            shape: vec![],
        })?;
        let (_, c) = rows_cols(first.shape(), "concat_rows")?;
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r_p, c_p) = rows_cols(p.shape(), "concat_rows")?;
            if c_p != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            row_counts.push(r_p);
            data.extend_from_slice(&p.data_ref());
        }
        let total: usize = row_counts.iter().sum();
        Ok(Tensor::from_op(
            data,
            vec![total, c],
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx| {
                let mut out = Vec::with_capacity(row_counts.len());
                let mut offset = 0;
                for &r_p in &row_counts {
                    out.push(Some(ctx.out_grad[offset..offset + r_p * c].to_vec()));
                    offset += r_p * c;
                }
                out
            }),
        ))
    }

    /// Stack 2-D blocks with matching height along axis 1.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat_cols",
            expected: "at least one tensor",
            shape: vec![],
        })?;
        let (r, _) = two_d(first.shape(), "concat_cols")?;
        let mut col_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r_p, c_p) = two_d(p.shape(), "concat_cols")?;
            if r_p != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            col_counts.push(c_p);
        }
        let total: usize = col_counts.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (p, &c_p) in parts.iter().zip(&col_counts) {
            let src = p.data_ref();
            for i in 0..r {
                data[i * total + offset..i * total + offset + c_p]
                    .copy_from_slice(&src[i * c_p..(i + 1) * c_p]);
            }
            offset += c_p;
        }
        Ok(Tensor::from_op(
            data,
            vec![r, total],
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx| {
                let mut out = Vec::with_capacity(col_counts.len());
                let mut offset = 0;
                for &c_p in &col_counts {
                    let mut da = vec![0.0; r * c_p];
                    for i in 0..r {
                        da[i * c_p..(i + 1) * c_p].copy_from_slice(
                            &ctx.out_grad[i * total + offset..i * total + offset + c_p],
                        );
                    }
                    out.push(Some(da));
                    offset += c_p;
                }
                out
            }),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data_ref().iter().sum();
        let n = self.len();
        Tensor::from_op(
            vec![total],
            vec![],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| vec![Some(vec![ctx.out_grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        let total: f64 = self.data_ref().iter().sum();
        Tensor::from_op(
            vec![total / n as f64],
            vec![],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![Some(vec![ctx.out_grad[0] / n as f64; n])]
            }),
        )
    }

    /// Column means of a 2-D tensor: `[r, c] -> [c]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (r, c) = two_d(self.shape(), "mean_rows")?;
        let src = self.data_ref();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![c],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = ctx.out_grad[j] / r as f64;
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Per-row dot product of two same-shape tensors: `[r, c] x [r, c] -> [r]`.
    pub fn rowwise_dot(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("rowwise_dot", self, other)?;
        let (r, c) = rows_cols(self.shape(), "rowwise_dot")?;
        let a = self.data_ref();
        let b = other.data_ref();
        let data: Vec<f64> = (0..r)
            .map(|i| {
                a[i * c..(i + 1) * c]
                    .iter()
                    .zip(&b[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            data,
            vec![r],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let a = ctx.parents[0].data_ref();
                let b = ctx.parents[1].data_ref();
                let mut da = vec![0.0; r * c];
                let mut db = vec![0.0; r * c];
                for i in 0..r {
                    let g = ctx.out_grad[i];
                    for j in 0..c {
                        da[i * c + j] = g * b[i * c + j];
                        db[i * c + j] = g * a[i * c + j];
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data_ref().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let da = ctx
                    .out_grad
                    .iter()
                    .zip(ctx.out_data)
                    .map(|(g, &y)| if y > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(da)]
            }),
        )
    }

    /// GELU with the tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor {
        let data: Vec<f64> = self
            .data_ref()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let x = ctx.parents[0].data_ref();
                let da = ctx
                    .out_grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &x)| {
                        let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![Some(da)]
            }),
        )
    }

    /// Numerically stable softmax over the last axis of a 1-D or 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = rows_cols(self.shape(), "softmax_rows")?;
        let src = self.data_ref();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &x) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - max).exp();
                denom += *o;
            }
            for o in &mut data[i * c..(i + 1) * c] {
                *o /= denom;
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let s = &ctx.out_data[i * c..(i + 1) * c];
                    let g = &ctx.out_grad[i * c..(i + 1) * c];
                    let dot: f64 = s.iter().zip(g).map(|(s, g)| s * g).sum();
                    for j in 0..c {
                        da[i * c + j] = s[j] * (g[j] - dot);
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Per-row `log(sum(exp(x)))` of a 1-D or 2-D tensor, max-shifted: `[r, c] -> [r]`.
    pub fn logsumexp_rows(&self) -> Result<Tensor> {
        let (r, c) = rows_cols(self.shape(), "logsumexp_rows")?;
        let src = self.data_ref();
        let data: Vec<f64> = (0..r)
            .map(|i| {
                let row = &src[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
            })
            .collect();
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![r],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let x = ctx.parents[0].data_ref();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let g = ctx.out_grad[i];
                    let lse = ctx.out_data[i];
                    for j in 0..c {
                        da[i * c + j] = g * (x[i * c + j] - lse).exp();
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Per-row layer normalization with learned scale and shift; variance is
    /// the biased (divide by width) estimate.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = rows_cols(self.shape(), "layer_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let src = self.data_ref();
        let ga = gamma.data_ref();
        let be = beta.data_ref();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let inv_s = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mu) * inv_s * ga[j] + be[j];
            }
        }
        drop(src);
        drop(ga);
        drop(be);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let x = ctx.parents[0].data_ref();
                let ga = ctx.parents[1].data_ref();
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let g = &ctx.out_grad[i * c..(i + 1) * c];
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
                    let inv_s = 1.0 / (var + eps).sqrt();
                    // xhat = (x - mu) * inv_s; gg = gamma .* g
                    let mut mean_gg = 0.0;
                    let mut mean_gg_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mu) * inv_s;
                        let gg = ga[j] * g[j];
                        mean_gg += gg;
                        mean_gg_xhat += gg * xhat;
                        dgamma[j] += g[j] * xhat;
                        dbeta[j] += g[j];
                    }
                    mean_gg /= c as f64;
                    mean_gg_xhat /= c as f64;
                    for j in 0..c {
                        let xhat = (row[j] - mu) * inv_s;
                        let gg = ga[j] * g[j];
                        dx[i * c + j] = (gg - mean_gg - xhat * mean_gg_xhat) * inv_s;
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Per-row scaling to unit Euclidean norm. Rows with norm below `eps`
    /// are divided by `eps` instead (locally linear there).
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (r, c) = rows_cols(self.shape(), "l2_normalize_rows")?;
        let src = self.data_ref();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt().max(eps);
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let x = ctx.parents[0].data_ref();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let g = &ctx.out_grad[i * c..(i + 1) * c];
                    let raw_norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
                    if raw_norm <= eps {
                        for j in 0..c {
                            da[i * c + j] = g[j] / eps;
                        }
                    } else {
                        let dot: f64 = row.iter().zip(g).map(|(x, g)| x * g).sum();
                        let n3 = raw_norm * raw_norm * raw_norm;
                        for j in 0..c {
                            da[i * c + j] = g[j] / raw_norm - row[j] * dot / n3;
                        }
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Broadcast-add a `[c]` bias to every row of a `[r, c]` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = two_d(self.shape(), "add_row")?;
        if bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let src = self.data_ref();
        let b = bias.data_ref();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = src[i * c + j] + b[j];
            }
        }
        drop(src);
        drop(b);
        Ok(Tensor::from_op(
            data,
            vec![r, c],
            vec![self.clone(), bias.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dbias[j] += ctx.out_grad[i * c + j];
                    }
                }
                vec![Some(ctx.out_grad.to_vec()), Some(dbias)]
            }),
        ))
    }

    /// Mean absolute difference, as a scalar. The subgradient at exact
    /// equality is zero.
    pub fn l1_loss(&self, target: &Tensor) -> Result<Tensor> {
        check_same_shape("l1_loss", self, target)?;
        let n = self.len();
        let total: f64 = self
            .data_ref()
            .iter()
            .zip(target.data_ref().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(Tensor::from_op(
            vec![total / n as f64],
            vec![],
            vec![self.clone(), target.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let a = ctx.parents[0].data_ref();
                let b = ctx.parents[1].data_ref();
                let g = ctx.out_grad[0] / n as f64;
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; n];
                for j in 0..n {
                    let d = a[j] - b[j];
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    da[j] = g * s;
                    db[j] = -g * s;
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// KL divergence from one-hot targets to row softmax distributions,
    /// averaged over rows. With one-hot targets this equals the negative
    /// log-likelihood `mean_r(logsumexp(x_r) - x_r[t_r])`, computed fused
    /// for stability.
    pub fn kl_div_onehot(&self, targets: &[usize]) -> Result<Tensor> {
        let (r, c) = rows_cols(self.shape(), "kl_div_onehot")?;
        if targets.len() != r {
            return Err(TensorError::InvalidShape {
                op: "kl_div_onehot",
                expected: "one target index per row",
                shape: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange { index: bad, size: c });
        }
        let src = self.data_ref();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        drop(src);
        let captured: Vec<usize> = targets.to_vec();
        Ok(Tensor::from_op(
            vec![total / r as f64],
            vec![],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let x = ctx.parents[0].data_ref();
                let g = ctx.out_grad[0] / r as f64;
                let mut da = vec![0.0; r * c];
                for (i, &t) in captured.iter().enumerate() {
                    let row = &x[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for (o, &xv) in da[i * c..(i + 1) * c].iter_mut().zip(row) {
                        *o = (xv - max).exp();
                        denom += *o;
                    }
                    for o in &mut da[i * c..(i + 1) * c] {
                        *o = g * *o / denom;
                    }
                    da[i * c + t] -= g;
                }
                vec![Some(da)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "got {g}, want {w} (tol {tol})");
        }
    }

    #[test]
    fn softmax_matches_frozen_values() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = x.softmax_rows().unwrap();
        assert_close(
            &s.to_vec(),
            &[0.090_030_573_170_380_46, 0.244_728_471_054_797_67, 0.665_240_955_774_821_9],
            1e-12,
        );
        let total: f64 = s.to_vec().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let b = Tensor::new(vec![1001.0, 1002.0, 1003.0], &[3]).unwrap();
        assert_close(
            &a.softmax_rows().unwrap().to_vec(),
            &b.softmax_rows().unwrap().to_vec(),
            1e-12,
        );
    }

    #[test]
    fn kl_onehot_uniform_logits_give_ln_bins() {
        let x = Tensor::new(vec![0.0; 4], &[4]).unwrap();
        let loss = x.kl_div_onehot(&[2]).unwrap();
        assert!((loss.value() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_onehot_matches_hand_computed_value() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let loss = x.kl_div_onehot(&[0]).unwrap();
        assert!((loss.value() - 2.407_605_964_444_380_3).abs() < 1e-12);
    }

    #[test]
    fn kl_onehot_gradient_is_softmax_minus_onehot() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let loss = x.kl_div_onehot(&[0]).unwrap();
        loss.backward().unwrap();
        let s = [0.090_030_573_170_380_46, 0.244_728_471_054_797_67, 0.665_240_955_774_821_9];
        let want = [s[0] - 1.0, s[1], s[2]];
        assert_close(&x.grad().unwrap(), &want, 1e-12);
    }

    #[test]
    fn logsumexp_agrees_with_direct_form() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let got = x.logsumexp_rows().unwrap().value();
        let want = (1.0_f64.exp() + 2.0_f64.exp() + 3.0_f64.exp()).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity_is_neutral() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(x.matmul(&eye).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let a = Tensor::new((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let b = Tensor::new((0..12).map(|i| f64::from(i) * 0.5).collect(), &[4, 3]).unwrap();
        let direct = a.matmul_t(&b).unwrap();
        let via_t = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(direct.to_vec(), via_t.to_vec());
        assert_eq!(direct.shape(), &[2, 4]);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let cat = Tensor::concat_rows(&[a, b]).unwrap();
        assert_eq!(cat.shape(), &[3, 2]);
        assert_eq!(cat.narrow_rows(1, 2).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn concat_cols_interleaves_rows() {
        let a = Tensor::new(vec![1.0, 2.0], &[2, 1]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let cat = Tensor::concat_cols(&[a, b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3]);
        assert_eq!(cat.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn narrow_cols_slices_and_scatters_back() {
        let m = Tensor::param((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let mid = m.narrow_cols(1, 2).unwrap();
        assert_eq!(mid.shape(), &[2, 2]);
        assert_eq!(mid.to_vec(), vec![1.0, 2.0, 4.0, 5.0]);
        mid.sum().backward().unwrap();
        assert_eq!(m.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        assert!(m.narrow_cols(2, 2).is_err());
    }

    #[test]
    fn gather_rows_selects_and_scatters() {
        let table = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let picked = table.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(picked.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        picked.sum().backward().unwrap();
        // row 2 picked twice, row 1 never
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let gamma = Tensor::new(vec![1.0; 3], &[3]).unwrap();
        let beta = Tensor::new(vec![0.0; 3], &[3]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 0.0).unwrap();
        let s = 1.5_f64.sqrt();
        assert_close(&y.to_vec(), &[-s, 0.0, s], 1e-12);
    }

    #[test]
    fn l2_normalize_gives_unit_rows() {
        let x = Tensor::new(vec![3.0, 4.0, 0.0, 5.0], &[2, 2]).unwrap();
        let y = x.l2_normalize_rows(1e-12).unwrap();
        assert_close(&y.to_vec(), &[0.6, 0.8, 0.0, 1.0], 1e-12);
    }

    #[test]
    fn l1_loss_and_sign_gradient() {
        let a = Tensor::param(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let b = Tensor::new(vec![0.0, 0.0, 0.5], &[3]).unwrap();
        let loss = a.l1_loss(&b).unwrap();
        assert!((loss.value() - 1.0).abs() < 1e-12);
        loss.backward().unwrap();
        assert_close(&a.grad().unwrap(), &[1.0 / 3.0, -1.0 / 3.0, 0.0], 1e-15);
    }

    #[test]
    fn gelu_numbers_behave() {
        let x = Tensor::new(vec![0.0, 100.0, -100.0], &[3]).unwrap();
        let y = x.gelu().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 100.0).abs() < 1e-9);
        assert!(y[2].abs() < 1e-9);
    }

    #[test]
    fn mean_rows_pools_columns() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 5.0], &[2, 2]).unwrap();
        let m = x.mean_rows().unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_close(&m.to_vec(), &[2.0, 3.5], 1e-15);
    }

    #[test]
    fn rowwise_dot_pairs_rows() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let d = a.rowwise_dot(&b).unwrap();
        assert_eq!(d.to_vec(), vec![17.0, 53.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert!(a.add(&b).is_err());
        let m = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert!(m.matmul(&m).is_err());
        assert!(m.narrow_rows(1, 2).is_err());
        assert!(m.kl_div_onehot(&[0]).is_err());
    }
}
