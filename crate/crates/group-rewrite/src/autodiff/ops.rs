//! Primitive tape operations: forward value plus recorded backward closure.
//!
//! Broadcasting is trailing-only: the right operand's shape must equal a
//! suffix of the left operand's shape. That covers bias adds (`[L,d]+[d]`)
//! and row-wise gains without a general broadcast engine.

use std::rc::Rc;

use rand::Rng;

use super::tensor::{broadcast_ok, strides};
use super::{Scalar, Tape, Tensor, TensorError, Var};

impl<F: Scalar> Tape<F> {
    fn check_broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Vec<usize>, Vec<usize>), TensorError> {
        let (sa, sb) = self.with_values(a, b, |x, y| (x.shape().to_vec(), y.shape().to_vec()));
        if !broadcast_ok(&sa, &sb) {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok((sa, sb))
    }

    /// Element-wise sum; `b` may trailing-broadcast onto `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (_, sb) = self.check_broadcast("add", a, b)?;
        let out = self.with_values(a, b, |x, y| {
            let bn = y.numel().max(1);
            let mut data = x.data().to_vec();
            for (i, v) in data.iter_mut().enumerate() {
                *v = *v + y.data()[i % bn];
            }
            Tensor::from_vec(x.shape(), data).unwrap()
        });
        Ok(self.push_op(out, &[a, b], move |ctx| {
            vec![(a.0, ctx.grad.clone()), (b.0, ctx.grad.reduce_to(&sb))]
        }))
    }

    /// Element-wise product; `b` may trailing-broadcast onto `a`.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (_, sb) = self.check_broadcast("mul", a, b)?;
        let out = self.with_values(a, b, |x, y| {
            let bn = y.numel().max(1);
            let mut data = x.data().to_vec();
            for (i, v) in data.iter_mut().enumerate() {
                *v = *v * y.data()[i % bn];
            }
            Tensor::from_vec(x.shape(), data).unwrap()
        });
        Ok(self.push_op(out, &[a, b], move |ctx| {
            let xa = ctx.value(a.0);
            let xb = ctx.value(b.0);
            let bn = xb.numel().max(1);
            let mut da = ctx.grad.clone();
            for (i, v) in da.data_mut().iter_mut().enumerate() {
                *v = *v * xb.data()[i % bn];
            }
            let mut gb_full = ctx.grad.clone();
            for (i, v) in gb_full.data_mut().iter_mut().enumerate() {
                *v = *v * xa.data()[i];
            }
            vec![(a.0, da), (b.0, gb_full.reduce_to(&sb))]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let nb = self.scale(b, F::from_f64(-1.0));
        self.add(a, nb)
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let out = self.with_value(a, |x| x.map(|v| v * c));
        self.push_op(out, &[a], move |ctx| {
            vec![(a.0, ctx.grad.map(|g| g * c))]
        })
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let out = self.with_value(a, |x| x.map(|v| v + c));
        self.push_op(out, &[a], move |ctx| vec![(a.0, ctx.grad.clone())])
    }

    /// Matrix product. Supported forms:
    /// - `[.., k] x [k, n]`: the left operand is flattened to rows;
    /// - `[B.., m, k] x [B.., k, n]`: batched over identical leading dims.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = self.with_values(a, b, |x, y| (x.shape().to_vec(), y.shape().to_vec()));
        if sb.len() == 2 {
            if sa.is_empty() || sa[sa.len() - 1] != sb[0] {
                return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
            }
            let k = sb[0];
            let n = sb[1];
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let out = self.with_values(a, b, |x, y| {
                let flat = x.reshaped(&[rows, k]).unwrap();
                Tensor::matmul2d(&flat, y)
            });
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            let out = out.reshaped(&out_shape)?;
            let sa2 = sa.clone();
            Ok(self.push_op(out, &[a, b], move |ctx| {
                let g = ctx.grad.reshaped(&[rows, n]).unwrap();
                let xa = ctx.value(a.0).reshaped(&[rows, k]).unwrap();
                let xb = ctx.value(b.0);
                let da = Tensor::matmul2d_nt(&g, xb).reshaped(&sa2).unwrap();
                let db = Tensor::matmul2d_tn(&xa, &g);
                vec![(a.0, da), (b.0, db)]
            }))
        } else if sa.len() == sb.len() && sa.len() >= 3 && sa[..sa.len() - 2] == sb[..sb.len() - 2]
        {
            let nd = sa.len();
            let (m, k) = (sa[nd - 2], sa[nd - 1]);
            let (kb, n) = (sb[nd - 2], sb[nd - 1]);
            if k != kb {
                return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
            }
            let batch: usize = sa[..nd - 2].iter().product();
            let mut out_shape = sa[..nd - 2].to_vec();
            out_shape.extend([m, n]);
            let out = self.with_values(a, b, |x, y| {
                let mut data = Vec::with_capacity(batch * m * n);
                for bi in 0..batch {
                    let ab = Tensor::from_vec(
                        &[m, k],
                        x.data()[bi * m * k..(bi + 1) * m * k].to_vec(),
                    )
                    .unwrap();
                    let bb = Tensor::from_vec(
                        &[k, n],
                        y.data()[bi * k * n..(bi + 1) * k * n].to_vec(),
                    )
                    .unwrap();
                    data.extend_from_slice(Tensor::matmul2d(&ab, &bb).data());
                }
                Tensor::from_vec(&out_shape, data).unwrap()
            });
            let (sa2, sb2) = (sa.clone(), sb.clone());
            Ok(self.push_op(out, &[a, b], move |ctx| {
                let xa = ctx.value(a.0);
                let xb = ctx.value(b.0);
                let mut da = Vec::with_capacity(xa.numel());
                let mut db = Vec::with_capacity(xb.numel());
                for bi in 0..batch {
                    let gb = Tensor::from_vec(
                        &[m, n],
                        ctx.grad.data()[bi * m * n..(bi + 1) * m * n].to_vec(),
                    )
                    .unwrap();
                    let ab = Tensor::from_vec(
                        &[m, k],
                        xa.data()[bi * m * k..(bi + 1) * m * k].to_vec(),
                    )
                    .unwrap();
                    let bb = Tensor::from_vec(
                        &[k, n],
                        xb.data()[bi * k * n..(bi + 1) * k * n].to_vec(),
                    )
                    .unwrap();
                    da.extend_from_slice(Tensor::matmul2d_nt(&gb, &bb).data());
                    db.extend_from_slice(Tensor::matmul2d_tn(&ab, &gb).data());
                }
                vec![
                    (a.0, Tensor::from_vec(&sa2, da).unwrap()),
                    (b.0, Tensor::from_vec(&sb2, db).unwrap()),
                ]
            }))
        } else {
            Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb })
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let out = self.with_value(a, |x| softmax_rows(x));
        self.push_op(out, &[a], move |ctx| {
            let y = ctx.out();
            let d = y.last_dim();
            let mut dx = ctx.grad.clone();
            for (dx_row, y_row) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let mut dot = F::zero();
                for (g, &yv) in dx_row.iter().zip(y_row) {
                    dot = dot + *g * yv;
                }
                for (g, &yv) in dx_row.iter_mut().zip(y_row) {
                    *g = yv * (*g - dot);
                }
            }
            vec![(a.0, dx)]
        })
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        let out = self.with_value(a, |x| {
            let d = x.last_dim();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for v in row.iter() {
                    sum = sum + (*v - max).exp();
                }
                let lse = max + sum.ln();
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
            Tensor::from_vec(x.shape(), data).unwrap()
        });
        self.push_op(out, &[a], move |ctx| {
            let ls = ctx.out();
            let d = ls.last_dim();
            let mut dx = ctx.grad.clone();
            for (dx_row, ls_row) in dx.data_mut().chunks_mut(d).zip(ls.data().chunks(d)) {
                let gsum = dx_row.iter().fold(F::zero(), |acc, &g| acc + g);
                for (g, &lv) in dx_row.iter_mut().zip(ls_row) {
                    *g = *g - lv.exp() * gsum;
                }
            }
            vec![(a.0, dx)]
        })
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let eps = F::from_f64(eps);
        let out = self.with_value(a, |x| {
            let d = x.last_dim();
            let inv_d = F::from_f64(1.0 / d as f64);
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                let mean = row.iter().fold(F::zero(), |acc, &v| acc + v) * inv_d;
                let var = row
                    .iter()
                    .fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                    * inv_d;
                let inv_std = F::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv_std;
                }
            }
            Tensor::from_vec(x.shape(), data).unwrap()
        });
        self.push_op(out, &[a], move |ctx| {
            let xhat = ctx.out();
            let x = ctx.value(a.0);
            let d = xhat.last_dim();
            let inv_d = F::from_f64(1.0 / d as f64);
            let mut dx = ctx.grad.clone();
            for ((dx_row, xh_row), x_row) in dx
                .data_mut()
                .chunks_mut(d)
                .zip(xhat.data().chunks(d))
                .zip(x.data().chunks(d))
            {
                let mean = x_row.iter().fold(F::zero(), |acc, &v| acc + v) * inv_d;
                let var = x_row
                    .iter()
                    .fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                    * inv_d;
                let inv_std = F::one() / (var + eps).sqrt();
                let g_mean = dx_row.iter().fold(F::zero(), |acc, &g| acc + g) * inv_d;
                let gx_mean = dx_row
                    .iter()
                    .zip(xh_row)
                    .fold(F::zero(), |acc, (&g, &xh)| acc + g * xh)
                    * inv_d;
                for (g, &xh) in dx_row.iter_mut().zip(xh_row) {
                    *g = inv_std * (*g - g_mean - xh * gx_mean);
                }
            }
            vec![(a.0, dx)]
        })
    }

    /// GELU with the tanh approximation (smooth, so finite differences agree).
    pub fn gelu(&self, a: Var) -> Var {
        let c1 = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c2 = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let out = self.with_value(a, |x| {
            x.map(|v| {
                let u = c1 * (v + c2 * v * v * v);
                half * v * (F::one() + u.tanh())
            })
        });
        self.push_op(out, &[a], move |ctx| {
            let x = ctx.value(a.0);
            let three = F::from_f64(3.0);
            let mut dx = ctx.grad.clone();
            for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                let u = c1 * (v + c2 * v * v * v);
                let t = u.tanh();
                let sech2 = F::one() - t * t;
                let du = c1 * (F::one() + three * c2 * v * v);
                let dy = half * (F::one() + t) + half * v * sech2 * du;
                *g = *g * dy;
            }
            vec![(a.0, dx)]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.with_value(a, |x| {
            x.map(|v| F::one() / (F::one() + (-v).exp()))
        });
        self.push_op(out, &[a], move |ctx| {
            let y = ctx.out();
            let mut dx = ctx.grad.clone();
            for (g, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                *g = *g * yv * (F::one() - yv);
            }
            vec![(a.0, dx)]
        })
    }

    /// Natural log, element-wise. Inputs must be positive.
    pub fn log(&self, a: Var) -> Var {
        let out = self.with_value(a, |x| x.map(|v| v.ln()));
        self.push_op(out, &[a], move |ctx| {
            let x = ctx.value(a.0);
            let mut dx = ctx.grad.clone();
            for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                *g = *g / v;
            }
            vec![(a.0, dx)]
        })
    }

    /// Clamp to `[lo, hi]`; gradient passes only through unclamped elements.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let out = self.with_value(a, |x| x.map(|v| v.max(lo).min(hi)));
        self.push_op(out, &[a], move |ctx| {
            let x = ctx.value(a.0);
            let mut dx = ctx.grad.clone();
            for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                if v < lo || v > hi {
                    *g = F::zero();
                }
            }
            vec![(a.0, dx)]
        })
    }

    /// Gathers rows along axis 0 (embedding lookup and CLS gathering).
    /// Repeated indices are allowed; their gradients accumulate.
    pub fn index_select0(&self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a);
        if shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "index_select0",
                shape,
                msg: "needs at least one axis".into(),
            });
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { op: "index_select0", index: bad, len: rows });
        }
        let row_len: usize = shape[1..].iter().product();
        let idx: Rc<[usize]> = indices.into();
        let out = self.with_value(a, |x| {
            let mut data = Vec::with_capacity(idx.len() * row_len);
            for &i in idx.iter() {
                data.extend_from_slice(&x.data()[i * row_len..(i + 1) * row_len]);
            }
            let mut out_shape = vec![idx.len()];
            out_shape.extend_from_slice(&shape[1..]);
            Tensor::from_vec(&out_shape, data).unwrap()
        });
        let src_shape = shape.clone();
        Ok(self.push_op(out, &[a], move |ctx| {
            let mut da = Tensor::zeros(&src_shape);
            for (r, &i) in idx.iter().enumerate() {
                let dst = &mut da.data_mut()[i * row_len..(i + 1) * row_len];
                let src = &ctx.grad.data()[r * row_len..(r + 1) * row_len];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            vec![(a.0, da)]
        }))
    }

    /// Group-tag lookup: tag 0 maps to a constant zero vector, tag `k >= 1`
    /// maps to row `k - 1` of the table. The zero row is therefore frozen by
    /// construction.
    pub fn tag_lookup(&self, table: Var, tags: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "tag_lookup",
                shape,
                msg: "table must be 2-D".into(),
            });
        }
        let (k_rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = tags.iter().find(|&&t| t > k_rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "tag_lookup",
                index: bad,
                len: k_rows + 1,
            });
        }
        let tags: Rc<[usize]> = tags.into();
        let out = self.with_value(table, |x| {
            let mut data = Vec::with_capacity(tags.len() * d);
            for &t in tags.iter() {
                if t == 0 {
                    data.extend(std::iter::repeat(F::zero()).take(d));
                } else {
                    data.extend_from_slice(&x.data()[(t - 1) * d..t * d]);
                }
            }
            Tensor::from_vec(&[tags.len(), d], data).unwrap()
        });
        let table_shape = shape.clone();
        Ok(self.push_op(out, &[table], move |ctx| {
            let mut dt = Tensor::zeros(&table_shape);
            for (r, &t) in tags.iter().enumerate() {
                if t == 0 {
                    continue;
                }
                let dst = &mut dt.data_mut()[(t - 1) * d..t * d];
                let src = &ctx.grad.data()[r * d..(r + 1) * d];
                for (x, &s) in dst.iter_mut().zip(src) {
                    *x = *x + s;
                }
            }
            vec![(table.0, dt)]
        }))
    }

    /// Picks one element per row of the last axis: `out[r] = a[r, idx[r]]`.
    pub fn gather_last(&self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a);
        let d = shape.last().copied().unwrap_or(1);
        let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
        if idx.len() != rows {
            return Err(TensorError::InvalidShape {
                op: "gather_last",
                shape,
                msg: format!("expected {rows} indices, got {}", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(TensorError::IndexOutOfRange { op: "gather_last", index: bad, len: d });
        }
        let idx: Rc<[usize]> = idx.into();
        let out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let out = self.with_value(a, |x| {
            let data: Vec<F> = idx.iter().enumerate().map(|(r, &i)| x.data()[r * d + i]).collect();
            Tensor::from_vec(&out_shape, data).unwrap()
        });
        let src_shape = shape.clone();
        Ok(self.push_op(out, &[a], move |ctx| {
            let mut da = Tensor::zeros(&src_shape);
            for (r, &i) in idx.iter().enumerate() {
                da.data_mut()[r * d + i] = ctx.grad.data()[r];
            }
            vec![(a.0, da)]
        }))
    }

    /// Sum over the last axis.
    pub fn sum_last(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let d = shape.last().copied().unwrap_or(1);
        let out_shape: Vec<usize> = shape[..shape.len().saturating_sub(1)].to_vec();
        let out = self.with_value(a, |x| {
            let data: Vec<F> = x
                .data()
                .chunks(d)
                .map(|row| row.iter().fold(F::zero(), |acc, &v| acc + v))
                .collect();
            Tensor::from_vec(&out_shape, data).unwrap()
        });
        let src_shape = shape;
        self.push_op(out, &[a], move |ctx| {
            let mut da = Tensor::zeros(&src_shape);
            for (row, &g) in da.data_mut().chunks_mut(d).zip(ctx.grad.data()) {
                for v in row {
                    *v = g;
                }
            }
            vec![(a.0, da)]
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let out = self.with_value(a, |x| {
            Tensor::scalar(x.data().iter().fold(F::zero(), |acc, &v| acc + v))
        });
        self.push_op(out, &[a], move |ctx| {
            vec![(a.0, Tensor::full(&shape, ctx.grad.item()))]
        })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.with_value(a, Tensor::numel).max(1);
        let s = self.sum_all(a);
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.with_value(a, |x| x.reshaped(shape))?;
        let src_shape = self.shape(a);
        Ok(self.push_op(out, &[a], move |ctx| {
            vec![(a.0, ctx.grad.reshaped(&src_shape).unwrap())]
        }))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let out = self.with_value(a, |x| x.permuted(axes))?;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.push_op(out, &[a], move |ctx| {
            vec![(a.0, ctx.grad.permuted(&inverse).unwrap())]
        }))
    }

    /// Contiguous row range along axis 0.
    pub fn slice0(&self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a);
        let rows = shape.first().copied().unwrap_or(0);
        if start > end || end > rows {
            return Err(TensorError::IndexOutOfRange { op: "slice0", index: end, len: rows });
        }
        let row_len: usize = shape[1..].iter().product();
        let out = self.with_value(a, |x| {
            let mut out_shape = shape.clone();
            out_shape[0] = end - start;
            Tensor::from_vec(&out_shape, x.data()[start * row_len..end * row_len].to_vec())
                .unwrap()
        });
        let src_shape = shape;
        Ok(self.push_op(out, &[a], move |ctx| {
            let mut da = Tensor::zeros(&src_shape);
            da.data_mut()[start * row_len..end * row_len].copy_from_slice(ctx.grad.data());
            vec![(a.0, da)]
        }))
    }

    /// Concatenation of two tensors along `axis`; other dims must match.
    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        let (sa, sb) = self.with_values(a, b, |x, y| (x.shape().to_vec(), y.shape().to_vec()));
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: sa, rhs: sb });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (la, lb) = (sa[axis], sb[axis]);
        let mut out_shape = sa.clone();
        out_shape[axis] = la + lb;
        let out = self.with_values(a, b, |x, y| {
            let mut data = Vec::with_capacity(x.numel() + y.numel());
            for o in 0..outer {
                data.extend_from_slice(&x.data()[o * la * inner..(o + 1) * la * inner]);
                data.extend_from_slice(&y.data()[o * lb * inner..(o + 1) * lb * inner]);
            }
            Tensor::from_vec(&out_shape, data).unwrap()
        });
        let (sa2, sb2) = (sa, sb);
        Ok(self.push_op(out, &[a, b], move |ctx| {
            let mut da = Tensor::zeros(&sa2);
            let mut db = Tensor::zeros(&sb2);
            let stride = (la + lb) * inner;
            for o in 0..outer {
                let g = &ctx.grad.data()[o * stride..(o + 1) * stride];
                da.data_mut()[o * la * inner..(o + 1) * la * inner]
                    .copy_from_slice(&g[..la * inner]);
                db.data_mut()[o * lb * inner..(o + 1) * lb * inner]
                    .copy_from_slice(&g[la * inner..]);
            }
            vec![(a.0, da), (b.0, db)]
        }))
    }

    /// Replaces masked elements with `fill`; masked positions pass no
    /// gradient. The mask must have one flag per element.
    pub fn masked_fill(&self, a: Var, mask: &[bool], fill: F) -> Result<Var, TensorError> {
        let shape = self.shape(a);
        let n: usize = shape.iter().product();
        if mask.len() != n {
            return Err(TensorError::InvalidShape {
                op: "masked_fill",
                shape,
                msg: format!("mask has {} flags for {n} elements", mask.len()),
            });
        }
        let mask: Rc<[bool]> = mask.into();
        let m2 = Rc::clone(&mask);
        let out = self.with_value(a, |x| {
            let data = x
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&v, &m)| if m { fill } else { v })
                .collect();
            Tensor::from_vec(x.shape(), data).unwrap()
        });
        Ok(self.push_op(out, &[a], move |ctx| {
            let mut da = ctx.grad.clone();
            for (g, &m) in da.data_mut().iter_mut().zip(m2.iter()) {
                if m {
                    *g = F::zero();
                }
            }
            vec![(a.0, da)]
        }))
    }

    /// Inverted dropout: kept elements are scaled by `1/(1-p)` so inference
    /// needs no rescaling. `p = 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let n = self.with_value(a, Tensor::numel);
        if p >= 1.0 {
            let shape = self.shape(a);
            let out = Tensor::zeros(&shape);
            return self.push_op(out, &[a], move |ctx| {
                vec![(a.0, Tensor::zeros(ctx.grad.shape()))]
            });
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Rc<[bool]> = (0..n).map(|_| rng.gen::<f64>() >= p).collect();
        let m2 = Rc::clone(&mask);
        let out = self.with_value(a, |x| {
            let data = x
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&v, &m)| if m { v * keep } else { F::zero() })
                .collect();
            Tensor::from_vec(x.shape(), data).unwrap()
        });
        self.push_op(out, &[a], move |ctx| {
            let mut da = ctx.grad.clone();
            for (g, &m) in da.data_mut().iter_mut().zip(m2.iter()) {
                *g = if m { *g * keep } else { F::zero() };
            }
            vec![(a.0, da)]
        })
    }

    /// Per-row negative log-likelihood: `out[r] = -a[r, targets[r]]`, for
    /// `a` holding log-probabilities.
    pub fn cross_entropy(&self, log_probs: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let picked = self.gather_last(log_probs, targets)?;
        Ok(self.scale(picked, F::from_f64(-1.0)))
    }
}

fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let d = x.last_dim();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(d) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::from_vec(x.shape(), data).unwrap()
}

#[allow(dead_code)]
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    strides(shape)
}
