//! Tape operations: forward builders and their backward rules.

use super::kernels::{self, ConvGeom};
use super::{check_finite, Scalar, Tape, TensorId};
use crate::{Error, Result};

/// Recorded operation. Saved context is the minimum the backward rule needs;
/// large intermediates (im2col buffers) are recomputed instead of stored.
#[derive(Debug, Clone)]
pub enum Op<S: Scalar> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    /// a\[m,k\] @ b\[n,k\]^T
    MatmulNT {
        a: TensorId,
        b: TensorId,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: TensorId,
        argmax: Vec<u32>,
    },
    AvgPool2 {
        x: TensorId,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    /// Train-mode batch norm; mean/invstd are the saved batch statistics.
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<S>,
        invstd: Vec<S>,
    },
    /// Inference-mode batch norm against constant (running) statistics.
    BatchNormInference {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<S>,
        invstd: Vec<S>,
    },
    GroupNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        mean: Vec<S>,
        invstd: Vec<S>,
    },
    Reshape {
        x: TensorId,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: S,
    },
    AddRowBias {
        x: TensorId,
        b: TensorId,
    },
    Softmax {
        x: TensorId,
    },
    Log {
        x: TensorId,
    },
    Exp {
        x: TensorId,
    },
    L2NormRows {
        x: TensorId,
        norms: Vec<S>,
    },
    /// Per-row log-sum-exp over the columns where mask is true.
    MaskedLseRows {
        x: TensorId,
        mask: Vec<bool>,
    },
    /// y\[i\] = x\[i, idx\[i\]\]
    TakePerRow {
        x: TensorId,
        idx: Vec<u32>,
    },
    Mean {
        x: TensorId,
    },
    Sum {
        x: TensorId,
    },
}

fn rows2d<S: Scalar>(tape: &Tape<S>, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.shape(id);
    if s.len() == 2 {
        Ok((s[0], s[1]))
    } else {
        Err(Error::BadShape {
            op,
            shape: s.to_vec(),
            msg: "expected a 2-D tensor".into(),
        })
    }
}

fn nchw<S: Scalar>(tape: &Tape<S>, id: TensorId, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.shape(id);
    if s.len() == 4 {
        Ok([s[0], s[1], s[2], s[3]])
    } else {
        Err(Error::BadShape {
            op,
            shape: s.to_vec(),
            msg: "expected an NCHW tensor".into(),
        })
    }
}

impl<S: Scalar> Tape<S> {
    fn rg2(&self, a: TensorId, b: TensorId) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    /// a\[m,k\] @ b\[k,n\]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = rows2d(self, a, "matmul")?;
        let (k2, n) = rows2d(self, b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        check_finite("matmul", &data)?;
        let rg = self.rg2(a, b);
        Ok(self.push(data, vec![m, n], rg, Op::Matmul { a, b }))
    }

    /// a\[m,k\] @ b\[n,k\]^T — rows of `b` are compared against rows of `a`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = rows2d(self, a, "matmul_nt")?;
        let (n, k2) = rows2d(self, b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = kernels::matmul_nt(self.data(a), self.data(b), m, k, n);
        check_finite("matmul_nt", &data)?;
        let rg = self.rg2(a, b);
        Ok(self.push(data, vec![m, n], rg, Op::MatmulNT { a, b }))
    }

    /// 2-D convolution, square kernel, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad).ok_or_else(|| {
            Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            }
        })?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![geom.c_out],
                });
            }
        }
        let data = kernels::conv2d_forward(
            self.data(x),
            self.data(w),
            bias.map(|b| self.data(b)),
            &geom,
        );
        check_finite("conv2d", &data)?;
        let mut rg = self.rg2(x, w);
        if let Some(b) = bias {
            rg = rg || self.requires_grad(b);
        }
        let shape = vec![geom.n, geom.c_out, geom.h_out, geom.w_out];
        Ok(self.push(data, shape, rg, Op::Conv2d { x, w, bias, geom }))
    }

    /// 2x2 max pooling with stride 2 (odd trailing row/column dropped).
    pub fn max_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = nchw(self, x, "max_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::BadShape {
                op: "max_pool2",
                shape: self.shape(x).to_vec(),
                msg: "spatial extent below pooling window".into(),
            });
        }
        let xd = self.data(x);
        let mut out = vec![S::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for img in 0..n * c {
            let plane = &xd[img * h * w..(img + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (oy * 2 + dy) * w + ox * 2 + dx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = img * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = (img * h * w + best_idx) as u32;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, vec![n, c, ho, wo], rg, Op::MaxPool2 { x, argmax }))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = nchw(self, x, "avg_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::BadShape {
                op: "avg_pool2",
                shape: self.shape(x).to_vec(),
                msg: "spatial extent below pooling window".into(),
            });
        }
        let xd = self.data(x);
        let quarter = S::from_f64(0.25);
        let mut out = vec![S::zero(); n * c * ho * wo];
        for img in 0..n * c {
            let plane = &xd[img * h * w..(img + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc = acc + plane[(oy * 2 + dy) * w + ox * 2 + dx];
                        }
                    }
                    out[img * ho * wo + oy * wo + ox] = acc * quarter;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, vec![n, c, ho, wo], rg, Op::AvgPool2 { x }))
    }

    /// Mean over the spatial extent: \[N,C,H,W\] -> \[N,C\].
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = nchw(self, x, "global_avg_pool")?;
        let xd = self.data(x);
        let inv = S::from_f64(1.0 / (h * w) as f64);
        let mut out = vec![S::zero(); n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let plane = &xd[i * h * w..(i + 1) * h * w];
            let mut acc = S::zero();
            for v in plane {
                acc = acc + *v;
            }
            *o = acc * inv;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, vec![n, c], rg, Op::GlobalAvgPool { x }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<S> = self.data(x).iter().map(|&v| v.max(S::zero())).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(data, shape, rg, Op::Relu { x }))
    }

    /// Train-mode batch normalization over all axes but the channel axis.
    /// Returns the output plus the per-channel batch mean and (biased)
    /// variance so the caller can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<S>, Vec<S>)> {
        let (c, layout) = norm_layout(self, x, "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (n, sp) = (layout.0, layout.1);
        let m = n * sp;
        if m < 2 {
            return Err(Error::BadShape {
                op: "batch_norm",
                shape: self.shape(x).to_vec(),
                msg: "needs at least 2 elements per channel".into(),
            });
        }
        let xd = self.data(x);
        let inv_m = S::from_f64(1.0 / m as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut acc = S::zero();
            for_channel(xd, n, c, sp, ch, |v| acc = acc + v);
            let mu = acc * inv_m;
            let mut vacc = S::zero();
            for_channel(xd, n, c, sp, ch, |v| {
                let d = v - mu;
                vacc = vacc + d * d;
            });
            mean[ch] = mu;
            var[ch] = vacc * inv_m;
        }
        let invstd: Vec<S> = var
            .iter()
            .map(|&v| S::one() / (v + S::from_f64(eps)).sqrt())
            .collect();
        let out = bn_apply(xd, self.data(gamma), self.data(beta), &mean, &invstd, n, c, sp);
        check_finite("batch_norm", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg2(x, gamma) || self.requires_grad(beta);
        let id = self.push(
            out,
            shape,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
            },
        );
        Ok((id, mean, var))
    }

    /// Inference-mode batch normalization against frozen running statistics.
    pub fn batch_norm_inference(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<TensorId> {
        let (c, layout) = norm_layout(self, x, "batch_norm_inference")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_inference",
                lhs: self.shape(x).to_vec(),
                rhs: vec![running_mean.len()],
            });
        }
        let (n, sp) = (layout.0, layout.1);
        let invstd: Vec<S> = running_var
            .iter()
            .map(|&v| S::one() / (v + S::from_f64(eps)).sqrt())
            .collect();
        let out = bn_apply(
            self.data(x),
            self.data(gamma),
            self.data(beta),
            running_mean,
            &invstd,
            n,
            c,
            sp,
        );
        check_finite("batch_norm_inference", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg2(x, gamma) || self.requires_grad(beta);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::BatchNormInference {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
            },
        ))
    }

    /// Group normalization: statistics per (sample, channel group).
    pub fn group_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        eps: f64,
    ) -> Result<TensorId> {
        let (c, layout) = norm_layout(self, x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::BadShape {
                op: "group_norm",
                shape: self.shape(x).to_vec(),
                msg: format!("{groups} groups do not divide {c} channels"),
            });
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (n, sp) = (layout.0, layout.1);
        let cg = c / groups;
        let m = cg * sp;
        let xd = self.data(x);
        let inv_m = S::from_f64(1.0 / m as f64);
        let eps_s = S::from_f64(eps);
        let mut mean = vec![S::zero(); n * groups];
        let mut invstd = vec![S::zero(); n * groups];
        for s in 0..n {
            for g in 0..groups {
                let mut acc = S::zero();
                for ch in g * cg..(g + 1) * cg {
                    let base = s * c * sp + ch * sp;
                    for v in &xd[base..base + sp] {
                        acc = acc + *v;
                    }
                }
                let mu = acc * inv_m;
                let mut vacc = S::zero();
                for ch in g * cg..(g + 1) * cg {
                    let base = s * c * sp + ch * sp;
                    for v in &xd[base..base + sp] {
                        let d = *v - mu;
                        vacc = vacc + d * d;
                    }
                }
                mean[s * groups + g] = mu;
                invstd[s * groups + g] = S::one() / (vacc * inv_m + eps_s).sqrt();
            }
        }
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![S::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let g = ch / cg;
                let (mu, is) = (mean[s * groups + g], invstd[s * groups + g]);
                let base = s * c * sp + ch * sp;
                for i in 0..sp {
                    out[base + i] = gd[ch] * (xd[base + i] - mu) * is + bd[ch];
                }
            }
        }
        check_finite("group_norm", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg2(x, gamma) || self.requires_grad(beta);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                invstd,
            },
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("cannot view {} elements as {:?}", self.data(x).len(), shape),
            });
        }
        let data = self.data(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape { x }))
    }

    /// Stack 2-D tensors with identical column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of zero tensors".into()));
        }
        let (_, cols) = rows2d(self, parts[0], "concat_rows")?;
        let mut total_rows = 0usize;
        for &p in parts {
            let (r, c) = rows2d(self, p, "concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            data,
            vec![total_rows, cols],
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(name, &data)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg2(a, b);
        Ok(self.push(data, shape, rg, op))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let c = S::from_f64(c);
        let data: Vec<S> = self.data(x).iter().map(|&v| v * c).collect();
        check_finite("scale", &data)?;
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(data, shape, rg, Op::Scale { x, c }))
    }

    /// x\[m,n\] + b\[n\] broadcast over rows.
    pub fn add_row_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = rows2d(self, x, "add_row_bias")?;
        if self.shape(b) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bd = self.data(b);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(bd) {
                *v = *v + *bv;
            }
        }
        check_finite("add_row_bias", &data)?;
        let rg = self.rg2(x, b);
        Ok(self.push(data, vec![m, n], rg, Op::AddRowBias { x, b }))
    }

    /// Linear layer: x\[m,in\] @ w\[out,in\]^T + b\[out\].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// Numerically stable softmax along the last axis of a 2-D tensor.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = rows2d(self, x, "softmax")?;
        let xd = self.data(x);
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(row.iter()) {
                let e = (v - mx).exp();
                *o = e;
                denom = denom + e;
            }
            for o in &mut data[i * n..(i + 1) * n] {
                *o = *o / denom;
            }
        }
        check_finite("softmax", &data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![m, n], rg, Op::Softmax { x }))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<S> = self.data(x).iter().map(|&v| v.ln()).collect();
        check_finite("log", &data)?;
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(data, shape, rg, Op::Log { x }))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<S> = self.data(x).iter().map(|&v| v.exp()).collect();
        check_finite("exp", &data)?;
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(data, shape, rg, Op::Exp { x }))
    }

    /// L2-normalize each row of a 2-D tensor.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = rows2d(self, x, "l2_normalize_rows")?;
        let xd = self.data(x);
        let mut norms = vec![S::zero(); m];
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mut acc = S::zero();
            for v in row {
                acc = acc + *v * *v;
            }
            let nrm = acc.sqrt().max(S::from_f64(1e-12));
            norms[i] = nrm;
            for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / nrm;
            }
        }
        check_finite("l2_normalize_rows", &data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![m, n], rg, Op::L2NormRows { x, norms }))
    }

    /// Per-row log-sum-exp restricted to columns where `mask` is true.
    pub fn masked_lse_rows(&mut self, x: TensorId, mask: Vec<bool>) -> Result<TensorId> {
        let (m, n) = rows2d(self, x, "masked_lse_rows")?;
        if mask.len() != m * n {
            return Err(Error::ShapeMismatch {
                op: "masked_lse_rows",
                lhs: vec![m, n],
                rhs: vec![mask.len()],
            });
        }
        let xd = self.data(x);
        let mut data = vec![S::zero(); m];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mrow = &mask[i * n..(i + 1) * n];
            let mut mx = S::neg_infinity();
            for (v, &keep) in row.iter().zip(mrow) {
                if keep && *v > mx {
                    mx = *v;
                }
            }
            if mx == S::neg_infinity() {
                return Err(Error::InvalidArgument(format!(
                    "masked_lse_rows: row {i} has an empty mask"
                )));
            }
            let mut acc = S::zero();
            for (v, &keep) in row.iter().zip(mrow) {
                if keep {
                    acc = acc + (*v - mx).exp();
                }
            }
            data[i] = acc.ln() + mx;
        }
        check_finite("masked_lse_rows", &data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![m], rg, Op::MaskedLseRows { x, mask }))
    }

    /// y\[i\] = x\[i, idx\[i\]\]
    pub fn take_per_row(&mut self, x: TensorId, idx: Vec<u32>) -> Result<TensorId> {
        let (m, n) = rows2d(self, x, "take_per_row")?;
        if idx.len() != m {
            return Err(Error::ShapeMismatch {
                op: "take_per_row",
                lhs: vec![m],
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j as usize >= n) {
            return Err(Error::InvalidArgument(format!(
                "take_per_row: column {bad} out of range {n}"
            )));
        }
        let xd = self.data(x);
        let data: Vec<S> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| xd[i * n + j as usize])
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(data, vec![m], rg, Op::TakePerRow { x, idx }))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let xd = self.data(x);
        let inv = S::from_f64(1.0 / xd.len() as f64);
        let mut acc = S::zero();
        for v in xd {
            acc = acc + *v;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![acc * inv], vec![1], rg, Op::Mean { x }))
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let xd = self.data(x);
        let mut acc = S::zero();
        for v in xd {
            acc = acc + *v;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![acc], vec![1], rg, Op::Sum { x }))
    }

    fn acc_grad(&mut self, id: TensorId, contrib: &[S]) {
        if !self.requires_grad(id) {
            return;
        }
        let buf = self.grad_buf(id);
        debug_assert_eq!(buf.len(), contrib.len());
        for (g, c) in buf.iter_mut().zip(contrib) {
            *g = *g + *c;
        }
    }
}

fn for_channel<S: Scalar>(
    xd: &[S],
    n: usize,
    c: usize,
    sp: usize,
    ch: usize,
    mut f: impl FnMut(S),
) {
    for s in 0..n {
        let base = s * c * sp + ch * sp;
        for v in &xd[base..base + sp] {
            f(*v);
        }
    }
}

/// (channels, (batch, spatial)) for \[N,C\] or \[N,C,H,W\] inputs.
fn norm_layout<S: Scalar>(
    tape: &Tape<S>,
    x: TensorId,
    op: &'static str,
) -> Result<(usize, (usize, usize))> {
    let s = tape.shape(x);
    match s.len() {
        2 => Ok((s[1], (s[0], 1))),
        4 => Ok((s[1], (s[0], s[2] * s[3]))),
        _ => Err(Error::BadShape {
            op,
            shape: s.to_vec(),
            msg: "expected [N,C] or [N,C,H,W]".into(),
        }),
    }
}

fn bn_apply<S: Scalar>(
    xd: &[S],
    gamma: &[S],
    beta: &[S],
    mean: &[S],
    invstd: &[S],
    n: usize,
    c: usize,
    sp: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); xd.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = s * c * sp + ch * sp;
            let (g, b, mu, is) = (gamma[ch], beta[ch], mean[ch], invstd[ch]);
            for i in 0..sp {
                out[base + i] = g * (xd[base + i] - mu) * is + b;
            }
        }
    }
    out
}

/// Propagate the gradient of node `i` to its parents.
pub(crate) fn backward_step<S: Scalar>(tape: &mut Tape<S>, i: usize) -> Result<()> {
    let op = tape.nodes[i].op.clone();
    let gy = tape.nodes[i].grad.take().expect("grad present");
    match &op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (tape.shape(*a)[0], tape.shape(*a)[1]);
            let n = tape.shape(*b)[1];
            if tape.requires_grad(*a) {
                // da = gy [m,n] @ b[k,n]^T
                let da = kernels::matmul_nt(&gy, tape.data(*b), m, n, k);
                tape.acc_grad(*a, &da);
            }
            if tape.requires_grad(*b) {
                // db = a[m,k]^T @ gy [m,n]
                let mut db = vec![S::zero(); k * n];
                kernels::matmul_tn_acc(tape.data(*a), &gy, &mut db, k, m, n);
                tape.acc_grad(*b, &db);
            }
        }
        Op::MatmulNT { a, b } => {
            let (m, k) = (tape.shape(*a)[0], tape.shape(*a)[1]);
            let n = tape.shape(*b)[0];
            if tape.requires_grad(*a) {
                // da = gy [m,n] @ b [n,k]
                let da = kernels::matmul(&gy, tape.data(*b), m, n, k);
                tape.acc_grad(*a, &da);
            }
            if tape.requires_grad(*b) {
                // db = gy[m,n]^T @ a[m,k]
                let mut db = vec![S::zero(); n * k];
                kernels::matmul_tn_acc(&gy, tape.data(*a), &mut db, n, m, k);
                tape.acc_grad(*b, &db);
            }
        }
        Op::Conv2d { x, w, bias, geom } => {
            let need_dx = tape.requires_grad(*x);
            let need_dw = tape.requires_grad(*w);
            let need_db = bias.map(|b| tape.requires_grad(b)).unwrap_or(false);
            let mut dx = need_dx.then(|| vec![S::zero(); tape.data(*x).len()]);
            let mut dw = need_dw.then(|| vec![S::zero(); tape.data(*w).len()]);
            let mut db = need_db.then(|| vec![S::zero(); geom.c_out]);
            kernels::conv2d_backward(
                tape.data(*x),
                tape.data(*w),
                &gy,
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dx) = dx {
                tape.acc_grad(*x, &dx);
            }
            if let Some(dw) = dw {
                tape.acc_grad(*w, &dw);
            }
            if let (Some(db), Some(b)) = (db, bias) {
                tape.acc_grad(*b, &db);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let mut dx = vec![S::zero(); tape.data(*x).len()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src as usize] = dx[src as usize] + gy[o];
            }
            tape.acc_grad(*x, &dx);
        }
        Op::AvgPool2 { x } => {
            let [n, c, h, w] = [
                tape.shape(*x)[0],
                tape.shape(*x)[1],
                tape.shape(*x)[2],
                tape.shape(*x)[3],
            ];
            let (ho, wo) = (h / 2, w / 2);
            let quarter = S::from_f64(0.25);
            let mut dx = vec![S::zero(); tape.data(*x).len()];
            for img in 0..n * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gy[img * ho * wo + oy * wo + ox] * quarter;
                        for dy in 0..2 {
                            for dxx in 0..2 {
                                let idx = img * h * w + (oy * 2 + dy) * w + ox * 2 + dxx;
                                dx[idx] = dx[idx] + g;
                            }
                        }
                    }
                }
            }
            tape.acc_grad(*x, &dx);
        }
        Op::GlobalAvgPool { x } => {
            let [_, _, h, w] = [
                tape.shape(*x)[0],
                tape.shape(*x)[1],
                tape.shape(*x)[2],
                tape.shape(*x)[3],
            ];
            let inv = S::from_f64(1.0 / (h * w) as f64);
            let mut dx = vec![S::zero(); tape.data(*x).len()];
            for (i, chunk) in dx.chunks_mut(h * w).enumerate() {
                let g = gy[i] * inv;
                for v in chunk {
                    *v = g;
                }
            }
            tape.acc_grad(*x, &dx);
        }
        Op::Relu { x } => {
            let dx: Vec<S> = tape
                .data(*x)
                .iter()
                .zip(&gy)
                .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                .collect();
            tape.acc_grad(*x, &dx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            invstd,
        } => {
            let (c, (n, sp)) = norm_layout(tape, *x, "batch_norm")?;
            let m = S::from_f64((n * sp) as f64);
            let xd = tape.data(*x);
            let gd = tape.data(*gamma);
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for ch in 0..c {
                let (mu, is) = (mean[ch], invstd[ch]);
                let mut dg = S::zero();
                let mut db = S::zero();
                for s in 0..n {
                    let base = s * c * sp + ch * sp;
                    for i in 0..sp {
                        let xhat = (xd[base + i] - mu) * is;
                        dg = dg + gy[base + i] * xhat;
                        db = db + gy[base + i];
                    }
                }
                dgamma[ch] = dg;
                dbeta[ch] = db;
            }
            if tape.requires_grad(*x) {
                let mut dx = vec![S::zero(); xd.len()];
                for ch in 0..c {
                    let (mu, is) = (mean[ch], invstd[ch]);
                    let coef = gd[ch] * is / m;
                    for s in 0..n {
                        let base = s * c * sp + ch * sp;
                        for i in 0..sp {
                            let xhat = (xd[base + i] - mu) * is;
                            dx[base + i] =
                                coef * (m * gy[base + i] - dbeta[ch] - xhat * dgamma[ch]);
                        }
                    }
                }
                tape.acc_grad(*x, &dx);
            }
            tape.acc_grad(*gamma, &dgamma);
            tape.acc_grad(*beta, &dbeta);
        }
        Op::BatchNormInference {
            x,
            gamma,
            beta,
            mean,
            invstd,
        } => {
            let (c, (n, sp)) = norm_layout(tape, *x, "batch_norm_inference")?;
            let xd = tape.data(*x);
            let gd = tape.data(*gamma);
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            let mut dx = vec![S::zero(); xd.len()];
            for ch in 0..c {
                let (mu, is) = (mean[ch], invstd[ch]);
                for s in 0..n {
                    let base = s * c * sp + ch * sp;
                    for i in 0..sp {
                        let g = gy[base + i];
                        dgamma[ch] = dgamma[ch] + g * (xd[base + i] - mu) * is;
                        dbeta[ch] = dbeta[ch] + g;
                        dx[base + i] = g * gd[ch] * is;
                    }
                }
            }
            tape.acc_grad(*x, &dx);
            tape.acc_grad(*gamma, &dgamma);
            tape.acc_grad(*beta, &dbeta);
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            invstd,
        } => {
            let (c, (n, sp)) = norm_layout(tape, *x, "group_norm")?;
            let cg = c / groups;
            let m = S::from_f64((cg * sp) as f64);
            let xd = tape.data(*x);
            let gd = tape.data(*gamma);
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            let mut dx = vec![S::zero(); xd.len()];
            for s in 0..n {
                for g in 0..*groups {
                    let (mu, is) = (mean[s * groups + g], invstd[s * groups + g]);
                    // dxhat = gy * gamma; accumulate group sums first.
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for ch in g * cg..(g + 1) * cg {
                        let base = s * c * sp + ch * sp;
                        for i in 0..sp {
                            let xhat = (xd[base + i] - mu) * is;
                            let dxhat = gy[base + i] * gd[ch];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            dgamma[ch] = dgamma[ch] + gy[base + i] * xhat;
                            dbeta[ch] = dbeta[ch] + gy[base + i];
                        }
                    }
                    if tape.requires_grad(*x) {
                        for ch in g * cg..(g + 1) * cg {
                            let base = s * c * sp + ch * sp;
                            for i in 0..sp {
                                let xhat = (xd[base + i] - mu) * is;
                                let dxhat = gy[base + i] * gd[ch];
                                dx[base + i] =
                                    is / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                }
            }
            tape.acc_grad(*x, &dx);
            tape.acc_grad(*gamma, &dgamma);
            tape.acc_grad(*beta, &dbeta);
        }
        Op::Reshape { x } => {
            tape.acc_grad(*x, &gy);
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0usize;
            for &p in parts {
                let len = tape.data(p).len();
                if tape.requires_grad(p) {
                    let slice = gy[offset..offset + len].to_vec();
                    tape.acc_grad(p, &slice);
                }
                offset += len;
            }
        }
        Op::Add { a, b } => {
            tape.acc_grad(*a, &gy);
            tape.acc_grad(*b, &gy);
        }
        Op::Sub { a, b } => {
            tape.acc_grad(*a, &gy);
            if tape.requires_grad(*b) {
                let neg: Vec<S> = gy.iter().map(|&g| -g).collect();
                tape.acc_grad(*b, &neg);
            }
        }
        Op::Mul { a, b } => {
            if tape.requires_grad(*a) {
                let da: Vec<S> = gy.iter().zip(tape.data(*b)).map(|(&g, &v)| g * v).collect();
                tape.acc_grad(*a, &da);
            }
            if tape.requires_grad(*b) {
                let db: Vec<S> = gy.iter().zip(tape.data(*a)).map(|(&g, &v)| g * v).collect();
                tape.acc_grad(*b, &db);
            }
        }
        Op::Scale { x, c } => {
            let dx: Vec<S> = gy.iter().map(|&g| g * *c).collect();
            tape.acc_grad(*x, &dx);
        }
        Op::AddRowBias { x, b } => {
            tape.acc_grad(*x, &gy);
            if tape.requires_grad(*b) {
                let n = tape.shape(*b)[0];
                let mut db = vec![S::zero(); n];
                for row in gy.chunks(n) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d = *d + *g;
                    }
                }
                tape.acc_grad(*b, &db);
            }
        }
        Op::Softmax { x } => {
            let (m, n) = (tape.shape(i_id(i))[0], tape.shape(i_id(i))[1]);
            let y = tape.data(i_id(i));
            let mut dx = vec![S::zero(); m * n];
            for r in 0..m {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &gy[r * n..(r + 1) * n];
                let mut dot = S::zero();
                for (yv, gv) in yr.iter().zip(gr) {
                    dot = dot + *yv * *gv;
                }
                for j in 0..n {
                    dx[r * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            tape.acc_grad(*x, &dx);
        }
        Op::Log { x } => {
            let dx: Vec<S> = gy.iter().zip(tape.data(*x)).map(|(&g, &v)| g / v).collect();
            tape.acc_grad(*x, &dx);
        }
        Op::Exp { x } => {
            let dx: Vec<S> = gy.iter().zip(tape.data(i_id(i))).map(|(&g, &y)| g * y).collect();
            tape.acc_grad(*x, &dx);
        }
        Op::L2NormRows { x, norms } => {
            let (m, n) = (tape.shape(i_id(i))[0], tape.shape(i_id(i))[1]);
            let y = tape.data(i_id(i));
            let mut dx = vec![S::zero(); m * n];
            for r in 0..m {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &gy[r * n..(r + 1) * n];
                let mut dot = S::zero();
                for (yv, gv) in yr.iter().zip(gr) {
                    dot = dot + *yv * *gv;
                }
                let inv = S::one() / norms[r];
                for j in 0..n {
                    dx[r * n + j] = (gr[j] - yr[j] * dot) * inv;
                }
            }
            tape.acc_grad(*x, &dx);
        }
        Op::MaskedLseRows { x, mask } => {
            let (m, n) = (tape.shape(*x)[0], tape.shape(*x)[1]);
            let lse = tape.data(i_id(i));
            let xd = tape.data(*x);
            let mut dx = vec![S::zero(); m * n];
            for r in 0..m {
                let g = gy[r];
                for j in 0..n {
                    if mask[r * n + j] {
                        dx[r * n + j] = g * (xd[r * n + j] - lse[r]).exp();
                    }
                }
            }
            tape.acc_grad(*x, &dx);
        }
        Op::TakePerRow { x, idx } => {
            let n = tape.shape(*x)[1];
            let mut dx = vec![S::zero(); tape.data(*x).len()];
            for (r, &j) in idx.iter().enumerate() {
                dx[r * n + j as usize] = dx[r * n + j as usize] + gy[r];
            }
            tape.acc_grad(*x, &dx);
        }
        Op::Mean { x } => {
            let len = tape.data(*x).len();
            let g = gy[0] * S::from_f64(1.0 / len as f64);
            let dx = vec![g; len];
            tape.acc_grad(*x, &dx);
        }
        Op::Sum { x } => {
            let dx = vec![gy[0]; tape.data(*x).len()];
            tape.acc_grad(*x, &dx);
        }
    }
    tape.nodes[i].grad = Some(gy);
    Ok(())
}

fn i_id(i: usize) -> TensorId {
    TensorId(i)
}

#[cfg(test)]
mod tests {
    use super::super::Tape;

    #[test]
    fn relu_definition() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(vec![-1.0, 0.0, 2.0], &[3], false).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![3.0, 4.0], &[1, 2], false).unwrap();
        let y = tape.l2_normalize_rows(x).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 0.6).abs() < 1e-12);
        assert!((d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_operands() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = tape.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3], false)
            .unwrap();
        let y = tape.softmax(x).unwrap();
        for row in tape.data(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_lse_uniform_row_is_ln_count() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![0.5; 4], &[1, 4], false).unwrap();
        let mask = vec![true, true, true, false];
        let y = tape.masked_lse_rows(x, mask).unwrap();
        assert!((tape.item(y) - (0.5 + 3.0f64.ln())).abs() < 1e-12);
    }
}
