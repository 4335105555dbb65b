//! Reverse-mode gradients over a fixed set of tensor primitives.
//!
//! A [`GradTape`] records every primitive evaluated in the forward pass
//! together with whatever context its adjoint needs. [`GradTape::backward`]
//! walks the record in exact reverse order, propagating adjoints only into
//! nodes that (transitively) depend on a leaf marked `requires_grad`.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{axpy, dot, Tensor};
use crate::error::{ensure, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sum(usize),
    Relu(usize),
    Elu {
        x: usize,
        alpha: f32,
    },
    AvgPool {
        x: usize,
        k: usize,
    },
    Mask {
        x: usize,
        mask: Vec<f32>,
    },
    ConvTemporal {
        x: usize,
        w: usize,
        pad: usize,
    },
    ConvDepthwise {
        x: usize,
        w: usize,
        pad: usize,
    },
    ChannelMix {
        x: usize,
        w: usize,
        groups: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    ChannelAffine {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    SoftmaxCe {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanSoftmaxNll {
        members: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<Vec<f64>>,
        mix_at_target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<f32>,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
    order: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`.
    pub fn get(&self, v: Var) -> Result<&Tensor> {
        ensure!(
            v.tape == self.tape && v.idx < self.grads.len(),
            Usage,
            "variable does not belong to this tape"
        );
        ensure!(
            self.requires[v.idx],
            Usage,
            "variable was not recorded with requires_grad"
        );
        self.grads[v.idx]
            .as_ref()
            .ok_or_else(|| Error::Usage("variable does not influence the loss".into()))
    }

    /// Node indices in the order their adjoints were propagated.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    ensure!(
        shape.len() >= 2,
        Dimension,
        "batch norm needs at least (batch, channels), got {shape:?}"
    );
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn conv_range(t: usize, shift: isize) -> (usize, usize) {
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 {
        t.saturating_sub(shift as usize)
    } else {
        t
    };
    (lo, hi.max(lo))
}

/// `out[τ] += Σ_k w[k] · inp[τ + k - pad]` with zero padding.
fn conv_same(out: &mut [f32], inp: &[f32], w: &[f32], pad: usize) {
    let t = out.len();
    for (k, &wk) in w.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let shift = k as isize - pad as isize;
        let (lo, hi) = conv_range(t, shift);
        let s = (lo as isize + shift) as usize;
        axpy(&mut out[lo..hi], wk, &inp[s..s + (hi - lo)]);
    }
}

fn conv_same_grad_input(gin: &mut [f32], gout: &[f32], w: &[f32], pad: usize) {
    let t = gout.len();
    for (k, &wk) in w.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let shift = k as isize - pad as isize;
        let (lo, hi) = conv_range(t, shift);
        let s = (lo as isize + shift) as usize;
        axpy(&mut gin[s..s + (hi - lo)], wk, &gout[lo..hi]);
    }
}

fn conv_same_grad_weight(gw: &mut [f32], gout: &[f32], inp: &[f32], pad: usize) {
    let t = gout.len();
    for (k, g) in gw.iter_mut().enumerate() {
        let shift = k as isize - pad as isize;
        let (lo, hi) = conv_range(t, shift);
        let s = (lo as isize + shift) as usize;
        *g += dot(&gout[lo..hi], &inp[s..s + (hi - lo)]);
    }
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl GradTape {
    pub fn new() -> Self {
        GradTape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        ensure!(
            v.tape == self.id && v.idx < self.nodes.len(),
            Usage,
            "variable does not belong to this tape"
        );
        Ok(v.idx)
    }

    fn req(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = super::tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.req(ia) || self.req(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.transpose()?;
        let rg = self.req(ia);
        Ok(self.push(out, Op::Transpose(ia), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        let rg = self.req(ia);
        Ok(self.push(out, Op::Reshape(ia), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let rg = self.req(ia) || self.req(ib);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.sum() as f32;
        let rg = self.req(ia);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v.max(0.0));
        let rg = self.req(ia);
        Ok(self.push(out, Op::Relu(ia), rg))
    }

    pub fn elu(&mut self, a: Var, alpha: f32) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia]
            .value
            .map(|v| if v > 0.0 { v } else { alpha * v.exp_m1() });
        let rg = self.req(ia);
        Ok(self.push(out, Op::Elu { x: ia, alpha }, rg))
    }

    /// Non-overlapping average pooling of width `k` along the last axis.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let shape = x.shape();
        ensure!(!shape.is_empty() && k >= 1, Dimension, "avg_pool on scalar");
        let t = shape[shape.len() - 1];
        ensure!(t % k == 0, Dimension, "pool width {k} does not divide {t}");
        let to = t / k;
        let inv = 1.0 / k as f32;
        let rows = x.len() / t;
        let mut out = vec![0.0f32; rows * to];
        for r in 0..rows {
            let src = &x.data()[r * t..(r + 1) * t];
            for (j, o) in out[r * to..(r + 1) * to].iter_mut().enumerate() {
                *o = src[j * k..(j + 1) * k].iter().sum::<f32>() * inv;
            }
        }
        let mut oshape = shape.to_vec();
        *oshape.last_mut().unwrap() = to;
        let rg = self.req(ia);
        Ok(self.push(Tensor::from_parts(oshape, out)?, Op::AvgPool { x: ia, k }, rg))
    }

    /// Elementwise multiplication by a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f32>) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        ensure!(mask.len() == x.len(), Dimension, "mask length mismatch");
        let data: Vec<f32> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data)?;
        let rg = self.req(ia);
        Ok(self.push(out, Op::Mask { x: ia, mask }, rg))
    }

    /// Every kernel applied to every row: `(b, r, t) ⊛ (f, l) → (b, f, r, t)`,
    /// "same" padding with `pad` leading zeros.
    pub fn conv_temporal(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let xv = &self.nodes[ix].value;
        let wv = &self.nodes[iw].value;
        let (b, r, t) = match xv.shape()[..] {
            [b, r, t] => (b, r, t),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv_temporal input must be (b, r, t), got {:?}",
                    xv.shape()
                )))
            }
        };
        let (f, l) = wv.dims2()?;
        ensure!(pad < l, Dimension, "padding {pad} exceeds kernel length {l}");
        let mut out = vec![0.0f32; b * f * r * t];
        for bi in 0..b {
            for fi in 0..f {
                let wk = &wv.data()[fi * l..(fi + 1) * l];
                for ri in 0..r {
                    let o = ((bi * f + fi) * r + ri) * t;
                    let s = (bi * r + ri) * t;
                    conv_same(&mut out[o..o + t], &xv.data()[s..s + t], wk, pad);
                }
            }
        }
        let out = Tensor::from_parts(vec![b, f, r, t], out)?;
        let rg = self.req(ix) || self.req(iw);
        Ok(self.push(out, Op::ConvTemporal { x: ix, w: iw, pad }, rg))
    }

    /// One kernel per row: `(b, m, t) ⊛ (m, l) → (b, m, t)`.
    pub fn conv_depthwise(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let xv = &self.nodes[ix].value;
        let wv = &self.nodes[iw].value;
        let (b, m, t) = match xv.shape()[..] {
            [b, m, t] => (b, m, t),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv_depthwise input must be (b, m, t), got {:?}",
                    xv.shape()
                )))
            }
        };
        let (m2, l) = wv.dims2()?;
        ensure!(m == m2, Dimension, "depthwise kernels {m2} for {m} maps");
        ensure!(pad < l, Dimension, "padding {pad} exceeds kernel length {l}");
        let mut out = vec![0.0f32; b * m * t];
        for bi in 0..b {
            for mi in 0..m {
                let o = (bi * m + mi) * t;
                conv_same(
                    &mut out[o..o + t],
                    &xv.data()[o..o + t],
                    &wv.data()[mi * l..(mi + 1) * l],
                    pad,
                );
            }
        }
        let out = Tensor::from_parts(vec![b, m, t], out)?;
        let rg = self.req(ix) || self.req(iw);
        Ok(self.push(out, Op::ConvDepthwise { x: ix, w: iw, pad }, rg))
    }

    /// Grouped linear mixing across the channel axis.
    ///
    /// `x` holds `b · groups · cin · t` values laid out as `(b, groups, cin, t)`;
    /// `w` is `(groups · d, cin)` and output row `g·d + j` mixes the `cin` rows of
    /// group `g`. Output shape `(b, groups · d, t)`.
    pub fn channel_mix(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let xv = &self.nodes[ix].value;
        let wv = &self.nodes[iw].value;
        let (rows_out, cin) = wv.dims2()?;
        ensure!(
            groups >= 1 && rows_out % groups == 0,
            Dimension,
            "{rows_out} mixing rows not divisible into {groups} groups"
        );
        let d = rows_out / groups;
        let b = xv.shape()[0];
        let t = *xv.shape().last().unwrap();
        ensure!(
            xv.len() == b * groups * cin * t,
            Dimension,
            "channel_mix input {:?} incompatible with {groups} groups of {cin}",
            xv.shape()
        );
        let mut out = vec![0.0f32; b * rows_out * t];
        for bi in 0..b {
            for g in 0..groups {
                for j in 0..d {
                    let orow = g * d + j;
                    let o = (bi * rows_out + orow) * t;
                    for ci in 0..cin {
                        let wv_ = wv.data()[orow * cin + ci];
                        let s = ((bi * groups + g) * cin + ci) * t;
                        axpy(&mut out[o..o + t], wv_, &xv.data()[s..s + t]);
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![b, rows_out, t], out)?;
        let rg = self.req(ix) || self.req(iw);
        Ok(self.push(out, Op::ChannelMix { x: ix, w: iw, groups }, rg))
    }

    /// Batch normalization over axis 1 using the statistics of this batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = &self.nodes[ix].value;
        let (b, c, inner) = bn_layout(xv.shape())?;
        let gv = self.nodes[ig].value.data();
        let bv = self.nodes[ib].value.data();
        ensure!(
            gv.len() == c && bv.len() == c,
            Dimension,
            "batch norm affine params must have {c} entries"
        );
        let n = (b * inner) as f64;
        let mut mean = vec![0.0f32; c];
        let mut var_unbiased = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for ch in 0..c {
            let mut s = 0.0f64;
            for bi in 0..b {
                let o = (bi * c + ch) * inner;
                s += xv.data()[o..o + inner].iter().map(|&v| f64::from(v)).sum::<f64>();
            }
            let mu = s / n;
            let mut ss = 0.0f64;
            for bi in 0..b {
                let o = (bi * c + ch) * inner;
                ss += xv.data()[o..o + inner]
                    .iter()
                    .map(|&v| (f64::from(v) - mu).powi(2))
                    .sum::<f64>();
            }
            let var = ss / n;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            mean[ch] = mu as f32;
            var_unbiased[ch] = if n > 1.0 { (ss / (n - 1.0)) as f32 } else { var as f32 };
            inv_std[ch] = istd as f32;
            let (g, be) = (gv[ch], bv[ch]);
            for bi in 0..b {
                let o = (bi * c + ch) * inner;
                for k in o..o + inner {
                    let h = ((f64::from(xv.data()[k]) - mu) * istd) as f32;
                    xhat[k] = h;
                    out[k] = g * h + be;
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out)?;
        let rg = self.req(ix) || self.req(ig) || self.req(ib);
        let v = self.push(
            out,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((
            v,
            BatchStats {
                mean,
                var: var_unbiased,
            },
        ))
    }

    /// Batch normalization with frozen statistics (running mean / variance).
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
    ) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = &self.nodes[ix].value;
        let (b, c, inner) = bn_layout(xv.shape())?;
        let gv = self.nodes[ig].value.data();
        let bv = self.nodes[ib].value.data();
        ensure!(
            gv.len() == c && bv.len() == c && mean.len() == c && var.len() == c,
            Dimension,
            "frozen batch norm parameters must have {c} entries"
        );
        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / (f64::from(v) + BN_EPS).sqrt()) as f32)
            .collect();
        let mut out = vec![0.0f32; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * inner;
                let scale = gv[ch] * inv_std[ch];
                let (mu, be) = (mean[ch], bv[ch]);
                for k in o..o + inner {
                    out[k] = (xv.data()[k] - mu) * scale + be;
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out)?;
        let rg = self.req(ix) || self.req(ig) || self.req(ib);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x: ix,
                gamma: ig,
                beta: ib,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    /// Fully connected layer: `(b, n) · (k, n)ᵀ + bias(k) → (b, k)`.
    pub fn dense(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (ix, iw, ibias) = (self.idx(x)?, self.idx(w)?, self.idx(bias)?);
        let xv = &self.nodes[ix].value;
        let wv = &self.nodes[iw].value;
        let bv = &self.nodes[ibias].value;
        let (b, n) = xv.dims2()?;
        let (k, n2) = wv.dims2()?;
        ensure!(n == n2, Dimension, "dense: input width {n} vs weight width {n2}");
        ensure!(bv.len() == k, Dimension, "dense: bias length {} vs {k}", bv.len());
        let mut out = vec![0.0f32; b * k];
        for bi in 0..b {
            let xr = &xv.data()[bi * n..(bi + 1) * n];
            for ki in 0..k {
                out[bi * k + ki] = dot(xr, &wv.data()[ki * n..(ki + 1) * n]) + bv.data()[ki];
            }
        }
        let out = Tensor::from_parts(vec![b, k], out)?;
        let rg = self.req(ix) || self.req(iw) || self.req(ibias);
        Ok(self.push(
            out,
            Op::Dense {
                x: ix,
                w: iw,
                b: ibias,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy; `targets` are zero-based class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        let (b, k) = lv.dims2()?;
        ensure!(targets.len() == b, Dimension, "{} targets for batch {b}", targets.len());
        ensure!(
            targets.iter().all(|&y| y < k),
            Validation,
            "target index out of range for {k} classes"
        );
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0f64;
        for (bi, &y) in targets.iter().enumerate() {
            let p = softmax_row(lv.row(bi));
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            probs.extend(p);
        }
        let loss = (loss / b as f64) as f32;
        let rg = self.req(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log of the member-averaged softmax probability of the target.
    pub fn mean_softmax_nll(&mut self, members: &[Var], targets: &[usize]) -> Result<Var> {
        ensure!(!members.is_empty(), Validation, "ensemble loss needs members");
        let idx: Vec<usize> = members
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<_>>()?;
        let (b, k) = self.nodes[idx[0]].value.dims2()?;
        ensure!(targets.len() == b, Dimension, "{} targets for batch {b}", targets.len());
        ensure!(
            targets.iter().all(|&y| y < k),
            Validation,
            "target index out of range for {k} classes"
        );
        let m = idx.len() as f64;
        let mut probs = Vec::with_capacity(idx.len());
        for &i in &idx {
            let lv = &self.nodes[i].value;
            ensure!(
                lv.shape() == [b, k],
                Dimension,
                "ensemble member logits {:?} vs {:?}",
                lv.shape(),
                [b, k]
            );
            let mut p = Vec::with_capacity(b * k);
            for bi in 0..b {
                p.extend(softmax_row(lv.row(bi)));
            }
            probs.push(p);
        }
        let mut mix_at_target = vec![0.0f64; b];
        let mut loss = 0.0f64;
        for (bi, &y) in targets.iter().enumerate() {
            let q = probs.iter().map(|p| p[bi * k + y]).sum::<f64>() / m;
            mix_at_target[bi] = q.max(f64::MIN_POSITIVE);
            loss -= mix_at_target[bi].ln();
        }
        let loss = (loss / b as f64) as f32;
        let rg = idx.iter().any(|&i| self.req(i));
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MeanSoftmaxNll {
                members: idx,
                targets: targets.to_vec(),
                probs,
                mix_at_target,
            },
            rg,
        ))
    }

    /// Propagates adjoints from the scalar `loss` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        ensure!(
            self.nodes[il].value.len() == 1,
            Usage,
            "loss must be a scalar, got shape {:?}",
            self.nodes[il].value.shape()
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut order = Vec::new();
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            order.push(i);
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|d| Tensor::from_parts(node.value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            order,
        })
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let (m, k) = av.dims2().unwrap();
                let nn = bv.shape()[1];
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0f64;
                            for c in 0..nn {
                                s += f64::from(g[r * nn + c]) * f64::from(bv.data()[p * nn + c]);
                            }
                            ga[r * k + p] += s as f32;
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for p in 0..k {
                        for c in 0..nn {
                            let mut s = 0.0f64;
                            for r in 0..m {
                                s += f64::from(av.data()[r * k + p]) * f64::from(g[r * nn + c]);
                            }
                            gb[p * nn + c] += s as f32;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = nodes[*a].value.dims2().unwrap();
                    let ga = slot(grads, nodes, *a);
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if wants(j) {
                        slot(grads, nodes, j).iter_mut().zip(g).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let g0 = g[0];
                    slot(grads, nodes, *a).iter_mut().for_each(|s| *s += g0);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let xv = nodes[*a].value.data();
                    let ga = slot(grads, nodes, *a);
                    for ((s, &x), &gv) in ga.iter_mut().zip(xv).zip(g) {
                        if x > 0.0 {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Elu { x, alpha } => {
                if wants(*x) {
                    let xv = nodes[*x].value.data();
                    let yv = node.value.data();
                    let gx = slot(grads, nodes, *x);
                    for k in 0..gx.len() {
                        let d = if xv[k] > 0.0 { 1.0 } else { yv[k] + alpha };
                        gx[k] += g[k] * d;
                    }
                }
            }
            Op::AvgPool { x, k } => {
                if wants(*x) {
                    let inv = 1.0 / *k as f32;
                    let gx = slot(grads, nodes, *x);
                    for (j, &gv) in g.iter().enumerate() {
                        let v = gv * inv;
                        gx[j * k..(j + 1) * k].iter_mut().for_each(|s| *s += v);
                    }
                }
            }
            Op::Mask { x, mask } => {
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for ((s, &m), &gv) in gx.iter_mut().zip(mask).zip(g) {
                        *s += gv * m;
                    }
                }
            }
            Op::ConvTemporal { x, w, pad } => {
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                let (b, r, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (f, l) = wv.dims2().unwrap();
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for bi in 0..b {
                        for fi in 0..f {
                            let wk = &wv.data()[fi * l..(fi + 1) * l];
                            for ri in 0..r {
                                let o = ((bi * f + fi) * r + ri) * t;
                                let s = (bi * r + ri) * t;
                                conv_same_grad_input(&mut gx[s..s + t], &g[o..o + t], wk, *pad);
                            }
                        }
                    }
                }
                if wants(*w) {
                    let gw = slot(grads, nodes, *w);
                    for bi in 0..b {
                        for fi in 0..f {
                            for ri in 0..r {
                                let o = ((bi * f + fi) * r + ri) * t;
                                let s = (bi * r + ri) * t;
                                conv_same_grad_weight(
                                    &mut gw[fi * l..(fi + 1) * l],
                                    &g[o..o + t],
                                    &xv.data()[s..s + t],
                                    *pad,
                                );
                            }
                        }
                    }
                }
            }
            Op::ConvDepthwise { x, w, pad } => {
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                let (b, m, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let l = wv.shape()[1];
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for bi in 0..b {
                        for mi in 0..m {
                            let o = (bi * m + mi) * t;
                            conv_same_grad_input(
                                &mut gx[o..o + t],
                                &g[o..o + t],
                                &wv.data()[mi * l..(mi + 1) * l],
                                *pad,
                            );
                        }
                    }
                }
                if wants(*w) {
                    let gw = slot(grads, nodes, *w);
                    for bi in 0..b {
                        for mi in 0..m {
                            let o = (bi * m + mi) * t;
                            conv_same_grad_weight(
                                &mut gw[mi * l..(mi + 1) * l],
                                &g[o..o + t],
                                &xv.data()[o..o + t],
                                *pad,
                            );
                        }
                    }
                }
            }
            Op::ChannelMix { x, w, groups } => {
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                let (rows_out, cin) = wv.dims2().unwrap();
                let d = rows_out / groups;
                let b = xv.shape()[0];
                let t = *xv.shape().last().unwrap();
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for bi in 0..b {
                        for gi in 0..*groups {
                            for j in 0..d {
                                let orow = gi * d + j;
                                let o = (bi * rows_out + orow) * t;
                                for ci in 0..cin {
                                    let s = ((bi * groups + gi) * cin + ci) * t;
                                    axpy(&mut gx[s..s + t], wv.data()[orow * cin + ci], &g[o..o + t]);
                                }
                            }
                        }
                    }
                }
                if wants(*w) {
                    let gw = slot(grads, nodes, *w);
                    for bi in 0..b {
                        for gi in 0..*groups {
                            for j in 0..d {
                                let orow = gi * d + j;
                                let o = (bi * rows_out + orow) * t;
                                for ci in 0..cin {
                                    let s = ((bi * groups + gi) * cin + ci) * t;
                                    gw[orow * cin + ci] += dot(&g[o..o + t], &xv.data()[s..s + t]);
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, inner) = bn_layout(nodes[*x].value.shape()).unwrap();
                let gv = nodes[*gamma].value.data();
                let n = (b * inner) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let o = (bi * c + ch) * inner;
                        for k in o..o + inner {
                            sum_g[ch] += f64::from(g[k]);
                            sum_gx[ch] += f64::from(g[k]) * f64::from(xhat[k]);
                        }
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for bi in 0..b {
                        for ch in 0..c {
                            let o = (bi * c + ch) * inner;
                            let scale = f64::from(gv[ch]) * f64::from(inv_std[ch]) / n;
                            let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                            for k in o..o + inner {
                                let v = n * f64::from(g[k]) - sg - f64::from(xhat[k]) * sgx;
                                gx[k] += (scale * v) as f32;
                            }
                        }
                    }
                }
                if wants(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch] as f32;
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for ch in 0..c {
                        gb[ch] += sum_g[ch] as f32;
                    }
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = &nodes[*x].value;
                let (b, c, inner) = bn_layout(xv.shape()).unwrap();
                let gv = nodes[*gamma].value.data();
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for bi in 0..b {
                        for ch in 0..c {
                            let o = (bi * c + ch) * inner;
                            let scale = gv[ch] * inv_std[ch];
                            for k in o..o + inner {
                                gx[k] += g[k] * scale;
                            }
                        }
                    }
                }
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let o = (bi * c + ch) * inner;
                        for k in o..o + inner {
                            sum_g[ch] += f64::from(g[k]);
                            sum_gx[ch] += f64::from(g[k])
                                * (f64::from(xv.data()[k]) - f64::from(mean[ch]))
                                * f64::from(inv_std[ch]);
                        }
                    }
                }
                if wants(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch] as f32;
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for ch in 0..c {
                        gb[ch] += sum_g[ch] as f32;
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                let (bsz, n) = xv.dims2().unwrap();
                let k = wv.shape()[0];
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for bi in 0..bsz {
                        for ki in 0..k {
                            axpy(
                                &mut gx[bi * n..(bi + 1) * n],
                                g[bi * k + ki],
                                &wv.data()[ki * n..(ki + 1) * n],
                            );
                        }
                    }
                }
                if wants(*w) {
                    let gw = slot(grads, nodes, *w);
                    for bi in 0..bsz {
                        for ki in 0..k {
                            axpy(
                                &mut gw[ki * n..(ki + 1) * n],
                                g[bi * k + ki],
                                &xv.data()[bi * n..(bi + 1) * n],
                            );
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for bi in 0..bsz {
                        for ki in 0..k {
                            gb[ki] += g[bi * k + ki];
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let b = targets.len();
                    let k = probs.len() / b;
                    let scale = f64::from(g[0]) / b as f64;
                    let gl = slot(grads, nodes, *logits);
                    for (bi, &y) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[bi * k + j] += (scale * (probs[bi * k + j] - onehot)) as f32;
                        }
                    }
                }
            }
            Op::MeanSoftmaxNll {
                members,
                targets,
                probs,
                mix_at_target,
            } => {
                let b = targets.len();
                let m = members.len() as f64;
                for (mi, &node_idx) in members.iter().enumerate() {
                    if !wants(node_idx) {
                        continue;
                    }
                    let p = &probs[mi];
                    let k = p.len() / b;
                    let gl = slot(grads, nodes, node_idx);
                    for (bi, &y) in targets.iter().enumerate() {
                        let py = p[bi * k + y];
                        let coef = -f64::from(g[0]) / (b as f64 * m * mix_at_target[bi]) * py;
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[bi * k + j] += (coef * (onehot - p[bi * k + j])) as f32;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the scalar `loss` with respect to each of `wrt`.
pub fn grad(tape: &GradTape, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
    let g = tape.backward(loss)?;
    wrt.iter()
        .map(|&v| match g.get(v) {
            Ok(t) => Ok(t.clone()),
            Err(Error::Usage(msg)) if msg.contains("does not influence") => {
                Ok(Tensor::zeros(tape.value(v).shape()))
            }
            Err(e) => Err(e),
        })
        .collect()
}


fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], j: usize) -> &'a mut Vec<f32> {
    let len = nodes[j].value.len();
    grads[j].get_or_insert_with(|| vec![0.0; len])
}
