//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every op appends a node holding its output and whatever it needs for the
//! backward pass. [`Graph::backward`] walks the nodes in reverse and
//! accumulates gradients, so a value (or parameter) used several times
//! receives the sum of its contributions.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamSet, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and schedules running-stat updates.
    Train,
    /// Batch-norm uses the stored running statistics.
    Eval,
}

/// Parameter handles of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: ValueId,
    },
    MaxPool2 {
        x: ValueId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: ValueId,
    },
    Dense {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    L2Normalize {
        x: ValueId,
        norms: Vec<T>,
    },
    WeightedSum {
        x: ValueId,
        weights: Vec<T>,
    },
    HalfSumSquares {
        x: ValueId,
    },
    /// Loss computed outside the tape together with its input gradients.
    Fused {
        inputs: Vec<ValueId>,
        grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients of input values that were created with `requires_grad`.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    inputs: BTreeMap<ValueId, Tensor<T>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.inputs.get(&id)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
    track_kinks: bool,
    kink_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            buffer_updates: Vec::new(),
            track_kinks: false,
            kink_hash: FNV_OFFSET,
        }
    }

    /// Records a hash of every ReLU mask and max-pool selection, so callers
    /// can detect that a perturbation crossed a non-differentiable point.
    pub fn with_kink_tracking(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> ValueId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn mix_kink(&mut self, bits: impl Iterator<Item = u64>) {
        let mut h = self.kink_hash;
        for b in bits {
            h ^= b;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.kink_hash = h;
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> ValueId {
        self.push(Op::Input, value, requires_grad)
    }

    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> ValueId {
        let p = params.get(id);
        self.push(Op::Param(id), p.value.clone(), p.trainable)
    }

    /// 2-D convolution of an NHWC input with a `[k, k, cin, cout]` kernel.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] || stride == 0 {
            return Err(Error::Shape(format!("conv2d: input {xs:?}, kernel {ws:?}")));
        }
        if xs[1] + 2 * pad < ws[0] || xs[2] + 2 * pad < ws[0] {
            return Err(Error::Shape(format!("conv2d: kernel {ws:?} larger than input {xs:?}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[3]] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} for {} output channels",
                    self.value(b).shape(),
                    ws[3]
                )));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            in_channels: xs[3],
            out_channels: ws[3],
            kernel: ws[0],
            stride,
            pad,
        };
        let cols = kernels::im2col(&geom, self.value(x).data());
        let out = kernels::conv_forward(
            &geom,
            &cols,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(
            &[geom.batch, geom.out_height(), geom.out_width(), geom.out_channels],
            out,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            value,
            rg,
        ))
    }

    /// Batch normalization over every axis except the last (channel) axis.
    pub fn batch_norm(
        &mut self,
        params: &ParamSet<T>,
        x: ValueId,
        ids: &BatchNormIds,
    ) -> Result<ValueId> {
        let channels = self.value(x).last_dim();
        if params.get(ids.gamma).value.shape() != [channels] {
            return Err(Error::Shape(format!(
                "batch_norm: {} channels, gamma {:?}",
                channels,
                params.get(ids.gamma).value.shape()
            )));
        }
        let gamma = self.param(params, ids.gamma);
        let beta = self.param(params, ids.beta);
        let xv = self.value(x);
        let rows = xv.len() / channels;
        let batch_stats = self.mode == Mode::Train;
        let eps = T::from_f64(BN_EPS);

        let (mean, var) = if batch_stats {
            if rows < 2 {
                return Err(Error::Shape(
                    "batch_norm in training mode needs at least two values per channel".into(),
                ));
            }
            let mut mean = vec![T::zero(); channels];
            kernels::column_sums_into(xv.data(), channels, &mut mean);
            let inv_n = T::one() / T::from_usize(rows);
            mean.iter_mut().for_each(|m| *m *= inv_n);
            let mut var = vec![T::zero(); channels];
            for row in xv.data().chunks_exact(channels) {
                for c in 0..channels {
                    let d = row[c] - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_n);
            (mean, var)
        } else {
            (
                params.get(ids.running_mean).value.data().to_vec(),
                params.get(ids.running_var).value.data().to_vec(),
            )
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(channels) {
            for c in 0..channels {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(g[c] * h + bt[c]);
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;

        if batch_stats {
            let m = T::from_f64(BN_MOMENTUM);
            let unbias = T::from_usize(rows) / T::from_usize(rows - 1);
            let rm = params.get(ids.running_mean).value.data();
            let rv = params.get(ids.running_var).value.data();
            let new_mean: Vec<T> = rm
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| m * r + (T::one() - m) * b)
                .collect();
            let new_var: Vec<T> = rv
                .iter()
                .zip(&var)
                .map(|(&r, &b)| m * r + (T::one() - m) * b * unbias)
                .collect();
            self.buffer_updates
                .push((ids.running_mean, Tensor::from_vec(&[channels], new_mean)?));
            self.buffer_updates
                .push((ids.running_var, Tensor::from_vec(&[channels], new_var)?));
        }

        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x);
        let out: Vec<T> = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::from_vec(xv.shape(), out).expect("same shape");
        if self.track_kinks {
            let bits: Vec<u64> = self
                .value(x)
                .data()
                .chunks(64)
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .fold(0u64, |acc, (i, &v)| acc | (((v > T::zero()) as u64) << i))
                })
                .collect();
            self.mix_kink(bits.into_iter());
        }
        let rg = self.rg(&[x]);
        self.push(Op::Relu { x }, value, rg)
    }

    /// 2x2 max pooling with stride 2 on NHWC input (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::Shape(format!("max_pool2: input {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = Vec::with_capacity(n * ho * wo * c);
        let mut argmax = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if best == usize::MAX || d[idx] > d[best] {
                                best = idx;
                            }
                        }
                        out.push(d[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, ho, wo, c], out)?;
        if self.track_kinks {
            let picks: Vec<u64> = argmax.iter().map(|&i| i as u64).collect();
            self.mix_kink(picks.into_iter());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MaxPool2 { x, argmax }, value, rg))
    }

    /// `[n, h, w, c] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool: input {s:?}")));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let inv = T::one() / T::from_usize(hw);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let dst = &mut out[b * c..(b + 1) * c];
            kernels::column_sums_into(&xv.data()[b * hw * c..(b + 1) * hw * c], c, dst);
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::from_vec(&[n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GlobalAvgPool { x }, value, rg))
    }

    /// `[n, in] x [in, out] + [out]`.
    pub fn dense(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.value(b).shape() != [ws[1]] {
            return Err(Error::Shape(format!(
                "dense: input {xs:?}, weight {ws:?}, bias {:?}",
                self.value(b).shape()
            )));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (n as isize, 1),
            T::one(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Dense { x, w, b }, value, rg))
    }

    /// Normalizes every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x);
        let d = xv.last_dim();
        let tiny = T::from_f64(1e-12);
        let mut norms = Vec::with_capacity(xv.len() / d);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::from_vec(xv.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::L2Normalize { x, norms }, value, rg)
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![T::one(); n])
            .expect("weights match by construction")
    }

    /// Scalar `sum_i weights[i] * x[i]`.
    pub fn weighted_sum(&mut self, x: ValueId, weights: Vec<T>) -> Result<ValueId> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                xv.len()
            )));
        }
        let s: T = xv.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s), rg))
    }

    /// Scalar `0.5 * sum_i x[i]^2`.
    pub fn half_sum_squares(&mut self, x: ValueId) -> ValueId {
        let half = T::from_f64(0.5);
        let s: T = self.value(x).data().iter().map(|&v| half * v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Op::HalfSumSquares { x }, Tensor::scalar(s), rg)
    }

    /// Records a scalar loss whose gradients with respect to `inputs` were
    /// computed analytically by the caller.
    pub fn fused_loss(
        &mut self,
        inputs: &[ValueId],
        loss: T,
        grads: Vec<Tensor<T>>,
    ) -> Result<ValueId> {
        if inputs.len() != grads.len() {
            return Err(Error::Shape("fused_loss: one gradient per input".into()));
        }
        for (i, g) in inputs.iter().zip(&grads) {
            if self.value(*i).shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "fused_loss: gradient {:?} for value {:?}",
                    g.shape(),
                    self.value(*i).shape()
                )));
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Op::Fused {
                inputs: inputs.to_vec(),
                grads,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Writes scheduled batch-norm running statistics into `params`.
    pub fn commit_buffers(&mut self, params: &mut ParamSet<T>) {
        for (id, t) in self.buffer_updates.drain(..) {
            params.get_mut(id).value = t;
        }
    }

    /// Reverse pass from the scalar `loss`, accumulating into parameter
    /// gradients. Returns gradients of inputs that require them.
    pub fn backward(&self, loss: ValueId, params: &mut ParamSet<T>) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    out.inputs.insert(ValueId(i), gy);
                }
                Op::Param(pid) => {
                    let p = params.get_mut(*pid);
                    p.grad.add_assign(&gy);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    if self.needs(*w) {
                        let mut dw = Tensor::zeros(self.value(*w).shape());
                        kernels::conv_backward_weight(geom, cols, gy.data(), dw.data_mut());
                        self.acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let mut db = Tensor::zeros(&[geom.out_channels]);
                            kernels::column_sums_into(gy.data(), geom.out_channels, db.data_mut());
                            self.acc(&mut grads, *b, db);
                        }
                    }
                    if self.needs(*x) {
                        let dcols = kernels::conv_backward_cols(geom, gy.data(), self.value(*w).data());
                        let mut dx = Tensor::zeros(self.value(*x).shape());
                        kernels::col2im(geom, &dcols, dx.data_mut());
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let c = inv_std.len();
                    let rows = xhat.len() / c;
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (dy_row, h_row) in gy.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for k in 0..c {
                            dgamma[k] += dy_row[k] * h_row[k];
                            dbeta[k] += dy_row[k];
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = Vec::with_capacity(xhat.len());
                        if *batch_stats {
                            // dgamma = sum(dy * xhat), dbeta = sum(dy); reuse them.
                            let m = T::from_usize(rows);
                            for (dy_row, h_row) in gy.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                                for k in 0..c {
                                    let v = (m * dy_row[k] - dbeta[k] - h_row[k] * dgamma[k])
                                        * g[k]
                                        * inv_std[k]
                                        / m;
                                    dx.push(v);
                                }
                            }
                        } else {
                            for dy_row in gy.data().chunks_exact(c) {
                                for k in 0..c {
                                    dx.push(dy_row[k] * g[k] * inv_std[k]);
                                }
                            }
                        }
                        let dx = Tensor::from_vec(self.value(*x).shape(), dx)?;
                        self.acc(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        self.acc(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                    }
                    if self.needs(*beta) {
                        self.acc(&mut grads, *beta, Tensor::from_vec(&[c], dbeta)?);
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let dx: Vec<T> = gy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    for (&src, &g) in argmax.iter().zip(gy.data()) {
                        d[src] += g;
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let s = self.value(*x).shape();
                    let (hw, c) = (s[1] * s[2], s[3]);
                    let inv = T::one() / T::from_usize(hw);
                    let mut dx = Vec::with_capacity(self.value(*x).len());
                    for g_row in gy.data().chunks_exact(c) {
                        for _ in 0..hw {
                            dx.extend(g_row.iter().map(|&g| g * inv));
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(s, dx)?);
                }
                Op::Dense { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (m, k) = (xs[0], xs[1]);
                    let n = self.value(*w).shape()[1];
                    if self.needs(*w) {
                        let mut dw = Tensor::zeros(&[k, n]);
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            self.value(*x).data(),
                            (1, k as isize),
                            gy.data(),
                            (n as isize, 1),
                            T::zero(),
                            dw.data_mut(),
                            (n as isize, 1),
                        );
                        self.acc(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(&[n]);
                        kernels::column_sums_into(gy.data(), n, db.data_mut());
                        self.acc(&mut grads, *b, db);
                    }
                    if self.needs(*x) {
                        let mut dx = Tensor::zeros(&[m, k]);
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            gy.data(),
                            (n as isize, 1),
                            self.value(*w).data(),
                            (1, n as isize),
                            T::zero(),
                            dx.data_mut(),
                            (k as isize, 1),
                        );
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut dx = Vec::with_capacity(y.len());
                    for ((y_row, g_row), &n) in y
                        .data()
                        .chunks_exact(d)
                        .zip(gy.data().chunks_exact(d))
                        .zip(norms)
                    {
                        let dot: T = y_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                        dx.extend(y_row.iter().zip(g_row).map(|(&yv, &gv)| (gv - yv * dot) / n));
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(y.shape(), dx)?);
                }
                Op::WeightedSum { x, weights } => {
                    let g = gy.data()[0];
                    let dx: Vec<T> = weights.iter().map(|&w| w * g).collect();
                    self.acc(&mut grads, *x, Tensor::from_vec(self.value(*x).shape(), dx)?);
                }
                Op::HalfSumSquares { x } => {
                    let g = gy.data()[0];
                    let xv = self.value(*x);
                    let dx: Vec<T> = xv.data().iter().map(|&v| v * g).collect();
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                Op::Fused { inputs, grads: local } => {
                    let g = gy.data()[0];
                    for (inp, lg) in inputs.iter().zip(local) {
                        if self.needs(*inp) {
                            let mut t = lg.clone();
                            t.data_mut().iter_mut().for_each(|v| *v *= g);
                            self.acc(&mut grads, *inp, t);
                        }
                    }
                }
            }
        }

        for (_, p) in params.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        for t in out.inputs.values() {
            t.ensure_finite("input gradient")?;
        }
        Ok(out)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: ValueId, g: Tensor<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}
