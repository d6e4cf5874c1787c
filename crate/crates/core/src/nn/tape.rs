//! Reverse-mode tape over channel-major tensors.
//!
//! A [`Tape`] borrows the parameter store immutably, records each operation
//! with whatever it needs for the backward pass, and produces parameter and
//! activation gradients from seed gradients on any set of outputs.

use thiserror::Error;

use super::conv::{col2im, im2col, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShapeError {
    #[error("{op}: expected {expected}, got {actual:?}")]
    Mismatch {
        op: &'static str,
        expected: String,
        actual: [usize; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses per-sample statistics and records running updates.
    Train,
    /// Batch norm uses the stored running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Conv {
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Deconv {
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        out_geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Scale {
        x: Var,
        factor: T,
    },
    ScaleChannels {
        x: Var,
        factors: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T> {
    pub mean_param: ParamId,
    pub var_param: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Batch-norm parameter handles.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    running_updates: Vec<RunningUpdate<T>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter; all zeros when it did not take part.
    pub fn param(&self, id: ParamId) -> &[T] {
        &self.params[id.0]
    }

    /// Gradient reaching an input node. Intermediate activations do not keep
    /// their gradients.
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(grad),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            params,
            mode,
            nodes: Vec::new(),
            running_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Sign pattern (`input > 0`) of every ReLU on the tape, in order.
    pub fn relu_signs(&self) -> Vec<bool> {
        let mut signs = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = &node.op {
                signs.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        signs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn into_running_updates(self) -> Vec<RunningUpdate<T>> {
        self.running_updates
    }

    /// Convolution with weights shaped `[out, in, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, ShapeError> {
        let w = self.params.get(weight);
        let (cout, cin, k) = (w.shape[0], w.shape[1], w.shape[2]);
        let input = self.value(x);
        let geom = ConvGeom::new(input.channels(), input.height(), input.width(), k, stride, pad)
            .filter(|g| g.channels == cin)
            .ok_or_else(|| ShapeError::Mismatch {
                op: "conv2d",
                expected: format!("{cin} channels fitting a {k}x{k} kernel"),
                actual: input.shape(),
            })?;
        let p = geom.col_cols();
        let kk = geom.col_rows();
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(input.data(), &geom))
        };
        let mut out = vec![T::zero(); cout * p];
        {
            let b_mat: &[T] = cols.as_deref().unwrap_or(input.data());
            T::gemm(cout, kk, p, T::one(), &w.data, kk as isize, 1, b_mat, p as isize, 1, T::zero(), &mut out, p as isize, 1);
        }
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.params.data(b), p);
        }
        let value = Tensor::from_vec(cout, geom.out_height, geom.out_width, out);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Transposed convolution with weights shaped `[in, out, k, k]`; output
    /// size is `(n - 1) * stride - 2 * pad + k` per axis.
    pub fn deconv2d(
        &mut self,
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, ShapeError> {
        let w = self.params.get(weight);
        let (cin, cout, k) = (w.shape[0], w.shape[1], w.shape[2]);
        let input = self.value(x);
        let mismatch = || ShapeError::Mismatch {
            op: "deconv2d",
            expected: format!("{cin} channels"),
            actual: input.shape(),
        };
        if input.channels() != cin || (input.height() - 1) * stride + k < 2 * pad + 1 {
            return Err(mismatch());
        }
        let out_h = (input.height() - 1) * stride + k - 2 * pad;
        let out_w = (input.width() - 1) * stride + k - 2 * pad;
        let out_geom = ConvGeom::new(cout, out_h, out_w, k, stride, pad)
            .filter(|g| g.out_height == input.height() && g.out_width == input.width())
            .ok_or_else(mismatch)?;
        let hw = input.plane_len();
        let r = out_geom.col_rows();
        let mut cols = vec![T::zero(); r * hw];
        T::gemm(r, cin, hw, T::one(), &w.data, 1, r as isize, input.data(), hw as isize, 1, T::zero(), &mut cols, hw as isize, 1);
        let mut out = vec![T::zero(); cout * out_h * out_w];
        col2im(&cols, &out_geom, &mut out);
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.params.data(b), out_h * out_w);
        }
        let value = Tensor::from_vec(cout, out_h, out_w, out);
        Ok(self.push(
            value,
            Op::Deconv {
                x,
                weight,
                bias,
                out_geom,
            },
        ))
    }

    /// Per-channel normalization over the spatial axes (batch size 1).
    pub fn batch_norm(&mut self, x: Var, bn: BnParams) -> Var {
        let input = self.value(x);
        let (c, n) = (input.channels(), input.plane_len());
        let gamma = self.params.data(bn.gamma);
        let beta = self.params.data(bn.beta);
        let eps = T::from_f64_lossy(BN_EPS);
        let mut out = vec![T::zero(); c * n];
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let batch_stats = self.mode == Mode::Train;
        let mut batch_mean = Vec::with_capacity(c);
        let mut batch_var = Vec::with_capacity(c);
        let nt = T::from_usize(n).expect("plane size");
        for ch in 0..c {
            let plane = input.plane(ch);
            let (mean, var) = if batch_stats {
                let mean = plane.iter().copied().sum::<T>() / nt;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                batch_mean.push(mean);
                // Running variance uses the unbiased estimate.
                batch_var.push(if n > 1 {
                    var * nt / (nt - T::one())
                } else {
                    var
                });
                (mean, var)
            } else {
                (
                    self.params.data(bn.running_mean)[ch],
                    self.params.data(bn.running_var)[ch],
                )
            };
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for i in 0..n {
                let h = (plane[i] - mean) * inv;
                xhat[ch * n + i] = h;
                out[ch * n + i] = gamma[ch] * h + beta[ch];
            }
        }
        let value = Tensor::from_vec(c, input.height(), input.width(), out);
        if batch_stats {
            self.running_updates.push(RunningUpdate {
                mean_param: bn.running_mean,
                var_param: bn.running_var,
                batch_mean,
                batch_var,
            });
        }
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma: bn.gamma,
                beta: bn.beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(ShapeError::Mismatch {
                op: "add",
                expected: format!("{:?}", va.shape()),
                actual: vb.shape(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let [c, h, w] = va.shape();
        Ok(self.push(Tensor::from_vec(c, h, w, data), Op::Add { a, b }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let first = self.value(parts[0]).shape();
        for &p in parts {
            let s = self.value(p).shape();
            if s[1] != first[1] || s[2] != first[2] {
                return Err(ShapeError::Mismatch {
                    op: "concat",
                    expected: format!("spatial {}x{}", first[1], first[2]),
                    actual: s,
                });
            }
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Channels `start..end` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_channels(start, end);
        self.push(value, Op::Slice { x, start })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    /// Multiplies channel `c` of `x` by `factors[c]`.
    pub fn scale_channels(&mut self, x: Var, factors: &[T]) -> Var {
        let input = self.value(x);
        assert_eq!(factors.len(), input.channels(), "one factor per channel");
        let n = input.plane_len();
        let mut value = input.clone();
        for (ch, chunk) in value.data_mut().chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * factors[ch]);
        }
        self.push(
            value,
            Op::ScaleChannels {
                x,
                factors: factors.to_vec(),
            },
        )
    }

    /// Propagates `seeds` (gradients of the loss with respect to the given
    /// outputs) back through the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Vec<T>> = self
            .params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.data.len()])
            .collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed gradient shape");
            accumulate(&mut grads[v.0], g.clone());
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => grads[idx] = Some(dy),
                Op::Conv {
                    x,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let w = self.params.get(*weight);
                    let input = self.value(*x);
                    let (cout, kk, p) = (w.shape[0], geom.col_rows(), geom.col_cols());
                    let cols_mat: &[T] = cols.as_deref().unwrap_or(input.data());
                    T::gemm(cout, p, kk, T::one(), dy.data(), p as isize, 1, cols_mat, 1, p as isize, T::one(), &mut pgrads[weight.0], kk as isize, 1);
                    if let Some(b) = bias {
                        channel_sums(dy.data(), p, &mut pgrads[b.0]);
                    }
                    let mut dcols = vec![T::zero(); kk * p];
                    T::gemm(kk, cout, p, T::one(), &w.data, 1, kk as isize, dy.data(), p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                    let dx = if geom.is_pointwise() {
                        Tensor::from_vec(input.channels(), input.height(), input.width(), dcols)
                    } else {
                        let mut dx = Tensor::zeros(input.channels(), input.height(), input.width());
                        col2im(&dcols, geom, dx.data_mut());
                        dx
                    };
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Deconv {
                    x,
                    weight,
                    bias,
                    out_geom,
                } => {
                    let w = self.params.get(*weight);
                    let input = self.value(*x);
                    let (cin, hw, r) = (input.channels(), input.plane_len(), out_geom.col_rows());
                    let dcols = im2col(dy.data(), out_geom);
                    if let Some(b) = bias {
                        channel_sums(dy.data(), dy.plane_len(), &mut pgrads[b.0]);
                    }
                    T::gemm(cin, hw, r, T::one(), input.data(), hw as isize, 1, &dcols, 1, hw as isize, T::one(), &mut pgrads[weight.0], r as isize, 1);
                    let mut dx = Tensor::zeros(cin, input.height(), input.width());
                    T::gemm(cin, r, hw, T::one(), &w.data, r as isize, 1, &dcols, hw as isize, 1, T::zero(), dx.data_mut(), hw as isize, 1);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (c, n) = (dy.channels(), dy.plane_len());
                    let g = self.params.data(*gamma);
                    let nt = T::from_usize(n).expect("plane size");
                    let mut dx = Tensor::zeros(c, dy.height(), dy.width());
                    for ch in 0..c {
                        let dyc = dy.plane(ch);
                        let hc = &xhat[ch * n..(ch + 1) * n];
                        let sum_dy: T = dyc.iter().copied().sum();
                        let sum_dy_h: T = dyc.iter().zip(hc).map(|(&a, &b)| a * b).sum();
                        pgrads[gamma.0][ch] = pgrads[gamma.0][ch] + sum_dy_h;
                        pgrads[beta.0][ch] = pgrads[beta.0][ch] + sum_dy;
                        let out = &mut dx.data_mut()[ch * n..(ch + 1) * n];
                        let scale = g[ch] * inv_std[ch];
                        if *batch_stats {
                            for i in 0..n {
                                out[i] = scale * (dyc[i] - sum_dy / nt - hc[i] * sum_dy_h / nt);
                            }
                        } else {
                            for i in 0..n {
                                out[i] = scale * dyc[i];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Relu { x } => {
                    let input = self.value(*x);
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(input.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[b.0], dy.clone());
                    accumulate(&mut grads[a.0], dy);
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).channels();
                        accumulate(&mut grads[p.0], dy.slice_channels(start, start + c));
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let input = self.value(*x);
                    let mut dx = Tensor::zeros(input.channels(), input.height(), input.width());
                    let n = input.plane_len();
                    dx.data_mut()[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut grads[x.0], dy.map(|v| v * f));
                }
                Op::ScaleChannels { x, factors } => {
                    let mut dx = dy;
                    let n = dx.plane_len();
                    for (ch, chunk) in dx.data_mut().chunks_mut(n).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = *v * factors[ch]);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (ch, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[ch];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn channel_sums<T: Scalar>(dy: &[T], plane: usize, acc: &mut [T]) {
    for (ch, chunk) in dy.chunks(plane).enumerate() {
        acc[ch] = acc[ch] + chunk.iter().copied().sum::<T>();
    }
}
