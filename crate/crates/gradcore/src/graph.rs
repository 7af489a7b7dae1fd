//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and the tape is acyclic by construction. `backward` walks
//! the tape in reverse once per call and adds the fresh gradients into each
//! node's gradient slot, so repeated calls accumulate.

use crate::conv::{col2im, im2col, ConvGeom, Padding};
use crate::error::{GradError, Result};
use crate::params::{ParamSet, RunningStats};
use crate::real::{gemm, wide_sum, Real, Trans};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Infer,
}

/// Deliberate backward-rule corruption, used to prove the gradient checker
/// catches broken rules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Leaky ReLU passes the full gradient on its negative side.
    LeakyReluGate,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(String),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    ConcatRows {
        inputs: Vec<Var>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    GaussianKl {
        mu: Var,
        logvar: Var,
    },
    Reparameterize {
        mu: Var,
        logvar: Var,
        noise: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Dense { .. } => "dense",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Mse { .. } => "mse",
            Op::GaussianKl { .. } => "gaussian_kl",
            Op::Reparameterize { .. } => "reparameterize",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { input, kernel, .. } | Op::ConvTranspose2d { input, kernel, .. } => {
                vec![*input, *kernel]
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::AddBias { input, bias } => vec![*input, *bias],
            Op::Add { a, b } => vec![*a, *b],
            Op::LeakyRelu { input, .. }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::Reshape { input } => vec![*input],
            Op::ConcatRows { inputs } => inputs.clone(),
            Op::Mse { pred, .. } => vec![*pred],
            Op::GaussianKl { mu, logvar } | Op::Reparameterize { mu, logvar, .. } => {
                vec![*mu, *logvar]
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Fault,
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn rank_check(op: &'static str, shape: &Shape, rank: usize) -> Result<()> {
    if shape.rank() != rank {
        return Err(GradError::Rank {
            op,
            expected: rank,
            got: shape.clone(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Shape, b: &Shape) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(GradError::Rank {
            op,
            expected: a.rank(),
            got: b.clone(),
        });
    }
    for (i, (x, y)) in a.dims().iter().zip(b.dims()).enumerate() {
        if x != y {
            const AXES: [&str; 6] = ["0", "1", "2", "3", "4", "5"];
            return Err(GradError::Dim {
                op,
                axis: AXES.get(i).copied().unwrap_or("n"),
                left: *x,
                right: *y,
            });
        }
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Fault::None,
        }
    }

    pub fn set_fault(&mut self, fault: Fault) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// Accumulated gradient of `v` (zeros if nothing reached it yet).
    pub fn grad(&self, v: Var) -> Vec<T> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.nodes[v.0].value.numel()],
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records a constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a leaf holding a copy of a named parameter.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let value = params.get(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    /// Adds the gradients of every parameter leaf into `params`' gradient slots.
    pub fn export_grads(&self, params: &mut ParamSet<T>) -> Result<()> {
        for node in &self.nodes {
            if let (Op::Param(name), Some(g)) = (&node.op, &node.grad) {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Hash of the sign pattern at every leaky-ReLU input. Two evaluations with
    /// the same signature lie on the same linear piece of every activation.
    pub fn gate_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::LeakyRelu { input, .. } = node.op {
                for x in self.nodes[input.0].value.data() {
                    h ^= u64::from(*x >= T::zero());
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// 2-D convolution over `[B,T,F,Cin]` with kernel `[kt,kf,Cin,Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride_t: usize,
        stride_f: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            "conv2d",
            self.shape(input).dims(),
            self.shape(kernel).dims(),
            stride_t,
            stride_f,
            padding,
        )?;
        let cols = im2col(&geom, self.value(input).data());
        let mut out = vec![T::zero(); geom.positions() * geom.cout];
        gemm(
            geom.positions(),
            geom.patch_len(),
            geom.cout,
            &cols,
            Trans::No,
            self.value(kernel).data(),
            Trans::No,
            &mut out,
            false,
        );
        let value = Tensor::new(geom.output_dims(), out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Transposed convolution: the input-gradient map of [`Graph::conv2d`].
    ///
    /// `kernel` has the shape of the forward convolution's kernel
    /// `[kt,kf,Cin,Cout]`; `input` is `[B,T',F',Cout]` and the result is
    /// `[B,out_t,out_f,Cin]`. The output extent must be given because strided
    /// forward convolutions map several input lengths to the same output length.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride_t: usize,
        stride_f: usize,
        padding: Padding,
        out_t: usize,
        out_f: usize,
    ) -> Result<Var> {
        let in_dims = self.shape(input).dims().to_vec();
        rank_check("conv_transpose2d", self.shape(input), 4)?;
        let k_dims = self.shape(kernel).dims().to_vec();
        rank_check("conv_transpose2d", self.shape(kernel), 4)?;
        let geom = ConvGeom::new(
            "conv_transpose2d",
            &[in_dims[0], out_t, out_f, k_dims[2]],
            &k_dims,
            stride_t,
            stride_f,
            padding,
        )?;
        let [_, ot, of, oc] = geom.output_dims();
        for (axis, want, got) in [
            ("time", ot, in_dims[1]),
            ("freq", of, in_dims[2]),
            ("channels_out", oc, in_dims[3]),
        ] {
            if want != got {
                return Err(GradError::Dim {
                    op: "conv_transpose2d",
                    axis,
                    left: want,
                    right: got,
                });
            }
        }
        let mut patches = vec![T::zero(); geom.positions() * geom.patch_len()];
        gemm(
            geom.positions(),
            geom.cout,
            geom.patch_len(),
            self.value(input).data(),
            Trans::No,
            self.value(kernel).data(),
            Trans::Yes,
            &mut patches,
            false,
        );
        let mut out = vec![T::zero(); geom.input_dims().iter().product()];
        col2im(&geom, &patches, &mut out);
        let value = Tensor::new(geom.input_dims(), out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
            },
        ))
    }

    /// `input[B,D] · weight[D,H] + bias[H]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        rank_check("dense", self.shape(input), 2)?;
        rank_check("dense", self.shape(weight), 2)?;
        let (b, d) = (self.shape(input).dim(0), self.shape(input).dim(1));
        let (wd, h) = (self.shape(weight).dim(0), self.shape(weight).dim(1));
        if d != wd {
            return Err(GradError::Dim {
                op: "dense",
                axis: "inner",
                left: d,
                right: wd,
            });
        }
        if self.shape(bias).dims() != [h] {
            return Err(GradError::Dim {
                op: "dense",
                axis: "bias",
                left: h,
                right: self.shape(bias).numel(),
            });
        }
        let mut out = Vec::with_capacity(b * h);
        for _ in 0..b {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(
            b,
            d,
            h,
            self.value(input).data(),
            Trans::No,
            self.value(weight).data(),
            Trans::No,
            &mut out,
            true,
        );
        let value = Tensor::new([b, h], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(GradError::Invalid(format!(
                "leaky_relu slope must lie in (0,1), got {slope}"
            )));
        }
        let s = T::of(slope);
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { v } else { s * v })
            .collect();
        let value = Tensor::from_shape(x.shape().clone(), data)?;
        Ok(self.push(value, Op::LeakyRelu { input, slope: s }))
    }

    /// Batch normalization over every axis but the last (channel) axis.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Var> {
        if epsilon <= 0.0 {
            return Err(GradError::Invalid("batch_norm epsilon must be > 0".into()));
        }
        let shape = self.shape(input).clone();
        let c = shape.last();
        for (axis, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v).dims() != [c] {
                return Err(GradError::Dim {
                    op: "batch_norm",
                    axis,
                    left: c,
                    right: self.shape(v).numel(),
                });
            }
        }
        if stats.channels() != c {
            return Err(GradError::Dim {
                op: "batch_norm",
                axis: "running_stats",
                left: c,
                right: stats.channels(),
            });
        }
        let x = self.value(input).data();
        let n = x.len() / c;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut sum = vec![0.0f64; c];
                for row in x.chunks_exact(c) {
                    for (s, v) in sum.iter_mut().zip(row) {
                        *s += v.f64();
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
                let mut sq = vec![0.0f64; c];
                for row in x.chunks_exact(c) {
                    for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                        let d = v.f64() - m;
                        *s += d * d;
                    }
                }
                let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                for ch in 0..c {
                    stats.mean[ch] =
                        T::of(momentum * stats.mean[ch].f64() + (1.0 - momentum) * mean[ch]);
                    stats.var[ch] = T::of(
                        momentum * stats.var[ch].f64() + (1.0 - momentum) * var[ch] * unbias,
                    );
                }
                stats.updates += 1;
                (mean, var)
            }
            Mode::Infer => {
                if stats.updates == 0 {
                    log::warn!(
                        "batch_norm in infer mode before any training update; using initial statistics (mean 0, var 1)"
                    );
                }
                (
                    stats.mean.iter().map(|v| v.f64()).collect(),
                    stats.var.iter().map(|v| v.f64()).collect(),
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + epsilon).sqrt())).collect();
        let mean: Vec<T> = mean.into_iter().map(T::of).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let value = Tensor::from_shape(shape, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }

    /// Adds `bias`, whose shape must equal a suffix of the input shape.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).dims();
        let bs = self.shape(bias).dims();
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(GradError::Dim {
                op: "add_bias",
                axis: "suffix",
                left: self.shape(input).numel(),
                right: self.shape(bias).numel(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(input)
            .data()
            .chunks_exact(b.len())
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| *x + *y))
            .collect();
        let value = Tensor::from_shape(self.shape(input).clone(), data)?;
        Ok(self.push(value, Op::AddBias { input, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::from_shape(self.shape(a).clone(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let data = self.value(input).data().iter().map(|x| *x * f).collect();
        let value = Tensor::from_shape(self.shape(input).clone(), data)?;
        Ok(self.push(value, Op::Scale { input, factor: f }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = T::of(wide_sum(self.value(input).data()));
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let value = Tensor::new(dims.to_vec(), self.value(input).data().to_vec())?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// Concatenates along axis 0; trailing axes must agree.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| GradError::Invalid("concat_rows of nothing".into()))?;
        let tail = self.shape(*first).dims()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in inputs {
            let d = self.shape(*v).dims();
            if d[1..] != tail[..] {
                return Err(GradError::Dim {
                    op: "concat_rows",
                    axis: "trailing",
                    left: tail.iter().product(),
                    right: d[1..].iter().product(),
                });
            }
            rows += d[0];
            data.extend_from_slice(self.value(*v).data());
        }
        let mut dims = vec![rows];
        dims.extend(tail);
        let value = Tensor::new(dims, data)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("mse", self.shape(pred), target.shape())?;
        let p = self.value(pred).data();
        let sq: f64 = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| {
                let d = a.f64() - b.f64();
                d * d
            })
            .sum();
        let loss = T::of(sq / p.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// KL divergence of `N(mu, exp(logvar))` from `N(0, I)`: summed over latent
    /// dimensions, averaged over the batch (axis 0).
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        same_shape("gaussian_kl", self.shape(mu), self.shape(logvar))?;
        let batch = self.shape(mu).dim(0);
        let total: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .map(|(m, lv)| {
                let (m, lv) = (m.f64(), lv.f64());
                -0.5 * (1.0 + lv - m * m - lv.exp())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(T::of(total / batch as f64)),
            Op::GaussianKl { mu, logvar },
        ))
    }

    /// `mu + exp(logvar / 2) * noise`; the noise is a constant.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, noise: &Tensor<T>) -> Result<Var> {
        same_shape("reparameterize", self.shape(mu), self.shape(logvar))?;
        same_shape("reparameterize", self.shape(mu), noise.shape())?;
        let half = T::of(0.5);
        let data = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .zip(noise.data())
            .map(|((m, lv), e)| *m + (*lv * half).exp() * *e)
            .collect();
        let value = Tensor::from_shape(self.shape(mu).clone(), data)?;
        Ok(self.push(
            value,
            Op::Reparameterize {
                mu,
                logvar,
                noise: noise.data().to_vec(),
            },
        ))
    }

    /// Mean negative log-softmax likelihood of `labels` under `logits[N,C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        rank_check("softmax_cross_entropy", self.shape(logits), 2)?;
        let (n, c) = (self.shape(logits).dim(0), self.shape(logits).dim(1));
        if labels.len() != n {
            return Err(GradError::Dim {
                op: "softmax_cross_entropy",
                axis: "rows",
                left: n,
                right: labels.len(),
            });
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut nll = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks_exact(c).zip(labels) {
            if label >= c {
                return Err(GradError::Label { label, classes: c });
            }
            let lp = log_softmax(row);
            nll -= lp[label];
            probs.extend(lp.iter().map(|l| T::of(l.exp())));
        }
        Ok(self.push(
            Tensor::scalar(T::of(nll / n as f64)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`, accumulating into every gradient slot.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss).numel() != 1 {
            return Err(GradError::NonScalarLoss(self.shape(loss).clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut done = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            done.push((idx, g));
        }
        for (idx, g) in done {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (p, r, co) = (geom.positions(), geom.patch_len(), geom.cout);
                let dk = slot(grads, *kernel, r * co);
                gemm(r, p, co, cols, Trans::Yes, g, Trans::No, dk, true);
                let mut dcols = vec![T::zero(); p * r];
                gemm(p, co, r, g, Trans::No, self.data(*kernel), Trans::Yes, &mut dcols, false);
                let n_in = self.nodes[input.0].value.numel();
                col2im(geom, &dcols, slot(grads, *input, n_in));
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
            } => {
                let (p, r, co) = (geom.positions(), geom.patch_len(), geom.cout);
                let gc = im2col(geom, g);
                gemm(p, r, co, &gc, Trans::No, self.data(*kernel), Trans::No, slot(grads, *input, p * co), true);
                gemm(r, p, co, &gc, Trans::Yes, self.data(*input), Trans::No, slot(grads, *kernel, r * co), true);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let shape = self.nodes[input.0].value.shape();
                let (b, d) = (shape.dim(0), shape.dim(1));
                let h = node.value.shape().dim(1);
                gemm(b, h, d, g, Trans::No, self.data(*weight), Trans::Yes, slot(grads, *input, b * d), true);
                gemm(d, b, h, self.data(*input), Trans::Yes, g, Trans::No, slot(grads, *weight, d * h), true);
                let db = slot(grads, *bias, h);
                let mut acc = vec![0.0f64; h];
                for row in g.chunks_exact(h) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v.f64();
                    }
                }
                for (d, a) in db.iter_mut().zip(acc) {
                    *d += T::of(a);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.data(*input);
                let neg = match self.fault {
                    Fault::LeakyReluGate => T::one(),
                    Fault::None => *slope,
                };
                let dx = slot(grads, *input, x.len());
                for ((d, gv), xv) in dx.iter_mut().zip(g).zip(x) {
                    *d += if *xv >= T::zero() { *gv } else { *gv * neg };
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch].f64();
                        sum_gx[ch] += (grow[ch] * xrow[ch]).f64();
                    }
                }
                let gam = self.data(*gamma);
                {
                    let dg = slot(grads, *gamma, c);
                    for ch in 0..c {
                        dg[ch] += T::of(sum_gx[ch]);
                    }
                }
                {
                    let db = slot(grads, *beta, c);
                    for ch in 0..c {
                        db[ch] += T::of(sum_g[ch]);
                    }
                }
                let dx = slot(grads, *input, xhat.len());
                if *batch_stats {
                    let nf = n as f64;
                    let mean_g: Vec<T> = sum_g.iter().map(|s| T::of(s / nf)).collect();
                    let mean_gx: Vec<T> = sum_gx.iter().map(|s| T::of(s / nf)).collect();
                    let k: Vec<T> = (0..c).map(|ch| gam[ch] * inv_std[ch]).collect();
                    for ((drow, grow), xrow) in
                        dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c))
                    {
                        for ch in 0..c {
                            drow[ch] += k[ch] * (grow[ch] - mean_g[ch] - xrow[ch] * mean_gx[ch]);
                        }
                    }
                } else {
                    for (drow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ch in 0..c {
                            drow[ch] += grow[ch] * gam[ch] * inv_std[ch];
                        }
                    }
                }
            }
            Op::AddBias { input, bias } => {
                let blen = self.nodes[bias.0].value.numel();
                let dx = slot(grads, *input, g.len());
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += *v);
                let mut acc = vec![0.0f64; blen];
                for row in g.chunks_exact(blen) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v.f64();
                    }
                }
                let db = slot(grads, *bias, blen);
                for (d, a) in db.iter_mut().zip(acc) {
                    *d += T::of(a);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    let d = slot(grads, *v, g.len());
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += *x);
                }
            }
            Op::Scale { input, factor } => {
                let d = slot(grads, *input, g.len());
                d.iter_mut().zip(g).for_each(|(d, x)| *d += *x * *factor);
            }
            Op::Sum { input } => {
                let n = self.nodes[input.0].value.numel();
                slot(grads, *input, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Reshape { input } => {
                let d = slot(grads, *input, g.len());
                d.iter_mut().zip(g).for_each(|(d, x)| *d += *x);
            }
            Op::ConcatRows { inputs } => {
                let mut offset = 0;
                for v in inputs {
                    let n = self.nodes[v.0].value.numel();
                    let d = slot(grads, *v, n);
                    d.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(d, x)| *d += *x);
                    offset += n;
                }
            }
            Op::Mse { pred, target } => {
                let p = self.data(*pred);
                let k = g[0] * T::of(2.0 / p.len() as f64);
                let d = slot(grads, *pred, p.len());
                for ((d, pv), tv) in d.iter_mut().zip(p).zip(target) {
                    *d += k * (*pv - *tv);
                }
            }
            Op::GaussianKl { mu, logvar } => {
                let batch = self.nodes[mu.0].value.shape().dim(0);
                let k = g[0] / T::of(batch as f64);
                let m = self.data(*mu);
                let lv = self.data(*logvar);
                {
                    let dm = slot(grads, *mu, m.len());
                    dm.iter_mut().zip(m).for_each(|(d, x)| *d += k * *x);
                }
                let half = T::of(0.5);
                let dl = slot(grads, *logvar, lv.len());
                dl.iter_mut()
                    .zip(lv)
                    .for_each(|(d, x)| *d += k * half * (x.exp() - T::one()));
            }
            Op::Reparameterize { mu, logvar, noise } => {
                {
                    let dm = slot(grads, *mu, g.len());
                    dm.iter_mut().zip(g).for_each(|(d, x)| *d += *x);
                }
                let lv = self.data(*logvar);
                let half = T::of(0.5);
                let dl = slot(grads, *logvar, g.len());
                for (((d, gv), l), e) in dl.iter_mut().zip(g).zip(lv).zip(noise) {
                    *d += *gv * half * (*l * half).exp() * *e;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let k = g[0] / T::of(n as f64);
                let d = slot(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        d[r * c + j] += k * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }
}

/// Numerically stable log-softmax of one row, in `f64`.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.f64() - lse).collect()
}
