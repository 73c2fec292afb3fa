//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every op evaluates eagerly, pushes one node holding its output and whatever
//! it needs for the backward rule, and hands back a [`Var`]. Node order is a
//! valid topological order, so the backward pass is a single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Stride and zero-padding of a 3D convolution over (T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dParams {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dParams {
    pub fn same(kernel: [usize; 3]) -> Self {
        Conv3dParams {
            stride: [1, 1, 1],
            padding: kernel.map(|k| k / 2),
        }
    }

    pub fn valid() -> Self {
        Conv3dParams {
            stride: [1, 1, 1],
            padding: [0, 0, 0],
        }
    }
}

/// Training target for one row of logits.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Soft(Vec<f64>),
}

/// One weighted term `weight * H(target, softmax(logits[row]))` of a loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub row: usize,
    pub target: Target,
    pub weight: f64,
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the convention for running estimates.
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    AvgPool {
        input: Var,
        geom: PoolGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        spatial: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        classes: usize,
        /// (row, weight, softmax probabilities, target distribution)
        rows: Vec<(usize, f64, Vec<f64>, Vec<f64>)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never saves backward state; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Leaf whose gradient is tracked (a parameter or a probed input).
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = !self.no_grad;
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf without gradient (data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn track(&self, inputs: &[Var]) -> bool {
        !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn finite(&self, value: Tensor, op: &'static str) -> Result<Tensor> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Cross-correlation of `input [N,T,H,W,Cin]` with `kernel [kT,kH,kW,Cin,Cout]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, params: Conv3dParams) -> Result<Var> {
        let (xs, ks) = (self.shape(input), self.shape(kernel));
        if xs.len() != 5 || ks.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("expected rank-5 input and kernel, got {xs:?} and {ks:?}"),
            ));
        }
        if xs[4] != ks[3] {
            return Err(Error::shape(
                "conv3d",
                format!("input has {} channels but kernel expects {}", xs[4], ks[3]),
            ));
        }
        let mut output = [0; 3];
        for d in 0..3 {
            let padded = xs[d + 1] + 2 * params.padding[d];
            if params.stride[d] == 0 || padded < ks[d] {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "dim {d}: padded extent {padded} smaller than kernel {} (stride {})",
                        ks[d], params.stride[d]
                    ),
                ));
            }
            output[d] = (padded - ks[d]) / params.stride[d] + 1;
        }
        let geom = ConvGeometry {
            batch: xs[0],
            input: [xs[1], xs[2], xs[3]],
            in_channels: xs[4],
            kernel: [ks[0], ks[1], ks[2]],
            out_channels: ks[4],
            stride: params.stride,
            padding: params.padding,
            output,
        };
        let (patch, cout) = (geom.patch(), geom.out_channels);
        let chunk = geom.chunk_rows();
        let mut scratch = vec![0.0; chunk * patch];
        let mut out = vec![0.0; geom.rows() * cout];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        for start in (0..geom.rows()).step_by(chunk) {
            let end = (start + chunk).min(geom.rows());
            geom.im2col(x, start..end, &mut scratch);
            kernels::gemm(
                end - start,
                patch,
                cout,
                &scratch,
                (patch, 1),
                k,
                (cout, 1),
                0.0,
                &mut out[start * cout..end * cout],
            );
        }
        let value = self.finite(Tensor::new(geom.output_shape(), out)?, "conv3d")?;
        let rg = self.track(&[input, kernel]);
        Ok(self.push(value, Op::Conv3d { input, kernel, geom }, rg))
    }

    fn channel_layout(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let xs = self.shape(input);
        let c = *xs.last().unwrap();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        Ok((self.value(input).len() / c, c))
    }

    /// Batch norm over every axis but the last, using the current batch.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        if self.shape(input)[0] < 2 {
            return Err(Error::shape(
                "batchnorm",
                "training mode needs a batch of at least 2",
            ));
        }
        let (rows, c) = self.channel_layout(input, gamma, beta)?;
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(&x[r * c..(r + 1) * c]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut sq = vec![0.0; c];
        for r in 0..rows {
            for ch in 0..c {
                let d = x[r * c + ch] - mean[ch];
                sq[ch] += d * d;
            }
        }
        let inv_std: Vec<f64> = sq
            .iter()
            .map(|s| 1.0 / (s / rows as f64 + BN_EPS).sqrt())
            .collect();
        let var = sq.iter().map(|s| s / (rows as f64 - 1.0)).collect();
        let out = self.normalize(input, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch norm with frozen statistics; a per-channel affine map.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (_, c) = self.channel_layout(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm", "running stats length"));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.normalize(input, gamma, beta, running_mean, inv_std, false)
    }

    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let c = mean.len();
        let x = self.value(input);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = x.data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = i % c;
            *xh = (*xh - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        let value = self.finite(Tensor::new(x.shape().to_vec(), out)?, "batchnorm")?;
        let rg = self.track(&[input, gamma, beta]);
        if !rg {
            xhat = Vec::new();
        }
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// `max(x, 0)`, with subgradient 0 at exactly 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.track(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    fn pool_geometry(&self, input: Var, window: [usize; 3], op: &'static str) -> Result<PoolGeometry> {
        let xs = self.shape(input);
        if xs.len() != 5 {
            return Err(Error::shape(op, format!("expected rank-5 input, got {xs:?}")));
        }
        let mut output = [0; 3];
        for d in 0..3 {
            if window[d] == 0 || xs[d + 1] < window[d] {
                return Err(Error::shape(
                    op,
                    format!("extent {} smaller than window {}", xs[d + 1], window[d]),
                ));
            }
            output[d] = xs[d + 1] / window[d];
        }
        Ok(PoolGeometry {
            batch: xs[0],
            input: [xs[1], xs[2], xs[3]],
            channels: xs[4],
            window,
            output,
        })
    }

    /// Non-overlapping average pooling; trailing remainders are dropped.
    pub fn avgpool3d(&mut self, input: Var, window: [usize; 3]) -> Result<Var> {
        let geom = self.pool_geometry(input, window, "avgpool3d")?;
        let x = self.value(input).data();
        let shape = geom.output_shape();
        let mut out = vec![0.0; shape.iter().product()];
        geom.for_each(|o, i| out[o] += x[i]);
        let scale = 1.0 / window.iter().product::<usize>() as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        let value = Tensor::new(shape, out)?;
        let rg = self.track(&[input]);
        Ok(self.push(value, Op::AvgPool { input, geom }, rg))
    }

    /// Non-overlapping max pooling; ties resolve to the first element scanned.
    pub fn maxpool3d(&mut self, input: Var, window: [usize; 3]) -> Result<Var> {
        let geom = self.pool_geometry(input, window, "maxpool3d")?;
        let x = self.value(input).data();
        let shape = geom.output_shape();
        let n = shape.iter().product();
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0; n];
        geom.for_each(|o, i| {
            if x[i] > out[o] {
                out[o] = x[i];
                argmax[o] = i;
            }
        });
        let value = Tensor::new(shape, out)?;
        let rg = self.track(&[input]);
        if !rg {
            argmax = Vec::new();
        }
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// Mean over (T, H, W): `[N,T,H,W,C] -> [N,C]`.
    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("global_avgpool", format!("expected rank 5, got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[4]);
        let spatial = xs[1] * xs[2] * xs[3];
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for s in 0..spatial {
                let base = (b * spatial + s) * c;
                for ch in 0..c {
                    out[b * c + ch] += x[base + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= spatial as f64);
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.track(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool { input, spatial }, rg))
    }

    /// `input [N,F] @ weight [F,C] + bias [C]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, f, c) = (xs[0], xs[1], ws[1]);
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.value(bias).data().iter().copied()).collect();
        kernels::gemm(
            n,
            f,
            c,
            self.value(input).data(),
            (f, 1),
            self.value(weight).data(),
            (c, 1),
            1.0,
            &mut out,
        );
        let value = self.finite(Tensor::new(vec![n, c], out)?, "linear")?;
        let rg = self.track(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Inverted dropout: zero each element with probability `rate`, scale the
    /// survivors by `1/(1-rate)`. The mask is a pure function of `seed`.
    pub fn dropout(&mut self, input: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.track(&[input]);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.track(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.track(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Scalar `sum_i weights[i] * input[i]`; projects any tensor to a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), x.len()),
            ));
        }
        let s = x.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.track(&[input]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, rg))
    }

    /// Mean softmax cross-entropy over all rows of `logits [N,C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Target]) -> Result<Var> {
        let n = targets.len();
        let terms: Vec<LossTerm> = targets
            .iter()
            .enumerate()
            .map(|(row, t)| LossTerm {
                row,
                target: t.clone(),
                weight: 1.0 / n as f64,
            })
            .collect();
        if self.shape(logits).first() != Some(&n) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for logits {:?}", n, self.shape(logits)),
            ));
        }
        self.cross_entropy_terms(logits, &terms)
    }

    /// `sum_k weight_k * H(target_k, softmax(logits[row_k]))`, computed in log space.
    /// Rows not named by any term contribute nothing.
    pub fn cross_entropy_terms(&mut self, logits: Var, terms: &[LossTerm]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 {
            return Err(Error::shape("cross_entropy", format!("logits must be [N,C], got {ls:?}")));
        }
        let (n, c) = (ls[0], ls[1]);
        let z = self.value(logits).data();
        let mut loss = 0.0;
        let mut rows = Vec::with_capacity(terms.len());
        for term in terms {
            if term.row >= n {
                return Err(Error::shape("cross_entropy", format!("row {} of {n}", term.row)));
            }
            let target = match &term.target {
                Target::Class(k) => {
                    if *k >= c {
                        return Err(Error::invalid(format!("class {k} outside [0, {c})")));
                    }
                    let mut t = vec![0.0; c];
                    t[*k] = 1.0;
                    t
                }
                Target::Soft(t) => {
                    if t.len() != c {
                        return Err(Error::shape("cross_entropy", format!("soft target of {} for {c} classes", t.len())));
                    }
                    let s: f64 = t.iter().sum();
                    if (s - 1.0).abs() > 1e-9 || t.iter().any(|v| !(*v >= 0.0)) {
                        return Err(Error::invalid(format!("soft target is not a distribution (sum {s})")));
                    }
                    t.clone()
                }
            };
            let logp = kernels::log_softmax(&z[term.row * c..(term.row + 1) * c]);
            let h: f64 = target
                .iter()
                .zip(&logp)
                .filter(|(t, _)| **t > 0.0)
                .map(|(t, lp)| -t * lp)
                .sum();
            loss += term.weight * h;
            rows.push((term.row, term.weight, logp.into_iter().map(f64::exp).collect(), target));
        }
        let rg = self.track(&[logits]);
        if !rg {
            rows.clear();
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                classes: c,
                rows,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.no_grad {
            return Err(Error::invalid("backward on a no-grad tape"));
        }
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let shape = self.nodes[var.0].value.shape().to_vec();
        let delta = Tensor::new(shape, delta).expect("gradient shape matches value");
        match &mut grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                geom,
            } => {
                // patches are recomputed rather than kept alive on the tape
                let (patch, cout) = (geom.patch(), geom.out_channels);
                let chunk = geom.chunk_rows();
                let want_k = self.requires_grad(*kernel);
                let want_x = self.requires_grad(*input);
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let mut scratch = vec![0.0; chunk * patch];
                let mut dk = vec![0.0; if want_k { patch * cout } else { 0 }];
                let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
                for start in (0..geom.rows()).step_by(chunk) {
                    let end = (start + chunk).min(geom.rows());
                    let m = end - start;
                    let g_rows = &gd[start * cout..end * cout];
                    if want_k {
                        geom.im2col(x, start..end, &mut scratch);
                        kernels::gemm(patch, m, cout, &scratch, (1, patch), g_rows, (cout, 1), 1.0, &mut dk);
                    }
                    if want_x {
                        kernels::gemm(m, cout, patch, g_rows, (cout, 1), k, (1, cout), 0.0, &mut scratch);
                        geom.col2im(&scratch, start..end, &mut dx);
                    }
                }
                if want_k {
                    self.accumulate(grads, *kernel, dk);
                }
                if want_x {
                    self.accumulate(grads, *input, dx);
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
                let rows = gd.len() / c;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (dy, xh)) in gd.iter().zip(xhat).enumerate() {
                    dgamma[i % c] += dy * xh;
                    dbeta[i % c] += dy;
                }
                if self.requires_grad(*input) {
                    let dx: Vec<f64> = if *batch_stats {
                        let m = rows as f64;
                        gd.iter()
                            .zip(xhat)
                            .enumerate()
                            .map(|(i, (dy, xh))| {
                                let ch = i % c;
                                gam[ch] * inv_std[ch] * (dy - dbeta[ch] / m - xh * dgamma[ch] / m)
                            })
                            .collect()
                    } else {
                        gd.iter()
                            .enumerate()
                            .map(|(i, dy)| dy * gam[i % c] * inv_std[i % c])
                            .collect()
                    };
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = gd
                    .iter()
                    .zip(x)
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::AvgPool { input, geom } => {
                let scale = 1.0 / geom.window.iter().product::<usize>() as f64;
                let mut dx = vec![0.0; self.value(*input).len()];
                geom.for_each(|o, i| dx[i] += gd[o] * scale);
                self.accumulate(grads, *input, dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (o, &i) in argmax.iter().enumerate() {
                    dx[i] += gd[o];
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool { input, spatial } => {
                let c = g.shape()[1];
                let n = g.shape()[0];
                let mut dx = Vec::with_capacity(self.value(*input).len());
                for b in 0..n {
                    for _ in 0..*spatial {
                        dx.extend(gd[b * c..(b + 1) * c].iter().map(|v| v / *spatial as f64));
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input);
                let (n, f) = (xs.shape()[0], xs.shape()[1]);
                let c = self.value(*weight).shape()[1];
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0; f * c];
                    kernels::gemm(f, n, c, xs.data(), (1, f), gd, (c, 1), 0.0, &mut dw);
                    self.accumulate(grads, *weight, dw);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; c];
                    for r in 0..n {
                        for (d, v) in db.iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0; n * f];
                    let w = self.value(*weight).data();
                    kernels::gemm(n, c, f, gd, (c, 1), w, (1, c), 0.0, &mut dx);
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::Dropout { input, mask } => {
                let dx = gd.iter().zip(mask).map(|(d, m)| d * m).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Scale { input, factor } => {
                let dx = gd.iter().map(|d| d * factor).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::WeightedSum { input, weights } => {
                let s = gd[0];
                self.accumulate(grads, *input, weights.iter().map(|w| w * s).collect());
            }
            Op::CrossEntropy {
                logits,
                classes,
                rows,
            } => {
                let s = gd[0];
                let mut dz = vec![0.0; self.value(*logits).len()];
                for (row, weight, probs, target) in rows {
                    let mass: f64 = target.iter().sum();
                    for k in 0..*classes {
                        dz[row * classes + k] += s * weight * (mass * probs[k] - target[k]);
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}
