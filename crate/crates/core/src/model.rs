//! The single shared clip classifier. It has no notion of which view it is
//! fed; RGB, flow and temporal-gradient clips all take the same path.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensorlab::{softmax, BatchStats, Conv3dParams, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output channels of each conv block.
    pub widths: Vec<usize>,
    pub kernel: [usize; 3],
    /// Average-pool window after each block. No temporal pooling by default.
    pub pool: [usize; 3],
    pub classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            widths: vec![16, 32, 64],
            kernel: [3, 3, 3],
            pool: [1, 2, 2],
            classes: 8,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("model widths must be non-empty and positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let mut dims = [self.frames, self.height, self.width];
        for _ in &self.widths {
            for d in 0..3 {
                if self.pool[d] == 0 || dims[d] < self.pool[d] {
                    return Err(Error::Config(format!(
                        "input {}x{}x{} too small for {} pooled blocks",
                        self.frames,
                        self.height,
                        self.width,
                        self.widths.len()
                    )));
                }
                dims[d] /= self.pool[d];
            }
        }
        Ok(())
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 5] {
        [batch, self.frames, self.height, self.width, self.channels]
    }

    pub fn parameter_count(&self) -> usize {
        let k: usize = self.kernel.iter().product();
        let mut cin = self.channels;
        let mut n = 0;
        for &w in &self.widths {
            n += k * cin * w + 2 * w;
            cin = w;
        }
        n + cin * self.classes + self.classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout; `seed` keys the dropout masks.
    Train { seed: u64 },
    Eval,
}

/// Parameters and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub conv: Vec<Tensor>,
    pub gamma: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    pub step: u64,
}

pub const BN_MOMENTUM: f64 = 0.9;

/// Tape handles of one forward pass, in [`ModelState::parameters`] order.
pub struct ForwardPass {
    pub logits: Var,
    pub params: Vec<Var>,
    pub batch_stats: Vec<BatchStats>,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// He-normal conv and linear weights, unit BN scale, zero shifts and biases.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = rng::stream(seed, "init", &[]);
    let [kt, kh, kw] = config.kernel;
    let mut cin = config.channels;
    let mut state = ModelState {
        config: config.clone(),
        conv: Vec::new(),
        gamma: Vec::new(),
        beta: Vec::new(),
        running_mean: Vec::new(),
        running_var: Vec::new(),
        fc_weight: Tensor::scalar(0.0),
        fc_bias: Tensor::zeros(&[config.classes]),
        step: 0,
    };
    for &w in &config.widths {
        state.conv.push(he_normal(&[kt, kh, kw, cin, w], kt * kh * kw * cin, &mut rng));
        state.gamma.push(Tensor::full(&[w], 1.0));
        state.beta.push(Tensor::zeros(&[w]));
        state.running_mean.push(vec![0.0; w]);
        state.running_var.push(vec![1.0; w]);
        cin = w;
    }
    state.fc_weight = he_normal(&[cin, config.classes], cin, &mut rng);
    Ok(state)
}

impl ModelState {
    /// Every trainable tensor with its weight-decay flag (conv and linear
    /// weights decay; BN affine terms and biases do not).
    pub fn parameters(&self) -> Vec<(&Tensor, bool)> {
        let mut out = Vec::new();
        for i in 0..self.conv.len() {
            out.push((&self.conv[i], true));
            out.push((&self.gamma[i], false));
            out.push((&self.beta[i], false));
        }
        out.push((&self.fc_weight, true));
        out.push((&self.fc_bias, false));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for ((c, g), b) in self.conv.iter_mut().zip(&mut self.gamma).zip(&mut self.beta) {
            out.push(c);
            out.push(g);
            out.push(b);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(t, _)| t.len()).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let s = input.shape();
        let want = self.config.input_shape(s.first().copied().unwrap_or(0));
        if s != want {
            return Err(Error::shape(
                "model forward",
                format!("expected [N,{},{},{},{}], got {s:?}", want[1], want[2], want[3], want[4]),
            ));
        }
        Ok(s[0])
    }

    /// Logits for a batch of clips with values in [0, 255], recorded on `tape`.
    /// Does not touch running statistics; see [`update_running_stats`](Self::update_running_stats).
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, mode: Mode) -> Result<ForwardPass> {
        self.check_input(input)?;
        let scaled = input.data().iter().map(|v| v / 127.5 - 1.0).collect();
        let mut x = tape.constant(Tensor::new(input.shape().to_vec(), scaled)?);
        let mut params = Vec::new();
        let mut batch_stats = Vec::new();
        let conv = Conv3dParams::same(self.config.kernel);
        for i in 0..self.conv.len() {
            let k = tape.param(self.conv[i].clone());
            let g = tape.param(self.gamma[i].clone());
            let b = tape.param(self.beta[i].clone());
            params.extend([k, g, b]);
            x = tape.conv3d(x, k, conv)?;
            x = match mode {
                Mode::Train { .. } => {
                    let (y, stats) = tape.batchnorm_train(x, g, b)?;
                    batch_stats.push(stats);
                    y
                }
                Mode::Eval => tape.batchnorm_eval(x, g, b, &self.running_mean[i], &self.running_var[i])?,
            };
            x = tape.relu(x);
            x = tape.avgpool3d(x, self.config.pool)?;
        }
        x = tape.global_avgpool(x)?;
        if let Mode::Train { seed } = mode {
            if self.config.dropout > 0.0 {
                let layer_seed = rng::derive_seed(seed, "dropout", &[self.conv.len() as u64]);
                x = tape.dropout(x, self.config.dropout, layer_seed)?;
            }
        }
        let w = tape.param(self.fc_weight.clone());
        let b = tape.param(self.fc_bias.clone());
        params.extend([w, b]);
        let logits = tape.linear(x, w, b)?;
        Ok(ForwardPass {
            logits,
            params,
            batch_stats,
        })
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (i, s) in stats.iter().enumerate() {
            for (r, m) in self.running_mean[i].iter_mut().zip(&s.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in self.running_var[i].iter_mut().zip(&s.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }

    /// Eval-mode logits, row-major `[N, classes]`.
    pub fn logits(&self, input: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::no_grad();
        let pass = self.forward(&mut tape, input, Mode::Eval)?;
        let c = self.config.classes;
        Ok(tape.value(pass.logits).data().chunks(c).map(<[f64]>::to_vec).collect())
    }

    /// Eval-mode class distributions, one row per clip.
    pub fn predict_distribution(&self, input: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits(input)?.iter().map(|z| softmax(z)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorlab::{grad_check, Target};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            frames: 4,
            height: 4,
            width: 4,
            widths: vec![3, 4],
            classes: 3,
            ..ModelConfig::default()
        }
    }

    fn clips(config: &ModelConfig, n: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test-clips", &[]);
        let shape = config.input_shape(n);
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| r.gen_range(0.0..255.0)).collect()).unwrap()
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        let config = ModelConfig {
            frames: 4,
            height: 8,
            width: 8,
            widths: vec![4, 4, 4],
            ..ModelConfig::default()
        };
        let state = init_parameters(&config, 1).unwrap();
        let mut tape = Tape::new();
        let pass = state.forward(&mut tape, &clips(&config, 2, 2), Mode::Train { seed: 3 }).unwrap();
        assert_eq!(tape.value(pass.logits).shape(), &[2, 8]);
        assert_eq!(state.parameter_count(), config.parameter_count());
    }

    #[test]
    fn eval_forward_is_repeatable_and_side_effect_free() {
        let config = tiny();
        let state = init_parameters(&config, 1).unwrap();
        let before = state.clone();
        let x = clips(&config, 2, 4);
        assert_eq!(state.logits(&x).unwrap(), state.logits(&x).unwrap());
        assert_eq!(state, before);
    }

    #[test]
    fn rejects_mismatched_input() {
        let state = init_parameters(&tiny(), 1).unwrap();
        let bad = Tensor::zeros(&[1, 4, 4, 5, 3]);
        assert!(state.logits(&bad).is_err());
    }

    #[test]
    fn same_seed_same_state() {
        assert_eq!(init_parameters(&tiny(), 9).unwrap(), init_parameters(&tiny(), 9).unwrap());
        assert_ne!(init_parameters(&tiny(), 9).unwrap(), init_parameters(&tiny(), 10).unwrap());
    }

    #[test]
    fn conv_init_variance_is_he_scaled() {
        let config = ModelConfig {
            widths: vec![16, 32, 64],
            ..ModelConfig::default()
        };
        let state = init_parameters(&config, 5).unwrap();
        for (k, cin) in state.conv.iter().zip([3usize, 16, 32]) {
            assert!(k.len() >= 1000);
            let fan_in = 27 * cin;
            let mean = k.data().iter().sum::<f64>() / k.len() as f64;
            let var = k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k.len() as f64;
            let want = 2.0 / fan_in as f64;
            assert!((var - want).abs() < 0.2 * want, "var {var} vs {want}");
        }
        let pooled: Vec<f64> = state.conv.iter().flat_map(|k| {
            let fan_in = (k.shape()[3] * 27) as f64;
            k.data().iter().map(move |v| v / (2.0 / fan_in).sqrt())
        }).collect();
        assert!(pooled.len() >= 10_000);
        let var = pooled.iter().map(|v| v * v).sum::<f64>() / pooled.len() as f64;
        assert!((var - 1.0).abs() < 0.2);
    }

    #[test]
    fn neutral_gray_input_yields_bias() {
        let config = tiny();
        let mut state = init_parameters(&config, 2).unwrap();
        state.fc_bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        // 127.5 normalizes to exactly zero
        let x = Tensor::full(&config.input_shape(2), 127.5);
        for row in state.logits(&x).unwrap() {
            assert_eq!(row, vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn distribution_closed_form_and_normalization() {
        let config = tiny();
        let mut state = init_parameters(&config, 2).unwrap();
        state.fc_bias = Tensor::new(vec![3], vec![2f64.ln(), 0.0, 0.0]).unwrap();
        let x = Tensor::full(&config.input_shape(1), 127.5);
        let p = state.predict_distribution(&x).unwrap();
        assert!((p[0][0] - 2.0 / (2.0 + 3.0 - 1.0)).abs() < 1e-12);
        for row in state.predict_distribution(&clips(&config, 5, 8)).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn untrained_model_is_neither_uniform_nor_certain() {
        let config = ModelConfig {
            frames: 4,
            height: 8,
            width: 8,
            widths: vec![4, 8, 8],
            classes: 8,
            ..ModelConfig::default()
        };
        let state = init_parameters(&config, 3).unwrap();
        let p = state.predict_distribution(&clips(&config, 100, 9)).unwrap();
        let mean_max = p.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / 100.0;
        assert!(mean_max > 1.0 / 8.0 && mean_max < 1.0, "{mean_max}");
    }

    #[test]
    fn train_mode_loss_gradients_match_finite_differences() {
        let config = ModelConfig { dropout: 0.5, ..tiny() };
        let base = init_parameters(&config, 4).unwrap();
        let x = clips(&config, 3, 10);
        let targets = [Target::Class(0), Target::Class(2), Target::Class(1)];
        let inputs: Vec<Tensor> = base.parameters().into_iter().map(|(t, _)| t.clone()).collect();
        let report = grad_check(&ModelLoss { base: &base, x: &x, targets: &targets }, &inputs, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    struct ModelLoss<'a> {
        base: &'a ModelState,
        x: &'a Tensor,
        targets: &'a [Target],
    }

    impl ModelLoss<'_> {
        fn with(&self, inputs: &[Tensor]) -> ModelState {
            let mut s = self.base.clone();
            for (p, v) in s.parameters_mut().into_iter().zip(inputs) {
                *p = v.clone();
            }
            s
        }
    }

    impl crate::tensorlab::Differentiable for ModelLoss<'_> {
        fn value(&self, inputs: &[Tensor]) -> Result<f64> {
            let s = self.with(inputs);
            let mut tape = Tape::new();
            let pass = s.forward(&mut tape, self.x, Mode::Train { seed: 77 })?;
            let l = tape.softmax_cross_entropy(pass.logits, self.targets)?;
            Ok(tape.value(l).item())
        }
        fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
            let s = self.with(inputs);
            let mut tape = Tape::new();
            let pass = s.forward(&mut tape, self.x, Mode::Train { seed: 77 })?;
            let l = tape.softmax_cross_entropy(pass.logits, self.targets)?;
            let g = tape.backward(l)?;
            Ok(pass.params.iter().map(|v| g.get(*v).unwrap().clone()).collect())
        }
    }
}
