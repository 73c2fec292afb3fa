//! Finite-difference checks over every differentiable op and the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{init_parameters, Mode, ModelConfig, ModelState};
use crate::tensorlab::{grad_check, Conv3dParams, Differentiable, GradCheckReport, LossTerm, Tape, TapeFn, Target, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Moves values off the relu kink so a central difference cannot straddle it.
fn off_kink(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v += 0.01;
        }
    }
    t
}

/// Fixed random projection to a scalar.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..tape.value(v).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.weighted_sum(v, w)
}

/// Loss of a tiny model as a function of its parameters, in train mode with
/// dropout active.
struct ModelLoss {
    base: ModelState,
    input: Tensor,
    targets: Vec<LossTerm>,
    seed: u64,
}

impl ModelLoss {
    fn run(&self, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut state = self.base.clone();
        for (slot, p) in state.parameters_mut().into_iter().zip(params) {
            *slot = p.clone();
        }
        let mut tape = Tape::new();
        let pass = state.forward(&mut tape, &self.input, Mode::Train { seed: self.seed })?;
        let loss = tape.cross_entropy_terms(pass.logits, &self.targets)?;
        Ok((tape, pass.params, loss))
    }
}

impl Differentiable for ModelLoss {
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        let (tape, _, loss) = self.run(inputs)?;
        Ok(tape.value(loss).item())
    }

    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let (tape, vars, loss) = self.run(inputs)?;
        let grads = tape.backward(loss)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }
}

fn check(name: &'static str, op: &impl Differentiable, inputs: &[Tensor], eps: f64, tol: f64) -> Result<SuiteCase> {
    Ok(SuiteCase {
        name,
        report: grad_check(op, inputs, eps, tol)?,
    })
}

/// Runs every case; a case that fails its tolerance is reported, not raised.
pub fn run(eps: f64, tol: f64) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    let conv = TapeFn(|t: &mut Tape, v: &[Var]| {
        let params = Conv3dParams {
            stride: [1, 2, 1],
            padding: [1, 1, 0],
        };
        let y = t.conv3d(v[0], v[1], params)?;
        project(t, y, 7)
    });
    out.push(check("conv3d", &conv, &[random(&[2, 3, 4, 3, 2], 2), random(&[2, 3, 2, 2, 3], 3)], eps, tol)?);
    let conv_same = TapeFn(|t: &mut Tape, v: &[Var]| {
        let y = t.conv3d(v[0], v[1], Conv3dParams::same([3, 3, 3]))?;
        project(t, y, 8)
    });
    out.push(check("conv3d_same", &conv_same, &[random(&[1, 3, 4, 4, 2], 4), random(&[3, 3, 3, 2, 2], 5)], eps, tol)?);

    let bn_inputs = [random(&[3, 2, 2, 2, 2], 7), random(&[2], 8), random(&[2], 9)];
    let bn_train = TapeFn(|t: &mut Tape, v: &[Var]| {
        let (y, _) = t.batchnorm_train(v[0], v[1], v[2])?;
        project(t, y, 11)
    });
    out.push(check("batchnorm_train", &bn_train, &bn_inputs, eps, tol)?);
    let bn_eval = TapeFn(|t: &mut Tape, v: &[Var]| {
        let y = t.batchnorm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[0.5, 2.0])?;
        project(t, y, 12)
    });
    out.push(check("batchnorm_eval", &bn_eval, &bn_inputs, eps, tol)?);

    let relu = TapeFn(|t: &mut Tape, v: &[Var]| {
        let y = t.relu(v[0]);
        project(t, y, 5)
    });
    out.push(check("relu", &relu, &[off_kink(random(&[30], 15))], eps, tol)?);

    let pool_input = [random(&[2, 2, 4, 4, 3], 11)];
    let avg = TapeFn(|t: &mut Tape, v: &[Var]| {
        let y = t.avgpool3d(v[0], [1, 2, 2])?;
        project(t, y, 1)
    });
    out.push(check("avgpool3d", &avg, &pool_input, eps, tol)?);
    let max = TapeFn(|t: &mut Tape, v: &[Var]| {
        let y = t.maxpool3d(v[0], [2, 2, 1])?;
        project(t, y, 2)
    });
    out.push(check("maxpool3d", &max, &pool_input, eps, tol)?);
    let global = TapeFn(|t: &mut Tape, v: &[Var]| {
        let y = t.global_avgpool(v[0])?;
        project(t, y, 3)
    });
    out.push(check("global_avgpool", &global, &pool_input, eps, tol)?);

    let dense_inputs = [random(&[3, 5], 12), random(&[5, 4], 13), random(&[4], 14)];
    let linear = TapeFn(|t: &mut Tape, v: &[Var]| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, 4)
    });
    out.push(check("linear", &linear, &dense_inputs, eps, tol)?);
    let dropout = TapeFn(|t: &mut Tape, v: &[Var]| {
        let y = t.dropout(v[0], 0.5, 99)?;
        project(t, y, 6)
    });
    out.push(check("dropout", &dropout, &dense_inputs[..1], eps, tol)?);
    let scale_add = TapeFn(|t: &mut Tape, v: &[Var]| {
        let s = t.scale(v[0], -1.7);
        let y = t.add(s, v[1])?;
        project(t, y, 9)
    });
    out.push(check("scale_add", &scale_add, &[random(&[4, 3], 16), random(&[4, 3], 17)], eps, tol)?);
    let weighted = TapeFn(|t: &mut Tape, v: &[Var]| t.weighted_sum(v[0], vec![0.5, -2.0, 1.5, 3.0]));
    out.push(check("weighted_sum", &weighted, &[random(&[4], 18)], eps, tol)?);

    let ce_hard = TapeFn(|t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &[Target::Class(1), Target::Class(3), Target::Class(0)]));
    out.push(check("cross_entropy_hard", &ce_hard, &[random(&[3, 4], 10)], eps, tol)?);
    let ce_terms = TapeFn(|t: &mut Tape, v: &[Var]| {
        t.cross_entropy_terms(
            v[0],
            &[
                LossTerm {
                    row: 0,
                    target: Target::Class(1),
                    weight: 0.5,
                },
                LossTerm {
                    row: 2,
                    target: Target::Soft(vec![0.2, 0.3, 0.1, 0.4]),
                    weight: 1.5,
                },
            ],
        )
    });
    out.push(check("cross_entropy_weighted_soft", &ce_terms, &[random(&[3, 4], 19)], eps, tol)?);

    let cfg = ModelConfig {
        frames: 2,
        height: 4,
        width: 4,
        widths: vec![3, 4],
        kernel: [3, 3, 3],
        classes: 3,
        dropout: 0.5,
        ..Default::default()
    };
    let base = init_parameters(&cfg, 21)?;
    let mut input = random(&cfg.input_shape(3), 22);
    for v in input.data_mut() {
        *v = (*v + 1.0) * 127.5;
    }
    let model = ModelLoss {
        targets: (0..3)
            .map(|r| LossTerm {
                row: r,
                target: if r == 1 {
                    Target::Soft(vec![0.6, 0.3, 0.1])
                } else {
                    Target::Class(r)
                },
                weight: 1.0 / 3.0,
            })
            .collect(),
        input,
        seed: 5,
        base: base.clone(),
    };
    let params: Vec<Tensor> = base.parameters().iter().map(|(t, _)| (*t).clone()).collect();
    out.push(check("model_end_to_end", &model, &params, eps, tol)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let cases = run(EPS, TOLERANCE).unwrap();
        assert!(cases.len() >= 15);
        for c in &cases {
            assert!(c.report.passed, "{}: {:?}", c.name, c.report);
            assert!(c.report.checked > 0);
        }
    }
}
