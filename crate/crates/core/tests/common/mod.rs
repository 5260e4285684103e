//! Finite-difference gradient checking shared by the integration tests.
#![allow(dead_code)]

use xmask::attack::AttackConfig;
use xmask::nn::{build_convnet, build_mlp, build_xunet, LayerSpec, ModelGraph, XUnetConfig};
use xmask::tensor::{rng_uniform, ConvGeometry, Precision, Rng, Tape, Tensor, Var};
use xmask::train::{xunet_loss, TrainConfig};
use xmask::Result;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Larger tensors are probed on a fixed random subset of coordinates.
const MAX_COORDS: usize = 48;

pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub loss: LossFn,
}

/// Norm-wise relative error `‖fd − an‖ / max(‖fd‖, ‖an‖)` between central
/// differences and the tape gradient, worst over all inputs.
pub fn gradient_error(case: &Case) -> f64 {
    let eval = |inputs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = (case.loss)(&mut tape, &vars).unwrap();
        let value = tape.value(loss).unwrap().item().unwrap();
        let g = tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| g.wrt(v).unwrap().clone()).collect())
    };
    let (_, analytic) = eval(&case.inputs);
    let mut worst: f64 = 0.0;
    let mut pick = Rng::new(5);
    for (k, an) in analytic.iter().enumerate() {
        let mut coords: Vec<usize> = (0..an.len()).collect();
        if coords.len() > MAX_COORDS {
            pick.shuffle(&mut coords);
            coords.truncate(MAX_COORDS);
        }
        let (mut diff, mut fd_norm, mut an_norm) = (0.0, 0.0, 0.0);
        for &j in &coords {
            let shifted = |d: f64| {
                let mut inputs = case.inputs.clone();
                inputs[k].data_mut()[j] += d;
                eval(&inputs).0
            };
            let fd = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            let a = an.data()[j];
            diff += (fd - a) * (fd - a);
            fd_norm += fd * fd;
            an_norm += a * a;
        }
        let scale = f64::max(fd_norm, an_norm).sqrt();
        let err = if scale == 0.0 { 0.0 } else { diff.sqrt() / scale };
        worst = worst.max(err);
    }
    worst
}

/// Uniform values in `[lo, hi]` kept at least 0.05 away from zero, so
/// kinked primitives are not probed at their kink.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let t = rng_uniform(rng, shape).map(|u| lo + (hi - lo) * u);
    t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

/// Weighted sum `Σ r ⊙ y` turning any output into a scalar.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y)?.shape().to_vec();
    let r = rng_uniform(&mut Rng::new(seed), &shape).map(|u| u - 0.3);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn unary(name: &'static str, x: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    Case {
        name,
        inputs: vec![x],
        loss: Box::new(move |t, v| {
            let y = f(t, v[0])?;
            project(t, y, 11)
        }),
    }
}

pub fn primitive_cases() -> Vec<Case> {
    let mut rng = Rng::new(2024);
    let x = away_from_zero(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let m = away_from_zero(&mut rng, &[3, 5], -1.0, 1.0);
    let mut cases = vec![
        unary("neg", m.clone(), |t, v| t.neg(v)),
        unary("scale", m.clone(), |t, v| t.scale(v, -1.7)),
        unary("add_scalar", m.clone(), |t, v| t.add_scalar(v, 0.3)),
        unary("relu", m.clone(), |t, v| t.relu(v)),
        unary("slu", m.clone(), |t, v| t.slu(v, 0.25)),
        unary("sigmoid", m.clone(), |t, v| t.sigmoid(v)),
        unary("exp", m.clone(), |t, v| t.exp(v)),
        unary("abs", m.clone(), |t, v| t.abs(v)),
        unary("sum", m.clone(), |t, v| t.sum(v)),
        unary("mean", m.clone(), |t, v| t.mean(v)),
        unary("reshape", m.clone(), |t, v| t.reshape(v, &[5, 3])),
        unary("log_softmax", m.clone(), |t, v| t.log_softmax(v)),
        unary("max_pool2d", x.clone(), |t, v| t.max_pool2d(v, 2, 2)),
        unary("repeat_channels", away_from_zero(&mut rng, &[2, 1, 3, 3], -1.0, 1.0), |t, v| t.repeat_channels(v, 3)),
    ];
    for (name, f) in [
        ("add", Tape::add as fn(&mut Tape, Var, Var) -> Result<Var>),
        ("sub", Tape::sub),
        ("mul", Tape::mul),
    ] {
        cases.push(Case {
            name,
            inputs: vec![m.clone(), away_from_zero(&mut rng, &[3, 5], -1.0, 1.0)],
            loss: Box::new(move |t, v| {
                let y = f(t, v[0], v[1])?;
                project(t, y, 12)
            }),
        });
    }
    cases.push(Case {
        name: "matmul",
        inputs: vec![m.clone(), away_from_zero(&mut rng, &[5, 4], -1.0, 1.0)],
        loss: Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 13)
        }),
    });
    cases.push(Case {
        name: "add_row_bias",
        inputs: vec![m.clone(), away_from_zero(&mut rng, &[5], -1.0, 1.0)],
        loss: Box::new(|t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            project(t, y, 14)
        }),
    });
    let conv = ConvGeometry::new(3, 2, 3, 1, 1);
    let (cw, cb) = LayerSpec::Conv2d { geometry: conv }.param_shapes().unwrap();
    cases.push(Case {
        name: "conv2d",
        inputs: vec![x.clone(), rng_uniform(&mut rng, &cw).map(|u| u - 0.5), rng_uniform(&mut rng, &cb)],
        loss: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), conv)?;
            project(t, y, 15)
        }),
    });
    let strided = ConvGeometry::new(3, 2, 2, 2, 0);
    cases.push(Case {
        name: "conv2d_strided",
        inputs: vec![x.clone(), rng_uniform(&mut rng, &[2, 3, 2, 2]).map(|u| u - 0.5)],
        loss: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], None, strided)?;
            project(t, y, 16)
        }),
    });
    let deconv = ConvGeometry::new(3, 2, 2, 2, 0);
    let (dw, db) = LayerSpec::Deconv2d { geometry: deconv }.param_shapes().unwrap();
    cases.push(Case {
        name: "deconv2d",
        inputs: vec![x.clone(), rng_uniform(&mut rng, &dw).map(|u| u - 0.5), rng_uniform(&mut rng, &db)],
        loss: Box::new(move |t, v| {
            let y = t.deconv2d(v[0], v[1], Some(v[2]), deconv)?;
            project(t, y, 17)
        }),
    });
    cases.push(Case {
        name: "concat_channels",
        inputs: vec![x.clone(), away_from_zero(&mut rng, &[2, 1, 4, 4], -1.0, 1.0)],
        loss: Box::new(|t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, 18)
        }),
    });
    cases.push(Case {
        name: "pick",
        inputs: vec![m.clone()],
        loss: Box::new(|t, v| {
            let y = t.pick(v[0], &[4, 0, 2])?;
            project(t, y, 19)
        }),
    });
    cases.push(Case {
        name: "clamp_between",
        inputs: vec![m.clone()],
        loss: Box::new(|t, v| {
            let lo = Tensor::full([3, 5], -0.5);
            let hi = Tensor::full([3, 5], 0.55);
            let y = t.clamp_between(v[0], &lo, &hi)?;
            project(t, y, 20)
        }),
    });
    cases.push(Case {
        name: "cross_entropy",
        inputs: vec![m],
        loss: Box::new(|t, v| t.cross_entropy(v[0], &[1, 4, 0])),
    });
    cases
}

/// Full-model losses with respect to every parameter and the input.
pub fn model_cases() -> Vec<Case> {
    let mut rng = Rng::new(77);
    let mlp = build_mlp(&[1, 4, 4], &[6, 5], 3, &mut rng, Precision::F64).unwrap();
    let convnet = build_convnet(&[2, 8, 8], 3, &mut rng, Precision::F64).unwrap();
    let xunet = build_xunet(
        &[1, 8, 8],
        &XUnetConfig {
            widths: [2, 3, 4],
            ..Default::default()
        },
        &mut rng,
        Precision::F64,
    )
    .unwrap();
    let xm = rng_uniform(&mut rng, &[2, 1, 4, 4]);
    let xc = rng_uniform(&mut rng, &[2, 2, 8, 8]);
    let xx = rng_uniform(&mut rng, &[2, 1, 8, 8]);
    let mut cases = vec![
        model_case("mlp cross-entropy", mlp.clone(), xm.clone(), |t, m, p, x| {
            let y = m.forward_on(t, p, x)?;
            t.cross_entropy(y, &[0, 2])
        }),
        model_case("convnet cross-entropy", convnet, xc, |t, m, p, x| {
            let y = m.forward_on(t, p, x)?;
            t.cross_entropy(y, &[1, 2])
        }),
        model_case("xunet mask", xunet, xx, |t, m, p, x| {
            let y = m.forward_on(t, p, x)?;
            project(t, y, 21)
        }),
    ];

    let classifier = mlp;
    let tiny = build_xunet(
        &[1, 4, 4],
        &XUnetConfig {
            widths: [2, 2, 3],
            ..Default::default()
        },
        &mut rng,
        Precision::F64,
    )
    .unwrap();
    let mix = rng_uniform(&mut rng, &[2, 1, 4, 4]);
    let data = xm;
    let cfg = TrainConfig {
        unroll: 1,
        attack: AttackConfig {
            epsilon: 0.2,
            alpha: 0.1,
            steps: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let inputs: Vec<Tensor> = tiny.params().iter().map(|p| p.tensor.clone()).collect();
    cases.push(Case {
        name: "xunet multi-task loss",
        inputs,
        loss: Box::new(move |t, v| {
            let xv = t.constant(data.clone());
            let mask = tiny.forward_on(t, v, xv)?;
            Ok(xunet_loss(t, &classifier, mask, &data, &[0, 2], &mix, &cfg)?.0)
        }),
    });
    cases
}

fn model_case(
    name: &'static str,
    model: ModelGraph,
    x: Tensor,
    f: fn(&mut Tape, &ModelGraph, &[Var], Var) -> Result<Var>,
) -> Case {
    let mut inputs: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
    inputs.push(x);
    Case {
        name,
        inputs,
        loss: Box::new(move |t, v| {
            let (params, x) = v.split_at(v.len() - 1);
            f(t, &model, params, x[0])
        }),
    }
}
