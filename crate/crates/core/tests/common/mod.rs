//! Gradient-check cases shared by the gradient tests and the acceptance suite.

#![allow(dead_code)]

use egocast_core::estimator::{CurrentFrameModel, EstimatorConfig, EstimatorSample};
use egocast_core::forecaster::{ForecastModel, ForecastSample, ForecasterConfig};
use egocast_core::pose::{build_forecast_token, normalize_quaternion, BodyPose, RootRule, SkeletonSpec};
use egocast_core::tensor::{
    finite_diff_check, finite_diff_check_params, multi_head_self_attention, AttentionParams, Encoder, ParamSet,
    Tape, Tensor, Var,
};
use egocast_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const TRIALS: u64 = 20;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output coordinate gets a distinct weight.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(&mut rng, &shape);
    let w = tape.constant(shape, w.into_data())?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Case = Box<dyn Fn(&mut ChaCha8Rng, u64) -> Result<f64>>;

/// Checks `op` on one random input of `shape`, with `aux` random constants drawn per trial.
fn unary(shape: &'static [usize], aux: &'static [&'static [usize]], op: fn(&mut Tape, Var, &[Var]) -> Result<Var>) -> Case {
    Box::new(move |rng, seed| {
        let x = random(rng, shape);
        let consts: Vec<Tensor> = aux.iter().map(|s| random(rng, s)).collect();
        finite_diff_check(
            |tape, v| {
                let cs = consts
                    .iter()
                    .map(|c| tape.constant(c.shape().to_vec(), c.data().to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                let y = op(tape, v, &cs)?;
                weighted_sum(tape, y, seed)
            },
            &x,
            EPS,
        )
    })
}

fn attention_case(rng: &mut ChaCha8Rng, seed: u64, which: usize) -> Result<f64> {
    let tensors: Vec<Tensor> = (0..5).map(|i| random(rng, if i == 0 { &[3, 4] } else { &[4, 4] })).collect();
    finite_diff_check(
        |tape, v| {
            let mut vars = tensors
                .iter()
                .map(|t| tape.constant(t.shape().to_vec(), t.data().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            vars[which] = v;
            let p = AttentionParams {
                query: vars[1],
                key: vars[2],
                value: vars[3],
                output: vars[4],
            };
            let y = multi_head_self_attention(tape, vars[0], &p, 2)?;
            weighted_sum(tape, y, seed)
        },
        &tensors[which],
        EPS,
    )
}

/// Every differentiable op, by name. Each case runs on one random input per call.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    let mut cases: Vec<(&'static str, Case)> = vec![
        ("matmul (left)", unary(&[3, 4], &[&[4, 2]], |t, x, c| t.matmul(x, c[0]))),
        ("matmul (right)", unary(&[4, 2], &[&[3, 4]], |t, x, c| t.matmul(c[0], x))),
        ("add", unary(&[2, 3], &[&[2, 3]], |t, x, c| t.add(x, c[0]))),
        ("sub (left)", unary(&[2, 3], &[&[2, 3]], |t, x, c| t.sub(x, c[0]))),
        ("sub (right)", unary(&[2, 3], &[&[2, 3]], |t, x, c| t.sub(c[0], x))),
        ("mul", unary(&[2, 3], &[&[2, 3]], |t, x, c| t.mul(x, c[0]))),
        ("mul (self)", unary(&[2, 3], &[], |t, x, _| t.mul(x, x))),
        ("scale", unary(&[5], &[], |t, x, _| Ok(t.scale(x, -1.7)))),
        ("add_bias (input)", unary(&[3, 4], &[&[4]], |t, x, c| t.add_bias(x, c[0]))),
        ("add_bias (bias)", unary(&[4], &[&[3, 4]], |t, x, c| t.add_bias(c[0], x))),
        ("gelu", unary(&[2, 5], &[], |t, x, _| Ok(t.gelu(x)))),
        ("softmax (last axis)", unary(&[3, 4], &[], |t, x, _| t.softmax(x, 1))),
        ("softmax (axis 0)", unary(&[3, 4], &[], |t, x, _| t.softmax(x, 0))),
        ("layer_norm (input)", unary(&[3, 5], &[&[5], &[5]], |t, x, c| t.layer_norm(x, c[0], c[1], 1e-5))),
        ("layer_norm (gamma)", unary(&[5], &[&[3, 5], &[5]], |t, x, c| t.layer_norm(c[0], x, c[1], 1e-5))),
        ("layer_norm (beta)", unary(&[5], &[&[3, 5], &[5]], |t, x, c| t.layer_norm(c[0], c[1], x, 1e-5))),
        ("transpose", unary(&[3, 4], &[], |t, x, _| t.transpose(x))),
        ("slice_last", unary(&[3, 6], &[], |t, x, _| t.slice_last(x, 2, 3))),
        ("concat_last", unary(&[3, 2], &[&[3, 4]], |t, x, c| t.concat_last(&[c[0], x, c[0]]))),
        ("slice_rows", unary(&[5, 3], &[], |t, x, _| t.slice_rows(x, 1, 3))),
        ("concat_rows", unary(&[2, 3], &[&[4, 3]], |t, x, c| t.concat_rows(&[x, c[0], x]))),
        ("mean_rows", unary(&[4, 3], &[], |t, x, _| t.mean_rows(x))),
        ("reshape", unary(&[2, 6], &[], |t, x, _| t.reshape(x, vec![3, 4]))),
        ("sum", unary(&[2, 3], &[], |t, x, _| Ok(t.sum(x)))),
        ("mean", unary(&[2, 3], &[], |t, x, _| Ok(t.mean(x)))),
        ("normalize_last", unary(&[3, 4], &[], |t, x, _| Ok(t.normalize_last(x)))),
    ];
    // L1 is kinked at ties: targets sit at least 0.1 away from every prediction
    cases.push((
        "l1_loss (prediction)",
        Box::new(|rng, _| {
            let x = random(rng, &[3, 4]);
            let target: Vec<f64> = x
                .data()
                .iter()
                .map(|v| v + if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.1..1.0))
                .collect();
            finite_diff_check(
                |tape, v| {
                    let t = tape.constant(vec![3, 4], target.clone())?;
                    tape.l1_loss(v, t)
                },
                &x,
                EPS,
            )
        }),
    ));
    cases.push((
        "l1_loss (target)",
        Box::new(|rng, _| {
            let x = random(rng, &[6]);
            let pred: Vec<f64> = x.data().iter().map(|v| v - 0.5 - rng.random_range(0.0..1.0)).collect();
            finite_diff_check(
                |tape, v| {
                    let p = tape.constant(vec![6], pred.clone())?;
                    tape.l1_loss(p, v)
                },
                &x,
                EPS,
            )
        }),
    ));
    for (name, which) in [
        ("attention (input)", 0),
        ("attention (query)", 1),
        ("attention (key)", 2),
        ("attention (value)", 3),
        ("attention (output)", 4),
    ] {
        cases.push((name, Box::new(move |rng, seed| attention_case(rng, seed, which))));
    }
    cases.push((
        "encoder stack (parameters)",
        Box::new(|rng, seed| {
            let mut params = ParamSet::new();
            let enc = Encoder::new(&mut params, "enc", 4, 2, 2, rng);
            perturb(&mut params, rng);
            let x = random(rng, &[3, 4]);
            finite_diff_check_params(
                |tape, bound| {
                    let v = tape.constant(vec![3, 4], x.data().to_vec())?;
                    let y = enc.forward(tape, bound, v)?;
                    weighted_sum(tape, y, seed)
                },
                &params,
                EPS,
            )
        }),
    ));
    cases
}

/// Moves layer-norm gains and zero-initialized biases off their initial values
/// so the check does not run at a special point.
pub fn perturb(params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
}

/// Max relative error of `op` over [`TRIALS`] random inputs.
pub fn run_case(case: &Case, base_seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let seed = base_seed * 1000 + trial;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        worst = worst.max(case(&mut rng, seed)?);
    }
    Ok(worst)
}

pub fn two_joint_skeleton() -> SkeletonSpec {
    SkeletonSpec::new(vec!["hip".into(), "head".into()], RootRule::Joint("hip".into())).unwrap()
}

pub fn tiny_estimator_config(seed: u64) -> EstimatorConfig {
    EstimatorConfig {
        window: 3,
        width: 8,
        layers: 1,
        heads: 2,
        head_hidden: 8,
        visual_dim: 2,
        seed,
        ..EstimatorConfig::default()
    }
}

pub fn tiny_forecaster_config(seed: u64) -> ForecasterConfig {
    ForecasterConfig {
        window: 3,
        horizon: 2,
        width: 8,
        layers: 1,
        heads: 2,
        head_hidden: 8,
        seed,
        ..ForecasterConfig::default()
    }
}

/// Full estimator loss path (input projection, encoder, fusion head, L1) on a tiny config.
pub fn estimator_path_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CurrentFrameModel::new(tiny_estimator_config(seed), two_joint_skeleton())?;
    perturb(model.params_mut(), &mut rng);
    let samples: Vec<EstimatorSample> = [3usize, 2]
        .iter()
        .map(|&w| EstimatorSample {
            rel_window: random(&mut rng, &[w * 3]).into_data(),
            feature: random(&mut rng, &[2]).into_data(),
            target: random(&mut rng, &[6]).into_data().iter().map(|v| v * 5.0).collect(),
        })
        .collect();
    let refs: Vec<&EstimatorSample> = samples.iter().collect();
    finite_diff_check_params(|tape, bound| model.batch_loss(tape, bound, &refs), model.params(), EPS)
}

/// Full forecaster loss path (projection, encoder, pooling, head, composite L1) on a tiny config.
pub fn forecaster_path_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ForecastModel::new(tiny_forecaster_config(seed), two_joint_skeleton())?;
    perturb(model.params_mut(), &mut rng);
    let token = |rng: &mut ChaCha8Rng| {
        let body = BodyPose::from_flat(&random(rng, &[6]).into_data()).unwrap();
        let q = normalize_quaternion(random(rng, &[4]).into_data().try_into().unwrap()).unwrap();
        let p = random(rng, &[3]).into_data();
        build_forecast_token(&body, [p[0], p[1], p[2]], q.as_array()).unwrap()
    };
    let samples: Vec<ForecastSample> = [3usize, 1]
        .iter()
        .map(|&w| {
            let tokens = (0..w).map(|_| token(&mut rng)).collect();
            let future = (0..2).flat_map(|_| token(&mut rng).as_slice().to_vec()).map(|v| v * 3.0).collect();
            ForecastSample { tokens, future }
        })
        .collect();
    let refs: Vec<&ForecastSample> = samples.iter().collect();
    finite_diff_check_params(|tape, bound| model.batch_loss(tape, bound, &refs), model.params(), EPS)
}
