mod common;

use common::*;
use egocast_core::forecaster::ForecastModel;
use egocast_core::pose::{build_forecast_token, normalize_quaternion, BodyPose, ForecastToken};
use egocast_core::tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (i, (name, case)) in op_cases().iter().enumerate() {
        let err = run_case(case, i as u64).unwrap();
        if !(err < TOL) {
            failures.push(format!("{name}: {err:e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn estimator_loss_path() {
    for seed in 0..3 {
        let err = estimator_path_error(seed).unwrap();
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn forecaster_loss_path() {
    for seed in 0..3 {
        let err = forecaster_path_error(seed).unwrap();
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn backward_twice_gives_equal_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 4]);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.softmax(v, 1).unwrap();
    let g = tape.gelu(s);
    let loss = tape.sum(g);
    let a = tape.backward(loss).unwrap();
    let b = tape.backward(loss).unwrap();
    assert_eq!(a.get(v), b.get(v));
}

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<ForecastToken> {
    (0..n)
        .map(|_| {
            let body = BodyPose::from_flat(&random(rng, &[6]).into_data()).unwrap();
            let q = normalize_quaternion(random(rng, &[4]).into_data().try_into().unwrap()).unwrap();
            let p = random(rng, &[3]).into_data();
            build_forecast_token(&body, [p[0], p[1], p[2]], q.as_array()).unwrap()
        })
        .collect()
}

#[test]
fn pooled_encoding_is_permutation_invariant_without_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = ForecastModel::new(tiny_forecaster_config(1), two_joint_skeleton()).unwrap();
    let toks = tokens(&mut rng, 3);
    let permuted = vec![toks[2].clone(), toks[0].clone(), toks[1].clone()];
    let with_pos = (model.pooled(&toks).unwrap(), model.pooled(&permuted).unwrap());
    assert!(with_pos.0.iter().zip(&with_pos.1).any(|(a, b)| (a - b).abs() > 1e-9));

    model
        .params_mut()
        .by_name_mut("positional")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let a = model.pooled(&toks).unwrap();
    let b = model.pooled(&permuted).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}
