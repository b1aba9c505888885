use egocast_core::checkpoint::Checkpoint;
use egocast_core::forecaster::{forecast_loss, ForecastModel, ForecastOutput, ForecasterConfig, LossWeights};
use egocast_core::metrics::{auc, mpjpe, oracle_align, per_joint_error, HorizonCurve};
use egocast_core::pose::{
    derive_root, normalize_quaternion, BodyPose, HeadsetPose, PoseFrame, PoseSequence, RootRule, SkeletonSpec,
};
use egocast_core::seqio::{read_sequences_from, write_sequences_to};
use egocast_core::synth::{generate_sequence, MotionArchetype};
use egocast_core::tensor::{mean_pool_tokens, multi_head_self_attention, Adam, AdamConfig, AttentionParams, Tape, Tensor};
use proptest::prelude::*;
use std::path::Path;

fn coord() -> impl Strategy<Value = f64> {
    -3.0f64..3.0
}

fn vec3() -> impl Strategy<Value = [f64; 3]> {
    [coord(), coord(), coord()]
}

fn poses(frames: usize, joints: usize) -> impl Strategy<Value = Vec<BodyPose>> {
    prop::collection::vec(prop::collection::vec(vec3(), joints), frames)
        .prop_map(|fs| fs.into_iter().map(|j| BodyPose::new(j).unwrap()).collect())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
}

fn quat() -> impl Strategy<Value = [f64; 4]> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
        .prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-2)
}

fn three_joints() -> SkeletonSpec {
    SkeletonSpec::new(
        vec!["l".into(), "r".into(), "top".into()],
        RootRule::Mean(vec!["l".into(), "r".into()]),
    )
    .unwrap()
}

fn output(body: Vec<BodyPose>, translation: Vec<[f64; 3]>, rotation: Vec<[f64; 4]>) -> ForecastOutput {
    ForecastOutput {
        body,
        translation,
        rotation: rotation.into_iter().map(|q| normalize_quaternion(q).unwrap().as_array()).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(rows in 1usize..5, cols in 1usize..7, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_add(i as u64) % 997) as f64 / 97.0) - 5.0).collect();
        let x = Tensor::new(vec![rows, cols], data.clone()).unwrap();
        let shifted = Tensor::new(vec![rows, cols], data.iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(&x), tape.leaf(&shifted));
        let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
        for r in 0..rows {
            let row = &tape.value(sa)[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (u, v) in tape.value(sa).iter().zip(tape.value(sb)) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(
        x in matrix(4, 6),
        w in prop::collection::vec(matrix(6, 6), 4),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        heads in prop::sample::select(vec![1usize, 2, 3, 6]),
    ) {
        let xt = Tensor::new(vec![4, 6], x.clone()).unwrap();
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| x[r * 6..(r + 1) * 6].to_vec()).collect();
        let xp = Tensor::new(vec![4, 6], permuted).unwrap();
        let ws: Vec<Tensor> = w.iter().map(|m| Tensor::new(vec![6, 6], m.clone()).unwrap()).collect();
        let mut tape = Tape::new();
        let params = AttentionParams {
            query: tape.leaf(&ws[0]),
            key: tape.leaf(&ws[1]),
            value: tape.leaf(&ws[2]),
            output: tape.leaf(&ws[3]),
        };
        let (a, b) = (tape.leaf(&xt), tape.leaf(&xp));
        let ya = multi_head_self_attention(&mut tape, a, &params, heads).unwrap();
        let yb = multi_head_self_attention(&mut tape, b, &params, heads).unwrap();
        let (ya, yb) = (tape.value(ya), tape.value(yb));
        prop_assert!(ya.iter().all(|v| v.is_finite()));
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..6 {
                prop_assert!((yb[i * 6 + c] - ya[r * 6 + c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mean_pool_ignores_token_order(x in matrix(5, 3), perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle()) {
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| x[r * 3..(r + 1) * 3].to_vec()).collect();
        let (a, b) = (Tensor::new(vec![5, 3], x).unwrap(), Tensor::new(vec![5, 3], permuted).unwrap());
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let (pa, pb) = (mean_pool_tokens(&mut tape, va).unwrap(), mean_pool_tokens(&mut tape, vb).unwrap());
        for (u, v) in tape.value(pa).iter().zip(tape.value(pb)) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_with_zero_gradients_keeps_parameters(data in matrix(3, 2), lr in 1e-5f64..1e-1, steps in 1usize..5) {
        let mut params = egocast_core::tensor::ParamSet::new();
        params.add("w", Tensor::param(vec![3, 2], data.clone()).unwrap());
        let mut adam = Adam::new(AdamConfig::with_lr(lr), &params);
        for _ in 0..steps {
            params.zero_grad();
            params.by_name_mut("w").unwrap().accumulate_grad(&[0.0; 6]).unwrap();
            adam.step(&mut params).unwrap();
        }
        prop_assert_eq!(params.by_name("w").unwrap().data(), &data[..]);
    }

    #[test]
    fn mpjpe_is_symmetric_and_matches_per_joint_mean(pred in poses(3, 4), gt in poses(3, 4)) {
        let ab = mpjpe(&pred, &gt).unwrap();
        prop_assert_eq!(ab, mpjpe(&gt, &pred).unwrap());
        let per_joint = per_joint_error(&pred, &gt).unwrap();
        prop_assert!((per_joint.iter().sum::<f64>() / 4.0 - ab).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_costs_its_length(gt in poses(2, 5), d in vec3()) {
        let shifted: Vec<BodyPose> = gt.iter().map(|b| b.translated(d)).collect();
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() * 100.0;
        let err = mpjpe(&shifted, &gt).unwrap();
        prop_assert!((err - norm).abs() <= 1e-9 * norm.max(1.0), "{} vs {}", err, norm);
    }

    #[test]
    fn auc_is_linear_and_exact_on_flat_curves(
        ys in prop::collection::vec(0.0f64..200.0, 2..8),
        zs in prop::collection::vec(0.0f64..200.0, 8),
        a in 0.0f64..3.0,
        b in 0.0f64..3.0,
        level in 0.0f64..500.0,
    ) {
        let hs: Vec<f64> = (0..ys.len()).map(|i| 0.5 + i as f64 * 0.75).collect();
        let curve = |vals: Vec<f64>| HorizonCurve::new(hs.iter().copied().zip(vals).collect()).unwrap();
        let zs = &zs[..ys.len()];
        let mixed: Vec<f64> = ys.iter().zip(zs).map(|(y, z)| a * y + b * z).collect();
        let lhs = auc(&curve(mixed)).unwrap();
        let rhs = a * auc(&curve(ys.clone())).unwrap() + b * auc(&curve(zs.to_vec())).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
        prop_assert_eq!(auc(&curve(vec![level; ys.len()])).unwrap(), level);
    }

    #[test]
    fn oracle_alignment_lands_on_ground_truth_root(pred in poses(4, 3), gt in poses(4, 3), shifts in prop::collection::vec(vec3(), 4)) {
        let skel = three_joints();
        let out = output(pred, vec![[0.0; 3]; 4], vec![[1.0, 0.0, 0.0, 0.0]; 4]);
        let aligned = oracle_align(&out, &gt, &skel).unwrap();
        for (p, g) in aligned.body.iter().zip(&gt) {
            let (rp, rg) = (derive_root(p, &skel), derive_root(g, &skel));
            for i in 0..3 {
                prop_assert!((rp[i] - rg[i]).abs() < 1e-12);
            }
        }

        let moved: Vec<BodyPose> = gt.iter().zip(&shifts).map(|(g, d)| g.translated(*d)).collect();
        let out = output(moved, vec![[0.0; 3]; 4], vec![[1.0, 0.0, 0.0, 0.0]; 4]);
        let aligned = oracle_align(&out, &gt, &skel).unwrap();
        prop_assert!(mpjpe(&aligned.body, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn forecast_loss_is_zero_only_on_a_match(
        body in poses(3, 2),
        other in poses(3, 2),
        t in prop::collection::vec(vec3(), 3),
        q in prop::collection::vec(quat(), 3),
    ) {
        let w = LossWeights::default();
        let gt = output(body.clone(), t.clone(), q.clone());
        prop_assert_eq!(forecast_loss(&gt, &gt, &w).unwrap(), 0.0);

        let mut flipped = gt.clone();
        flipped.rotation.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = -*v));
        prop_assert_eq!(forecast_loss(&gt, &flipped, &w).unwrap(), 0.0);

        let wrong = output(other.clone(), t, q);
        let l = forecast_loss(&wrong, &gt, &w).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, other == body);
    }

    #[test]
    fn sequences_survive_a_file_round_trip(
        headsets in prop::collection::vec((vec3(), quat()), 1..6),
        bodies in poses(6, 3),
        withheld in prop::collection::vec(any::<bool>(), 6),
        feature in prop::collection::vec(-1.0f64..1.0, 0..4),
    ) {
        let frames: Vec<PoseFrame> = headsets
            .iter()
            .enumerate()
            .map(|(i, (p, q))| PoseFrame {
                index: i,
                timestamp: i as f64 / 30.0,
                headset: HeadsetPose { position: *p, rotation: normalize_quaternion(*q).unwrap() },
                body: (!withheld[i]).then(|| bodies[i].clone()),
                visual_feature: (!feature.is_empty()).then(|| feature.clone()),
            })
            .collect();
        let seq = PoseSequence::new(three_joints(), frames, Some("walk".into())).unwrap();
        let mut bytes = Vec::new();
        write_sequences_to(&mut bytes, std::slice::from_ref(&seq)).unwrap();
        let back = read_sequences_from(&bytes[..], Path::new("mem")).unwrap();
        prop_assert_eq!(back, vec![seq]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_save_load_save_is_identical(seed in any::<u64>(), steps in 0u64..3) {
        let config = ForecasterConfig {
            window: 3,
            horizon: 2,
            width: 8,
            layers: 1,
            heads: 2,
            head_hidden: 8,
            seed,
            ..ForecasterConfig::default()
        };
        let mut model = ForecastModel::new(config, three_joints()).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3), model.params());
        for _ in 0..steps {
            model.params_mut().zero_grad();
            for (_, t) in model.params_mut().iter_mut() {
                let g: Vec<f64> = t.data().iter().map(|v| v.sin()).collect();
                t.accumulate_grad(&g).unwrap();
            }
            adam.step(model.params_mut()).unwrap();
        }
        let bytes = Checkpoint::from_forecaster(&model, &adam).unwrap().to_bytes().unwrap();
        let (restored, adam2) = Checkpoint::from_bytes(&bytes).unwrap().into_forecaster(None).unwrap();
        let again = Checkpoint::from_forecaster(&restored, &adam2).unwrap().to_bytes().unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn generated_motion_keeps_its_invariants(
        kind in 0usize..3,
        seed in any::<u64>(),
        fps in prop::sample::select(vec![10.0f64, 25.0, 30.0]),
    ) {
        let arch = [MotionArchetype::stand(), MotionArchetype::walk(), MotionArchetype::reach()][kind];
        let skel = SkeletonSpec::body21();
        let seq = generate_sequence(&arch, &skel, 2.0, fps, seed).unwrap();
        prop_assert_eq!(&seq, &generate_sequence(&arch, &skel, 2.0, fps, seed).unwrap());

        let head = skel.index_of("head").unwrap();
        let offset = |f: &PoseFrame| {
            let h = f.body.as_ref().unwrap().joints()[head];
            [f.headset.position[0] - h[0], f.headset.position[1] - h[1], f.headset.position[2] - h[2]]
        };
        let first = offset(&seq.frames()[0]);
        for (i, f) in seq.frames().iter().enumerate() {
            prop_assert_eq!(f.timestamp, i as f64 / fps);
            let q = f.headset.rotation.as_array();
            prop_assert!(q[0] >= 0.0);
            prop_assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            let o = offset(f);
            for k in 0..3 {
                prop_assert!((o[k] - first[k]).abs() < 1e-9);
            }
        }
    }
}
