//! Current-frame body pose estimation from headset translations and a visual feature.
//!
//! The window of headset positions is expressed relative to the current
//! (last) position, projected to the encoder width, offset by learned
//! positional embeddings indexed from the window's end, and encoded. The
//! last token's output is concatenated with the visual feature and a
//! two-layer perceptron regresses the joints, again relative to the current
//! headset position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{past_window, BodyPose, PoseFrame, PoseSequence, SkeletonSpec};
use crate::provider::VisualFeatureProvider;
use crate::tensor::{init_normal, Adam, AdamConfig, Bound, Encoder, Linear, ParamId, ParamSet, Tape, Var};
use crate::training::{batch_rng, optimizer_step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Past window length `k` in frames.
    pub window: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the fusion perceptron.
    pub head_hidden: usize,
    pub visual_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window: 20,
            width: 64,
            layers: 2,
            heads: 4,
            head_hidden: 512,
            visual_dim: 256,
            lr: 1e-4,
            batch_size: 24,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    /// Full-size architecture and schedule.
    pub fn paper_scale() -> Self {
        Self {
            width: 256,
            layers: 3,
            heads: 8,
            iterations: 200_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("estimator window must be at least 1".into()));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "estimator width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.head_hidden == 0 || self.visual_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "head_hidden, visual_dim and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Whether a checkpoint trained under `self` can be loaded for `other`.
    /// The iteration budget is a schedule, not part of the model, and may differ.
    pub fn compatible_with(&self, other: &Self) -> bool {
        Self {
            iterations: other.iterations,
            ..self.clone()
        } == *other
    }

    /// Equal in every field that shapes the network, ignoring optimizer and seed.
    pub fn same_architecture(&self, other: &Self) -> bool {
        (self.window, self.width, self.layers, self.heads, self.head_hidden, self.visual_dim)
            == (other.window, other.width, other.layers, other.heads, other.head_hidden, other.visual_dim)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    input: Linear,
    positional: ParamId,
    encoder: Encoder,
    fuse: Linear,
    out: Linear,
}

impl Layout {
    fn build<R: Rng>(config: &EstimatorConfig, joints: usize, params: &mut ParamSet, rng: &mut R) -> Self {
        let d = config.width;
        let input = Linear::new(params, "input", 3, d, rng);
        let positional = params.add("positional", init_normal(rng, vec![config.window, d], 0.02));
        let encoder = Encoder::new(params, "encoder", d, config.layers, config.heads, rng);
        let fuse = Linear::new(params, "head.fuse", d + config.visual_dim, config.head_hidden, rng);
        let out = Linear::new(params, "head.out", config.head_hidden, 3 * joints, rng);
        Self {
            input,
            positional,
            encoder,
            fuse,
            out,
        }
    }
}

/// One supervised example: relative window, visual feature and relative target pose.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSample {
    /// `w × 3` headset positions minus the current position.
    pub rel_window: Vec<f64>,
    pub feature: Vec<f64>,
    /// `3J` joint coordinates minus the current headset position.
    pub target: Vec<f64>,
}

fn relative_window(window: &[PoseFrame]) -> Vec<f64> {
    let p = window.last().expect("window is non-empty").headset.position;
    window
        .iter()
        .flat_map(|f| {
            let q = f.headset.position;
            [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
        })
        .collect()
}

impl EstimatorSample {
    pub fn from_frame(
        seq: &PoseSequence,
        t: usize,
        window: usize,
        provider: &dyn VisualFeatureProvider,
    ) -> Result<Self> {
        let w = past_window(seq, t, window)?;
        let body = seq.body_at(t)?;
        let p = w.last().expect("non-empty").headset.position;
        Ok(Self {
            rel_window: relative_window(w),
            feature: provider.feature(w)?,
            target: body
                .joints()
                .iter()
                .flat_map(|j| [j[0] - p[0], j[1] - p[1], j[2] - p[2]])
                .collect(),
        })
    }
}

/// Transformer encoder over headset translations fused with a visual feature.
#[derive(Debug, Clone)]
pub struct CurrentFrameModel {
    config: EstimatorConfig,
    skeleton: SkeletonSpec,
    params: ParamSet,
    layout: Layout,
}

impl CurrentFrameModel {
    /// Freshly initialized model; weights are drawn from ChaCha8 seeded with `config.seed`.
    pub fn new(config: EstimatorConfig, skeleton: SkeletonSpec) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = Layout::build(&config, skeleton.joint_count(), &mut params, &mut rng);
        Ok(Self {
            config,
            skeleton,
            params,
            layout,
        })
    }

    /// Model with externally supplied weights (e.g. from a checkpoint).
    pub fn from_params(config: EstimatorConfig, skeleton: SkeletonSpec, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, skeleton)?;
        if params.names() != model.params.names() {
            return Err(Error::Format("parameter names do not match the estimator layout".into()));
        }
        for (name, t) in params.iter() {
            model.params.assign(name, t.shape(), t.data().to_vec())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &SkeletonSpec {
        &self.skeleton
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_window_len(&self, w: usize) -> Result<()> {
        if w == 0 || w > self.config.window {
            return Err(Error::Contract(format!(
                "window of {w} frames; expected 1..={}",
                self.config.window
            )));
        }
        Ok(())
    }

    /// Encodes a relative window (`w × 3`) and returns the last token, `[1 × d]`.
    pub fn encode_var(&self, tape: &mut Tape, bound: &Bound, rel_window: &[f64]) -> Result<Var> {
        let w = rel_window.len() / 3;
        self.check_window_len(w)?;
        let x = tape.constant(vec![w, 3], rel_window.to_vec())?;
        let h = self.layout.input.forward(tape, bound, x)?;
        let pos = tape.slice_rows(bound[self.layout.positional], self.config.window - w, w)?;
        let h = tape.add(h, pos)?;
        let h = self.layout.encoder.forward(tape, bound, h)?;
        tape.slice_rows(h, w - 1, 1)
    }

    /// `H_c` on fused rows `[B × (d + D_v)] → [B × 3J]`.
    pub fn head_var(&self, tape: &mut Tape, bound: &Bound, fused: Var) -> Result<Var> {
        let h = self.layout.fuse.forward(tape, bound, fused)?;
        let h = tape.gelu(h);
        self.layout.out.forward(tape, bound, h)
    }

    fn check_feature(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.config.visual_dim {
            return Err(Error::Contract(format!(
                "visual feature has {} values, model expects {}",
                feature.len(),
                self.config.visual_dim
            )));
        }
        Ok(())
    }

    /// Mean L1 loss over a batch, in relative coordinates.
    pub fn batch_loss(&self, tape: &mut Tape, bound: &Bound, samples: &[&EstimatorSample]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len() * 3 * self.skeleton.joint_count());
        for s in samples {
            self.check_feature(&s.feature)?;
            let e_t = self.encode_var(tape, bound, &s.rel_window)?;
            let e_v = tape.constant(vec![1, s.feature.len()], s.feature.clone())?;
            rows.push(tape.concat_last(&[e_t, e_v])?);
            targets.extend_from_slice(&s.target);
        }
        let fused = tape.concat_rows(&rows)?;
        let pred = self.head_var(tape, bound, fused)?;
        let target = tape.constant(tape.shape(pred).to_vec(), targets)?;
        tape.l1_loss(pred, target)
    }

    /// The encoded proprioceptive vector `e^t` for a window ending at the current frame.
    pub fn encode_proprio(&self, window: &[PoseFrame]) -> Result<Vec<f64>> {
        if window.is_empty() {
            return Err(Error::Contract("empty proprioception window".into()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let v = self.encode_var(&mut tape, &bound, &relative_window(window))?;
        Ok(tape.value(v).to_vec())
    }

    /// `q^t = H_c(e^t ⊕ e^v)`, returned in world coordinates.
    pub fn estimate_current_pose(&self, window: &[PoseFrame], visual: &[f64]) -> Result<BodyPose> {
        if window.is_empty() {
            return Err(Error::Contract("empty proprioception window".into()));
        }
        self.check_feature(visual)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let e_t = self.encode_var(&mut tape, &bound, &relative_window(window))?;
        let e_v = tape.constant(vec![1, visual.len()], visual.to_vec())?;
        let fused = tape.concat_last(&[e_t, e_v])?;
        let out = self.head_var(&mut tape, &bound, fused)?;
        let p = window.last().expect("non-empty").headset.position;
        let abs: Vec<f64> = tape
            .value(out)
            .chunks_exact(3)
            .flat_map(|c| [c[0] + p[0], c[1] + p[1], c[2] + p[2]])
            .collect();
        BodyPose::from_flat(&abs)
    }

    /// Estimate using the provider's feature for the same window.
    pub fn estimate(&self, window: &[PoseFrame], provider: &dyn VisualFeatureProvider) -> Result<BodyPose> {
        let feature = provider.feature(window)?;
        self.estimate_current_pose(window, &feature)
    }

    /// Pseudo-ground-truth pose for every frame, each from its own past window.
    pub fn estimate_sequence(&self, seq: &PoseSequence, provider: &dyn VisualFeatureProvider) -> Result<Vec<BodyPose>> {
        if seq.skeleton() != &self.skeleton {
            return Err(Error::Config("sequence skeleton differs from the estimator's".into()));
        }
        (0..seq.len())
            .map(|t| self.estimate(past_window(seq, t, self.config.window)?, provider))
            .collect()
    }
}

fn common_skeleton(dataset: &[PoseSequence]) -> Result<SkeletonSpec> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Data("dataset has no sequences".into()))?;
    if dataset.iter().any(|s| s.skeleton() != first.skeleton()) {
        return Err(Error::Data("dataset mixes skeletons".into()));
    }
    Ok(first.skeleton().clone())
}

/// Adam training state for a [`CurrentFrameModel`].
pub struct EstimatorTrainer {
    model: CurrentFrameModel,
    adam: Adam,
    samples: Vec<EstimatorSample>,
}

impl EstimatorTrainer {
    pub fn new(model: CurrentFrameModel, dataset: &[PoseSequence], provider: &dyn VisualFeatureProvider) -> Result<Self> {
        let adam = Adam::new(AdamConfig::with_lr(model.config.lr), &model.params);
        Self::resume(model, adam, dataset, provider)
    }

    /// Continues from saved weights and optimizer state.
    pub fn resume(
        model: CurrentFrameModel,
        adam: Adam,
        dataset: &[PoseSequence],
        provider: &dyn VisualFeatureProvider,
    ) -> Result<Self> {
        if provider.dim() != model.config.visual_dim {
            return Err(Error::Config(format!(
                "provider yields {}-dim features, estimator expects {}",
                provider.dim(),
                model.config.visual_dim
            )));
        }
        if !dataset.is_empty() && common_skeleton(dataset)? != model.skeleton {
            return Err(Error::Config("dataset skeleton differs from the model's".into()));
        }
        let mut samples = Vec::new();
        for seq in dataset {
            for t in 0..seq.len() {
                if seq.frames()[t].body.is_some() {
                    samples.push(EstimatorSample::from_frame(seq, t, model.config.window, provider)?);
                }
            }
        }
        if samples.is_empty() {
            return Err(Error::Data("no annotated frames to train the estimator on".into()));
        }
        Ok(Self { model, adam, samples })
    }

    pub fn step(&self) -> u64 {
        self.adam.step_count()
    }

    pub fn model(&self) -> &CurrentFrameModel {
        &self.model
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn into_model(self) -> CurrentFrameModel {
        self.model
    }

    /// Runs `iterations` optimizer steps and returns the loss of each.
    pub fn run(&mut self, iterations: usize) -> Result<Vec<f64>> {
        let mut trace = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let mut rng = batch_rng(self.model.config.seed, self.adam.step_count());
            let batch: Vec<&EstimatorSample> = (0..self.model.config.batch_size)
                .map(|_| &self.samples[rng.random_range(0..self.samples.len())])
                .collect();
            // batch_loss reads only the layout; the weights arrive through `bound`
            let mut params = std::mem::take(&mut self.model.params);
            let model = &self.model;
            let loss = optimizer_step(&mut params, &mut self.adam, |tape, bound| {
                model.batch_loss(tape, bound, &batch)
            });
            self.model.params = params;
            trace.push(loss?);
        }
        Ok(trace)
    }
}

/// Trains a fresh estimator for `config.iterations` steps; returns the model and loss trace.
pub fn train_current_module(
    dataset: &[PoseSequence],
    provider: &dyn VisualFeatureProvider,
    config: &EstimatorConfig,
) -> Result<(CurrentFrameModel, Vec<f64>)> {
    config.validate()?;
    let skeleton = common_skeleton(dataset)?;
    let model = CurrentFrameModel::new(config.clone(), skeleton)?;
    let mut trainer = EstimatorTrainer::new(model, dataset, provider)?;
    let trace = trainer.run(config.iterations)?;
    Ok((trainer.into_model(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{HeadsetPose, UnitQuat};
    use crate::provider::make_null_provider;

    fn tiny() -> EstimatorConfig {
        EstimatorConfig {
            window: 4,
            width: 8,
            layers: 1,
            heads: 2,
            head_hidden: 8,
            visual_dim: 3,
            ..EstimatorConfig::default()
        }
    }

    fn frames(n: usize) -> Vec<PoseFrame> {
        (0..n)
            .map(|i| PoseFrame {
                index: i,
                timestamp: i as f64 / 30.0,
                headset: HeadsetPose {
                    position: [0.03 * i as f64, (i as f64).sin() * 0.1, 1.6],
                    rotation: UnitQuat::IDENTITY,
                },
                body: None,
                visual_feature: None,
            })
            .collect()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = EstimatorConfig {
            width: 10,
            heads: 4,
            ..tiny()
        };
        assert!(matches!(CurrentFrameModel::new(cfg, SkeletonSpec::coco17()), Err(Error::Config(_))));
    }

    #[test]
    fn output_shapes_for_both_skeletons() {
        for skel in [SkeletonSpec::coco17(), SkeletonSpec::body21()] {
            let j = skel.joint_count();
            let m = CurrentFrameModel::new(tiny(), skel).unwrap();
            let f = frames(4);
            let pose = m.estimate_current_pose(&f, &[0.0; 3]).unwrap();
            assert_eq!(pose.joint_count(), j);
        }
    }

    #[test]
    fn warm_up_windows_are_defined() {
        let m = CurrentFrameModel::new(tiny(), SkeletonSpec::coco17()).unwrap();
        let f = frames(6);
        for w in 1..=4 {
            let e = m.encode_proprio(&f[..w]).unwrap();
            assert_eq!(e.len(), 8);
            assert!(e.iter().all(|v| v.is_finite()));
            let pose = m.estimate_current_pose(&f[..w], &[0.1, 0.2, 0.3]).unwrap();
            assert!(pose.flatten().iter().all(|v| v.is_finite()));
        }
        assert!(m.encode_proprio(&f[..5]).is_err());
        assert!(m.encode_proprio(&[]).is_err());
    }

    #[test]
    fn deterministic_and_checks_feature_dim() {
        let m = CurrentFrameModel::new(tiny(), SkeletonSpec::coco17()).unwrap();
        let f = frames(4);
        let a = m.estimate_current_pose(&f, &[0.5, 0.0, -0.5]).unwrap();
        let b = m.estimate_current_pose(&f, &[0.5, 0.0, -0.5]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(m.estimate_current_pose(&f, &[0.0; 4]), Err(Error::Contract(_))));
    }

    #[test]
    fn training_needs_annotated_frames() {
        let seq = PoseSequence::new(SkeletonSpec::coco17(), frames(10), None).unwrap();
        let p = make_null_provider(3).unwrap();
        let res = train_current_module(&[seq], &p, &tiny());
        assert!(matches!(res, Err(Error::Data(_))));
    }
}
