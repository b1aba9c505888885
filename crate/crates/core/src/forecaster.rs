//! Multi-second full-body forecasting from past pose/headset tokens.
//!
//! Tokens are re-expressed relative to the mean headset position of the
//! window (the anchor), projected to the encoder width, offset by learned
//! positional embeddings indexed from the window's end, encoded, and mean
//! pooled. A two-layer perceptron emits all `n` future tokens at once; joint
//! and headset positions are shifted back by the anchor and the rotation
//! slices are normalized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::CurrentFrameModel;
use crate::pose::{
    build_forecast_token, normalize_quaternion, past_window, token_dim, BodyPose, ForecastToken, PoseSequence,
    SkeletonSpec, UnitQuat, Vec3,
};
use crate::provider::VisualFeatureProvider;
use crate::tensor::{init_normal, Adam, AdamConfig, Bound, Encoder, Linear, ParamId, ParamSet, Tape, Var};
use crate::training::{batch_rng, optimizer_step};

/// Weights of the joint, translation and rotation terms of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub joints: f64,
    pub translation: f64,
    pub rotation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            joints: 1.0,
            translation: 1.0,
            rotation: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.joints, self.translation, self.rotation];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

/// Which past body poses the forecaster is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastPoseSource {
    /// Current-frame estimator outputs, as at inference time.
    #[default]
    PseudoGroundTruth,
    /// Annotated poses; an upper-bound setting.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterConfig {
    /// Past window length `k` in frames.
    pub window: usize,
    /// Number of future frames `n` emitted per forward pass.
    pub horizon: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub past_poses: PastPoseSource,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            window: 20,
            horizon: 150,
            width: 64,
            layers: 2,
            heads: 4,
            head_hidden: 512,
            lr: 1e-4,
            batch_size: 24,
            iterations: 2000,
            seed: 0,
            loss_weights: LossWeights::default(),
            past_poses: PastPoseSource::default(),
        }
    }
}

impl ForecasterConfig {
    pub fn paper_scale() -> Self {
        Self {
            width: 256,
            layers: 3,
            heads: 8,
            iterations: 30_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.horizon == 0 {
            return Err(Error::Config("forecaster window and horizon must be at least 1".into()));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "forecaster width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.head_hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("head_hidden and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.loss_weights.validate()
    }

    /// Equal up to the iteration budget.
    pub fn compatible_with(&self, other: &Self) -> bool {
        Self {
            iterations: other.iterations,
            ..self.clone()
        } == *other
    }

    /// Equal in every field that shapes the network, ignoring training settings.
    pub fn same_architecture(&self, other: &Self) -> bool {
        (self.window, self.horizon, self.width, self.layers, self.heads, self.head_hidden)
            == (other.window, other.horizon, other.width, other.layers, other.heads, other.head_hidden)
    }
}

/// `n` future frames of body pose, headset position and headset rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    pub body: Vec<BodyPose>,
    pub translation: Vec<Vec3>,
    /// Unit norm; sign as produced by the model.
    pub rotation: Vec<[f64; 4]>,
}

impl ForecastOutput {
    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    /// Annotated frames `t+1 ..= t+n` of a sequence.
    pub fn ground_truth(seq: &PoseSequence, t: usize, n: usize) -> Result<Self> {
        if t + n >= seq.len() {
            return Err(Error::Contract(format!(
                "frames {}..={} exceed a sequence of {} frames",
                t + 1,
                t + n,
                seq.len()
            )));
        }
        let frames = &seq.frames()[t + 1..=t + n];
        Ok(Self {
            body: (t + 1..=t + n).map(|i| seq.body_at(i).cloned()).collect::<Result<_>>()?,
            translation: frames.iter().map(|f| f.headset.position).collect(),
            rotation: frames.iter().map(|f| f.headset.rotation.as_array()).collect(),
        })
    }

    fn check_matches(&self, other: &Self) -> Result<()> {
        let ok = self.len() == other.len()
            && self.translation.len() == other.translation.len()
            && self.rotation.len() == other.rotation.len()
            && self.translation.len() == self.len()
            && self.rotation.len() == self.len()
            && self
                .body
                .iter()
                .zip(&other.body)
                .all(|(a, b)| a.joint_count() == b.joint_count());
        if !ok {
            return Err(Error::Contract("forecast outputs differ in length or joint count".into()));
        }
        Ok(())
    }
}

fn mean_abs(a: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = a.fold((0.0, 0usize), |(s, n), v| (s + v.abs(), n + 1));
    s / n as f64
}

/// Sign flip only for rotations that are already unit, so exact matches stay exact.
fn canonical(q: [f64; 4]) -> Result<[f64; 4]> {
    match UnitQuat::from_unit(q, 1e-9) {
        Ok(u) => Ok(u.as_array()),
        Err(_) => Ok(normalize_quaternion(q)?.as_array()),
    }
}

/// `λ_Q·L1(Q) + λ_R·L1(Y) + λ_T·L1(P)`, each term a mean over its own elements.
/// Ground-truth rotations are sign-canonicalized before comparison.
pub fn forecast_loss(pred: &ForecastOutput, gt: &ForecastOutput, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    pred.check_matches(gt)?;
    let q = mean_abs(
        pred.body
            .iter()
            .zip(&gt.body)
            .flat_map(|(a, b)| a.flatten().into_iter().zip(b.flatten()).map(|(x, y)| x - y)),
    );
    let p = mean_abs(
        pred.translation
            .iter()
            .zip(&gt.translation)
            .flat_map(|(a, b)| (0..3).map(move |i| a[i] - b[i])),
    );
    let gt_rot = gt.rotation.iter().map(|&r| canonical(r)).collect::<Result<Vec<_>>>()?;
    let y = mean_abs(
        pred.rotation
            .iter()
            .zip(&gt_rot)
            .flat_map(|(a, b)| (0..4).map(move |i| a[i] - b[i])),
    );
    Ok(w.joints * q + w.rotation * y + w.translation * p)
}

#[derive(Debug, Clone)]
struct Layout {
    project: Linear,
    positional: ParamId,
    encoder: Encoder,
    hidden: Linear,
    out: Linear,
}

/// A training example: past tokens and the `n` future tokens they should produce.
#[derive(Debug, Clone)]
pub struct ForecastSample {
    pub tokens: Vec<ForecastToken>,
    /// `n × m` future tokens, rotations canonicalized.
    pub future: Vec<f64>,
}

/// Transformer forecaster `H_f(pool(E(l(T))))`.
#[derive(Debug, Clone)]
pub struct ForecastModel {
    config: ForecasterConfig,
    skeleton: SkeletonSpec,
    params: ParamSet,
    layout: Layout,
}

impl ForecastModel {
    pub fn new(config: ForecasterConfig, skeleton: SkeletonSpec) -> Result<Self> {
        config.validate()?;
        let m = token_dim(skeleton.joint_count())?;
        let d = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let project = Linear::new(&mut params, "project", m, d, &mut rng);
        let positional = params.add("positional", init_normal(&mut rng, vec![config.window, d], 0.02));
        let encoder = Encoder::new(&mut params, "encoder", d, config.layers, config.heads, &mut rng);
        let hidden = Linear::new(&mut params, "head.hidden", d, config.head_hidden, &mut rng);
        let out = Linear::new(&mut params, "head.out", config.head_hidden, config.horizon * m, &mut rng);
        Ok(Self {
            config,
            skeleton,
            params,
            layout: Layout {
                project,
                positional,
                encoder,
                hidden,
                out,
            },
        })
    }

    pub fn from_params(config: ForecasterConfig, skeleton: SkeletonSpec, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, skeleton)?;
        if params.names() != model.params.names() {
            return Err(Error::Format("parameter names do not match the forecaster layout".into()));
        }
        for (name, t) in params.iter() {
            model.params.assign(name, t.shape(), t.data().to_vec())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ForecasterConfig {
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

    pub fn token_dim(&self) -> usize {
        3 * self.skeleton.joint_count() + 7
    }

    fn check_tokens(&self, tokens: &[ForecastToken]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.window {
            return Err(Error::Contract(format!(
                "{} input tokens; expected 1..={}",
                tokens.len(),
                self.config.window
            )));
        }
        let m = self.token_dim();
        if let Some(t) = tokens.iter().find(|t| t.len() != m) {
            return Err(Error::Contract(format!("token has {} values, expected {m}", t.len())));
        }
        Ok(())
    }

    /// Mean headset position of the input window.
    fn anchor(&self, tokens: &[ForecastToken]) -> Vec3 {
        let off = 3 * self.skeleton.joint_count();
        let mut a = [0.0; 3];
        for t in tokens {
            let v = t.as_slice();
            (0..3).for_each(|i| a[i] += v[off + i]);
        }
        a.map(|v| v / tokens.len() as f64)
    }

    /// Subtracts `anchor` from every joint and headset position of an `r × m` block.
    fn shift_positions(&self, values: &mut [f64], anchor: Vec3, sign: f64) {
        let m = self.token_dim();
        for row in values.chunks_exact_mut(m) {
            for c in row[..m - 4].chunks_exact_mut(3) {
                (0..3).for_each(|i| c[i] -= sign * anchor[i]);
            }
        }
    }

    /// Encodes and pools one window: `[d]`.
    pub fn pooled_var(&self, tape: &mut Tape, bound: &Bound, tokens: &[ForecastToken]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let anchor = self.anchor(tokens);
        let mut rel: Vec<f64> = tokens.iter().flat_map(|t| t.as_slice().iter().copied()).collect();
        self.shift_positions(&mut rel, anchor, 1.0);
        let w = tokens.len();
        let x = tape.constant(vec![w, self.token_dim()], rel)?;
        let h = self.layout.project.forward(tape, bound, x)?;
        let pos = tape.slice_rows(bound[self.layout.positional], self.config.window - w, w)?;
        let h = tape.add(h, pos)?;
        let h = self.layout.encoder.forward(tape, bound, h)?;
        tape.mean_rows(h)
    }

    /// Pooled representation as plain values.
    pub fn pooled(&self, tokens: &[ForecastToken]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let v = self.pooled_var(&mut tape, &bound, tokens)?;
        Ok(tape.value(v).to_vec())
    }

    /// Head over stacked pooled rows `[B × d] → [B·n × m]` (anchor-relative, rotations raw).
    pub fn head_var(&self, tape: &mut Tape, bound: &Bound, pooled: Var) -> Result<Var> {
        let h = self.layout.hidden.forward(tape, bound, pooled)?;
        let h = tape.gelu(h);
        let out = self.layout.out.forward(tape, bound, h)?;
        let rows = tape.shape(out)[0] * self.config.horizon;
        tape.reshape(out, vec![rows, self.token_dim()])
    }

    /// Composite L1 loss over a batch, in anchor-relative coordinates.
    pub fn batch_loss(&self, tape: &mut Tape, bound: &Bound, samples: &[&ForecastSample]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let m = self.token_dim();
        let jd = 3 * self.skeleton.joint_count();
        let mut pooled = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len() * self.config.horizon * m);
        for s in samples {
            if s.future.len() != self.config.horizon * m {
                return Err(Error::Contract("sample future block has the wrong size".into()));
            }
            pooled.push(self.pooled_var(tape, bound, &s.tokens)?);
            let mut fut = s.future.clone();
            self.shift_positions(&mut fut, self.anchor(&s.tokens), 1.0);
            targets.extend(fut);
        }
        let stacked = tape.concat_rows(&pooled)?;
        let out = self.head_var(tape, bound, stacked)?;
        let target = tape.constant(tape.shape(out).to_vec(), targets)?;

        let w = self.config.loss_weights;
        let pq = tape.slice_last(out, 0, jd)?;
        let tq = tape.slice_last(target, 0, jd)?;
        let pp = tape.slice_last(out, jd, 3)?;
        let tp = tape.slice_last(target, jd, 3)?;
        let py = tape.slice_last(out, jd + 3, 4)?;
        let py = tape.normalize_last(py);
        let ty = tape.slice_last(target, jd + 3, 4)?;
        let lq = tape.l1_loss(pq, tq)?;
        let lq = tape.scale(lq, w.joints);
        let ly = tape.l1_loss(py, ty)?;
        let ly = tape.scale(ly, w.rotation);
        let lp = tape.l1_loss(pp, tp)?;
        let lp = tape.scale(lp, w.translation);
        let l = tape.add(lq, ly)?;
        tape.add(l, lp)
    }

    /// Forecasts the next `n` frames from `1..=k` past tokens.
    pub fn forecast(&self, tokens: &[ForecastToken]) -> Result<ForecastOutput> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let pooled = self.pooled_var(&mut tape, &bound, tokens)?;
        let row = tape.reshape(pooled, vec![1, self.config.width])?;
        let out = self.head_var(&mut tape, &bound, row)?;
        let mut values = tape.value(out).to_vec();
        self.shift_positions(&mut values, self.anchor(tokens), -1.0);
        self.decode(&values)
    }

    fn decode(&self, values: &[f64]) -> Result<ForecastOutput> {
        let jd = 3 * self.skeleton.joint_count();
        let m = self.token_dim();
        let mut out = ForecastOutput {
            body: Vec::with_capacity(self.config.horizon),
            translation: Vec::with_capacity(self.config.horizon),
            rotation: Vec::with_capacity(self.config.horizon),
        };
        for row in values.chunks_exact(m) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("forecast produced non-finite values".into()));
            }
            out.body.push(BodyPose::from_flat(&row[..jd])?);
            out.translation.push([row[jd], row[jd + 1], row[jd + 2]]);
            let q = [row[jd + 3], row[jd + 4], row[jd + 5], row[jd + 6]];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            out.rotation.push(q.map(|v| v / n));
        }
        Ok(out)
    }
}

/// Tokens for the window ending at `t`, with body poses taken from `poses` (indexed by frame).
pub fn tokens_from_poses(seq: &PoseSequence, t: usize, k: usize, poses: &[BodyPose]) -> Result<Vec<ForecastToken>> {
    past_window(seq, t, k)?
        .iter()
        .map(|f| {
            let q = poses
                .get(f.index)
                .ok_or_else(|| Error::Contract(format!("no pose for frame {}", f.index)))?;
            build_forecast_token(q, f.headset.position, f.headset.rotation.as_array())
        })
        .collect()
}

/// Full pipeline at frame `t`: estimate a pseudo-ground-truth pose for every
/// frame of the forecaster's window, build tokens, forecast. Ground-truth body
/// poses on `seq` are never read here (a provider may read whatever it is built on).
pub fn end_to_end_infer(
    seq: &PoseSequence,
    t: usize,
    estimator: &CurrentFrameModel,
    provider: &dyn VisualFeatureProvider,
    forecaster: &ForecastModel,
) -> Result<ForecastOutput> {
    if estimator.skeleton() != forecaster.skeleton() || seq.skeleton() != forecaster.skeleton() {
        return Err(Error::Config("estimator, forecaster and sequence skeletons differ".into()));
    }
    let window = past_window(seq, t, forecaster.config.window)?;
    let tokens = window
        .iter()
        .map(|f| {
            let est_window = past_window(seq, f.index, estimator.config().window)?;
            let q = estimator.estimate(est_window, provider)?;
            build_forecast_token(&q, f.headset.position, f.headset.rotation.as_array())
        })
        .collect::<Result<Vec<_>>>()?;
    forecaster.forecast(&tokens)
}

/// Adam training state for a [`ForecastModel`].
pub struct ForecasterTrainer<'a> {
    model: ForecastModel,
    adam: Adam,
    dataset: Vec<&'a PoseSequence>,
    past: Vec<Vec<BodyPose>>,
    /// (sequence, anchor frame) pairs.
    anchors: Vec<(usize, usize)>,
}

impl<'a> ForecasterTrainer<'a> {
    pub fn new(
        model: ForecastModel,
        dataset: &'a [PoseSequence],
        estimator: Option<&CurrentFrameModel>,
        provider: &dyn VisualFeatureProvider,
    ) -> Result<Self> {
        let adam = Adam::new(AdamConfig::with_lr(model.config.lr), &model.params);
        Self::resume(model, adam, dataset, estimator, provider)
    }

    /// `estimator` is required unless the config trains on ground-truth past poses.
    pub fn resume(
        model: ForecastModel,
        adam: Adam,
        dataset: &'a [PoseSequence],
        estimator: Option<&CurrentFrameModel>,
        provider: &dyn VisualFeatureProvider,
    ) -> Result<Self> {
        let cfg = &model.config;
        let needed = cfg.window + cfg.horizon;
        let mut usable = Vec::new();
        for (i, seq) in dataset.iter().enumerate() {
            if seq.skeleton() != &model.skeleton {
                return Err(Error::Config(format!("sequence {i} skeleton differs from the model's")));
            }
            if seq.len() < needed {
                log::warn!("skipping sequence {i}: {} frames < window + horizon = {needed}", seq.len());
                continue;
            }
            if !seq.is_fully_annotated() {
                return Err(Error::Data(format!("sequence {i} lacks ground-truth body poses")));
            }
            usable.push(seq);
        }
        if usable.is_empty() {
            return Err(Error::Data("no sequence is long enough to train the forecaster".into()));
        }
        let past = match cfg.past_poses {
            PastPoseSource::GroundTruth => usable
                .iter()
                .map(|s| (0..s.len()).map(|t| s.body_at(t).cloned()).collect())
                .collect::<Result<Vec<Vec<BodyPose>>>>()?,
            PastPoseSource::PseudoGroundTruth => {
                let est = estimator.ok_or_else(|| {
                    Error::Config("pseudo-ground-truth training needs a current-frame estimator".into())
                })?;
                usable
                    .par_iter()
                    .map(|s| est.estimate_sequence(s, provider))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let anchors = usable
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (cfg.window - 1..s.len() - cfg.horizon).map(move |t| (si, t)))
            .collect();
        Ok(Self {
            model,
            adam,
            dataset: usable,
            past,
            anchors,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step_count()
    }

    pub fn model(&self) -> &ForecastModel {
        &self.model
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn into_model(self) -> ForecastModel {
        self.model
    }

    fn sample(&self, si: usize, t: usize) -> Result<ForecastSample> {
        let seq = self.dataset[si];
        let cfg = &self.model.config;
        let tokens = tokens_from_poses(seq, t, cfg.window, &self.past[si])?;
        let gt = ForecastOutput::ground_truth(seq, t, cfg.horizon)?;
        let mut future = Vec::with_capacity(cfg.horizon * self.model.token_dim());
        for i in 0..cfg.horizon {
            future.extend(gt.body[i].flatten());
            future.extend_from_slice(&gt.translation[i]);
            future.extend_from_slice(&canonical(gt.rotation[i])?);
        }
        Ok(ForecastSample { tokens, future })
    }

    pub fn run(&mut self, iterations: usize) -> Result<Vec<f64>> {
        let mut trace = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let mut rng = batch_rng(self.model.config.seed, self.adam.step_count());
            let batch = (0..self.model.config.batch_size)
                .map(|_| {
                    let (si, t) = self.anchors[rng.random_range(0..self.anchors.len())];
                    self.sample(si, t)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ForecastSample> = batch.iter().collect();
            let mut params = std::mem::take(&mut self.model.params);
            let model = &self.model;
            let loss = optimizer_step(&mut params, &mut self.adam, |tape, bound| {
                model.batch_loss(tape, bound, &refs)
            });
            self.model.params = params;
            trace.push(loss?);
        }
        Ok(trace)
    }
}

/// Trains a fresh forecaster for `config.iterations` steps.
pub fn train_forecaster(
    dataset: &[PoseSequence],
    estimator: Option<&CurrentFrameModel>,
    provider: &dyn VisualFeatureProvider,
    config: &ForecasterConfig,
) -> Result<(ForecastModel, Vec<f64>)> {
    config.validate()?;
    let skeleton = dataset
        .first()
        .ok_or_else(|| Error::Data("dataset has no sequences".into()))?
        .skeleton()
        .clone();
    let model = ForecastModel::new(config.clone(), skeleton)?;
    let mut trainer = ForecasterTrainer::new(model, dataset, estimator, provider)?;
    let trace = trainer.run(config.iterations)?;
    Ok((trainer.into_model(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::RootRule;

    fn skel2() -> SkeletonSpec {
        SkeletonSpec::new(vec!["a".into(), "b".into()], RootRule::Joint("a".into())).unwrap()
    }

    fn tiny() -> ForecasterConfig {
        ForecasterConfig {
            window: 3,
            horizon: 2,
            width: 8,
            layers: 1,
            heads: 2,
            head_hidden: 8,
            ..ForecasterConfig::default()
        }
    }

    fn token(seed: f64) -> ForecastToken {
        let body = BodyPose::from_flat(&(0..6).map(|i| (seed + i as f64).sin()).collect::<Vec<_>>()).unwrap();
        let q = normalize_quaternion([1.0, 0.1 * seed, 0.2, -0.1]).unwrap().as_array();
        build_forecast_token(&body, [seed, 0.5, 1.6], q).unwrap()
    }

    fn output(n: usize, offset: f64) -> ForecastOutput {
        ForecastOutput {
            body: (0..n)
                .map(|i| BodyPose::new(vec![[i as f64 + offset, 0.0, 1.0], [0.0, offset, 0.5]]).unwrap())
                .collect(),
            translation: vec![[1.0, 2.0, 3.0]; n],
            rotation: vec![[1.0, 0.0, 0.0, 0.0]; n],
        }
    }

    #[test]
    fn output_shapes_and_unit_rotations() {
        let m = ForecastModel::new(tiny(), skel2()).unwrap();
        let out = m.forecast(&[token(0.0), token(1.0), token(2.0)]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.translation.len(), 2);
        assert_eq!(out.rotation.len(), 2);
        assert!(out.body.iter().all(|b| b.joint_count() == 2));
        for r in &out.rotation {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let single = m.forecast(&[token(0.5)]).unwrap();
        assert_eq!(single.len(), 2);
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = ForecastModel::new(tiny(), skel2()).unwrap();
        assert!(m.forecast(&[]).is_err());
        assert!(m.forecast(&vec![token(0.0); 4]).is_err());
        let body = BodyPose::new(vec![[0.0; 3]]).unwrap();
        let short = build_forecast_token(&body, [0.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(m.forecast(&[short]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_examples() {
        let w = LossWeights::default();
        let gt = output(3, 0.0);
        assert_eq!(forecast_loss(&gt, &gt, &w).unwrap(), 0.0);
        let shifted = ForecastOutput {
            body: gt.body.iter().map(|b| b.translated([0.1, 0.1, 0.1])).collect(),
            ..gt.clone()
        };
        assert!((forecast_loss(&shifted, &gt, &w).unwrap() - 0.1).abs() < 1e-15);
        let no_q = LossWeights {
            joints: 0.0,
            ..w
        };
        assert_eq!(forecast_loss(&output(3, 5.0), &gt, &no_q).unwrap(), 0.0);
        let mut flipped = gt.clone();
        flipped.rotation = vec![[-1.0, 0.0, 0.0, 0.0]; 3];
        assert_eq!(forecast_loss(&gt, &flipped, &w).unwrap(), 0.0);
        assert!(forecast_loss(&output(2, 0.0), &gt, &w).is_err());
        let zero = LossWeights {
            joints: 0.0,
            translation: 0.0,
            rotation: 0.0,
        };
        assert!(forecast_loss(&gt, &gt, &zero).is_err());
    }

    #[test]
    fn zero_weights_rejected_at_construction() {
        let cfg = ForecasterConfig {
            loss_weights: LossWeights {
                joints: 0.0,
                translation: 0.0,
                rotation: 0.0,
            },
            ..tiny()
        };
        assert!(matches!(ForecastModel::new(cfg, skel2()), Err(Error::Config(_))));
    }

    #[test]
    fn forecast_is_deterministic() {
        let m = ForecastModel::new(tiny(), skel2()).unwrap();
        let toks = [token(0.3), token(0.7)];
        assert_eq!(m.forecast(&toks).unwrap(), m.forecast(&toks).unwrap());
    }
}
