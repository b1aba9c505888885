//! Skeletons, headset proprioception, pose sequences and forecast tokens.
//!
//! Lengths are meters throughout; conversion to centimeters happens only in
//! [`crate::metrics`]. Quaternions are stored `(w, x, y, z)`, unit norm, with
//! the sign chosen so that `w >= 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Unit quaternion in canonical sign (`w >= 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat([f64; 4]);

/// Minimum norm accepted by [`normalize_quaternion`].
pub const MIN_QUAT_NORM: f64 = 1e-12;

/// Whether `q` must be negated to reach the canonical sign: w > 0, or on the
/// w = 0 boundary the first non-zero component positive.
fn needs_flip(q: &[f64; 4]) -> bool {
    q.iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0)
}

/// Scales `q` to unit norm and flips its sign so that `w >= 0`.
pub fn normalize_quaternion(q: [f64; 4]) -> Result<UnitQuat> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > MIN_QUAT_NORM) {
        return Err(Error::DegenerateRotation(norm));
    }
    let s = if needs_flip(&q) { -1.0 / norm } else { 1.0 / norm };
    Ok(UnitQuat(q.map(|v| v * s)))
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat([1.0, 0.0, 0.0, 0.0]);

    /// Accepts `q` only if it is already unit norm within `tol`; the sign is canonicalized.
    pub fn from_unit(q: [f64; 4], tol: f64) -> Result<Self> {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > tol || !norm.is_finite() {
            return Err(Error::Contract(format!(
                "quaternion {q:?} has norm {norm}, expected 1"
            )));
        }
        if needs_flip(&q) {
            Ok(Self(q.map(|v| -v)))
        } else {
            Ok(Self(q))
        }
    }

    /// Rotation by `angle` radians about the unit `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        normalize_quaternion([c, axis[0] * s, axis[1] * s, axis[2] * s]).expect("unit axis")
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }

    pub fn w(&self) -> f64 {
        self.0[0]
    }

    /// Hamilton product `self ⊗ other`, canonicalized.
    pub fn mul(&self, other: &UnitQuat) -> UnitQuat {
        let [a1, b1, c1, d1] = self.0;
        let [a2, b2, c2, d2] = other.0;
        let q = [
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        ];
        normalize_quaternion(q).expect("product of unit quaternions is unit")
    }

    /// Rotates a vector.
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let [w, x, y, z] = self.0;
        // t = 2 (q_vec × v); v' = v + w t + q_vec × t
        let t = [
            2.0 * (y * v[2] - z * v[1]),
            2.0 * (z * v[0] - x * v[2]),
            2.0 * (x * v[1] - y * v[0]),
        ];
        [
            v[0] + w * t[0] + (y * t[2] - z * t[1]),
            v[1] + w * t[1] + (z * t[0] - x * t[2]),
            v[2] + w * t[2] + (x * t[1] - y * t[0]),
        ]
    }
}

/// How a skeleton's root position is derived from its joints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootRule {
    Joint(String),
    Mean(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SkeletonDef {
    joints: Vec<String>,
    root_rule: RootRule,
}

/// Ordered joint names and the root derivation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonDef", into = "SkeletonDef")]
pub struct SkeletonSpec {
    joints: Vec<String>,
    root_rule: RootRule,
    root_indices: Vec<usize>,
}

impl TryFrom<SkeletonDef> for SkeletonSpec {
    type Error = Error;

    fn try_from(def: SkeletonDef) -> Result<Self> {
        SkeletonSpec::new(def.joints, def.root_rule)
    }
}

impl From<SkeletonSpec> for SkeletonDef {
    fn from(s: SkeletonSpec) -> Self {
        SkeletonDef {
            joints: s.joints,
            root_rule: s.root_rule,
        }
    }
}

const COCO17: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

const BODY21: [&str; 21] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine",
    "left_knee",
    "right_knee",
    "chest",
    "left_ankle",
    "right_ankle",
    "left_foot",
    "right_foot",
    "neck",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

impl SkeletonSpec {
    pub fn new(joints: Vec<String>, root_rule: RootRule) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Config("skeleton needs at least one joint".into()));
        }
        for (i, name) in joints.iter().enumerate() {
            if joints[..i].contains(name) {
                return Err(Error::Config(format!("duplicate joint name {name}")));
            }
        }
        let lookup = |name: &String| {
            joints
                .iter()
                .position(|j| j == name)
                .ok_or_else(|| Error::Config(format!("root rule references unknown joint {name}")))
        };
        let root_indices = match &root_rule {
            RootRule::Joint(name) => vec![lookup(name)?],
            RootRule::Mean(names) if names.is_empty() => {
                return Err(Error::Config("root rule averages no joints".into()))
            }
            RootRule::Mean(names) => names.iter().map(lookup).collect::<Result<_>>()?,
        };
        Ok(Self {
            joints,
            root_rule,
            root_indices,
        })
    }

    /// 17 joints in COCO order; root is the hip midpoint.
    pub fn coco17() -> Self {
        Self::new(
            COCO17.iter().map(|s| s.to_string()).collect(),
            RootRule::Mean(vec!["left_hip".into(), "right_hip".into()]),
        )
        .expect("static skeleton is valid")
    }

    /// 21 joints rooted at the pelvis.
    pub fn body21() -> Self {
        Self::new(
            BODY21.iter().map(|s| s.to_string()).collect(),
            RootRule::Joint("pelvis".into()),
        )
        .expect("static skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[String] {
        &self.joints
    }

    pub fn root_rule(&self) -> &RootRule {
        &self.root_rule
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j == name)
    }
}

/// Headset position (meters) and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadsetPose {
    pub position: Vec3,
    pub rotation: UnitQuat,
}

/// World-frame joint positions, one row per skeleton joint.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyPose {
    joints: Vec<Vec3>,
}

impl BodyPose {
    pub fn new(joints: Vec<Vec3>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Contract("body pose needs at least one joint".into()));
        }
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("body pose has non-finite coordinates".into()));
        }
        Ok(Self { joints })
    }

    /// Rebuilds a pose from `3J` row-major values.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(3) {
            return Err(Error::Dimension(format!(
                "{} values do not form xyz joint rows",
                values.len()
            )));
        }
        Self::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn translated(&self, d: Vec3) -> BodyPose {
        BodyPose {
            joints: self
                .joints
                .iter()
                .map(|j| [j[0] + d[0], j[1] + d[1], j[2] + d[2]])
                .collect(),
        }
    }

    pub(crate) fn check_skeleton(&self, skeleton: &SkeletonSpec) -> Result<()> {
        if self.joint_count() != skeleton.joint_count() {
            return Err(Error::Contract(format!(
                "body pose has {} joints, skeleton has {}",
                self.joint_count(),
                skeleton.joint_count()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub index: usize,
    pub timestamp: f64,
    pub headset: HeadsetPose,
    /// Ground-truth body pose; `None` when withheld.
    pub body: Option<BodyPose>,
    pub visual_feature: Option<Vec<f64>>,
}

/// Time-ordered frames sharing one skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    skeleton: SkeletonSpec,
    frames: Vec<PoseFrame>,
    activity: Option<String>,
    fps: f64,
}

/// Frame rate assumed when none is given.
pub const DEFAULT_FPS: f64 = 30.0;

impl PoseSequence {
    /// Validates contiguous indices, increasing timestamps and joint counts.
    pub fn new(skeleton: SkeletonSpec, frames: Vec<PoseFrame>, activity: Option<String>) -> Result<Self> {
        let mut visual_dim = None;
        for (i, f) in frames.iter().enumerate() {
            if f.index != i {
                return Err(Error::Data(format!(
                    "frame {i} carries index {}; indices must be contiguous from 0",
                    f.index
                )));
            }
            if i > 0 && !(f.timestamp > frames[i - 1].timestamp) {
                return Err(Error::Data(format!("timestamp of frame {i} does not increase")));
            }
            if let Some(body) = &f.body {
                body.check_skeleton(&skeleton)?;
            }
            if let Some(v) = &f.visual_feature {
                match visual_dim {
                    None => visual_dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(Error::Data(format!(
                            "frame {i} visual feature has {} values, earlier frames {d}",
                            v.len()
                        )))
                    }
                    Some(_) => {}
                }
            }
            if f.headset.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("frame {i} headset position is not finite")));
            }
        }
        Ok(Self {
            skeleton,
            frames,
            activity,
            fps: DEFAULT_FPS,
        })
    }

    pub fn with_fps(mut self, fps: f64) -> Result<Self> {
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::Data(format!("frame rate must be positive, got {fps}")));
        }
        self.fps = fps;
        Ok(self)
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn skeleton(&self) -> &SkeletonSpec {
        &self.skeleton
    }

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn activity(&self) -> Option<&str> {
        self.activity.as_deref()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_fully_annotated(&self) -> bool {
        self.frames.iter().all(|f| f.body.is_some())
    }

    /// Copy of the sequence with every ground-truth body pose removed.
    pub fn without_ground_truth(&self) -> PoseSequence {
        let mut out = self.clone();
        out.frames.iter_mut().for_each(|f| f.body = None);
        out
    }

    /// Ground-truth body at frame `t`.
    pub fn body_at(&self, t: usize) -> Result<&BodyPose> {
        self.frames
            .get(t)
            .ok_or_else(|| Error::Contract(format!("frame {t} out of range")))?
            .body
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("frame {t} has no ground-truth body pose")))
    }

    pub(crate) fn frames_mut(&mut self) -> &mut [PoseFrame] {
        &mut self.frames
    }
}

/// Token width for a `J`-joint skeleton: `3J + 3 + 4`.
pub fn token_dim(joints: usize) -> Result<usize> {
    if joints == 0 {
        return Err(Error::Contract("token_dim needs at least one joint".into()));
    }
    Ok(3 * joints + 7)
}

/// Per-frame forecaster input laid out as `[joints (3J) | position (3) | rotation (4)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastToken(Vec<f64>);

/// Tolerance on the rotation slice norm of a token.
pub const TOKEN_QUAT_TOL: f64 = 1e-6;

pub fn build_forecast_token(body: &BodyPose, position: Vec3, rotation: [f64; 4]) -> Result<ForecastToken> {
    let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > TOKEN_QUAT_TOL {
        return Err(Error::Contract(format!(
            "token rotation {rotation:?} is not unit norm ({norm})"
        )));
    }
    let mut v = body.flatten();
    v.extend_from_slice(&position);
    v.extend_from_slice(&rotation);
    Ok(ForecastToken(v))
}

pub fn split_forecast_token(
    token: &ForecastToken,
    skeleton: &SkeletonSpec,
) -> Result<(BodyPose, Vec3, [f64; 4])> {
    let j = skeleton.joint_count();
    let m = token_dim(j)?;
    let v = &token.0;
    if v.len() != m {
        return Err(Error::Contract(format!(
            "token has {} values, skeleton with {j} joints needs {m}",
            v.len()
        )));
    }
    let body = BodyPose::from_flat(&v[..3 * j])?;
    let p = [v[3 * j], v[3 * j + 1], v[3 * j + 2]];
    let y = [v[3 * j + 3], v[3 * j + 4], v[3 * j + 5], v[3 * j + 6]];
    Ok((body, p, y))
}

impl ForecastToken {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Frames `max(0, t-k+1) ..= t`; shorter than `k` near the sequence start.
pub fn past_window(seq: &PoseSequence, t: usize, k: usize) -> Result<&[PoseFrame]> {
    if t >= seq.len() {
        return Err(Error::Contract(format!(
            "frame {t} out of range for a sequence of {} frames",
            seq.len()
        )));
    }
    if k == 0 {
        return Err(Error::Contract("window length must be at least 1".into()));
    }
    let start = (t + 1).saturating_sub(k);
    Ok(&seq.frames()[start..=t])
}

/// Root position according to the skeleton's root rule.
pub fn derive_root(body: &BodyPose, skeleton: &SkeletonSpec) -> Vec3 {
    let idx = &skeleton.root_indices;
    let mut acc = [0.0; 3];
    for &i in idx {
        for (a, v) in acc.iter_mut().zip(body.joints[i]) {
            *a += v;
        }
    }
    acc.map(|a| a / idx.len() as f64)
}
