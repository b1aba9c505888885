//! Seeded synthetic motion: standing, walking and reaching sequences with full
//! body and headset ground truth.
//!
//! World frame is z-up, meters. Every random draw comes from ChaCha8 seeded
//! through `rand_chacha::ChaCha8Rng::seed_from_u64`, so a sequence is a pure
//! function of its archetype, skeleton, duration, frame rate and seed.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{normalize_quaternion, BodyPose, HeadsetPose, PoseFrame, PoseSequence, SkeletonSpec, UnitQuat, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchetypeKind {
    Stand,
    Walk,
    Reach,
}

impl ArchetypeKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchetypeKind::Stand => "stand",
            ArchetypeKind::Walk => "walk",
            ArchetypeKind::Reach => "reach",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionArchetype {
    pub kind: ArchetypeKind,
    /// Forward speed in m/s; only walking moves the root.
    pub speed: f64,
    /// Walk: maximum heading change per second between waypoints. Stand and
    /// reach: amplitude in radians of a slow body yaw oscillation.
    pub turn_rate: f64,
    /// Standard deviation of the lateral waypoint jitter, meters.
    pub waypoint_noise: f64,
    /// Arm swing (walk, stand) or reach extension (reach), meters.
    pub limb_amplitude: f64,
    /// Base limb cycle frequency in Hz.
    pub limb_frequency: f64,
    /// Added to the limb frequency per m/s of speed.
    pub speed_coupling: f64,
    /// Vertical body bob in meters.
    pub head_bob: f64,
}

impl MotionArchetype {
    pub fn stand() -> Self {
        Self {
            kind: ArchetypeKind::Stand,
            speed: 0.0,
            turn_rate: 0.4,
            waypoint_noise: 0.0,
            limb_amplitude: 0.04,
            limb_frequency: 0.25,
            speed_coupling: 0.0,
            head_bob: 0.005,
        }
    }

    pub fn walk() -> Self {
        Self {
            kind: ArchetypeKind::Walk,
            speed: 1.0,
            turn_rate: 0.35,
            waypoint_noise: 0.08,
            limb_amplitude: 0.22,
            limb_frequency: 0.4,
            speed_coupling: 0.5,
            head_bob: 0.02,
        }
    }

    pub fn reach() -> Self {
        Self {
            kind: ArchetypeKind::Reach,
            speed: 0.0,
            turn_rate: 0.3,
            waypoint_noise: 0.0,
            limb_amplitude: 0.45,
            limb_frequency: 0.35,
            speed_coupling: 0.0,
            head_bob: 0.01,
        }
    }

    pub fn preset(kind: ArchetypeKind) -> Self {
        match kind {
            ArchetypeKind::Stand => Self::stand(),
            ArchetypeKind::Walk => Self::walk(),
            ArchetypeKind::Reach => Self::reach(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.speed,
            self.turn_rate,
            self.waypoint_noise,
            self.limb_amplitude,
            self.limb_frequency,
            self.speed_coupling,
            self.head_bob,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("{} archetype has a negative or non-finite parameter", self.kind.name())));
        }
        if self.kind == ArchetypeKind::Walk && !(0.3..=2.0).contains(&self.speed) {
            return Err(Error::Config(format!("walk speed {} is outside [0.3, 2.0] m/s", self.speed)));
        }
        Ok(())
    }

    fn cycle_hz(&self) -> f64 {
        self.limb_frequency + self.speed_coupling * self.speed
    }
}

/// Joint positions in the body frame (x forward, y left, z up) at rest.
fn rest_position(name: &str) -> Option<Vec3> {
    Some(match name {
        "pelvis" => [0.0, 0.0, 0.95],
        "left_hip" => [0.0, 0.09, 0.92],
        "right_hip" => [0.0, -0.09, 0.92],
        "spine" => [0.0, 0.0, 1.12],
        "chest" => [0.0, 0.0, 1.3],
        "neck" => [0.0, 0.0, 1.5],
        "head" => [0.02, 0.0, 1.62],
        "nose" => [0.1, 0.0, 1.62],
        "left_eye" => [0.08, 0.03, 1.66],
        "right_eye" => [0.08, -0.03, 1.66],
        "left_ear" => [0.0, 0.075, 1.63],
        "right_ear" => [0.0, -0.075, 1.63],
        "left_shoulder" => [0.0, 0.18, 1.45],
        "right_shoulder" => [0.0, -0.18, 1.45],
        "left_elbow" => [0.0, 0.2, 1.17],
        "right_elbow" => [0.0, -0.2, 1.17],
        "left_wrist" => [0.0, 0.2, 0.92],
        "right_wrist" => [0.0, -0.2, 0.92],
        "left_hand" => [0.0, 0.2, 0.84],
        "right_hand" => [0.0, -0.2, 0.84],
        "left_knee" => [0.0, 0.09, 0.5],
        "right_knee" => [0.0, -0.09, 0.5],
        "left_ankle" => [0.0, 0.09, 0.08],
        "right_ankle" => [0.0, -0.09, 0.08],
        "left_foot" => [0.12, 0.09, 0.02],
        "right_foot" => [0.12, -0.09, 0.02],
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Head,
    Torso,
    UpperArm,
    LowerArm,
    Thigh,
    Shin,
    Pelvis,
}

fn classify(name: &str) -> (Side, Segment) {
    let side = if name.starts_with("left_") {
        Side::Left
    } else if name.starts_with("right_") {
        Side::Right
    } else {
        Side::Center
    };
    let part = name.trim_start_matches("left_").trim_start_matches("right_");
    let seg = match part {
        "head" | "nose" | "eye" | "ear" => Segment::Head,
        "spine" | "chest" | "neck" | "shoulder" => Segment::Torso,
        "elbow" => Segment::UpperArm,
        "wrist" | "hand" => Segment::LowerArm,
        "knee" => Segment::Thigh,
        "ankle" | "foot" => Segment::Shin,
        _ => Segment::Pelvis,
    };
    (side, seg)
}

/// Which joint(s) define the head center the headset sits on.
fn head_indices(skeleton: &SkeletonSpec) -> Result<Vec<usize>> {
    if let Some(i) = skeleton.index_of("head") {
        return Ok(vec![i]);
    }
    match (skeleton.index_of("left_ear"), skeleton.index_of("right_ear")) {
        (Some(l), Some(r)) => Ok(vec![l, r]),
        _ => skeleton
            .index_of("nose")
            .map(|i| vec![i])
            .ok_or_else(|| Error::Config("skeleton has no head, ear or nose joint to mount a headset on".into())),
    }
}

fn catmull_rom(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], p3: [f64; 2], s: f64) -> [f64; 2] {
    let (s2, s3) = (s * s, s * s * s);
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (c - a) * s + (2.0 * a - 5.0 * b + 4.0 * c - d) * s2 + (3.0 * b - a - 3.0 * c + d) * s3)
    };
    [f(p0[0], p1[0], p2[0], p3[0]), f(p0[1], p1[1], p2[1], p3[1])]
}

/// Arc-length parametrized planar path.
struct Path {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl Path {
    /// Spline through jittered waypoints, at least `length` meters long.
    fn walking(rng: &mut ChaCha8Rng, arch: &MotionArchetype, start: [f64; 2], heading: f64, length: f64) -> Path {
        let spacing = 1.0;
        let jitter = Normal::new(0.0, arch.waypoint_noise.max(1e-12)).expect("positive sigma");
        let max_turn = arch.turn_rate * spacing / arch.speed;
        let mut h = heading;
        let mut cursor = [start[0] - spacing * h.cos(), start[1] - spacing * h.sin()];
        let mut way = vec![cursor];
        let mut travelled = -spacing;
        // two spare waypoints past the end keep the final spline segment well defined
        while travelled < length + 3.0 * spacing {
            cursor = [cursor[0] + spacing * h.cos(), cursor[1] + spacing * h.sin()];
            travelled += spacing;
            let lateral = if way.len() == 1 { 0.0 } else { jitter.sample(rng) };
            way.push([cursor[0] - lateral * h.sin(), cursor[1] + lateral * h.cos()]);
            h += rng.random_range(-1.0..=1.0) * max_turn;
        }
        let mut points = Vec::new();
        for w in way.windows(4) {
            for s in 0..64 {
                points.push(catmull_rom(w[0], w[1], w[2], w[3], s as f64 / 64.0));
            }
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Path { points, cumulative }
    }

    /// Position and unit tangent direction at arc length `s`.
    fn at(&self, s: f64) -> ([f64; 2], f64) {
        let last = self.points.len() - 1;
        let i = self.cumulative.partition_point(|&c| c <= s).clamp(1, last);
        let (a, b) = (self.points[i - 1], self.points[i]);
        let seg = self.cumulative[i] - self.cumulative[i - 1];
        let u = if seg > 0.0 { ((s - self.cumulative[i - 1]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        let pos = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
        (pos, (b[1] - a[1]).atan2(b[0] - a[0]))
    }
}

/// Per-sequence random draws.
struct Style {
    start: [f64; 2],
    heading: f64,
    phase: f64,
    scale: f64,
    headset_offset: Vec3,
    look_phase: f64,
    reach_side: f64,
}

fn rotate_z(v: Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

fn lerp(a: Vec3, b: Vec3, u: f64) -> Vec3 {
    [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), a[2] + u * (b[2] - a[2])]
}

/// Body-frame joint positions at time `time` for a given limb phase.
fn posed_joints(names: &[String], arch: &MotionArchetype, style: &Style, time: f64, phase: f64) -> Vec<Vec3> {
    let amp = arch.limb_amplitude;
    let look = 0.25 * (TAU * 0.11 * time + style.look_phase).sin();
    let reach_u = 0.5 * (1.0 - (TAU * arch.limb_frequency * time).cos());
    let lean = match arch.kind {
        ArchetypeKind::Reach => 0.08 * reach_u,
        _ => 0.0,
    };
    names
        .iter()
        .map(|name| {
            let mut p = rest_position(name).expect("names checked by caller").map(|v| v * style.scale);
            let (side, seg) = classify(name);
            let sgn = match side {
                Side::Left => 1.0,
                Side::Right => -1.0,
                Side::Center => 0.0,
            };
            let h = p[2] / style.scale;
            match arch.kind {
                ArchetypeKind::Walk => {
                    // legs swing in antiphase, arms counter to the same-side leg
                    let leg = (phase + if side == Side::Right { PI } else { 0.0 }).sin();
                    let lift = (phase + if side == Side::Right { PI } else { 0.0 }).cos().max(0.0);
                    match seg {
                        Segment::Thigh => {
                            p[0] += 0.5 * amp * leg;
                            p[2] += 0.03 * lift;
                        }
                        Segment::Shin => {
                            p[0] += amp * leg;
                            p[2] += 0.06 * lift;
                        }
                        Segment::UpperArm => p[0] -= 0.35 * amp * leg,
                        Segment::LowerArm => p[0] -= 0.7 * amp * leg,
                        _ => {}
                    }
                }
                ArchetypeKind::Stand => {
                    let sway = (phase + sgn * 0.5 * PI).sin();
                    match seg {
                        Segment::UpperArm => p[0] += 0.5 * amp * sway,
                        Segment::LowerArm => p[0] += amp * sway,
                        _ => {}
                    }
                }
                ArchetypeKind::Reach => {
                    if sgn == style.reach_side {
                        let shoulder = [0.0, 0.18 * sgn * style.scale, 1.45 * style.scale];
                        let target = [0.1 + amp, 0.12 * sgn, 1.5 * style.scale];
                        match seg {
                            Segment::UpperArm => p = lerp(p, lerp(shoulder, target, 0.5), reach_u),
                            Segment::LowerArm => {
                                let extra = if name.ends_with("hand") { 0.08 } else { 0.0 };
                                p = lerp(p, [target[0] + extra, target[1], target[2]], reach_u)
                            }
                            _ => {}
                        }
                    }
                }
            }
            // upper body leans forward proportionally to height above the hips
            if h > 1.0 {
                p[0] += lean * (h - 1.0) / 0.6;
            }
            if seg == Segment::Head {
                let neck = [lean * 0.5 / 0.6, 0.0, 1.5 * style.scale];
                let rel = rotate_z([p[0] - neck[0], p[1] - neck[1], p[2] - neck[2]], look);
                p = [neck[0] + rel[0], neck[1] + rel[1], neck[2] + rel[2]];
            }
            p
        })
        .collect()
}

/// Generates one fully annotated sequence.
pub fn generate_sequence(
    archetype: &MotionArchetype,
    skeleton: &SkeletonSpec,
    duration_s: f64,
    fps: f64,
    seed: u64,
) -> Result<PoseSequence> {
    archetype.validate()?;
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(Error::Config(format!("frame rate must be positive, got {fps}")));
    }
    let frames = (duration_s * fps).round();
    if !(frames >= 2.0) {
        return Err(Error::Data(format!("{duration_s} s at {fps} fps is shorter than two frames")));
    }
    let frames = frames as usize;
    if let Some(name) = skeleton.joints().iter().find(|n| rest_position(n).is_none()) {
        return Err(Error::Config(format!("no motion template for joint '{name}'")));
    }
    let head = head_indices(skeleton)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = Style {
        start: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        heading: rng.random_range(-PI..PI),
        phase: rng.random_range(0.0..TAU),
        scale: rng.random_range(0.92..1.08),
        headset_offset: [
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(0.06..0.1),
        ],
        look_phase: rng.random_range(0.0..TAU),
        reach_side: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
    };
    let path = (archetype.kind == ArchetypeKind::Walk).then(|| {
        Path::walking(&mut rng, archetype, style.start, style.heading, archetype.speed * duration_s)
    });
    let yaw_rate = rng.random_range(0.05..0.12);
    let pitch0 = rng.random_range(-0.15..0.05);

    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        let time = i as f64 / fps;
        let phase = style.phase + TAU * archetype.cycle_hz() * time;
        let (ground, yaw) = match &path {
            Some(path) => path.at(archetype.speed * time),
            None => {
                let sway = 0.02 * (TAU * 0.2 * time + style.phase).sin();
                let yaw = style.heading + archetype.turn_rate * (TAU * yaw_rate * time).sin();
                ([style.start[0] + sway * yaw.cos(), style.start[1] + sway * yaw.sin()], yaw)
            }
        };
        let bob = archetype.head_bob * (2.0 * phase).cos();
        let joints: Vec<Vec3> = posed_joints(skeleton.joints(), archetype, &style, time, phase)
            .into_iter()
            .map(|p| {
                let w = rotate_z(p, yaw);
                [w[0] + ground[0], w[1] + ground[1], w[2] + bob]
            })
            .collect();
        let mut center = [0.0; 3];
        for &h in &head {
            (0..3).for_each(|a| center[a] += joints[h][a] / head.len() as f64);
        }
        let look = 0.25 * (TAU * 0.11 * time + style.look_phase).sin();
        let pitch = pitch0 + 0.03 * (2.0 * phase).sin();
        let rotation = UnitQuat::from_axis_angle([0.0, 0.0, 1.0], yaw + look)
            .mul(&UnitQuat::from_axis_angle([0.0, 1.0, 0.0], pitch));
        let rotation = normalize_quaternion(rotation.as_array())?;
        out.push(PoseFrame {
            index: i,
            timestamp: i as f64 / fps,
            headset: HeadsetPose {
                position: [
                    center[0] + style.headset_offset[0],
                    center[1] + style.headset_offset[1],
                    center[2] + style.headset_offset[2],
                ],
                rotation,
            },
            body: Some(BodyPose::new(joints)?),
            visual_feature: None,
        });
    }
    PoseSequence::new(skeleton.clone(), out, Some(archetype.kind.name().into()))?.with_fps(fps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Training sequences per archetype.
    pub sequences_per_archetype: usize,
    /// Test sequences per archetype; defaults to the training count.
    pub test_sequences_per_archetype: Option<usize>,
    pub duration_s: f64,
    pub fps: f64,
    pub skeleton: SkeletonSpec,
    pub archetypes: Vec<ArchetypeKind>,
    /// Walk speeds are drawn uniformly from this range per sequence.
    pub walk_speed_range: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sequences_per_archetype: 4,
            test_sequences_per_archetype: None,
            duration_s: 12.0,
            fps: 30.0,
            skeleton: SkeletonSpec::coco17(),
            archetypes: vec![ArchetypeKind::Stand, ArchetypeKind::Walk, ArchetypeKind::Reach],
            walk_speed_range: (0.8, 1.6),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.archetypes.is_empty() {
            return Err(Error::Config("generator needs at least one archetype".into()));
        }
        let (lo, hi) = self.walk_speed_range;
        if !(0.3 <= lo && lo <= hi && hi <= 2.0) {
            return Err(Error::Config(format!("walk speed range ({lo}, {hi}) must lie in [0.3, 2.0]")));
        }
        if !(self.duration_s > 0.0) || !(self.fps > 0.0) {
            return Err(Error::Config("duration and fps must be positive".into()));
        }
        Ok(())
    }

    pub fn frames_per_sequence(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PoseSequence>,
    pub test: Vec<PoseSequence>,
}

/// Seed of the `counter`-th sequence. Injective in `counter` for a fixed run
/// seed (odd multiplier, then a bijective finalizer), so splits that use
/// disjoint counters get disjoint seeds.
pub fn sequence_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0xd6e8_feb8_6659_fd93)
        .wrapping_add(counter.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Train and test sets with the same number of sequences of every archetype.
/// Training sequences use even seed counters, test sequences odd ones.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let split = |per: usize, parity: u64| -> Result<Vec<PoseSequence>> {
        let mut out = Vec::new();
        for (a, &kind) in config.archetypes.iter().enumerate() {
            for i in 0..per {
                let counter = 2 * ((a * per + i) as u64) + parity;
                let seed = sequence_seed(config.seed, counter);
                let mut arch = MotionArchetype::preset(kind);
                if kind == ArchetypeKind::Walk {
                    let (lo, hi) = config.walk_speed_range;
                    arch.speed = if hi > lo {
                        ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(lo..=hi)
                    } else {
                        lo
                    };
                }
                out.push(generate_sequence(&arch, &config.skeleton, config.duration_s, config.fps, seed)?);
            }
        }
        Ok(out)
    };
    let train = split(config.sequences_per_archetype, 0)?;
    let test = split(config.test_sequences_per_archetype.unwrap_or(config.sequences_per_archetype), 1)?;
    Ok(Dataset { train, test })
}
