//! Visual feature providers: the contract through which visual evidence enters
//! the current-frame estimator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{PoseFrame, SkeletonSpec};
use crate::tensor::init_normal;

/// Maps a past frame window (current frame last) to a fixed-width feature.
///
/// Implementations must be deterministic: the same window yields the same feature.
pub trait VisualFeatureProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn feature(&self, window: &[PoseFrame]) -> Result<Vec<f64>>;
}

fn current(window: &[PoseFrame]) -> Result<&PoseFrame> {
    window
        .last()
        .ok_or_else(|| Error::Contract("visual feature requested for an empty window".into()))
}

/// Always the zero vector: the proprioception-only arm.
#[derive(Debug, Clone)]
pub struct NullProvider {
    dim: usize,
}

pub fn make_null_provider(dim: usize) -> Result<NullProvider> {
    if dim == 0 {
        return Err(Error::Config("visual feature dimension must be at least 1".into()));
    }
    Ok(NullProvider { dim })
}

impl VisualFeatureProvider for NullProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn feature(&self, window: &[PoseFrame]) -> Result<Vec<f64>> {
        current(window)?;
        Ok(vec![0.0; self.dim])
    }
}

/// Fixed random linear view of the current frame's body pose plus Gaussian noise.
///
/// The pose is taken relative to the headset position, i.e. as seen from the
/// wearer's own viewpoint. Noise is seeded from the provider seed and the
/// frame's index and headset position, so repeated queries agree exactly.
#[derive(Debug, Clone)]
pub struct InformativeProvider {
    dim: usize,
    joints: usize,
    noise_sigma: f64,
    seed: u64,
    /// Row-major `dim × 3J`.
    projection: Vec<f64>,
}

pub fn make_informative_provider(
    skeleton: &SkeletonSpec,
    dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<InformativeProvider> {
    if dim == 0 {
        return Err(Error::Config("visual feature dimension must be at least 1".into()));
    }
    let cols = 3 * skeleton.joint_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = init_normal(&mut rng, vec![dim, cols], (1.0 / cols as f64).sqrt()).into_data();
    InformativeProvider::with_projection(skeleton, dim, projection, noise_sigma, seed)
}

impl InformativeProvider {
    pub fn with_projection(
        skeleton: &SkeletonSpec,
        dim: usize,
        projection: Vec<f64>,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let joints = skeleton.joint_count();
        if projection.len() != dim * 3 * joints {
            return Err(Error::Dimension(format!(
                "projection has {} entries, expected {dim}×{}",
                projection.len(),
                3 * joints
            )));
        }
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        Ok(Self {
            dim,
            joints,
            noise_sigma,
            seed,
            projection,
        })
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    fn noise_rng(&self, frame: &PoseFrame) -> ChaCha8Rng {
        // FNV-1a over the identifying bits of the frame
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        mix(self.seed);
        mix(frame.index as u64);
        mix(frame.timestamp.to_bits());
        frame.headset.position.iter().for_each(|p| mix(p.to_bits()));
        ChaCha8Rng::seed_from_u64(h)
    }
}

impl VisualFeatureProvider for InformativeProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn feature(&self, window: &[PoseFrame]) -> Result<Vec<f64>> {
        let frame = current(window)?;
        let body = frame.body.as_ref().ok_or_else(|| {
            Error::Contract(format!(
                "informative provider needs the body pose of frame {}",
                frame.index
            ))
        })?;
        if body.joint_count() != self.joints {
            return Err(Error::Contract(format!(
                "body has {} joints, provider expects {}",
                body.joint_count(),
                self.joints
            )));
        }
        let p = frame.headset.position;
        let rel: Vec<f64> = body
            .joints()
            .iter()
            .flat_map(|j| [j[0] - p[0], j[1] - p[1], j[2] - p[2]])
            .collect();
        let cols = rel.len();
        let mut out: Vec<f64> = self
            .projection
            .chunks_exact(cols)
            .map(|row| row.iter().zip(&rel).map(|(a, b)| a * b).sum())
            .collect();
        if self.noise_sigma > 0.0 {
            let mut rng = self.noise_rng(frame);
            let noise = Normal::new(0.0, self.noise_sigma).expect("sigma validated");
            out.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        Ok(out)
    }
}

/// Reads features stored on the frames themselves (the `v` field of sequence files).
#[derive(Debug, Clone)]
pub struct StoredFeatureProvider {
    dim: usize,
}

impl StoredFeatureProvider {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl VisualFeatureProvider for StoredFeatureProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn feature(&self, window: &[PoseFrame]) -> Result<Vec<f64>> {
        let frame = current(window)?;
        match &frame.visual_feature {
            Some(v) if v.len() == self.dim => Ok(v.clone()),
            Some(v) => Err(Error::Contract(format!(
                "frame {} stores a {}-dim feature, expected {}",
                frame.index,
                v.len(),
                self.dim
            ))),
            None => Err(Error::Contract(format!(
                "frame {} has no stored visual feature",
                frame.index
            ))),
        }
    }
}

/// Serializable provider choice used in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Null {
        dim: usize,
    },
    Informative {
        dim: usize,
        noise_sigma: f64,
        seed: u64,
    },
    Stored {
        dim: usize,
    },
}

impl ProviderSpec {
    pub fn dim(&self) -> usize {
        match *self {
            ProviderSpec::Null { dim } | ProviderSpec::Stored { dim } => dim,
            ProviderSpec::Informative { dim, .. } => dim,
        }
    }

    pub fn build(&self, skeleton: &SkeletonSpec) -> Result<Box<dyn VisualFeatureProvider>> {
        Ok(match *self {
            ProviderSpec::Null { dim } => Box::new(make_null_provider(dim)?),
            ProviderSpec::Informative {
                dim,
                noise_sigma,
                seed,
            } => Box::new(make_informative_provider(skeleton, dim, noise_sigma, seed)?),
            ProviderSpec::Stored { dim } => Box::new(StoredFeatureProvider::new(dim)),
        })
    }
}

/// Stores `provider`'s feature on every frame so that ground truth can be withheld afterwards.
pub fn annotate_visual_features(
    seq: &mut crate::pose::PoseSequence,
    provider: &dyn VisualFeatureProvider,
    window: usize,
) -> Result<()> {
    let features = (0..seq.len())
        .map(|t| provider.feature(crate::pose::past_window(seq, t, window)?))
        .collect::<Result<Vec<_>>>()?;
    for (frame, f) in seq.frames_mut().iter_mut().zip(features) {
        frame.visual_feature = Some(f);
    }
    Ok(())
}
