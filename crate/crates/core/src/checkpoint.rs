//! Binary checkpoints: an 8-byte little-endian manifest length, a JSON
//! manifest, then every tensor as little-endian `f64`s.
//!
//! Stored tensors are the model parameters in registration order followed by
//! the optimizer moments as `adam.m/<name>` and `adam.v/<name>`. Offsets in
//! the manifest are byte offsets into the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{CurrentFrameModel, EstimatorConfig};
use crate::forecaster::{ForecastModel, ForecasterConfig};
use crate::pose::SkeletonSpec;
use crate::tensor::{Adam, AdamConfig, ParamSet, Tensor};

pub const CHECKPOINT_TAG: &str = "egocast-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Estimator,
    Forecaster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    kind: ModelKind,
    config: serde_json::Value,
    skeleton: SkeletonSpec,
    step: u64,
    adam: AdamConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub skeleton: SkeletonSpec,
    pub step: u64,
    pub adam: AdamConfig,
    pub tensors: Vec<NamedTensor>,
}

fn collect(params: &ParamSet, adam: &Adam) -> Vec<NamedTensor> {
    let mut out: Vec<NamedTensor> = params
        .iter()
        .map(|(n, t)| NamedTensor {
            name: n.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    for (prefix, moments) in [("adam.m/", adam.first_moments()), ("adam.v/", adam.second_moments())] {
        out.extend(params.iter().zip(moments).map(|((n, t), m)| NamedTensor {
            name: format!("{prefix}{n}"),
            shape: t.shape().to_vec(),
            data: m.clone(),
        }));
    }
    out
}

impl Checkpoint {
    pub fn from_estimator(model: &CurrentFrameModel, adam: &Adam) -> Result<Self> {
        Ok(Self {
            kind: ModelKind::Estimator,
            config: serde_json::to_value(model.config())?,
            skeleton: model.skeleton().clone(),
            step: adam.step_count(),
            adam: adam.config,
            tensors: collect(model.params(), adam),
        })
    }

    pub fn from_forecaster(model: &ForecastModel, adam: &Adam) -> Result<Self> {
        Ok(Self {
            kind: ModelKind::Forecaster,
            config: serde_json::to_value(model.config())?,
            skeleton: model.skeleton().clone(),
            step: adam.step_count(),
            adam: adam.config,
            tensors: collect(model.params(), adam),
        })
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("checkpoint holds a {:?}, expected a {kind:?}", self.kind)));
        }
        Ok(())
    }

    /// Splits tensors into parameters and optimizer moments for `template`'s layout.
    fn restore(&self, template: &ParamSet) -> Result<(ParamSet, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let n = template.len();
        if self.tensors.len() != 3 * n {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, expected {}",
                self.tensors.len(),
                3 * n
            )));
        }
        let mut params = ParamSet::new();
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for (i, (name, t)) in template.iter().enumerate() {
            let expect = [name.to_string(), format!("adam.m/{name}"), format!("adam.v/{name}")];
            for (slot, want) in expect.iter().enumerate() {
                let got = &self.tensors[slot * n + i];
                if &got.name != want || got.shape != t.shape() {
                    return Err(Error::Format(format!(
                        "tensor {} {:?} does not match expected {want} {:?}",
                        got.name,
                        got.shape,
                        t.shape()
                    )));
                }
            }
            params.add(name, Tensor::new(t.shape().to_vec(), self.tensors[i].data.clone())?);
            first.push(self.tensors[n + i].data.clone());
            second.push(self.tensors[2 * n + i].data.clone());
        }
        Ok((params, first, second))
    }

    /// Rebuilds the estimator and its optimizer. With `expected`, the stored
    /// configuration must match it up to the iteration budget.
    pub fn into_estimator(self, expected: Option<&EstimatorConfig>) -> Result<(CurrentFrameModel, Adam)> {
        self.expect_kind(ModelKind::Estimator)?;
        let mut config: EstimatorConfig = serde_json::from_value(self.config.clone())?;
        if let Some(e) = expected {
            if !e.compatible_with(&config) {
                return Err(Error::Config("checkpoint estimator configuration differs from the requested one".into()));
            }
            // carries the new iteration budget forward
            config = e.clone();
        }
        let template = CurrentFrameModel::new(config.clone(), self.skeleton.clone())?;
        let (params, m, v) = self.restore(template.params())?;
        let model = CurrentFrameModel::from_params(config, self.skeleton, params)?;
        let adam = Adam::from_state(self.adam, model.params(), self.step, m, v)?;
        Ok((model, adam))
    }

    pub fn into_forecaster(self, expected: Option<&ForecasterConfig>) -> Result<(ForecastModel, Adam)> {
        self.expect_kind(ModelKind::Forecaster)?;
        let mut config: ForecasterConfig = serde_json::from_value(self.config.clone())?;
        if let Some(e) = expected {
            if !e.compatible_with(&config) {
                return Err(Error::Config("checkpoint forecaster configuration differs from the requested one".into()));
            }
            // carries the new iteration budget forward
            config = e.clone();
        }
        let template = ForecastModel::new(config.clone(), self.skeleton.clone())?;
        let (params, m, v) = self.restore(template.params())?;
        let model = ForecastModel::from_params(config, self.skeleton, params)?;
        let adam = Adam::from_state(self.adam, model.params(), self.step, m, v)?;
        Ok((model, adam))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += 8 * t.data.len();
                e
            })
            .collect();
        let manifest = Manifest {
            format: CHECKPOINT_TAG.into(),
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            config: self.config.clone(),
            skeleton: self.skeleton.clone(),
            step: self.step,
            adam: self.adam,
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format("checkpoint is shorter than its length prefix".into()))?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(8..8usize.saturating_add(len))
            .ok_or_else(|| Error::Format("checkpoint manifest is truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.format != CHECKPOINT_TAG || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} version {}",
                manifest.format, manifest.version
            )));
        }
        let payload = &bytes[8 + len..];
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let count: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + 8 * count > payload.len() {
                return Err(Error::Format(format!("tensor {} lies outside the payload", e.name)));
            }
            let data = payload[e.offset..e.offset + 8 * count]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            expected_offset += 8 * count;
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if expected_offset != payload.len() {
            return Err(Error::Format("checkpoint has trailing bytes".into()));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            skeleton: manifest.skeleton,
            step: manifest.step,
            adam: manifest.adam,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
