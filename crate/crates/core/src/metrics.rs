//! Evaluation: MPJPE, per-joint errors, horizon curves, AUC and oracle alignment.
//!
//! All errors are reported in centimeters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::ForecastOutput;
use crate::pose::{derive_root, BodyPose, PoseSequence, SkeletonSpec};

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_pair(pred: &[BodyPose], gt: &[BodyPose]) -> Result<usize> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "{} predicted poses vs {} ground-truth poses",
            pred.len(),
            gt.len()
        )));
    }
    let j = gt[0].joint_count();
    if let Some(i) = (0..pred.len()).find(|&i| pred[i].joint_count() != j || gt[i].joint_count() != j) {
        return Err(Error::Contract(format!("frame {i} has a different joint count")));
    }
    Ok(j)
}

/// Per-joint mean Euclidean distance across frames, in cm.
pub fn per_joint_error(pred: &[BodyPose], gt: &[BodyPose]) -> Result<Vec<f64>> {
    let j = check_pair(pred, gt)?;
    let mut sums = vec![0.0; j];
    for (p, g) in pred.iter().zip(gt) {
        for (s, (a, b)) in sums.iter_mut().zip(p.joints().iter().zip(g.joints())) {
            *s += dist(a, b);
        }
    }
    Ok(sums.into_iter().map(|s| 100.0 * s / pred.len() as f64).collect())
}

/// Mean per-joint position error in cm, without any alignment.
pub fn mpjpe(pred: &[BodyPose], gt: &[BodyPose]) -> Result<f64> {
    let per = per_joint_error(pred, gt)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `(horizon_s, mpjpe_cm)` points with strictly increasing horizons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCurve {
    points: Vec<(f64, f64)>,
}

impl HorizonCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("horizon curve has no points".into()));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Contract("horizons must be strictly increasing".into()));
        }
        if points.iter().any(|&(h, v)| !h.is_finite() || !v.is_finite() || v < 0.0) {
            return Err(Error::Contract("curve values must be finite and non-negative".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn horizons(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    /// Writes `horizon_s,mpjpe_cm` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "horizon_s,mpjpe_cm")?;
        for (h, v) in &self.points {
            writeln!(out, "{h},{v}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Trapezoidal area under the curve over the horizon axis rescaled to [0, 1].
pub fn auc(curve: &HorizonCurve) -> Result<f64> {
    let p = curve.points();
    if p.len() < 2 {
        return Err(Error::Contract("AUC needs at least two horizons".into()));
    }
    let (lo, hi) = (p[0].0, p[p.len() - 1].0);
    // integrating the excess over the first value keeps flat curves exact
    let base = p[0].1;
    let excess: f64 = p
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * ((w[0].1 + w[1].1) / 2.0 - base))
        .sum();
    Ok(base + excess / (hi - lo))
}

/// Translates every predicted frame so its root lands on the ground-truth root.
pub fn oracle_align(pred: &ForecastOutput, gt: &[BodyPose], skeleton: &SkeletonSpec) -> Result<ForecastOutput> {
    if gt.len() < pred.len() {
        return Err(Error::Contract(format!(
            "{} ground-truth frames for a {}-frame forecast",
            gt.len(),
            pred.len()
        )));
    }
    let body = pred
        .body
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let (rp, rg) = (derive_root(p, skeleton), derive_root(g, skeleton));
            p.translated([rg[0] - rp[0], rg[1] - rp[1], rg[2] - rp[2]])
        })
        .collect();
    Ok(ForecastOutput {
        body,
        ..pred.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSettings {
    pub horizons: Vec<f64>,
    pub fps: f64,
    /// Frames between evaluation anchors.
    pub stride: usize,
    /// First anchor frame; `None` starts at the forecaster's window length minus one.
    pub first_anchor: Option<usize>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            horizons: vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0],
            fps: 30.0,
            stride: 30,
            first_anchor: None,
        }
    }
}

impl MetricSettings {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("horizons must be non-empty and strictly ascending".into()));
        }
        if self.stride == 0 || !(self.fps > 0.0) {
            return Err(Error::Config("stride and fps must be positive".into()));
        }
        if self.horizon_offsets().contains(&0) {
            return Err(Error::Config("every horizon must be at least one frame".into()));
        }
        Ok(())
    }

    /// Frames ahead of the anchor for each horizon: `round(h·fps)`.
    pub fn horizon_offsets(&self) -> Vec<usize> {
        self.horizons.iter().map(|h| (h * self.fps).round() as usize).collect()
    }

    pub fn max_offset(&self) -> usize {
        self.horizon_offsets().into_iter().max().unwrap_or(0)
    }

    /// Anchors `t` of `seq` with ground truth at every horizon.
    pub fn anchors(&self, seq: &PoseSequence, default_first: usize) -> Vec<usize> {
        let first = self.first_anchor.unwrap_or(default_first);
        let last = seq.len().saturating_sub(1 + self.max_offset());
        if seq.len() <= self.max_offset() || first > last {
            return Vec::new();
        }
        (first..=last).step_by(self.stride).collect()
    }
}

/// Per-horizon errors for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub sequence: usize,
    pub activity: Option<String>,
    pub anchors: usize,
    pub mpjpe_cm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityResult {
    pub anchors: usize,
    pub mpjpe_cm: Vec<f64>,
    pub auc_cm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizons_s: Vec<f64>,
    /// Anchor-weighted mean over sequences.
    pub mpjpe_cm: Vec<f64>,
    /// `None` for single-horizon settings.
    pub auc_cm: Option<f64>,
    pub joints: Vec<String>,
    /// Mean over every evaluated (anchor, horizon) frame.
    pub per_joint_cm: Vec<f64>,
    pub per_sequence: Vec<SequenceResult>,
    pub per_activity: BTreeMap<String, ActivityResult>,
}

impl EvalReport {
    pub fn curve(&self) -> Result<HorizonCurve> {
        HorizonCurve::new(self.horizons_s.iter().copied().zip(self.mpjpe_cm.iter().copied()).collect())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    /// Writes `joint,mpjpe_cm` rows.
    pub fn write_per_joint_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "joint,mpjpe_cm")?;
        for (name, v) in self.joints.iter().zip(&self.per_joint_cm) {
            writeln!(out, "{name},{v}")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn weighted_mean(rows: &[&SequenceResult], horizons: usize) -> Vec<f64> {
    let total: usize = rows.iter().map(|r| r.anchors).sum();
    (0..horizons)
        .map(|h| rows.iter().map(|r| r.mpjpe_cm[h] * r.anchors as f64).sum::<f64>() / total as f64)
        .collect()
}

fn curve_auc(horizons: &[f64], values: &[f64]) -> Result<Option<f64>> {
    if horizons.len() < 2 {
        return Ok(None);
    }
    let curve = HorizonCurve::new(horizons.iter().copied().zip(values.iter().copied()).collect())?;
    auc(&curve).map(Some)
}

/// Evaluates `infer(seq, t)` at every anchor of every sequence.
///
/// `infer` must return at least `round(h_max·fps)` future frames; the frame
/// for horizon `h` is index `round(h·fps) − 1`. Sequences are evaluated in
/// parallel but reduced in input order.
pub fn evaluate<F>(infer: F, eval_set: &[PoseSequence], settings: &MetricSettings, default_first: usize) -> Result<EvalReport>
where
    F: Fn(&PoseSequence, usize) -> Result<ForecastOutput> + Sync,
{
    settings.validate()?;
    let first = eval_set
        .first()
        .ok_or_else(|| Error::Data("evaluation set is empty".into()))?;
    let skeleton = first.skeleton();
    if eval_set.iter().any(|s| s.skeleton() != skeleton) {
        return Err(Error::Contract("evaluation sequences use different skeletons".into()));
    }
    let offsets = settings.horizon_offsets();
    let joints = skeleton.joint_count();

    let per_seq: Vec<Option<(SequenceResult, Vec<f64>)>> = eval_set
        .par_iter()
        .enumerate()
        .map(|(si, seq)| -> Result<_> {
            let anchors = settings.anchors(seq, default_first);
            if anchors.is_empty() {
                return Ok(None);
            }
            let mut sums = vec![0.0; offsets.len()];
            let mut joint_sums = vec![0.0; joints];
            for &t in &anchors {
                let out = infer(seq, t)?;
                if out.len() < settings.max_offset() {
                    return Err(Error::Contract(format!(
                        "forecast has {} frames; horizons need {}",
                        out.len(),
                        settings.max_offset()
                    )));
                }
                for (hi, &o) in offsets.iter().enumerate() {
                    let pred = std::slice::from_ref(&out.body[o - 1]);
                    let gt = std::slice::from_ref(seq.body_at(t + o)?);
                    let per = per_joint_error(pred, gt)?;
                    sums[hi] += per.iter().sum::<f64>() / joints as f64;
                    joint_sums.iter_mut().zip(&per).for_each(|(s, v)| *s += v);
                }
            }
            let n = anchors.len() as f64;
            Ok(Some((
                SequenceResult {
                    sequence: si,
                    activity: seq.activity().map(str::to_string),
                    anchors: anchors.len(),
                    mpjpe_cm: sums.into_iter().map(|s| s / n).collect(),
                },
                joint_sums,
            )))
        })
        .collect::<Result<_>>()?;

    let per_seq: Vec<(SequenceResult, Vec<f64>)> = per_seq.into_iter().flatten().collect();
    if per_seq.is_empty() {
        return Err(Error::Data("no sequence has a valid evaluation anchor".into()));
    }
    let rows: Vec<&SequenceResult> = per_seq.iter().map(|r| &r.0).collect();
    let mpjpe_cm = weighted_mean(&rows, offsets.len());
    let evaluated: usize = rows.iter().map(|r| r.anchors).sum::<usize>() * offsets.len();
    let per_joint_cm = (0..joints)
        .map(|j| per_seq.iter().map(|r| r.1[j]).sum::<f64>() / evaluated as f64)
        .collect();

    let mut groups: BTreeMap<String, Vec<&SequenceResult>> = BTreeMap::new();
    for r in &rows {
        let key = r.activity.clone().unwrap_or_else(|| "unlabeled".into());
        groups.entry(key).or_default().push(r);
    }
    let per_activity = groups
        .into_iter()
        .map(|(k, g)| {
            let values = weighted_mean(&g, offsets.len());
            let auc_cm = curve_auc(&settings.horizons, &values)?;
            Ok((
                k,
                ActivityResult {
                    anchors: g.iter().map(|r| r.anchors).sum(),
                    mpjpe_cm: values,
                    auc_cm,
                },
            ))
        })
        .collect::<Result<_>>()?;

    Ok(EvalReport {
        horizons_s: settings.horizons.clone(),
        auc_cm: curve_auc(&settings.horizons, &mpjpe_cm)?,
        mpjpe_cm,
        joints: skeleton.joints().to_vec(),
        per_joint_cm,
        per_sequence: per_seq.into_iter().map(|r| r.0).collect(),
        per_activity,
    })
}

/// The aggregate curve of [`evaluate`].
pub fn horizon_curve<F>(infer: F, eval_set: &[PoseSequence], settings: &MetricSettings, default_first: usize) -> Result<HorizonCurve>
where
    F: Fn(&PoseSequence, usize) -> Result<ForecastOutput> + Sync,
{
    evaluate(infer, eval_set, settings, default_first)?.curve()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(j: &[[f64; 3]]) -> BodyPose {
        BodyPose::new(j.to_vec()).unwrap()
    }

    #[test]
    fn hand_example() {
        let gt = [pose(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])];
        let pred = [pose(&[[0.03, 0.04, 0.0], [1.0, 1.0, 1.0]])];
        let per = per_joint_error(&pred, &gt).unwrap();
        assert!((per[0] - 5.0).abs() < 1e-12 && per[1] == 0.0);
        assert!((mpjpe(&pred, &gt).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn mismatch_is_contract_error() {
        let a = [pose(&[[0.0; 3]])];
        let b = [pose(&[[0.0; 3], [0.0; 3]])];
        assert!(matches!(mpjpe(&a, &b), Err(Error::Contract(_))));
        assert!(matches!(mpjpe(&a, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_examples() {
        let flat = HorizonCurve::new(vec![(0.5, 7.0), (1.0, 7.0), (5.0, 7.0)]).unwrap();
        assert_eq!(auc(&flat).unwrap(), 7.0);
        let two = HorizonCurve::new(vec![(0.5, 10.0), (5.0, 30.0)]).unwrap();
        assert_eq!(auc(&two).unwrap(), 20.0);
        let one = HorizonCurve::new(vec![(1.0, 3.0)]).unwrap();
        assert!(matches!(auc(&one), Err(Error::Contract(_))));
        assert!(HorizonCurve::new(vec![(1.0, 3.0), (1.0, 4.0)]).is_err());
        assert!(HorizonCurve::new(vec![(1.0, -3.0)]).is_err());
    }

    #[test]
    fn horizon_offsets_at_30_fps() {
        assert_eq!(MetricSettings::default().horizon_offsets(), vec![15, 30, 60, 90, 120, 150]);
    }
}
