//! Experiment orchestration behind the command-line tool.
//!
//! Every command reads a [`RunConfig`], writes its effective configuration to
//! `<output_dir>/config.json`, and places results under `output_dir`:
//!
//! | command        | outputs                                                        |
//! |----------------|----------------------------------------------------------------|
//! | generate       | `train.jsonl`, `test.jsonl`                                    |
//! | train-current  | `checkpoints/estimator.ckpt`, `estimator_loss.csv`             |
//! | train-forecast | `checkpoints/forecaster.ckpt`, `forecaster_loss.csv`           |
//! | eval           | `curves.csv`, `report.json`, `per_joint.csv` (+ `*_oracle`)     |
//! | ablate-window  | `ablate_window.csv` (`window,mpjpe_1s_cm`)                     |
//! | ablate-visual  | `ablate_visual.csv` (`arm,mpjpe_cm`)                           |
//!
//! Loss traces are `step,loss` CSVs.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::estimator::{CurrentFrameModel, EstimatorConfig, EstimatorTrainer};
use crate::forecaster::{
    end_to_end_infer, tokens_from_poses, ForecastModel, ForecastOutput, ForecasterConfig, ForecasterTrainer,
    LossWeights, PastPoseSource,
};
use crate::metrics::{evaluate, mpjpe, oracle_align, EvalReport, MetricSettings};
use crate::pose::{past_window, BodyPose, PoseSequence};
use crate::provider::{ProviderSpec, VisualFeatureProvider};
use crate::seqio::{read_sequences, write_sequences};
use crate::synth::{generate_dataset, GeneratorConfig};
use crate::tensor::Adam;

pub const ESTIMATOR_CHECKPOINT: &str = "checkpoints/estimator.ckpt";
pub const FORECASTER_CHECKPOINT: &str = "checkpoints/forecaster.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/checkpoints/estimator.ckpt`.
    pub estimator_checkpoint: Option<PathBuf>,
    /// Defaults to `<output_dir>/checkpoints/forecaster.ckpt`.
    pub forecaster_checkpoint: Option<PathBuf>,
    pub estimator: EstimatorConfig,
    pub forecaster: ForecasterConfig,
    /// Overrides `forecaster.loss_weights` when present.
    pub loss_weights: Option<LossWeights>,
    pub provider: ProviderSpec,
    pub metrics: MetricSettings,
    /// Overrides both model seeds when present.
    pub seed: Option<u64>,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let estimator = EstimatorConfig::default();
        Self {
            train_data: None,
            test_data: None,
            output_dir: PathBuf::from("run"),
            estimator_checkpoint: None,
            forecaster_checkpoint: None,
            provider: ProviderSpec::Informative {
                dim: estimator.visual_dim,
                noise_sigma: 0.05,
                seed: 0,
            },
            estimator,
            forecaster: ForecasterConfig::default(),
            loss_weights: None,
            metrics: MetricSettings::default(),
            seed: None,
            generator: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    /// Switches both models to the full-size architecture.
    pub fn use_paper_arch(&mut self) {
        let e = EstimatorConfig::paper_scale();
        self.estimator.width = e.width;
        self.estimator.layers = e.layers;
        self.estimator.heads = e.heads;
        self.estimator.iterations = e.iterations;
        let f = ForecasterConfig::paper_scale();
        self.forecaster.width = f.width;
        self.forecaster.layers = f.layers;
        self.forecaster.heads = f.heads;
        self.forecaster.iterations = f.iterations;
    }

    /// Folds `seed` and `loss_weights` into the model configs and validates.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.estimator.seed = seed;
            self.forecaster.seed = seed;
        }
        if let Some(w) = self.loss_weights {
            self.forecaster.loss_weights = w;
        }
        self.estimator.validate()?;
        self.forecaster.validate()?;
        self.metrics.validate()?;
        if self.provider.dim() != self.estimator.visual_dim {
            return Err(Error::Config(format!(
                "provider dimension {} differs from estimator visual_dim {}",
                self.provider.dim(),
                self.estimator.visual_dim
            )));
        }
        Ok(self)
    }

    pub fn estimator_checkpoint_path(&self) -> PathBuf {
        self.estimator_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join(ESTIMATOR_CHECKPOINT))
    }

    pub fn forecaster_checkpoint_path(&self) -> PathBuf {
        self.forecaster_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join(FORECASTER_CHECKPOINT))
    }

    fn prepare_output(&self) -> Result<()> {
        std::fs::create_dir_all(self.output_dir.join("checkpoints"))?;
        let mut f = std::fs::File::create(self.output_dir.join("config.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

fn load_data(path: Option<&PathBuf>, what: &str) -> Result<Vec<PoseSequence>> {
    let path = path.ok_or_else(|| Error::Config(format!("no {what} data path configured")))?;
    if !path.exists() {
        return Err(Error::Config(format!("{what} data {} does not exist", path.display())));
    }
    let seqs = read_sequences(path)?;
    if seqs.is_empty() {
        return Err(Error::Data(format!("{} holds no sequences", path.display())));
    }
    Ok(seqs)
}

fn write_trace(path: &Path, first_step: u64, trace: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "{},{l}", first_step + i as u64 + 1)?;
    }
    out.flush()?;
    Ok(())
}

/// Runs `f` on a thread pool capped by `EGOCAST_THREADS` when it is set.
pub fn with_eval_threads<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var("EGOCAST_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub train: PathBuf,
    pub test: PathBuf,
    pub train_sequences: usize,
    pub test_sequences: usize,
}

pub fn run_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    cfg.generator.validate()?;
    cfg.prepare_output()?;
    let ds = generate_dataset(&cfg.generator)?;
    let train = cfg.output_dir.join("train.jsonl");
    let test = cfg.output_dir.join("test.jsonl");
    write_sequences(&train, &ds.train)?;
    write_sequences(&test, &ds.test)?;
    log::info!("wrote {} train and {} test sequences", ds.train.len(), ds.test.len());
    Ok(GenerateSummary {
        train,
        test,
        train_sequences: ds.train.len(),
        test_sequences: ds.test.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    /// Optimizer step the run started from (non-zero when resuming).
    pub start_step: u64,
    pub trace: Vec<f64>,
}

/// Trains the current-frame estimator up to `estimator.iterations` steps,
/// continuing from the output checkpoint when `resume` is set.
pub fn run_train_current(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let data = load_data(cfg.train_data.as_ref(), "training")?;
    cfg.prepare_output()?;
    let provider = cfg.provider.build(data[0].skeleton())?;
    let ckpt = cfg.output_dir.join(ESTIMATOR_CHECKPOINT);
    let mut trainer = if resume && ckpt.exists() {
        let (model, adam) = Checkpoint::load(&ckpt)?.into_estimator(Some(&cfg.estimator))?;
        EstimatorTrainer::resume(model, adam, &data, provider.as_ref())?
    } else {
        let model = CurrentFrameModel::new(cfg.estimator.clone(), data[0].skeleton().clone())?;
        EstimatorTrainer::new(model, &data, provider.as_ref())?
    };
    let start_step = trainer.step();
    let remaining = (cfg.estimator.iterations as u64).saturating_sub(start_step) as usize;
    let trace = trainer.run(remaining)?;
    Checkpoint::from_estimator(trainer.model(), trainer.adam())?.save(&ckpt)?;
    let loss_csv = cfg.output_dir.join("estimator_loss.csv");
    write_trace(&loss_csv, start_step, &trace)?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        loss_csv,
        start_step,
        trace,
    })
}

fn load_estimator(cfg: &RunConfig) -> Result<CurrentFrameModel> {
    let path = cfg.estimator_checkpoint_path();
    if !path.exists() {
        return Err(Error::Config(format!("estimator checkpoint {} does not exist", path.display())));
    }
    let (model, _) = Checkpoint::load(&path)?.into_estimator(None)?;
    if !model.config().same_architecture(&cfg.estimator) {
        return Err(Error::Config(format!(
            "estimator checkpoint {} has a different architecture than configured",
            path.display()
        )));
    }
    Ok(model)
}

fn load_forecaster(cfg: &RunConfig) -> Result<ForecastModel> {
    let path = cfg.forecaster_checkpoint_path();
    if !path.exists() {
        return Err(Error::Config(format!("forecaster checkpoint {} does not exist", path.display())));
    }
    let (model, _) = Checkpoint::load(&path)?.into_forecaster(None)?;
    if !model.config().same_architecture(&cfg.forecaster) {
        return Err(Error::Config(format!(
            "forecaster checkpoint {} has a different architecture than configured",
            path.display()
        )));
    }
    Ok(model)
}

fn train_forecaster_with(
    fcfg: &ForecasterConfig,
    data: &[PoseSequence],
    estimator: Option<&CurrentFrameModel>,
    provider: &dyn VisualFeatureProvider,
    resume_from: Option<(ForecastModel, Adam)>,
) -> Result<(ForecastModel, Adam, u64, Vec<f64>)> {
    let mut trainer = match resume_from {
        Some((model, adam)) => ForecasterTrainer::resume(model, adam, data, estimator, provider)?,
        None => {
            let model = ForecastModel::new(fcfg.clone(), data[0].skeleton().clone())?;
            ForecasterTrainer::new(model, data, estimator, provider)?
        }
    };
    let start = trainer.step();
    let remaining = (fcfg.iterations as u64).saturating_sub(start) as usize;
    let trace = trainer.run(remaining)?;
    let adam = trainer.adam().clone();
    Ok((trainer.into_model(), adam, start, trace))
}

/// Trains the forecaster on pseudo-ground-truth (or annotated) past poses.
pub fn run_train_forecast(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let data = load_data(cfg.train_data.as_ref(), "training")?;
    cfg.prepare_output()?;
    let provider = cfg.provider.build(data[0].skeleton())?;
    let estimator = match cfg.forecaster.past_poses {
        PastPoseSource::PseudoGroundTruth => Some(load_estimator(cfg)?),
        PastPoseSource::GroundTruth => None,
    };
    let ckpt = cfg.output_dir.join(FORECASTER_CHECKPOINT);
    let resume_from = if resume && ckpt.exists() {
        Some(Checkpoint::load(&ckpt)?.into_forecaster(Some(&cfg.forecaster))?)
    } else {
        None
    };
    let (model, adam, start_step, trace) =
        train_forecaster_with(&cfg.forecaster, &data, estimator.as_ref(), provider.as_ref(), resume_from)?;
    Checkpoint::from_forecaster(&model, &adam)?.save(&ckpt)?;
    let loss_csv = cfg.output_dir.join("forecaster_loss.csv");
    write_trace(&loss_csv, start_step, &trace)?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        loss_csv,
        start_step,
        trace,
    })
}

/// What produces the forecasts being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    /// Estimator and forecaster checkpoints chained end to end.
    #[default]
    Model,
    /// Echoes the ground-truth future.
    GroundTruth,
    /// Ground truth displaced by a random translation per future frame.
    GtShifted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    pub predictor: Predictor,
    /// Also write oracle-aligned results.
    pub oracle: bool,
    /// Feed the forecaster annotated past poses instead of estimates.
    pub ground_truth_past: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub oracle: Option<EvalReport>,
}

fn shifted_ground_truth(seq: &PoseSequence, t: usize, n: usize) -> Result<ForecastOutput> {
    let mut out = ForecastOutput::ground_truth(seq, t, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
    out.body = out
        .body
        .iter()
        .map(|b| b.translated([rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2)]))
        .collect();
    Ok(out)
}

/// Evaluates forecasts on the test set for every configured horizon.
pub fn run_eval(cfg: &RunConfig, opts: EvalOptions) -> Result<EvalSummary> {
    let data = load_data(cfg.test_data.as_ref(), "test")?;
    cfg.prepare_output()?;
    let n = cfg.metrics.max_offset();
    let first = cfg.forecaster.window - 1;
    let skeleton = data[0].skeleton().clone();

    type Infer<'a> = Box<dyn Fn(&PoseSequence, usize) -> Result<ForecastOutput> + Sync + 'a>;
    let provider = cfg.provider.build(&skeleton)?;
    let models = match opts.predictor {
        Predictor::Model => {
            let f = load_forecaster(cfg)?;
            if f.config().horizon < n {
                return Err(Error::Config(format!(
                    "forecaster horizon {} is shorter than the longest evaluation horizon ({n} frames)",
                    f.config().horizon
                )));
            }
            let e = if opts.ground_truth_past { None } else { Some(load_estimator(cfg)?) };
            Some((e, f))
        }
        _ => None,
    };
    let infer: Infer = match (&opts.predictor, &models) {
        (Predictor::GroundTruth, _) => Box::new(|seq: &PoseSequence, t| ForecastOutput::ground_truth(seq, t, n)),
        (Predictor::GtShifted, _) => Box::new(|seq: &PoseSequence, t| shifted_ground_truth(seq, t, n)),
        (Predictor::Model, Some((Some(e), f))) => {
            let p = provider.as_ref();
            Box::new(move |seq: &PoseSequence, t| end_to_end_infer(seq, t, e, p, f))
        }
        (Predictor::Model, Some((None, f))) => Box::new(move |seq: &PoseSequence, t| {
            let gt: Vec<BodyPose> = (0..=t).map(|i| seq.body_at(i).cloned()).collect::<Result<_>>()?;
            f.forecast(&tokens_from_poses(seq, t, f.config().window, &gt)?)
        }),
        (Predictor::Model, None) => unreachable!("models are loaded for the model predictor"),
    };

    let report = with_eval_threads(|| evaluate(&infer, &data, &cfg.metrics, first))??;
    report.curve()?.write_csv(&cfg.output_dir.join("curves.csv"))?;
    report.write_json(&cfg.output_dir.join("report.json"))?;
    report.write_per_joint_csv(&cfg.output_dir.join("per_joint.csv"))?;

    let oracle = if opts.oracle {
        let aligned = |seq: &PoseSequence, t: usize| -> Result<ForecastOutput> {
            let pred = infer(seq, t)?;
            let gt: Vec<BodyPose> = (t + 1..=t + pred.len()).map(|i| seq.body_at(i).cloned()).collect::<Result<_>>()?;
            oracle_align(&pred, &gt, seq.skeleton())
        };
        let r = with_eval_threads(|| evaluate(aligned, &data, &cfg.metrics, first))??;
        r.curve()?.write_csv(&cfg.output_dir.join("curves_oracle.csv"))?;
        r.write_json(&cfg.output_dir.join("report_oracle.json"))?;
        r.write_per_joint_csv(&cfg.output_dir.join("per_joint_oracle.csv"))?;
        Some(r)
    } else {
        None
    };
    Ok(EvalSummary { report, oracle })
}

/// Current-frame MPJPE (cm) of `model` over every annotated frame of `data`.
pub fn current_frame_mpjpe(
    model: &CurrentFrameModel,
    provider: &dyn VisualFeatureProvider,
    data: &[PoseSequence],
) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for seq in data {
        for t in 0..seq.len() {
            if let Some(b) = &seq.frames()[t].body {
                pred.push(model.estimate(past_window(seq, t, model.config().window)?, provider)?);
                gt.push(b.clone());
            }
        }
    }
    mpjpe(&pred, &gt)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowRow {
    pub window: usize,
    pub mpjpe_1s_cm: f64,
}

/// Trains one forecaster per past-window length and reports 1 s MPJPE on
/// the test set. All rows share the first evaluation anchor `max(k) − 1`.
pub fn run_ablate_window(cfg: &RunConfig, windows: &[usize]) -> Result<Vec<WindowRow>> {
    if windows.is_empty() {
        return Err(Error::Config("window list is empty".into()));
    }
    if windows.contains(&0) {
        return Err(Error::Config("window lengths must be positive".into()));
    }
    let train = load_data(cfg.train_data.as_ref(), "training")?;
    let test = load_data(cfg.test_data.as_ref(), "test")?;
    cfg.prepare_output()?;
    let provider = cfg.provider.build(train[0].skeleton())?;
    let estimator = match cfg.forecaster.past_poses {
        PastPoseSource::PseudoGroundTruth => Some(load_estimator(cfg)?),
        PastPoseSource::GroundTruth => None,
    };
    let settings = MetricSettings {
        horizons: vec![1.0],
        ..cfg.metrics.clone()
    };
    let horizon = settings.max_offset();
    let first = windows.iter().max().copied().unwrap_or(1) - 1;

    let mut rows = Vec::with_capacity(windows.len());
    for &k in windows {
        let fcfg = ForecasterConfig {
            window: k,
            horizon,
            ..cfg.forecaster.clone()
        };
        let (model, ..) = train_forecaster_with(&fcfg, &train, estimator.as_ref(), provider.as_ref(), None)?;
        let infer = |seq: &PoseSequence, t: usize| -> Result<ForecastOutput> {
            match &estimator {
                Some(e) => end_to_end_infer(seq, t, e, provider.as_ref(), &model),
                None => {
                    let gt: Vec<BodyPose> = (0..=t).map(|i| seq.body_at(i).cloned()).collect::<Result<_>>()?;
                    model.forecast(&tokens_from_poses(seq, t, k, &gt)?)
                }
            }
        };
        let report = with_eval_threads(|| evaluate(infer, &test, &settings, first))??;
        log::info!("window {k}: {:.3} cm at 1 s", report.mpjpe_cm[0]);
        rows.push(WindowRow {
            window: k,
            mpjpe_1s_cm: report.mpjpe_cm[0],
        });
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(cfg.output_dir.join("ablate_window.csv"))?);
    writeln!(out, "window,mpjpe_1s_cm")?;
    for r in &rows {
        writeln!(out, "{},{}", r.window, r.mpjpe_1s_cm)?;
    }
    out.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisualRow {
    pub arm: String,
    pub mpjpe_cm: f64,
}

/// Trains the estimator twice on the same data and seed, once with the
/// configured informative provider and once with a null provider, and reports
/// held-out current-frame MPJPE for each arm.
pub fn run_ablate_visual(cfg: &RunConfig) -> Result<Vec<VisualRow>> {
    let train = load_data(cfg.train_data.as_ref(), "training")?;
    let test = load_data(cfg.test_data.as_ref(), "test")?;
    cfg.prepare_output()?;
    let skeleton = train[0].skeleton().clone();
    let informative = match &cfg.provider {
        p @ ProviderSpec::Informative { .. } => p.clone(),
        _ => ProviderSpec::Informative {
            dim: cfg.estimator.visual_dim,
            noise_sigma: 0.05,
            seed: 0,
        },
    };
    let arms = [
        ("informative", informative),
        (
            "null",
            ProviderSpec::Null {
                dim: cfg.estimator.visual_dim,
            },
        ),
    ];
    let mut rows = Vec::new();
    for (name, spec) in arms {
        let provider = spec.build(&skeleton)?;
        let model = CurrentFrameModel::new(cfg.estimator.clone(), skeleton.clone())?;
        let mut trainer = EstimatorTrainer::new(model, &train, provider.as_ref())?;
        trainer.run(cfg.estimator.iterations)?;
        let err = current_frame_mpjpe(trainer.model(), provider.as_ref(), &test)?;
        log::info!("{name} arm: {err:.3} cm");
        rows.push(VisualRow {
            arm: name.into(),
            mpjpe_cm: err,
        });
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(cfg.output_dir.join("ablate_visual.csv"))?);
    writeln!(out, "arm,mpjpe_cm")?;
    for r in &rows {
        writeln!(out, "{},{}", r.arm, r.mpjpe_cm)?;
    }
    out.flush()?;
    Ok(rows)
}
