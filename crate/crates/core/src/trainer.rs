//! Pre-training, fine-tuning, cloning, ensembling and evaluation.
//!
//! Every random draw is seeded from the plan seed plus a path of phase
//! label, epoch, batch and sample, so a run is a pure function of its plan,
//! data and seed. Interrupted phases resume by epoch count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::data::{
    self, apply_mask, make_pair, sample_origins, synth_city_with, FrameMode, Frames, Mask, SampleOrigin,
    Strategy, SynthConfig, TrafficMovie,
};
use crate::error::{shape_err, Error, Result};
use crate::model::{DualUNet, ModelConfig};
use crate::nn::Mode;
use crate::optim::{OptimConfig, Optimizer};
use crate::params::Group;
use crate::rng;
use crate::tensor::{no_grad, Element, Tensor};

pub const DEFAULT_BATCH: usize = 4;

/// Sample windows over a set of movies.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub movies: Vec<TrafficMovie>,
    pub origins: Vec<SampleOrigin>,
    pub frame_mode: FrameMode,
}

impl Dataset {
    pub fn new(movies: Vec<TrafficMovie>, strategy: Strategy, frame_mode: FrameMode) -> Result<Self> {
        strategy.validate()?;
        let (origins, _) = sample_origins(&movies, strategy);
        Ok(Dataset {
            movies,
            origins,
            frame_mode,
        })
    }

    /// Keeps `n` evenly spaced windows.
    pub fn limit(mut self, n: usize) -> Self {
        let len = self.origins.len();
        if n < len {
            self.origins = (0..n).map(|i| self.origins[i * len / n]).collect();
        }
        self
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn pair<E: Element>(&self, i: usize) -> Result<data::SamplePair<E>> {
        make_pair(&self.movies, self.origins[i], self.frame_mode)
    }

    /// Target frames as stored bytes, for competition-scale scoring.
    pub fn target_frames(&self, i: usize) -> Result<Frames> {
        let o = self.origins[i];
        let last = o.start + data::INPUT_FRAMES - 1;
        let ts: Vec<usize> = self.frame_mode.offsets().iter().map(|k| last + k).collect();
        self.movies[o.movie].frames.select_frames(&ts)
    }

    fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if self.frame_mode.len() != cfg.output_frames {
            return Err(Error::Config(format!(
                "dataset targets {} frames, model predicts {}",
                self.frame_mode.len(),
                cfg.output_frames
            )));
        }
        if cfg.input_frames != data::INPUT_FRAMES {
            return Err(Error::Config(format!(
                "samples carry {} input frames, model expects {}",
                data::INPUT_FRAMES,
                cfg.input_frames
            )));
        }
        Ok(())
    }
}

/// Settings for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSettings {
    pub name: String,
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub freeze: Vec<Group>,
    #[serde(default)]
    pub unfreeze: Vec<Group>,
}

fn default_batch() -> usize {
    DEFAULT_BATCH
}

impl PhaseSettings {
    pub fn new(name: impl Into<String>, epochs: u64) -> Self {
        PhaseSettings {
            name: name.into(),
            epochs,
            batch_size: DEFAULT_BATCH,
            optimizer: OptimConfig::default(),
            freeze: Vec::new(),
            unfreeze: Vec::new(),
        }
    }

    pub fn with_optimizer(mut self, opt: OptimConfig) -> Self {
        self.optimizer = opt;
        self
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: u64,
    /// Mean per-sample loss over the epoch.
    pub train_loss: f64,
    /// Median of the per-batch mean losses.
    pub train_median: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSnapshot {
    pub phase: String,
    pub total_params: usize,
    pub trainable_params: usize,
    pub frozen: Vec<Group>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    /// Mean squared error on the [0, 1] scale.
    pub mse: f64,
    /// Mean squared error on the 0-255 byte scale.
    pub score: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub phases: Vec<PhaseSnapshot>,
    pub evaluations: Vec<(String, Evaluation)>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl RunReport {
    pub fn extend(&mut self, other: RunReport) {
        self.epochs.extend(other.epochs);
        self.phases.extend(other.phases);
        self.evaluations.extend(other.evaluations);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,train_loss,train_median,val_loss,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.epoch,
                r.phase,
                r.train_loss,
                r.train_median,
                fmt_opt(r.val_loss),
                r.seconds
            );
        }
        out
    }

    /// The CSV without the wall-time column, which is the only part that
    /// varies between identical runs.
    pub fn to_csv_untimed(&self) -> String {
        self.to_csv()
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
            .fold(String::new(), |mut s, l| {
                s.push_str(l);
                s.push('\n');
                s
            })
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for p in &self.phases {
            let frozen: Vec<&str> = p.frozen.iter().map(|g| g.name()).collect();
            let _ = writeln!(
                out,
                "phase {}: {} parameters, {} trainable, frozen [{}]",
                p.phase,
                p.total_params,
                p.trainable_params,
                frozen.join(", ")
            );
            let last = self.epochs.iter().rev().find(|e| e.phase == p.phase);
            if let Some(e) = last {
                let _ = writeln!(
                    out,
                    "  epoch {}: train {:.6e}, validation {}",
                    e.epoch,
                    e.train_loss,
                    e.val_loss.map_or("n/a".into(), |v| format!("{v:.6e}"))
                );
            }
        }
        for (label, ev) in &self.evaluations {
            let _ = writeln!(
                out,
                "eval {label}: mse {:.6e}, score {:.4} over {} windows",
                ev.mse, ev.score, ev.samples
            );
        }
        out
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_loss)
    }
}

/// Elementwise mean over members, summed in sorted value order so the
/// result does not depend on member order.
pub fn ensemble_mean<E: Element>(outputs: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::Config("ensemble has no members".into()))?;
    if let Some(bad) = outputs.iter().find(|o| o.shape() != first.shape()) {
        return Err(shape_err!("ensemble outputs {:?} and {:?} differ", first.shape(), bad.shape()));
    }
    if outputs.len() == 1 {
        return Ok(first.detach());
    }
    let n = E::from_f64_lossy(outputs.len() as f64);
    let mut column = Vec::with_capacity(outputs.len());
    let data = (0..first.numel())
        .map(|i| {
            column.clear();
            column.extend(outputs.iter().map(|o| o.data()[i]));
            column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let mut s = E::zero();
            for &v in &column {
                s += v;
            }
            s / n
        })
        .collect();
    Tensor::from_vec(data, first.shape())
}

/// Mean of member predictions, masked, still on the [0, 1] scale.
pub fn ensemble_forward<E: Element>(
    models: &[&DualUNet<E>],
    x: &Tensor<E>,
    mask: Option<&Mask>,
) -> Result<Tensor<E>> {
    let outs = models.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?;
    let mean = ensemble_mean(&outs)?;
    match mask {
        Some(m) => apply_mask(&mean, m),
        None => Ok(mean),
    }
}

/// Ensemble prediction as bytes.
pub fn ensemble_predict<E: Element>(
    models: &[&DualUNet<E>],
    x: &Tensor<E>,
    mask: Option<&Mask>,
) -> Result<Frames> {
    Frames::denormalize(&ensemble_forward(models, x, mask)?)
}

pub fn evaluate<E: Element>(models: &[&DualUNet<E>], dataset: &Dataset, mask: Option<&Mask>) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset has no windows".into()));
    }
    for m in models {
        dataset.check_model(&m.config)?;
    }
    let (mut mse, mut score) = (0.0, 0.0);
    for i in 0..dataset.len() {
        let pair = dataset.pair::<E>(i)?;
        let pred = ensemble_forward(models, &pair.input, mask)?;
        mse += no_grad(|| pred.mse_loss(&pair.target))?.item().to_f64_lossy();
        score += data::score(&Frames::denormalize(&pred)?, &dataset.target_frames(i)?)?;
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        mse: mse / n,
        score: score / n,
        samples: dataset.len(),
    })
}

/// Runs (or resumes) one phase. If the last completed phase in the history
/// has the same name, training continues from its epoch count up to
/// `settings.epochs`. On a non-finite loss the checkpoint is rolled back to
/// the end of the last good epoch and a divergence error is returned.
pub fn train_phase<E: Element>(
    ckpt: &mut Checkpoint<E>,
    settings: &PhaseSettings,
    train: &Dataset,
    validation: Option<&Dataset>,
    seed: u64,
    report: &mut RunReport,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config(format!("phase `{}` has an empty training set", settings.name)));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    train.check_model(&ckpt.model.config)?;
    if let Some(v) = validation {
        v.check_model(&ckpt.model.config)?;
    }
    for &g in &settings.unfreeze {
        ckpt.model.store.unfreeze(g);
    }
    for &g in &settings.freeze {
        ckpt.model.freeze(g)?;
    }
    match &ckpt.optimizer {
        Some(opt) if opt.config == settings.optimizer => {}
        _ => ckpt.optimizer = Some(Optimizer::new(settings.optimizer)?),
    }
    let done = match ckpt.history.last() {
        Some((name, n)) if *name == settings.name => *n,
        _ => {
            ckpt.history.push((settings.name.clone(), 0));
            0
        }
    };
    let b = ckpt.model.count_parameters();
    report.phases.push(PhaseSnapshot {
        phase: settings.name.clone(),
        total_params: b.total,
        trainable_params: b.trainable,
        frozen: ckpt.model.store.frozen_groups(),
    });
    let label = rng::label(&settings.name);
    for epoch in done..settings.epochs {
        let started = Instant::now();
        let good = ckpt.clone();
        match run_epoch(ckpt, settings, train, seed, label, epoch) {
            Ok((train_loss, train_median)) => {
                let val_loss = validation
                    .map(|v| evaluate(&[&ckpt.model], v, None).map(|e| e.mse))
                    .transpose()?;
                ckpt.history.last_mut().expect("phase entry").1 = epoch + 1;
                let rec = EpochRecord {
                    phase: settings.name.clone(),
                    epoch: epoch + 1,
                    train_loss,
                    train_median,
                    val_loss,
                    seconds: started.elapsed().as_secs_f64(),
                };
                log::info!(
                    "{} epoch {}/{}: train {:.6e} val {} ({:.1}s)",
                    rec.phase,
                    rec.epoch,
                    settings.epochs,
                    rec.train_loss,
                    fmt_opt(rec.val_loss),
                    rec.seconds
                );
                report.epochs.push(rec);
            }
            Err(e) => {
                *ckpt = good;
                return Err(e);
            }
        }
    }
    Ok(())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn run_epoch<E: Element>(
    ckpt: &mut Checkpoint<E>,
    settings: &PhaseSettings,
    train: &Dataset,
    seed: u64,
    label: u64,
    epoch: u64,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[label, epoch]));
    let mut total = 0.0;
    let mut batch_means = Vec::new();
    for (bi, batch) in order.chunks(settings.batch_size).enumerate() {
        ckpt.model.store.zero_grad();
        let scale = E::from_f64_lossy(1.0 / batch.len() as f64);
        let mut batch_total = 0.0;
        for (si, &i) in batch.iter().enumerate() {
            let pair = train.pair::<E>(i)?;
            let mut drop_rng = rng::stream(seed, &[label, epoch, bi as u64, si as u64]);
            let pred = ckpt.model.forward(&pair.input, Mode::Train, &mut drop_rng)?;
            let loss = pred.mse_loss(&pair.target)?;
            let value = loss.item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    phase: settings.name.clone(),
                    epoch: epoch + 1,
                    batch: bi,
                });
            }
            total += value;
            batch_total += value;
            loss.mul_scalar(scale).backward()?;
        }
        ckpt.optimizer
            .as_mut()
            .expect("optimizer set before training")
            .step(&mut ckpt.model.store)?;
        batch_means.push(batch_total / batch.len() as f64);
    }
    Ok((total / train.len() as f64, median(&mut batch_means)))
}

pub fn pretrain<E: Element>(
    ckpt: &mut Checkpoint<E>,
    settings: &PhaseSettings,
    train: &Dataset,
    validation: Option<&Dataset>,
    seed: u64,
    report: &mut RunReport,
) -> Result<()> {
    train_phase(ckpt, settings, train, validation, seed, report)?;
    ckpt.phase = Phase::Pretrained;
    Ok(())
}

/// Freezes E_phi, then trains.
pub fn finetune<E: Element>(
    ckpt: &mut Checkpoint<E>,
    settings: &PhaseSettings,
    train: &Dataset,
    validation: Option<&Dataset>,
    seed: u64,
    report: &mut RunReport,
) -> Result<()> {
    if ckpt.phase == Phase::Finetuned {
        log::warn!("fine-tuning a checkpoint that is already fine-tuned");
    }
    ckpt.model.freeze(Group::EncoderPhi)?;
    train_phase(ckpt, settings, train, validation, seed, report)?;
    ckpt.phase = Phase::Finetuned;
    Ok(())
}

/// Independent deep copies, one per target.
pub fn clone_for_targets<E: Element>(ckpt: &Checkpoint<E>, targets: &[String]) -> Result<Vec<Checkpoint<E>>> {
    if targets.is_empty() {
        return Err(Error::Config("no fine-tuning targets".into()));
    }
    Ok(targets.iter().map(|_| ckpt.clone()).collect())
}

/// Where a dataset's movies come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// GCMV file globs.
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default)]
    pub synth: Vec<SynthConfig>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub max_samples: Option<usize>,
    #[serde(default = "default_fpd")]
    pub frames_per_day: usize,
}

fn default_strategy() -> Strategy {
    Strategy::Nonoverlap
}

fn default_fpd() -> usize {
    data::FRAMES_PER_DAY
}

impl DatasetSpec {
    pub fn synthetic(cities: Vec<SynthConfig>) -> Self {
        DatasetSpec {
            files: Vec::new(),
            synth: cities,
            strategy: Strategy::Nonoverlap,
            max_samples: None,
            frames_per_day: data::FRAMES_PER_DAY,
        }
    }

    /// Loads the movies; `expand` turns one glob into matching paths.
    pub fn load(
        &self,
        name: &str,
        frame_mode: FrameMode,
        expand: &dyn Fn(&str) -> Result<Vec<PathBuf>>,
    ) -> Result<Dataset> {
        let mut movies = Vec::new();
        for pattern in &self.files {
            let paths = expand(pattern)?;
            if paths.is_empty() {
                return Err(Error::Config(format!("dataset `{name}`: no file matches `{pattern}`")));
            }
            for p in paths {
                let frames = data::read_gcmv(&p)?;
                let city = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                let mut m = TrafficMovie::new(city, 0, frames);
                m.frames_per_day = self.frames_per_day;
                movies.push(m);
            }
        }
        for s in &self.synth {
            movies.push(synth_city_with(s)?);
        }
        if movies.is_empty() {
            return Err(Error::Config(format!("dataset `{name}` lists no files or synthetic cities")));
        }
        let ds = Dataset::new(movies, self.strategy, frame_mode)?;
        let ds = match self.max_samples {
            Some(n) => ds.limit(n),
            None => ds,
        };
        if ds.is_empty() {
            return Err(Error::Config(format!("dataset `{name}` yields no sample windows")));
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub name: String,
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub freeze: Vec<Group>,
    #[serde(default)]
    pub unfreeze: Vec<Group>,
    pub train: String,
    #[serde(default)]
    pub validation: Option<String>,
}

impl PhasePlan {
    pub fn settings(&self) -> PhaseSettings {
        PhaseSettings {
            name: self.name.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            freeze: self.freeze.clone(),
            unfreeze: self.unfreeze.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPlan {
    pub name: String,
    pub train: String,
    #[serde(default)]
    pub validation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetunePlan {
    pub targets: Vec<TargetPlan>,
    #[serde(default = "default_finetune_epochs")]
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimConfig,
}

fn default_finetune_epochs() -> u64 {
    5
}

/// A whole experiment: pre-training phases, then per-target fine-tunes of
/// clones, then evaluation of each fine-tuned model and their ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub datasets: BTreeMap<String, DatasetSpec>,
    #[serde(default)]
    pub phases: Vec<PhasePlan>,
    #[serde(default)]
    pub finetune: Option<FinetunePlan>,
    /// Dataset scored by every fine-tuned model and by their ensemble.
    #[serde(default)]
    pub evaluate: Option<String>,
}

pub struct PlanOutcome<E: Element> {
    pub pretrained: Checkpoint<E>,
    pub finetuned: Vec<(String, Checkpoint<E>)>,
    pub report: RunReport,
}

impl TrainPlan {
    /// The model config with the plan seed applied.
    pub fn resolved_model(&self) -> ModelConfig {
        self.model.clone().with_seed(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_model().validate()?;
        let known = |k: &str| {
            if self.datasets.contains_key(k) {
                Ok(())
            } else {
                Err(Error::Config(format!("unknown dataset `{k}`")))
            }
        };
        for p in &self.phases {
            known(&p.train)?;
            if let Some(v) = &p.validation {
                known(v)?;
            }
            p.optimizer.validate()?;
        }
        if let Some(f) = &self.finetune {
            if f.targets.is_empty() {
                return Err(Error::Config("finetune lists no targets".into()));
            }
            for t in &f.targets {
                known(&t.train)?;
                if let Some(v) = &t.validation {
                    known(v)?;
                }
            }
            f.optimizer.validate()?;
        }
        if let Some(e) = &self.evaluate {
            known(e)?;
        }
        Ok(())
    }

    pub fn load_datasets(&self, expand: &dyn Fn(&str) -> Result<Vec<PathBuf>>) -> Result<BTreeMap<String, Dataset>> {
        let mode = FrameMode::for_outputs(self.model.output_frames)?;
        self.datasets
            .iter()
            .map(|(k, spec)| Ok((k.clone(), spec.load(k, mode, expand)?)))
            .collect()
    }

    /// Runs the plan. Fine-tunes of different targets run on up to `jobs`
    /// threads; results are merged in target order.
    pub fn run<E: Element>(
        &self,
        datasets: &BTreeMap<String, Dataset>,
        start: Option<Checkpoint<E>>,
        jobs: usize,
    ) -> Result<PlanOutcome<E>> {
        self.validate()?;
        let ds = |k: &str| &datasets[k];
        let mut report = RunReport::default();
        let mut ckpt = match start {
            Some(c) => c,
            None => Checkpoint::new(DualUNet::build(&self.resolved_model())?),
        };
        for p in &self.phases {
            pretrain(
                &mut ckpt,
                &p.settings(),
                ds(&p.train),
                p.validation.as_deref().map(ds),
                self.seed,
                &mut report,
            )?;
        }
        let mut finetuned = Vec::new();
        if let Some(f) = &self.finetune {
            let blob = ckpt.to_bytes()?;
            let settings = |t: &TargetPlan| PhaseSettings {
                name: format!("finetune-{}", t.name),
                epochs: f.epochs,
                batch_size: f.batch_size,
                optimizer: f.optimizer,
                freeze: Vec::new(),
                unfreeze: Vec::new(),
            };
            let run_target = |t: &TargetPlan| -> Result<(Vec<u8>, RunReport)> {
                let mut c = Checkpoint::<E>::from_bytes(&blob)?;
                let mut r = RunReport::default();
                finetune(
                    &mut c,
                    &settings(t),
                    ds(&t.train),
                    t.validation.as_deref().map(ds),
                    self.seed,
                    &mut r,
                )?;
                Ok((c.to_bytes()?, r))
            };
            let results: Vec<Result<(Vec<u8>, RunReport)>> = if jobs <= 1 {
                f.targets.iter().map(run_target).collect()
            } else {
                let mut out = Vec::with_capacity(f.targets.len());
                for chunk in f.targets.chunks(jobs) {
                    std::thread::scope(|s| {
                        let handles: Vec<_> = chunk.iter().map(|t| s.spawn(|| run_target(t))).collect();
                        out.extend(handles.into_iter().map(|h| h.join().expect("fine-tune thread panicked")));
                    });
                }
                out
            };
            for (t, res) in f.targets.iter().zip(results) {
                let (bytes, r) = res?;
                report.extend(r);
                finetuned.push((t.name.clone(), Checkpoint::from_bytes(&bytes)?));
            }
        }
        if let Some(e) = &self.evaluate {
            let eval_ds = ds(e);
            let mask = data::derive_mask(&concat_movies(eval_ds)?, data::MaskSource::Test)?;
            if finetuned.is_empty() {
                let ev = evaluate(&[&ckpt.model], eval_ds, Some(&mask))?;
                report.evaluations.push(("pretrained".into(), ev));
            } else {
                for (name, c) in &finetuned {
                    let ev = evaluate(&[&c.model], eval_ds, Some(&mask))?;
                    report.evaluations.push((name.clone(), ev));
                }
                let members: Vec<&DualUNet<E>> = finetuned.iter().map(|(_, c)| &c.model).collect();
                let ev = evaluate(&members, eval_ds, Some(&mask))?;
                report.evaluations.push(("ensemble".into(), ev));
            }
        }
        Ok(PlanOutcome {
            pretrained: ckpt,
            finetuned,
            report,
        })
    }
}

/// All frames of a dataset's movies in one tensor; movies must share a grid.
pub fn concat_movies(ds: &Dataset) -> Result<Frames> {
    let parts: Vec<&Frames> = ds.movies.iter().map(|m| &m.frames).collect();
    Frames::concat_time(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Profile;

    fn small_model() -> ModelConfig {
        ModelConfig::core().with_encoder_widths([2, 3, 2])
    }

    fn small_data(seed: u64, profile: Profile, n: usize) -> Dataset {
        let cfg = SynthConfig::new(seed, 8, 8, 1, profile);
        Dataset::new(vec![synth_city_with(&cfg).unwrap()], Strategy::Nonoverlap, FrameMode::Six)
            .unwrap()
            .limit(n)
    }

    #[test]
    fn zero_epochs_leave_checkpoint_alone() {
        let mut ck = Checkpoint::new(DualUNet::<f32>::build(&small_model()).unwrap());
        let before = ck.model.store.fingerprint(None);
        let mut rep = RunReport::default();
        pretrain(&mut ck, &PhaseSettings::new("p", 0), &small_data(1, Profile::Pre, 2), None, 0, &mut rep).unwrap();
        assert_eq!(ck.model.store.fingerprint(None), before);
        assert!(rep.epochs.is_empty());
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let mut ck = Checkpoint::new(DualUNet::<f32>::build(&small_model()).unwrap());
        let empty = small_data(1, Profile::Pre, 0);
        let r = pretrain(&mut ck, &PhaseSettings::new("p", 1), &empty, None, 0, &mut RunReport::default());
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(matches!(clone_for_targets(&ck, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn finetune_keeps_phi() {
        let mut ck = Checkpoint::new(DualUNet::<f32>::build(&small_model()).unwrap());
        let phi = ck.model.store.fingerprint(Some(Group::EncoderPhi));
        let theta = ck.model.store.fingerprint(Some(Group::EncoderTheta));
        let mut rep = RunReport::default();
        finetune(&mut ck, &PhaseSettings::new("f", 1), &small_data(2, Profile::Pre, 3), None, 0, &mut rep).unwrap();
        assert_eq!(ck.model.store.fingerprint(Some(Group::EncoderPhi)), phi);
        assert_ne!(ck.model.store.fingerprint(Some(Group::EncoderTheta)), theta);
        assert_eq!(ck.phase, Phase::Finetuned);
        assert_eq!(rep.phases[0].frozen, vec![Group::EncoderPhi]);
    }

    #[test]
    fn csv_layout() {
        let rep = RunReport {
            epochs: vec![EpochRecord {
                phase: "p".into(),
                epoch: 1,
                train_loss: 0.5,
                train_median: 0.25,
                val_loss: None,
                seconds: 1.25,
            }],
            ..Default::default()
        };
        assert_eq!(rep.to_csv(), "epoch,phase,train_loss,train_median,val_loss,seconds\n1,p,0.5,0.25,,1.250\n");
        assert_eq!(rep.to_csv_untimed(), "epoch,phase,train_loss,train_median,val_loss\n1,p,0.5,0.25,\n");
    }

    #[test]
    fn ensemble_mean_arithmetic() {
        let y = Tensor::<f64>::from_vec(vec![0.1, 0.7, 0.3], &[3]).unwrap();
        let c = 0.4;
        let mirror = y.mul_scalar(-1.0).add_scalar(2.0 * c);
        let m = ensemble_mean(&[y.clone(), mirror]).unwrap();
        for v in m.data() {
            assert!((v - c).abs() < 1e-15);
        }
        assert_eq!(ensemble_mean(std::slice::from_ref(&y)).unwrap().data(), y.data());
        let other = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(ensemble_mean(&[y, other]), Err(Error::Shape(_))));
    }
}
