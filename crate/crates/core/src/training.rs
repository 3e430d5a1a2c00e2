//! Smooth-l1 objective, Adam, and the three training stages
//! (full image, then instance crops, then fusion heads).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array, Dimension, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{transfer_weights, ColorizationNetwork, Role};
use crate::dataset::{FusionSample, TrainPair};
use crate::error::{Error, Result};
use crate::fusion::{Blend, FusedGrads, FusedModel, FusionHeads, SoftmaxMode};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Full,
    Instance,
    Fusion,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Full, Stage::Instance, Stage::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Full => "full",
            Stage::Instance => "instance",
            Stage::Fusion => "fusion",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Stage::Full),
            "instance" => Ok(Stage::Instance),
            "fusion" => Ok(Stage::Fusion),
            other => Err(Error::Config(format!("unknown stage {other:?} (expected full, instance or fusion)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fusion stage only: also update both backbones.
    #[serde(default)]
    pub unfreeze_backbones: bool,
}

fn default_beta1() -> f64 {
    0.99
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    4
}
fn default_delta() -> f64 {
    1.0
}

impl StageConfig {
    /// The published schedule: 2 epochs at 1e-5, 5 at 5e-5, 2 at 2e-5.
    pub fn paper(stage: Stage) -> Self {
        let (epochs, learning_rate) = match stage {
            Stage::Full => (2, 1e-5),
            Stage::Instance => (5, 5e-5),
            Stage::Fusion => (2, 2e-5),
        };
        StageConfig {
            stage,
            epochs,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size: default_batch(),
            delta: default_delta(),
            seed: 0,
            unfreeze_backbones: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(Error::Config(format!(
                "stage config is for {:?} but was given to the {:?} trainer",
                self.stage, stage
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Per-element smooth-l1 with threshold `delta`.
pub fn smooth_l1_elem(diff: f64, delta: f64) -> f64 {
    let a = diff.abs();
    if a < delta {
        0.5 * diff * diff
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of `smooth_l1_elem` with respect to `diff`.
pub fn smooth_l1_elem_grad(diff: f64, delta: f64) -> f64 {
    if diff.abs() < delta {
        diff
    } else {
        delta * diff.signum()
    }
}

fn check_loss_args<D: Dimension>(pred: &Array<f64, D>, target: &Array<f64, D>, delta: f64) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("smooth-l1 of an empty tensor".into()));
    }
    Ok(())
}

/// Mean smooth-l1 over all elements.
pub fn smooth_l1<D: Dimension>(pred: &Array<f64, D>, target: &Array<f64, D>, delta: f64) -> Result<f64> {
    check_loss_args(pred, target, delta)?;
    let mut sum = 0.0;
    Zip::from(pred).and(target).for_each(|&p, &t| sum += smooth_l1_elem(p - t, delta));
    Ok(sum / pred.len() as f64)
}

/// Gradient of the mean smooth-l1 with respect to `pred`.
pub fn smooth_l1_grad<D: Dimension>(pred: &Array<f64, D>, target: &Array<f64, D>, delta: f64) -> Result<Array<f64, D>> {
    check_loss_args(pred, target, delta)?;
    let n = pred.len() as f64;
    Ok(Zip::from(pred)
        .and(target)
        .map_collect(|&p, &t| smooth_l1_elem_grad(p - t, delta) / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, hyper: AdamHyper) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.m)?;
    state.t += 1;
    let AdamHyper { lr, beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        Zip::from(&mut p.value)
            .and(&g.value)
            .and(&mut m.value)
            .and(&mut v.value)
            .for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
    Ok(())
}

/// Where a stage writes its checkpoints and which config hash they carry.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl CheckpointSink {
    pub fn new(dir: impl Into<PathBuf>, config_hash: impl Into<String>) -> Self {
        CheckpointSink {
            dir: dir.into(),
            config_hash: config_hash.into(),
        }
    }

    pub fn epoch_dir(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}"))
    }

    pub fn final_dir(&self) -> PathBuf {
        self.dir.join("final")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Stage,
    pub step_losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
    pub wall_clock_ms: u128,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogLine<'a> {
    Step {
        stage: &'a str,
        step: usize,
        loss: f64,
    },
    Epoch {
        stage: &'a str,
        epoch: usize,
        mean_loss: f64,
        checkpoint: Option<&'a Path>,
    },
    Done {
        stage: &'a str,
        wall_clock_ms: u128,
    },
}

impl TrainRecord {
    /// JSON-lines log. Only the final `done` line carries wall-clock time.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing {}", path.display());
        let mut out = Vec::new();
        let stage = self.stage.name();
        let mut lines: Vec<LogLine> = self
            .step_losses
            .iter()
            .enumerate()
            .map(|(step, &loss)| LogLine::Step { stage, step, loss })
            .collect();
        for (epoch, &mean_loss) in self.epoch_means.iter().enumerate() {
            lines.push(LogLine::Epoch {
                stage,
                epoch,
                mean_loss,
                checkpoint: self.checkpoints.get(epoch).map(PathBuf::as_path),
            });
        }
        lines.push(LogLine::Done {
            stage,
            wall_clock_ms: self.wall_clock_ms,
        });
        for line in lines {
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(ctx(), e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
        f.write_all(&out).map_err(|e| Error::io(ctx(), e))
    }
}

/// One trainable stage: a gradient step on a batch, and persistence.
trait StageTask {
    fn step(&mut self, batch: &[usize]) -> Result<f64>;
    fn save(&self, dir: &Path, config_hash: &str) -> Result<()>;
    fn finish(&mut self);
}

fn run_stage<T: StageTask>(cfg: &StageConfig, n: usize, task: &mut T, sink: Option<&CheckpointSink>) -> Result<TrainRecord> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut record = TrainRecord {
        stage: cfg.stage,
        step_losses: Vec::new(),
        epoch_means: Vec::new(),
        wall_clock_ms: 0,
        checkpoints: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let loss = task.step(batch)?;
            if !loss.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{} stage diverged: loss {loss} at epoch {epoch}",
                    cfg.stage.name()
                )));
            }
            record.step_losses.push(loss);
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        record.epoch_means.push(total / count as f64);
        log::info!("{} epoch {epoch}: mean loss {:.6}", cfg.stage.name(), total / count as f64);
        if let Some(s) = sink {
            let dir = s.epoch_dir(epoch);
            task.save(&dir, &s.config_hash)?;
            record.checkpoints.push(dir);
        }
    }
    task.finish();
    if let Some(s) = sink {
        let dir = s.final_dir();
        task.save(&dir, &s.config_hash)?;
        record.checkpoints.push(dir);
    }
    record.wall_clock_ms = start.elapsed().as_millis();
    Ok(record)
}

struct BackboneTask<'a> {
    net: &'a mut ColorizationNetwork,
    data: &'a [TrainPair],
    state: AdamState,
    hyper: AdamHyper,
    delta: f64,
}

impl StageTask for BackboneTask<'_> {
    fn step(&mut self, batch: &[usize]) -> Result<f64> {
        let mut grads = self.net.params.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let pair = &self.data[i];
            let trace = self.net.forward_traced(&pair.l)?;
            loss += smooth_l1(&trace.ab, &pair.ab, self.delta)? * scale;
            let g = smooth_l1_grad(&trace.ab, &pair.ab, self.delta)? * scale;
            self.net.backward(&trace, &g, &mut grads);
        }
        adam_step(&mut self.net.params, &grads, &mut self.state, self.hyper)?;
        Ok(loss)
    }

    fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        self.net.params.save(dir, config_hash)
    }

    fn finish(&mut self) {
        self.net.params.round_to_f32();
    }
}

/// Trains the full-image network in place on whole images. Parameters are
/// rounded to the archive precision at the end so a reloaded checkpoint
/// equals the in-memory network.
pub fn train_stage_full(
    cfg: &StageConfig,
    data: &[TrainPair],
    net: &mut ColorizationNetwork,
    sink: Option<&CheckpointSink>,
) -> Result<TrainRecord> {
    cfg.expect_stage(Stage::Full)?;
    let state = AdamState::new(&net.params);
    let mut task = BackboneTask {
        net,
        data,
        state,
        hyper: cfg.adam(),
        delta: cfg.delta,
    };
    run_stage(cfg, data.len(), &mut task, sink)
}

/// Initializes the instance network from `full` and trains it on crops.
pub fn train_stage_instance(
    cfg: &StageConfig,
    data: &[TrainPair],
    full: &ColorizationNetwork,
    sink: Option<&CheckpointSink>,
) -> Result<(ColorizationNetwork, TrainRecord)> {
    cfg.expect_stage(Stage::Instance)?;
    let mut net = transfer_weights(full, full.config(), Role::Instance)?;
    let state = AdamState::new(&net.params);
    let mut task = BackboneTask {
        net: &mut net,
        data,
        state,
        hyper: cfg.adam(),
        delta: cfg.delta,
    };
    let record = run_stage(cfg, data.len(), &mut task, sink)?;
    Ok((net, record))
}

/// Settings for the fused model used during the fusion stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionTrainOptions {
    pub softmax: SoftmaxMode,
    pub max_instances: usize,
}

impl Default for FusionTrainOptions {
    fn default() -> Self {
        FusionTrainOptions {
            softmax: SoftmaxMode::Masked,
            max_instances: 8,
        }
    }
}

/// Subdirectories of a fusion-stage checkpoint.
pub const HEADS_DIR: &str = "heads";
pub const FULL_DIR: &str = "full";
pub const INSTANCE_DIR: &str = "instance";

struct FusionTask<'a> {
    full: &'a mut ColorizationNetwork,
    instance: &'a mut ColorizationNetwork,
    heads: &'a mut FusionHeads,
    data: &'a [FusionSample],
    opts: FusionTrainOptions,
    unfreeze: bool,
    states: (AdamState, Option<(AdamState, AdamState)>),
    hyper: AdamHyper,
    delta: f64,
}

impl StageTask for FusionTask<'_> {
    fn step(&mut self, batch: &[usize]) -> Result<f64> {
        let mut grads = FusedGrads {
            heads: Some(self.heads.params.zeros_like()),
            full: self.unfreeze.then(|| self.full.params.zeros_like()),
            instance: self.unfreeze.then(|| self.instance.params.zeros_like()),
        };
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        {
            let model = fusion_model(self.full, self.instance, self.heads, self.opts);
            for &i in batch {
                let s = &self.data[i];
                let trace = model.forward_traced(&s.l, &s.instances)?;
                loss += smooth_l1(&trace.ab, &s.ab, self.delta)? * scale;
                let g = smooth_l1_grad(&trace.ab, &s.ab, self.delta)? * scale;
                model.backward(&trace, &g, &mut grads)?;
            }
        }
        let head_grads = grads.heads.expect("allocated above");
        adam_step(&mut self.heads.params, &head_grads, &mut self.states.0, self.hyper)?;
        if let Some((fs, is)) = self.states.1.as_mut() {
            adam_step(&mut self.full.params, grads.full.as_ref().expect("unfrozen"), fs, self.hyper)?;
            adam_step(&mut self.instance.params, grads.instance.as_ref().expect("unfrozen"), is, self.hyper)?;
        }
        Ok(loss)
    }

    fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        self.heads.params.save(&dir.join(HEADS_DIR), config_hash)?;
        if self.unfreeze {
            self.full.params.save(&dir.join(FULL_DIR), config_hash)?;
            self.instance.params.save(&dir.join(INSTANCE_DIR), config_hash)?;
        }
        Ok(())
    }

    fn finish(&mut self) {
        self.heads.params.round_to_f32();
        if self.unfreeze {
            self.full.params.round_to_f32();
            self.instance.params.round_to_f32();
        }
    }
}

/// The learned-blend fused model used for training and loss evaluation.
pub fn fusion_model<'a>(
    full: &'a ColorizationNetwork,
    instance: &'a ColorizationNetwork,
    heads: &'a FusionHeads,
    opts: FusionTrainOptions,
) -> FusedModel<'a> {
    FusedModel {
        blend: Blend::Learned(opts.softmax),
        max_instances: opts.max_instances,
        ..FusedModel::new(full, instance, heads)
    }
}

/// Trains the fusion heads. Both backbones stay bit-identical unless
/// `cfg.unfreeze_backbones` is set, in which case every parameter is updated.
pub fn train_stage_fusion(
    cfg: &StageConfig,
    data: &[FusionSample],
    full: &mut ColorizationNetwork,
    instance: &mut ColorizationNetwork,
    heads: &mut FusionHeads,
    opts: FusionTrainOptions,
    sink: Option<&CheckpointSink>,
) -> Result<TrainRecord> {
    cfg.expect_stage(Stage::Fusion)?;
    let backbone_states = cfg
        .unfreeze_backbones
        .then(|| (AdamState::new(&full.params), AdamState::new(&instance.params)));
    let states = (AdamState::new(&heads.params), backbone_states);
    let mut task = FusionTask {
        full,
        instance,
        heads,
        data,
        opts,
        unfreeze: cfg.unfreeze_backbones,
        states,
        hyper: cfg.adam(),
        delta: cfg.delta,
    };
    run_stage(cfg, data.len(), &mut task, sink)
}

/// Mean per-image smooth-l1 of a single network.
pub fn mean_loss(net: &ColorizationNetwork, data: &[TrainPair], delta: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for p in data {
        total += smooth_l1(&net.forward(&p.l)?, &p.ab, delta)?;
    }
    Ok(total / data.len() as f64)
}

/// Mean per-image smooth-l1 of a fused model.
pub fn mean_fused_loss(model: &FusedModel, data: &[FusionSample], delta: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in data {
        total += smooth_l1(&model.forward(&s.l, &s.instances)?, &s.ab, delta)?;
    }
    Ok(total / data.len() as f64)
}
