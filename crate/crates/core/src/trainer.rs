//! Two-phase training: a simulation warmup followed by teacher–student
//! tuning on pseudo-labels mixed with simulated and static sequences.
//!
//! A batch is one sequence with all its points. Each frame is recorded on a
//! fresh graph and back-propagated immediately, so gradients stop at frame
//! boundaries and memory stays flat in the sequence length; the optimizer
//! steps once per sequence on the accumulated gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datamodel::{Point, PointSet, TrajectorySet, VideoSequence};
use crate::error::{invalid, Error, Result};
use crate::losses::{frame_loss, time_weights, teacher_loss, LossConfig, LossKind};
use crate::params::{AdamW, AdamWConfig, Grads, ParamStore};
use crate::tracker::{tensor_points, Tracker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub main_epochs: usize,
    pub lr_warmup: f64,
    pub lr_main: f64,
    pub adamw: AdamWConfig,
    /// Fraction of the simulation pool mixed into each main epoch.
    pub sim_mix_fraction: f64,
    /// Draw a new simulation subset every epoch (otherwise one fixed subset).
    pub resample_sim_each_epoch: bool,
    pub teacher_forcing_prob: f64,
    /// Std of the Gaussian noise added to forced positions, pixels.
    pub forcing_noise_std: f64,
    /// Flip the forcing coin per frame (otherwise once per sequence).
    pub forcing_per_frame: bool,
    /// Apply history forcing during the warmup as well.
    pub forcing_in_warmup: bool,
    /// One zero-flow batch after every this many batches; 0 disables.
    pub zero_flow_every: usize,
    /// Rescale the accumulated gradient to at most this global norm.
    pub max_grad_norm: Option<f64>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 10,
            main_epochs: 50,
            lr_warmup: 5e-4,
            lr_main: 1e-4,
            adamw: AdamWConfig::default(),
            sim_mix_fraction: 0.5,
            resample_sim_each_epoch: true,
            teacher_forcing_prob: 0.7,
            forcing_noise_std: 1.0,
            forcing_per_frame: true,
            forcing_in_warmup: true,
            zero_flow_every: 10,
            max_grad_norm: None,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("sim_mix_fraction", self.sim_mix_fraction), ("teacher_forcing_prob", self.teacher_forcing_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, lr) in [("lr_warmup", self.lr_warmup), ("lr_main", self.lr_main)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(invalid!("{name} must be a finite non-negative number, got {lr}"));
            }
        }
        if !(self.forcing_noise_std >= 0.0 && self.forcing_noise_std.is_finite()) {
            return Err(invalid!("forcing_noise_std must be non-negative"));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(invalid!("max_grad_norm must be positive"));
        }
        self.loss.validate()
    }
}

/// One training sequence with labels for the points it tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub video: VideoSequence,
    pub labels: TrajectorySet,
    pub kind: LossKind,
}

impl TrainSample {
    /// Pair a video with labels; points not valid at frame 0 are dropped.
    pub fn new(video: VideoSequence, labels: TrajectorySet, kind: LossKind) -> Result<Self> {
        if labels.num_frames() != video.len() {
            return Err(invalid!(
                "sequence {:?}: labels cover {} frames, video has {}",
                video.id,
                labels.num_frames(),
                video.len()
            ));
        }
        let keep: Vec<usize> = (0..labels.num_points()).filter(|&i| labels.is_valid(i, 0)).collect();
        if keep.is_empty() {
            return Err(Error::EmptyLabels(format!("sequence {:?} has no point valid at frame 0", video.id)));
        }
        let labels = if keep.len() == labels.num_points() { labels } else { labels.select_points(&keep) };
        Ok(TrainSample { video, labels, kind })
    }

    /// A static sequence (first frame repeated) with constant labels.
    pub fn zero_flow(frame: crate::GrayImage, len: usize, points: &PointSet) -> Result<Self> {
        let video = VideoSequence::new("static", alloc::vec![frame; len.max(2)])?;
        let labels = TrajectorySet::constant(points, video.len(), crate::TrajectorySource::Simulation);
        TrainSample::new(video, labels, LossKind::ZeroFlow)
    }

    pub fn initial_points(&self) -> PointSet {
        self.labels.frame_points(0)
    }
}

/// Positions pushed into the history for one frame: with probability
/// `prob` the labels plus `N(0, noise²)` per coordinate (where the label is
/// valid), otherwise the model's own prediction.
pub fn history_forcing<R: Rng + ?Sized>(
    gt: &[Point],
    gt_valid: &[bool],
    model: &[Point],
    use_gt: bool,
    noise_std: f64,
    rng: &mut R,
) -> Vec<Point> {
    if !use_gt {
        return model.to_vec();
    }
    let normal = Normal::new(0.0, noise_std).expect("finite noise std");
    gt.iter()
        .zip(gt_valid)
        .zip(model)
        .map(|((&g, &ok), &m)| {
            if !ok {
                m
            } else if noise_std > 0.0 {
                g.offset(normal.sample(rng), normal.sample(rng))
            } else {
                g
            }
        })
        .collect()
}

/// Forcing settings for one sequence pass; `None` disables forcing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forcing {
    pub prob: f64,
    pub noise_std: f64,
    pub per_frame: bool,
}

/// Run one sequence through the model, accumulating gradients of its loss
/// into `grads`. Returns the loss.
pub fn sequence_gradient(
    model: &Tracker,
    sample: &TrainSample,
    loss_cfg: &LossConfig,
    forcing: Option<Forcing>,
    rng: &mut ChaCha8Rng,
    grads: &mut Grads,
) -> Result<f64> {
    let video = &sample.video;
    let labels = &sample.labels;
    let mu = time_weights(video.len(), sample.kind.gamma_time(loss_cfg));
    let mut state = model.init(video.frame(0), &sample.initial_points())?;
    let n = labels.num_points();
    let seq_coin = forcing.filter(|f| !f.per_frame).map(|f| rng.random_bool(f.prob));
    let mut total = 0.0;
    for t in 1..video.len() {
        let mut g = Graph::new(true);
        let init = state.last_points().to_vec();
        let fwd = model.forward_frame(&mut g, &state, video.frame(t), &init, false)?;
        let target = labels.frame(t);
        let valid: Vec<bool> = (0..n).map(|i| labels.is_valid(i, t)).collect();
        if let Some(loss) = frame_loss(&mut g, &fwd.iterates, &target, &valid, sample.kind, loss_cfg, mu[t]) {
            total += g.value(loss).item();
            g.backward(loss);
            g.accumulate_param_grads(grads);
        }
        let last: Var = *fwd.iterates.last().unwrap();
        let pred = tensor_points(g.value(last));
        let features = g.value(fwd.levels[0]).clone();
        drop(g);
        let pushed = match forcing {
            Some(f) => {
                let coin = seq_coin.unwrap_or_else(|| rng.random_bool(f.prob));
                history_forcing(&target, &valid, &pred, coin, f.noise_std, rng)
            }
            None => pred,
        };
        state.advance(features, pushed);
    }
    Ok(total)
}

/// Pure-model rollout: Eq.-weighted teacher loss and mean L2 of the final
/// estimates (frames ≥ 1, valid labels only).
pub fn evaluate_sample(model: &Tracker, sample: &TrainSample, loss_cfg: &LossConfig) -> Result<(f64, f64)> {
    let video = &sample.video;
    let p0 = sample.initial_points();
    let mut state = model.init(video.frame(0), &p0)?;
    let k = model.config().iterations;
    let mut pred = Vec::with_capacity(video.len());
    pred.push(alloc::vec![p0.as_slice().to_vec(); k + 1]);
    for t in 1..video.len() {
        pred.push(model.step(&mut state, video.frame(t), true)?.iterates.expect("requested iterates"));
    }
    let loss = teacher_loss(&pred, &sample.labels, loss_cfg)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (t, frame) in pred.iter().enumerate().skip(1) {
        for (i, p) in frame[k].iter().enumerate() {
            if sample.labels.is_valid(i, t) {
                sum += p.dist(sample.labels.get(i, t));
                count += 1;
            }
        }
    }
    Ok((loss, if count == 0 { 0.0 } else { sum / count as f64 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean loss per batch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_l2: Option<f64>,
    pub teacher_batches: usize,
    pub sim_batches: usize,
    pub zero_flow_batches: usize,
}

impl EpochLog {
    pub const HEADER: &'static str = "phase\tepoch\ttrain_loss\tval_loss\tval_l2\tteacher\tsim\tzero_flow";

    /// Tab-separated row matching [`EpochLog::HEADER`]; missing values are `-`.
    pub fn to_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| String::from("-"), |v| format!("{v}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.phase.as_str(),
            self.epoch,
            self.train_loss,
            opt(self.val_loss),
            opt(self.val_l2),
            self.teacher_batches,
            self.sim_batches,
            self.zero_flow_batches
        )
    }
}

/// Epoch with the lowest validation loss; ties go to the earliest epoch.
/// Returns `None` if no finite value exists.
pub fn select_best(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

/// Number of zero-flow batches interleaved with `batches` regular ones.
pub fn zero_flow_count(batches: usize, every: usize) -> usize {
    batches.checked_div(every).unwrap_or(0)
}

/// Simulation batches drawn per main epoch.
pub fn sim_count(pool: usize, fraction: f64) -> usize {
    libm::round(fraction * pool as f64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Teacher(usize),
    Sim(usize),
    Zero(usize),
}

/// Everything a main run produces.
#[derive(Debug, Clone)]
pub struct MainResult {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_params: ParamStore,
    pub logs: Vec<EpochLog>,
}

/// Progress hook called after every epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochLog);

fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    let tag = match phase {
        Phase::Warmup => 0x5741_524d,
        Phase::Main => 0x4d41_494e,
    };
    ChaCha8Rng::seed_from_u64(seed ^ (tag << 20) ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn optimizer_step(
    model: &mut Tracker,
    opt: &mut AdamW,
    grads: &mut Grads,
    loss: f64,
    lr: f64,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<()> {
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::TrainingDiverged { epoch, step, loss });
    }
    if let Some(max) = cfg.max_grad_norm {
        let norm = grads.global_norm();
        if norm > max {
            grads.scale(max / norm);
        }
    }
    opt.step(&mut model.params, grads, lr);
    grads.zero();
    Ok(())
}

/// Simulation warmup: `warmup_epochs` passes over `sim` with the L1 loss.
pub fn warmup(model: &mut Tracker, sim: &[TrainSample], cfg: &TrainConfig, hook: Option<EpochHook<'_>>) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if sim.is_empty() {
        return Err(invalid!("warmup needs at least one simulated sequence"));
    }
    let mut hook = hook;
    let mut opt = AdamW::new(&model.params, cfg.adamw);
    let mut grads = Grads::zeros_like(&model.params);
    let forcing = cfg.forcing_in_warmup.then_some(Forcing {
        prob: cfg.teacher_forcing_prob,
        noise_std: cfg.forcing_noise_std,
        per_frame: cfg.forcing_per_frame,
    });
    let mut logs = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 0..cfg.warmup_epochs {
        let mut rng = epoch_rng(cfg.seed, Phase::Warmup, epoch);
        let mut order: Vec<usize> = (0..sim.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let loss = sequence_gradient(model, &sim[i], &cfg.loss, forcing, &mut rng, &mut grads)?;
            optimizer_step(model, &mut opt, &mut grads, loss, cfg.lr_warmup, cfg, epoch, step)?;
            total += loss;
        }
        let log = EpochLog {
            phase: Phase::Warmup,
            epoch,
            train_loss: total / order.len() as f64,
            val_loss: None,
            val_l2: None,
            teacher_batches: 0,
            sim_batches: order.len(),
            zero_flow_batches: 0,
        };
        if let Some(h) = hook.as_mut() {
            h(&log);
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Mean validation loss and L2 over `val`.
pub fn validate(model: &Tracker, val: &[TrainSample], loss_cfg: &LossConfig) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Err(invalid!("validation split is empty"));
    }
    let (mut loss, mut l2) = (0.0, 0.0);
    for s in val {
        let (a, b) = evaluate_sample(model, s, loss_cfg)?;
        loss += a;
        l2 += b;
    }
    Ok((loss / val.len() as f64, l2 / val.len() as f64))
}

fn epoch_schedule(
    teacher: usize,
    sim: usize,
    zero: usize,
    cfg: &TrainConfig,
    fixed_sim: &[usize],
    rng: &mut ChaCha8Rng,
    zero_cursor: &mut usize,
) -> Vec<Slot> {
    let n_sim = sim_count(sim, cfg.sim_mix_fraction);
    let sims: Vec<usize> = if cfg.resample_sim_each_epoch {
        let mut all: Vec<usize> = (0..sim).collect();
        all.shuffle(rng);
        all.truncate(n_sim);
        all
    } else {
        fixed_sim.to_vec()
    };
    let mut slots: Vec<Slot> = (0..teacher).map(Slot::Teacher).chain(sims.into_iter().map(Slot::Sim)).collect();
    slots.shuffle(rng);
    if zero == 0 || cfg.zero_flow_every == 0 {
        return slots;
    }
    let mut out = Vec::with_capacity(slots.len() + slots.len() / cfg.zero_flow_every);
    for (i, s) in slots.into_iter().enumerate() {
        out.push(s);
        if (i + 1) % cfg.zero_flow_every == 0 {
            out.push(Slot::Zero(*zero_cursor % zero));
            *zero_cursor += 1;
        }
    }
    out
}

/// Teacher–student phase. Returns the parameters of the epoch with the
/// lowest validation loss; `model` is left at the final epoch's weights.
pub fn train_main(
    model: &mut Tracker,
    teacher: &[TrainSample],
    sim: &[TrainSample],
    zero_flow: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
    hook: Option<EpochHook<'_>>,
) -> Result<MainResult> {
    cfg.validate()?;
    if teacher.is_empty() {
        return Err(invalid!("main training needs at least one teacher-labelled sequence"));
    }
    if cfg.main_epochs == 0 {
        return Err(invalid!("main_epochs must be at least 1"));
    }
    let mut hook = hook;
    let mut opt = AdamW::new(&model.params, cfg.adamw);
    let mut grads = Grads::zeros_like(&model.params);
    let forcing = Some(Forcing {
        prob: cfg.teacher_forcing_prob,
        noise_std: cfg.forcing_noise_std,
        per_frame: cfg.forcing_per_frame,
    });
    let fixed_sim: Vec<usize> = {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1ed);
        let mut all: Vec<usize> = (0..sim.len()).collect();
        all.shuffle(&mut rng);
        all.truncate(sim_count(sim.len(), cfg.sim_mix_fraction));
        all
    };
    let mut zero_cursor = 0usize;
    let mut logs = Vec::with_capacity(cfg.main_epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 0..cfg.main_epochs {
        let mut rng = epoch_rng(cfg.seed, Phase::Main, epoch);
        let slots = epoch_schedule(teacher.len(), sim.len(), zero_flow.len(), cfg, &fixed_sim, &mut rng, &mut zero_cursor);
        let (mut nt, mut ns, mut nz) = (0, 0, 0);
        let mut total = 0.0;
        for (step, slot) in slots.iter().enumerate() {
            let sample = match *slot {
                Slot::Teacher(i) => {
                    nt += 1;
                    &teacher[i]
                }
                Slot::Sim(i) => {
                    ns += 1;
                    &sim[i]
                }
                Slot::Zero(i) => {
                    nz += 1;
                    &zero_flow[i]
                }
            };
            let loss = sequence_gradient(model, sample, &cfg.loss, forcing, &mut rng, &mut grads)?;
            optimizer_step(model, &mut opt, &mut grads, loss, cfg.lr_main, cfg, epoch, step)?;
            total += loss;
        }
        let (val_loss, val_l2) = if val.is_empty() { (f64::NAN, f64::NAN) } else { validate(model, val, &cfg.loss)? };
        let log = EpochLog {
            phase: Phase::Main,
            epoch,
            train_loss: total / slots.len().max(1) as f64,
            val_loss: (!val.is_empty()).then_some(val_loss),
            val_l2: (!val.is_empty()).then_some(val_l2),
            teacher_batches: nt,
            sim_batches: ns,
            zero_flow_batches: nz,
        };
        if let Some(h) = hook.as_mut() {
            h(&log);
        }
        logs.push(log);
        // Without a validation split the last epoch is kept.
        let score = if val.is_empty() { -(epoch as f64) } else { val_loss };
        if best.as_ref().is_none_or(|(_, b, _)| score < *b) {
            best = Some((epoch, score, model.params.clone()));
        }
    }
    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch");
    let best_val_loss = if val.is_empty() { f64::NAN } else { best_val_loss };
    Ok(MainResult { best_epoch, best_val_loss, best_params, logs })
}
