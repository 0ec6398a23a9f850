//! Behavioral-cloning loop: Adam with a cosine learning-rate schedule,
//! periodic validation, best/final checkpoints and the CSV log.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{checkpoint, Grads, ParameterStore};
use crate::data::{self, Normalizer, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyConfig, Window};
use crate::rng;

/// Mixture weight above which a component counts as active.
pub const ACTIVE_THRESHOLD: f64 = 0.1;

fn default_eval_every() -> usize {
    1
}

fn default_val_fraction() -> f64 {
    0.05
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

fn default_active() -> f64 {
    ACTIVE_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    /// Absent means a constant learning rate.
    #[serde(default)]
    pub min_lr: Option<f64>,
    #[serde(default)]
    pub history_mask_prob: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Global gradient-norm clip; `null` disables it.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_active")]
    pub active_threshold: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.history_mask_prob) {
            return bad(format!("history_mask_prob {} outside [0, 1]", self.history_mask_prob));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return bad(format!("max_lr must be positive, got {}", self.max_lr));
        }
        if let Some(min) = self.min_lr {
            if !(0.0..=self.max_lr).contains(&min) {
                return bad(format!("min_lr {min} outside [0, max_lr]"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// `min + ½(max − min)(1 + cos(π s / (S − 1)))`: `max` at step 0 and `min`
/// at the last step.
pub fn cosine_lr(step: usize, total: usize, max_lr: f64, min_lr: Option<f64>) -> f64 {
    match min_lr {
        None => max_lr,
        Some(min) if total <= 1 => min.max(if step == 0 { max_lr } else { min }),
        Some(min) => {
            let frac = step.min(total - 1) as f64 / (total - 1) as f64;
            min + 0.5 * (max_lr - min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

pub struct Prepared {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub normalizer: Normalizer,
    pub train_trajectories: Vec<usize>,
    pub val_trajectories: Vec<usize>,
    /// Trajectories too short for the window layout.
    pub skipped: usize,
}

pub fn prepare(trajs: &[Trajectory], pcfg: &PolicyConfig, tcfg: &TrainConfig) -> Result<Prepared> {
    pcfg.validate()?;
    tcfg.validate()?;
    let min_len = data::min_length(pcfg);
    let usable: Vec<usize> = (0..trajs.len()).filter(|i| trajs[*i].len() >= min_len).collect();
    let skipped = trajs.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Dataset(format!("no trajectory has the {min_len} steps the window layout needs")));
    }
    let sp = data::split(usable.len(), tcfg.val_fraction, &mut rng::substream(tcfg.seed, "split"));
    let train_trajectories: Vec<usize> = sp.train.iter().map(|i| usable[*i]).collect();
    let val_trajectories: Vec<usize> = sp.val.iter().map(|i| usable[*i]).collect();
    let refs: Vec<&Trajectory> = train_trajectories.iter().map(|i| &trajs[*i]).collect();
    let normalizer = Normalizer::fit(&refs)?;
    let mut mask_rng = rng::substream(tcfg.seed, "history-mask");
    let mut train = Vec::new();
    for t in &refs {
        train.extend(data::windows(t, &normalizer, pcfg, tcfg.history_mask_prob, &mut mask_rng)?);
    }
    let mut val = Vec::new();
    for i in &val_trajectories {
        val.extend(data::windows(&trajs[*i], &normalizer, pcfg, 0.0, &mut mask_rng)?);
    }
    Ok(Prepared { train, val, normalizer, train_trajectories, val_trajectories, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
    pub mean_active_mixtures: Option<f64>,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best: Policy,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub last: Policy,
    /// No `min_lr` was configured, so the learning rate stayed at `max_lr`.
    pub constant_lr: bool,
}

/// Adam with β = (0.9, 0.95), ε = 1e-8 and no weight decay. Moments are
/// kept in double precision.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParameterStore<f32>) -> Self {
        let zeros = || store.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam { beta1: 0.9, beta2: 0.95, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, store: &mut ParameterStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.0[i]);
            for j in 0..p.value.len() {
                let gj = f64::from(g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let upd = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p.value[j] = (f64::from(p.value[j]) - upd) as f32;
            }
        }
    }
}

/// Trains in place. `on_epoch` sees every log row as it is produced.
pub fn train(
    mut policy: Policy,
    prepared: &Prepared,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Policy),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if prepared.train.is_empty() {
        return Err(Error::Dataset("no training windows".into()));
    }
    let n = prepared.train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::substream(cfg.seed, "batches");
    let dropout_root = rng::derive_seed(cfg.seed, "dropout");
    let mut adam = Adam::new(policy.store());
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Policy)> = None;
    let mut step = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut nll_sum, mut count) = (0.0, 0usize);
        let mut lr = cosine_lr(step, total, cfg.max_lr, cfg.min_lr);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|i| prepared.train[*i].clone()));
            let out = policy.nll_loss(&batch, Some(rng::derive_indexed(dropout_root, "step", step as u64)))?;
            if !out.loss.is_finite() || out.grads.0.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let mut grads = out.grads;
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.sq_norm().sqrt();
                if norm > clip {
                    grads.scale((clip / norm) as f32);
                }
            }
            lr = cosine_lr(step, total, cfg.max_lr, cfg.min_lr);
            adam.step(policy.store_mut(), &grads, lr);
            nll_sum += out.loss * out.positions as f64;
            count += out.positions;
            step += 1;
        }
        let mut row =
            EpochLog { epoch, train_nll: nll_sum / count as f64, val_nll: None, mean_active_mixtures: None, lr };
        if !prepared.val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let stats = policy.evaluate(&prepared.val, cfg.active_threshold)?;
            row.val_nll = Some(stats.nll);
            row.mean_active_mixtures = Some(stats.mean_active);
            if best.as_ref().is_none_or(|(v, _, _)| stats.nll < *v) {
                best = Some((stats.nll, epoch, policy.clone()));
            }
        }
        on_epoch(&row, &policy);
        log.push(row);
    }
    let (best_val_nll, best_epoch, best) = best.unwrap_or((f64::NAN, cfg.epochs, policy.clone()));
    Ok(TrainOutcome { log, best, best_epoch, best_val_nll, last: policy, constant_lr: cfg.min_lr.is_none() })
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,train_nll,val_nll,mean_active_mixtures,lr")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in log {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.train_nll, opt(r.val_nll), opt(r.mean_active_mixtures), r.lr)?;
    }
    w.flush()?;
    Ok(())
}

/// JSON written next to a parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: PolicyConfig,
    pub normalizer: Normalizer,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_policy(path: &Path, policy: &Policy, normalizer: &Normalizer, meta: serde_json::Value) -> Result<()> {
    checkpoint::save(policy.store(), path)?;
    let side = Sidecar { config: policy.config().clone(), normalizer: normalizer.clone(), meta };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

/// Loads parameters and sidecar. When `expected` is given the stored
/// config must equal it.
pub fn load_policy(path: &Path, expected: Option<&PolicyConfig>) -> Result<(Policy, Sidecar)> {
    let side_path = sidecar_path(path);
    let side: Sidecar = serde_json::from_slice(
        &std::fs::read(&side_path)
            .map_err(|e| Error::Checkpoint(format!("cannot read sidecar {}: {e}", side_path.display())))?,
    )?;
    if let Some(exp) = expected {
        if exp != &side.config {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint has {:?}, expected {:?}",
                side.config, exp
            )));
        }
    }
    let store = checkpoint::load(path)?;
    let policy =
        Policy::from_store(side.config.clone(), store).map_err(|e| Error::Checkpoint(format!("layout mismatch: {e}")))?;
    Ok((policy, side))
}
