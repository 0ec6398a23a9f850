//! Demonstration datasets: JSON-lines I/O, min-max normalization, the
//! train/validation split and window extraction.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, Window};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.actions.len() {
            return Err(Error::Dataset(format!(
                "{} states but {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        let ragged = |rows: &[Vec<f64>]| rows.windows(2).any(|w| w[0].len() != w[1].len());
        if ragged(&self.states) || ragged(&self.actions) {
            return Err(Error::Dataset("rows of differing width".into()));
        }
        if self.states.iter().chain(&self.actions).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite value".into()));
        }
        Ok(())
    }
}

pub fn write_jsonl(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for t in trajs {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory =
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        t.validate().map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

/// Per-dimension affine map onto `[−1, 1]`: `(x − center) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    /// Fits the observed range. A constant dimension maps to 0 with unit
    /// scale.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> Result<Self> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for r in rows {
            if lo.is_empty() {
                lo = r.clone();
                hi = r.clone();
            } else if r.len() != lo.len() {
                return Err(Error::Dataset("rows of differing width".into()));
            }
            for (j, v) in r.iter().enumerate() {
                lo[j] = lo[j].min(*v);
                hi[j] = hi[j].max(*v);
            }
        }
        if lo.is_empty() {
            return Err(Error::Dataset("no rows to fit normalization".into()));
        }
        let (center, scale) = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h > l { ((h + l) / 2.0, (h - l) / 2.0) } else { (*l, 1.0) })
            .unzip();
        Ok(Affine { center, scale })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).zip(&self.scale).map(|((v, c), s)| (v - c) / s).collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.center).zip(&self.scale).map(|((v, c), s)| v * s + c).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub states: Affine,
    pub actions: Affine,
}

impl Normalizer {
    pub fn fit(trajs: &[&Trajectory]) -> Result<Self> {
        Ok(Normalizer {
            states: Affine::fit(trajs.iter().flat_map(|t| &t.states))?,
            actions: Affine::fit(trajs.iter().flat_map(|t| &t.actions))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Splits trajectory indices; `round(n · val_fraction)` go to validation
/// (at least one when there are two or more trajectories).
pub fn split<R: Rng + ?Sized>(n: usize, val_fraction: f64, rng: &mut R) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n >= 2 && val_fraction > 0.0 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = {
        let mut v = idx[..n_val].to_vec();
        v.sort_unstable();
        v
    };
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    Split { train, val }
}

/// Shortest trajectory the window layout can use.
pub fn min_length(cfg: &PolicyConfig) -> usize {
    cfg.state_history + cfg.action_horizon + cfg.goal_horizon
}

/// Windows of `state_history` consecutive states ending at every step that
/// still has a full action chunk ahead. Goal states are the next
/// `goal_horizon` states after the window, repeating the final state past
/// the end. With probability `mask_prob` a window has its history masked.
pub fn windows<R: Rng + ?Sized>(
    traj: &Trajectory,
    norm: &Normalizer,
    cfg: &PolicyConfig,
    mask_prob: f64,
    rng: &mut R,
) -> Result<Vec<Window>> {
    let (d, m) = (cfg.state_dim, cfg.action_dim);
    if traj.states.first().is_some_and(|s| s.len() != d) || traj.actions.first().is_some_and(|a| a.len() != m) {
        return Err(Error::Dataset(format!("trajectory dims do not match state_dim {d} / action_dim {m}")));
    }
    let n = traj.len();
    let (hs, ha, hg) = (cfg.state_history, cfg.action_horizon, cfg.goal_horizon);
    if n < min_length(cfg) {
        return Ok(Vec::new());
    }
    let states: Vec<Vec<f64>> = traj.states.iter().map(|s| norm.states.apply(s)).collect();
    let actions: Vec<Vec<f64>> = traj.actions.iter().map(|a| norm.actions.apply(a)).collect();
    let mut out = Vec::new();
    for t in hs - 1..=n - ha {
        let first = t + 1 - hs;
        let goals = (1..=hg).flat_map(|i| states[(t + i).min(n - 1)].iter().copied()).collect();
        let history_masked = mask_prob > 0.0 && rng.random::<f64>() < mask_prob;
        out.push(Window {
            states: (first..=t).flat_map(|u| states[u].iter().copied()).collect(),
            len: hs,
            goals,
            targets: (first..=t).flat_map(|u| (u..u + ha).flat_map(|v| actions[v].iter().copied())).collect(),
            history_masked,
        });
    }
    Ok(out)
}
