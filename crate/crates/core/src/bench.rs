//! Per-component inference timing: decoder forward, head decode and each
//! sampler, on a freshly initialized policy.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{sample_vanilla, scale_variances};
use crate::modes::{find_modes, sample_mode, ModeFinderConfig, ModeNoise};
use crate::policy::{Policy, PolicyConfig};
use crate::rng;

/// The 6-layer, 8-head, 128-wide configuration with a 60-d state, 9-d
/// action, 4 mixtures and 10 states of history.
pub fn kitchen_config() -> PolicyConfig {
    PolicyConfig {
        state_dim: 60,
        action_dim: 9,
        mixtures: 4,
        state_history: 10,
        goal_horizon: 0,
        layers: 6,
        heads: 8,
        embed_dim: 128,
        dropout: 0.1,
        action_horizon: 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub component: String,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: PolicyConfig,
    pub reps: usize,
    pub seed: u64,
    pub timings: Vec<Timing>,
    /// Mean (head decode + vanilla sampling) / mean backbone forward.
    pub head_plus_vanilla_over_backbone: f64,
}

impl BenchReport {
    pub fn mean_ms(&self, component: &str) -> Option<f64> {
        self.timings.iter().find(|t| t.component == component).map(|t| t.mean_ms)
    }
}

fn summarize(component: &str, mut ms: Vec<f64>) -> Timing {
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    ms.sort_by(f64::total_cmp);
    let idx = ((ms.len() as f64 * 0.95).ceil() as usize).clamp(1, ms.len()) - 1;
    Timing { component: component.into(), mean_ms: mean, p95_ms: ms[idx] }
}

fn time<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

pub fn run(cfg: &PolicyConfig, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    let policy = Policy::new(cfg.clone(), &mut rng::substream(seed, "init"))?;
    let mut data_rng = rng::substream(seed, "data");
    let mut sample_rng = rng::substream(seed, "sampling");
    let len = cfg.state_history;
    let finder = ModeFinderConfig::default();
    let mut t = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..reps {
        let states: Vec<f64> = (0..len * cfg.state_dim).map(|_| data_rng.random_range(-1.0..1.0)).collect();
        let goals: Vec<f64> = (0..cfg.goal_horizon * cfg.state_dim).map(|_| data_rng.random_range(-1.0..1.0)).collect();
        let (feats, ms) = time(|| policy.backbone_features(&states, len, &goals));
        t[0].push(ms);
        let (gmm, ms) = time(|| policy.decode_head(&feats?));
        t[1].push(ms);
        let gmm = gmm?;
        let (_, ms) = time(|| sample_vanilla(&gmm, &mut sample_rng, 1));
        t[2].push(ms);
        let (r, ms) = time(|| scale_variances(&gmm, 1e-6).map(|g| sample_vanilla(&g, &mut sample_rng, 1)));
        r?;
        t[3].push(ms);
        let (r, ms) = time(|| {
            find_modes(&gmm, &finder, &mut sample_rng).and_then(|m| sample_mode(&m, &mut sample_rng, ModeNoise::None))
        });
        r?;
        t[4].push(ms);
    }
    let names = ["backbone_forward", "head_decode", "sample_vanilla", "sample_scaled", "sample_mode"];
    let timings: Vec<Timing> = names.iter().zip(t).map(|(n, v)| summarize(n, v)).collect();
    let ratio = (timings[1].mean_ms + timings[2].mean_ms) / timings[0].mean_ms;
    Ok(BenchReport { config: cfg.clone(), reps, seed, timings, head_plus_vanilla_over_backbone: ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_and_mean() {
        let t = summarize("x", (1..=100).map(f64::from).collect());
        assert_eq!(t.p95_ms, 95.0);
        assert_eq!(t.mean_ms, 50.5);
    }

    #[test]
    fn small_run_reports_every_component() {
        let cfg = PolicyConfig { layers: 1, embed_dim: 16, heads: 2, ..kitchen_config() };
        let r = run(&cfg, 3, 0).unwrap();
        assert_eq!(r.timings.len(), 5);
        assert!(r.timings.iter().all(|t| t.mean_ms >= 0.0 && t.p95_ms >= 0.0));
        assert!(run(&cfg, 0, 0).is_err());
    }
}
