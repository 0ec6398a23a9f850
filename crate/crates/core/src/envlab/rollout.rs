use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{behavioral_entropy, episode_jitter};
use super::{route_pair, visit_order, EnvKind, Episode};
use crate::data::{Normalizer, Trajectory};
use crate::error::{Error, Result};
use crate::gmm::count_active_components;
use crate::policy::{Policy, SamplerSpec};
use crate::rng;
use crate::trainer::ACTIVE_THRESHOLD;

/// How many reference steps ahead the goal tracker may jump per env step.
pub const TRACK_WINDOW: usize = 10;

fn default_active() -> f64 {
    ACTIVE_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub env: EnvKind,
    pub episodes: usize,
    pub seed: u64,
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub conditional: bool,
    #[serde(default)]
    pub process_noise: f64,
    #[serde(default = "default_active")]
    pub active_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub success: bool,
    pub steps: usize,
    pub symbol: String,
    /// Outcome label of the reference demonstration supplying the goals.
    pub reference_symbol: Option<String>,
    pub jitter: f64,
    /// Visited positions, starting at the origin.
    pub positions: Vec<[f64; 2]>,
    /// Executed (clamped) actions.
    pub actions: Vec<[f64; 2]>,
    /// Active mixture count at every policy query.
    pub active: Vec<usize>,
    pub degraded_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub env: EnvKind,
    pub sampler: SamplerSpec,
    pub seed: u64,
    pub conditional: bool,
    pub active_threshold: f64,
    pub episodes: usize,
    pub success_rate: f64,
    /// Over outcome symbols, incomplete episodes counted as their own bin.
    pub behavioral_entropy_bits: f64,
    pub mean_jitter: f64,
    pub symbol_counts: BTreeMap<String, usize>,
    /// `active_histogram[c]` = policy queries with `c` active components.
    pub active_histogram: Vec<usize>,
    pub unimodal_fraction: f64,
    pub degraded_queries: usize,
    pub trajectories: Vec<EpisodeRecord>,
}

impl RolloutReport {
    /// Fraction of symbols equal to `symbol` among all episodes.
    pub fn symbol_fraction(&self, symbol: &str) -> f64 {
        *self.symbol_counts.get(symbol).unwrap_or(&0) as f64 / self.episodes.max(1) as f64
    }
}

/// Outcome label of a recorded demonstration.
pub fn reference_symbol(kind: EnvKind, traj: &Trajectory) -> String {
    let mut path: Vec<[f64; 2]> = traj.states.iter().map(|s| [s[0], s[1]]).collect();
    if let (Some(s), Some(a)) = (traj.states.last(), traj.actions.last()) {
        path.push([s[0] + a[0], s[1] + a[1]]);
    }
    match kind {
        EnvKind::Multiroute => route_pair(&path).map_or_else(|| "other".into(), |p| format!("pair{p}")),
        EnvKind::Sequencing => visit_order(&path),
    }
}

/// Goal states for a conditional episode: one reference demonstration is
/// fixed for the whole episode and a monotone progress index follows the
/// agent along it; the goals are the `h` reference states after that index.
struct GoalTracker<'a> {
    states: &'a [Vec<f64>],
    index: usize,
}

impl GoalTracker<'_> {
    fn advance(&mut self, pos: [f64; 2]) {
        let end = (self.index + TRACK_WINDOW).min(self.states.len() - 1);
        let d = |j: usize| (self.states[j][0] - pos[0]).hypot(self.states[j][1] - pos[1]);
        let mut best = self.index;
        for j in self.index..=end {
            if d(j) < d(best) {
                best = j;
            }
        }
        self.index = best;
    }

    fn goals(&self, h: usize, norm: &Normalizer) -> Vec<f64> {
        let n = self.states.len();
        (1..=h).flat_map(|i| norm.states.apply(&self.states[(self.index + i).min(n - 1)])).collect()
    }
}

fn run_episode(
    policy: &Policy,
    norm: &Normalizer,
    cfg: &RolloutConfig,
    index: usize,
    reference: Option<&Trajectory>,
) -> Result<EpisodeRecord> {
    let mut rng = rng::indexed_stream(cfg.seed, "episode", index as u64);
    let pc = policy.config();
    let mut ep = Episode::new(cfg.env, cfg.process_noise)?;
    let mut tracker = reference.map(|r| GoalTracker { states: &r.states, index: 0 });
    let mut positions = vec![ep.pos];
    let mut actions = Vec::new();
    let mut active = Vec::new();
    let mut degraded_queries = 0;
    let mut history: Vec<f64> = norm.states.apply(&ep.pos);
    let mut queue: std::collections::VecDeque<Vec<f64>> = Default::default();
    while !ep.done() {
        if queue.is_empty() {
            let keep = history.len().min(pc.state_history * pc.state_dim);
            let goals = match &tracker {
                Some(t) => t.goals(pc.goal_horizon, norm),
                None => Vec::new(),
            };
            let out = policy.act(&history[history.len() - keep..], &goals, &cfg.sampler, &mut rng)?;
            active.push(count_active_components(&out.gmm, cfg.active_threshold));
            degraded_queries += usize::from(out.degraded);
            queue.extend(out.actions.iter().map(|a| norm.actions.invert(a)));
        }
        let a = queue.pop_front().expect("queue refilled above");
        actions.push(ep.step(&a, &mut rng)?);
        positions.push(ep.pos);
        history.extend(norm.states.apply(&ep.pos));
        if let Some(t) = tracker.as_mut() {
            t.advance(ep.pos);
        }
    }
    Ok(EpisodeRecord {
        index,
        success: ep.success(),
        steps: ep.t,
        symbol: ep.symbol(&positions),
        reference_symbol: reference.map(|r| reference_symbol(cfg.env, r)),
        jitter: episode_jitter(&actions),
        positions,
        actions,
        active,
        degraded_queries,
    })
}

/// Runs `cfg.episodes` independent episodes in parallel. Episode `i` draws
/// all randomness from a stream derived from `(seed, i)`, so the report does
/// not depend on the thread count. Conditional episodes draw their goal
/// demonstration uniformly from `references`.
pub fn rollout(policy: &Policy, norm: &Normalizer, cfg: &RolloutConfig, references: &[Trajectory]) -> Result<RolloutReport> {
    cfg.sampler.validate()?;
    let pc = policy.config();
    if pc.state_dim != 2 || pc.action_dim != 2 || norm.states.dim() != 2 || norm.actions.dim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "policy has state_dim {} / action_dim {}, the {} task needs 2 / 2",
            pc.state_dim,
            pc.action_dim,
            cfg.env.name()
        )));
    }
    if cfg.conditional != (pc.goal_horizon > 0) {
        return Err(Error::InvalidArgument(format!(
            "conditional rollout requested = {}, but the policy has goal_horizon {}",
            cfg.conditional, pc.goal_horizon
        )));
    }
    let references: Vec<&Trajectory> = references.iter().filter(|t| !t.is_empty()).collect();
    if cfg.conditional && references.is_empty() {
        return Err(Error::InvalidArgument("conditional rollout needs reference demonstrations".into()));
    }
    if cfg.episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be at least 1".into()));
    }
    let records = (0..cfg.episodes)
        .into_par_iter()
        .map(|i| {
            let r = cfg.conditional.then(|| {
                let mut pick = rng::indexed_stream(cfg.seed, "reference", i as u64);
                references[pick.random_range(0..references.len())]
            });
            run_episode(policy, norm, cfg, i, r)
        })
        .collect::<Result<Vec<_>>>()?;
    let symbols: Vec<&str> = records.iter().map(|r| r.symbol.as_str()).collect();
    let mut symbol_counts = BTreeMap::new();
    for s in &symbols {
        *symbol_counts.entry(s.to_string()).or_default() += 1;
    }
    let mut active_histogram = vec![0usize; pc.mixtures + 1];
    for c in records.iter().flat_map(|r| &r.active) {
        active_histogram[*c] += 1;
    }
    let queries: usize = active_histogram.iter().sum();
    let n = records.len() as f64;
    Ok(RolloutReport {
        env: cfg.env,
        sampler: cfg.sampler.clone(),
        seed: cfg.seed,
        conditional: cfg.conditional,
        active_threshold: cfg.active_threshold,
        episodes: records.len(),
        success_rate: records.iter().filter(|r| r.success).count() as f64 / n,
        behavioral_entropy_bits: behavioral_entropy(&symbols),
        mean_jitter: records.iter().map(|r| r.jitter).sum::<f64>() / n,
        symbol_counts,
        unimodal_fraction: if queries > 0 { active_histogram[1] as f64 / queries as f64 } else { 0.0 },
        active_histogram,
        degraded_queries: records.iter().map(|r| r.degraded_queries).sum(),
        trajectories: records,
    })
}
