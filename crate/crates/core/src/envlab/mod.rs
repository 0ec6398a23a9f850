//! Two-dimensional point-mass tasks with multimodal demonstrations.
//!
//! Both tasks start at the origin and move by displacement actions clamped
//! to `MAX_STEP`. `Multiroute` reaches one target through one of four
//! routes; `Sequencing` visits two goals in either order.

pub mod metrics;
pub mod plot;
pub mod rollout;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};

pub use metrics::{behavioral_entropy, episode_jitter, paired_t_test, PairedTest};
pub use rollout::{rollout, EpisodeRecord, RolloutConfig, RolloutReport};

pub const MAX_STEP: f64 = 0.05;
/// Nominal demonstrator step length. Kept well inside `MAX_STEP` so that
/// action noise is rarely folded onto the clamp circle.
pub const DEMO_SPEED: f64 = 0.03;

pub const MULTIROUTE_TARGET: [f64; 2] = [1.0, 1.0];
pub const MULTIROUTE_TARGET_RADIUS: f64 = 0.05;
pub const MULTIROUTE_STEPS: usize = 120;
/// Lateral offset of the two routes within a pair.
pub const ROUTE_OFFSET: f64 = 0.08;
/// A demonstrator switches to its next waypoint inside this radius.
pub const WAYPOINT_RADIUS: f64 = 0.02;

pub const GOAL_A: [f64; 2] = [-1.0, 1.0];
pub const GOAL_B: [f64; 2] = [1.0, 1.0];
pub const GOAL_RADIUS: f64 = 0.15;
pub const SEQUENCING_STEPS: usize = 150;

pub const INCOMPLETE: &str = "incomplete";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Multiroute,
    Sequencing,
}

impl EnvKind {
    pub fn step_cap(self) -> usize {
        match self {
            EnvKind::Multiroute => MULTIROUTE_STEPS,
            EnvKind::Sequencing => SEQUENCING_STEPS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Multiroute => "multiroute",
            EnvKind::Sequencing => "sequencing",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiroute" => Ok(EnvKind::Multiroute),
            "sequencing" => Ok(EnvKind::Sequencing),
            _ => Err(Error::InvalidArgument(format!("unknown environment {s:?}"))),
        }
    }
}

pub fn clamp_action(a: &[f64]) -> [f64; 2] {
    let n = a[0].hypot(a[1]);
    if n > MAX_STEP {
        [a[0] * MAX_STEP / n, a[1] * MAX_STEP / n]
    } else {
        [a[0], a[1]]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// One running episode of either task.
#[derive(Clone, Debug)]
pub struct Episode {
    pub kind: EnvKind,
    pub pos: [f64; 2],
    pub t: usize,
    /// Goals in order of first entry (sequencing only).
    pub visited: Vec<char>,
    process_noise: Option<Normal<f64>>,
}

impl Episode {
    pub fn new(kind: EnvKind, process_noise_std: f64) -> Result<Self> {
        let process_noise = if process_noise_std > 0.0 {
            Some(Normal::new(0.0, process_noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?)
        } else if process_noise_std == 0.0 {
            None
        } else {
            return Err(Error::InvalidArgument("process noise must be non-negative".into()));
        };
        Ok(Episode { kind, pos: [0.0, 0.0], t: 0, visited: Vec::new(), process_noise })
    }

    pub fn success(&self) -> bool {
        match self.kind {
            EnvKind::Multiroute => dist(self.pos, MULTIROUTE_TARGET) <= MULTIROUTE_TARGET_RADIUS,
            EnvKind::Sequencing => self.visited.len() == 2,
        }
    }

    pub fn done(&self) -> bool {
        self.success() || self.t >= self.kind.step_cap()
    }

    /// Applies a displacement; returns the clamped action actually executed.
    pub fn step<R: Rng + ?Sized>(&mut self, action: &[f64], rng: &mut R) -> Result<[f64; 2]> {
        if action.len() != 2 || action.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad action {action:?}")));
        }
        let a = clamp_action(action);
        let (nx, ny) = match &self.process_noise {
            Some(n) => (n.sample(rng), n.sample(rng)),
            None => (0.0, 0.0),
        };
        self.pos = [self.pos[0] + a[0] + nx, self.pos[1] + a[1] + ny];
        self.t += 1;
        if self.kind == EnvKind::Sequencing {
            for (name, g) in [('A', GOAL_A), ('B', GOAL_B)] {
                if !self.visited.contains(&name) && dist(self.pos, g) <= GOAL_RADIUS {
                    self.visited.push(name);
                }
            }
        }
        Ok(a)
    }

    /// Outcome label used for entropy and coverage statistics.
    pub fn symbol(&self, path: &[[f64; 2]]) -> String {
        if !self.success() {
            return INCOMPLETE.into();
        }
        match self.kind {
            EnvKind::Multiroute => route_pair(path).map_or_else(|| "other".into(), |p| format!("pair{p}")),
            EnvKind::Sequencing => self.visited.iter().collect(),
        }
    }
}

/// Which route pair a multiroute path took: 1 if it was ever right of
/// `x = 0.5` while below `y = 0.5`, 2 for the mirror image; the first such
/// event decides.
pub fn route_pair(path: &[[f64; 2]]) -> Option<u8> {
    path.iter().find_map(|p| {
        if p[0] > 0.5 && p[1] < 0.5 {
            Some(1)
        } else if p[1] > 0.5 && p[0] < 0.5 {
            Some(2)
        } else {
            None
        }
    })
}

/// Ordering label of a sequencing path: the goals in the order the path
/// first enters them.
pub fn visit_order(path: &[[f64; 2]]) -> String {
    let mut seen = String::new();
    for p in path {
        for (name, g) in [('A', GOAL_A), ('B', GOAL_B)] {
            if !seen.contains(name) && dist(*p, g) <= GOAL_RADIUS {
                seen.push(name);
            }
        }
    }
    seen
}

/// Waypoints of the four multiroute demonstrations, target last.
pub fn multiroute_waypoints(route: usize) -> Vec<[f64; 2]> {
    let via = match route {
        0 => [1.0, ROUTE_OFFSET],
        1 => [1.0, -ROUTE_OFFSET],
        2 => [ROUTE_OFFSET, 1.0],
        _ => [-ROUTE_OFFSET, 1.0],
    };
    vec![via, MULTIROUTE_TARGET]
}

/// Tracks `waypoints` from the origin with noisy clamped steps. A waypoint is
/// passed once within `reached(index)` of it. Stops when `finished` holds or
/// at the step cap.
fn track<R: Rng + ?Sized>(
    kind: EnvKind,
    waypoints: &[[f64; 2]],
    reached: impl Fn(usize) -> f64,
    noise: &Option<Normal<f64>>,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut ep = Episode::new(kind, 0.0)?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut w = 0;
    while !ep.done() {
        while w + 1 < waypoints.len() && dist(ep.pos, waypoints[w]) <= reached(w) {
            w += 1;
        }
        let target = waypoints[w];
        let d = dist(ep.pos, target);
        let mut a = if d > 0.0 {
            let s = d.min(DEMO_SPEED) / d;
            [(target[0] - ep.pos[0]) * s, (target[1] - ep.pos[1]) * s]
        } else {
            [0.0, 0.0]
        };
        if let Some(n) = noise {
            a[0] += n.sample(rng);
            a[1] += n.sample(rng);
        }
        states.push(ep.pos.to_vec());
        let executed = ep.step(&a, rng)?;
        actions.push(executed.to_vec());
    }
    Ok(Trajectory { states, actions })
}

fn action_noise(std: f64) -> Result<Option<Normal<f64>>> {
    if std < 0.0 || !std.is_finite() {
        return Err(Error::InvalidArgument(format!("noise_std must be finite and non-negative, got {std}")));
    }
    Ok(if std > 0.0 { Some(Normal::new(0.0, std).expect("valid std")) } else { None })
}

/// `n` demonstrations, each along one of four routes chosen uniformly.
/// Returns the trajectories and the route index of each.
pub fn generate_multiroute_demos<R: Rng + ?Sized>(n: usize, noise_std: f64, rng: &mut R) -> Result<(Vec<Trajectory>, Vec<usize>)> {
    if n < 4 {
        return Err(Error::InvalidArgument("need at least 4 demonstrations".into()));
    }
    let noise = action_noise(noise_std)?;
    let mut trajs = Vec::with_capacity(n);
    let mut routes = Vec::with_capacity(n);
    for _ in 0..n {
        let route = rng.random_range(0..4);
        trajs.push(track(EnvKind::Multiroute, &multiroute_waypoints(route), |_| WAYPOINT_RADIUS, &noise, rng)?);
        routes.push(route);
    }
    Ok((trajs, routes))
}

/// `n` demonstrations visiting A then B or B then A with equal probability.
/// Returns the trajectories and their intended orderings.
pub fn generate_sequencing_demos<R: Rng + ?Sized>(n: usize, noise_std: f64, rng: &mut R) -> Result<(Vec<Trajectory>, Vec<String>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one demonstration".into()));
    }
    let noise = action_noise(noise_std)?;
    let mut trajs = Vec::with_capacity(n);
    let mut orders = Vec::with_capacity(n);
    for _ in 0..n {
        let a_first = rng.random_bool(0.5);
        let wps = if a_first { [GOAL_A, GOAL_B] } else { [GOAL_B, GOAL_A] };
        // aim at goal centres, move on as soon as a goal counts as visited
        trajs.push(track(EnvKind::Sequencing, &wps, |_| GOAL_RADIUS, &noise, rng)?);
        orders.push(if a_first { "AB" } else { "BA" }.to_string());
    }
    Ok((trajs, orders))
}
