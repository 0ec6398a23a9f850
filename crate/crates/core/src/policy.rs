//! The GMM-headed autoregressive policy: a linear token projection of
//! states (and optional goal states), the causal decoder, and a head that
//! emits one diagonal mixture per state position.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::ops;
use crate::backbone::params::Init;
use crate::backbone::{Decoder, DecoderConfig, Grads, ParamId, ParameterStore, Real, SequenceTrace};
use crate::error::{Error, Result};
use crate::gmm::{self, count_active_components, sample_vanilla, scale_variances, GmmParams, RawHeadOutputs};
use crate::modes::{find_modes, sample_mode, ModeFinderConfig, ModeNoise};
use crate::rng;

/// Standard deviation of the head weights at initialization. Small enough
/// that the bias (hypercube corners, unit σ) dominates the first outputs.
pub const HEAD_INIT_STD: f64 = 1e-3;
const EMBED_INIT_STD: f64 = 0.02;
/// Windows per parallel work unit in the loss. Fixed so that the reduction
/// order, and hence the result, does not depend on the thread count.
const LOSS_CHUNK: usize = 8;

fn default_dropout() -> f64 {
    0.1
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub mixtures: usize,
    pub state_history: usize,
    /// Number of goal tokens; 0 means unconditional.
    #[serde(default)]
    pub goal_horizon: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "one")]
    pub action_horizon: usize,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.state_dim == 0 || self.action_dim == 0 {
            return bad("state_dim and action_dim must be positive");
        }
        if self.mixtures == 0 {
            return bad("mixtures must be at least 1");
        }
        if self.state_history == 0 {
            return bad("state_history must be at least 1");
        }
        if self.action_horizon == 0 {
            return bad("action_horizon must be at least 1");
        }
        self.decoder().validate()
    }

    /// Dimension of one prediction target (an action chunk).
    pub fn target_dim(&self) -> usize {
        self.action_dim * self.action_horizon
    }

    pub fn head_width(&self) -> usize {
        RawHeadOutputs::width(self.mixtures, self.target_dim())
    }

    pub fn max_tokens(&self) -> usize {
        self.goal_horizon + self.state_history
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.layers,
            heads: self.heads,
            embed_dim: self.embed_dim,
            max_len: self.max_tokens(),
            dropout: self.dropout,
        }
    }
}

/// One training or validation example, already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `len × state_dim`, oldest first.
    pub states: Vec<f64>,
    pub len: usize,
    /// `goal_horizon × state_dim`, empty when unconditional.
    pub goals: Vec<f64>,
    /// `len × target_dim`: the action chunk to predict at each position.
    pub targets: Vec<f64>,
    /// Every state but the last is replaced by the mask token, and only the
    /// last position carries loss.
    pub history_masked: bool,
}

impl Window {
    fn loss_positions(&self) -> std::ops::Range<usize> {
        if self.history_masked {
            self.len - 1..self.len
        } else {
            0..self.len
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SamplerSpec {
    Vanilla,
    Scaled { alpha: f64 },
    Mode {
        #[serde(default)]
        noise: ModeNoise,
    },
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SamplerSpec::Scaled { alpha } if !(*alpha > 0.0 && *alpha <= 1.0) => {
                Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")))
            }
            SamplerSpec::Mode { noise: ModeNoise::Fixed(s) | ModeNoise::Laplace(s) } if !(*s >= 0.0 && s.is_finite()) => {
                Err(Error::InvalidArgument(format!("mode noise parameter must be finite and non-negative, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

/// Result of one policy query.
#[derive(Clone, Debug)]
pub struct Action {
    /// `action_horizon` actions of `action_dim` each, normalized units.
    pub actions: Vec<Vec<f64>>,
    pub gmm: GmmParams,
    /// Mode finding fell back to the heaviest component mean.
    pub degraded: bool,
    pub noise_fallback: bool,
}

#[derive(Clone, Debug)]
struct InputIds {
    proj_w: ParamId,
    proj_b: ParamId,
    mask_token: ParamId,
    pos_emb: ParamId,
    type_emb: Option<ParamId>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Policy<T: Real = f32> {
    cfg: PolicyConfig,
    store: ParameterStore<T>,
    decoder: Decoder,
    ids: InputIds,
}

/// Everything a reverse pass over one window needs.
struct Pass<T> {
    len: usize,
    tokens: Vec<T>,
    masked: Vec<bool>,
    trace: SequenceTrace<T>,
    raw: Vec<T>,
}

pub struct LossOutput<T> {
    /// Mean NLL over all loss positions.
    pub loss: f64,
    pub positions: usize,
    /// Gradient of `loss`.
    pub grads: Grads<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub nll: f64,
    pub mean_active: f64,
    pub positions: usize,
}

/// Picks `k` corners of `{−1,1}^dim` with maximal minimum pairwise Hamming
/// distance. Corners are indexed in reflected Gray order; ties keep the
/// earliest set in that order. Exhaustive when the search is small, greedy
/// farthest-point otherwise. For `k > 2^dim` all corners are used in Gray
/// order and then reused cyclically.
pub fn hypercube_corners(k: usize, dim: usize) -> Vec<Vec<f64>> {
    let gray = |i: u64| i ^ (i >> 1);
    let corner = |code: u64| (0..dim).map(|b| if code >> b & 1 == 1 { 1.0 } else { -1.0 }).collect::<Vec<f64>>();
    let n_corners = if dim >= 63 { u64::MAX } else { 1u64 << dim };
    if k as u64 >= n_corners {
        return (0..k).map(|i| corner(gray(i as u64 % n_corners))).collect();
    }
    let dist = |a: u64, b: u64| (gray(a) ^ gray(b)).count_ones();
    let min_dist = |set: &[u64]| {
        let mut best = u32::MAX;
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                best = best.min(dist(set[i], set[j]));
            }
        }
        best
    };
    let chosen: Vec<u64> = if dim <= 4 {
        // C(16, 8) = 12870 subsets at most
        let mut best: Option<(u32, Vec<u64>)> = None;
        let mut cur = Vec::with_capacity(k);
        fn rec(
            start: u64,
            n: u64,
            k: usize,
            cur: &mut Vec<u64>,
            best: &mut Option<(u32, Vec<u64>)>,
            score: &dyn Fn(&[u64]) -> u32,
        ) {
            if cur.len() == k {
                let s = score(cur);
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    *best = Some((s, cur.clone()));
                }
                return;
            }
            for i in start..n {
                cur.push(i);
                rec(i + 1, n, k, cur, best, score);
                cur.pop();
            }
        }
        rec(0, n_corners, k, &mut cur, &mut best, &min_dist);
        best.map(|(_, s)| s).unwrap_or_default()
    } else {
        let mut set = vec![0u64];
        while set.len() < k {
            let mut pick = (0u32, 0u64);
            for c in 0..n_corners.min(1 << 16) {
                if set.contains(&c) {
                    continue;
                }
                let d = set.iter().map(|s| dist(*s, c)).min().unwrap_or(0);
                if d > pick.0 {
                    pick = (d, c);
                }
            }
            set.push(pick.1);
        }
        set
    };
    chosen.into_iter().map(|i| corner(gray(i))).collect()
}

impl Policy<f32> {
    pub fn new<R: Rng + ?Sized>(cfg: PolicyConfig, rng: &mut R) -> Result<Self> {
        Self::init(cfg, rng)
    }
}

impl<T: Real> Policy<T> {
    /// Fresh parameters: decoder and embeddings at their standard init, head
    /// mean biases on hypercube corners and σ biases giving unit deviation.
    pub fn init<R: Rng + ?Sized>(cfg: PolicyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, e, w) = (cfg.state_dim, cfg.embed_dim, cfg.head_width());
        let mut store = ParameterStore::new();
        store.add("input.proj.weight", &[d, e], Init::Normal(EMBED_INIT_STD), rng)?;
        store.add("input.proj.bias", &[e], Init::Zeros, rng)?;
        store.add("input.mask_token", &[d], Init::Zeros, rng)?;
        store.add("input.pos_emb", &[cfg.max_tokens(), e], Init::Normal(EMBED_INIT_STD), rng)?;
        if cfg.goal_horizon > 0 {
            store.add("input.type_emb", &[2, e], Init::Normal(EMBED_INIT_STD), rng)?;
        }
        Decoder::register(cfg.decoder(), &mut store, "decoder.", rng)?;
        store.add("head.weight", &[e, w], Init::Normal(HEAD_INIT_STD), rng)?;
        let (k, td) = (cfg.mixtures, cfg.target_dim());
        let mut bias = vec![0.0; w];
        for (i, c) in hypercube_corners(k, td).into_iter().enumerate() {
            bias[k + i * td..k + (i + 1) * td].copy_from_slice(&c);
        }
        let pre = gmm::sigma_preactivation(1.0);
        bias[k + k * td..].iter_mut().for_each(|b| *b = pre);
        store.add("head.bias", &[w], Init::Values(bias), rng)?;
        Self::from_store(cfg, store)
    }

    /// Wraps an existing parameter store, checking every name and shape.
    pub fn from_store(cfg: PolicyConfig, store: ParameterStore<T>) -> Result<Self> {
        cfg.validate()?;
        let (d, e, w) = (cfg.state_dim, cfg.embed_dim, cfg.head_width());
        let ids = InputIds {
            proj_w: store.expect("input.proj.weight", &[d, e])?,
            proj_b: store.expect("input.proj.bias", &[e])?,
            mask_token: store.expect("input.mask_token", &[d])?,
            pos_emb: store.expect("input.pos_emb", &[cfg.max_tokens(), e])?,
            type_emb: if cfg.goal_horizon > 0 { Some(store.expect("input.type_emb", &[2, e])?) } else { None },
            head_w: store.expect("head.weight", &[e, w])?,
            head_b: store.expect("head.bias", &[w])?,
        };
        let expected = store.len() - if cfg.goal_horizon > 0 { 7 } else { 6 };
        if expected != 12 * cfg.layers {
            return Err(Error::Shape(format!(
                "store holds {} parameters, config expects {}",
                store.len(),
                store.len() - expected + 12 * cfg.layers
            )));
        }
        let decoder = Decoder::attach(cfg.decoder(), &store, "decoder.")?;
        Ok(Policy { cfg, store, decoder, ids })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParameterStore<T> {
        self.store
    }

    pub fn cast<U: Real>(&self) -> Policy<U> {
        Policy { cfg: self.cfg.clone(), store: self.store.cast(), decoder: self.decoder.clone(), ids: self.ids.clone() }
    }

    fn check_inputs(&self, states: &[f64], len: usize, goals: &[f64]) -> Result<()> {
        let d = self.cfg.state_dim;
        if len == 0 || len > self.cfg.state_history {
            return Err(Error::Shape(format!("history length {len} outside 1..={}", self.cfg.state_history)));
        }
        if states.len() != len * d {
            return Err(Error::Shape(format!("{} state values for {len} states of dim {d}", states.len())));
        }
        if goals.len() != self.cfg.goal_horizon * d {
            return Err(Error::Shape(format!(
                "{} goal values, expected {} goal states of dim {d}",
                goals.len(),
                self.cfg.goal_horizon
            )));
        }
        Ok(())
    }

    fn run<R: Rng + ?Sized>(
        &self,
        states: &[f64],
        len: usize,
        goals: &[f64],
        history_masked: bool,
        dropout: Option<&mut R>,
    ) -> Result<Pass<T>> {
        self.check_inputs(states, len, goals)?;
        let (d, e, hg) = (self.cfg.state_dim, self.cfg.embed_dim, self.cfg.goal_horizon);
        let n_tok = hg + len;
        let mask_token = self.store.value(self.ids.mask_token);
        let mut tokens = Vec::with_capacity(n_tok * d);
        let mut masked = vec![false; n_tok];
        tokens.extend(goals.iter().map(|v| T::of(*v)));
        for t in 0..len {
            if history_masked && t + 1 < len {
                masked[hg + t] = true;
                tokens.extend_from_slice(mask_token);
            } else {
                tokens.extend(states[t * d..(t + 1) * d].iter().map(|v| T::of(*v)));
            }
        }
        let mut emb = ops::linear_forward(&tokens, n_tok, self.store.value(self.ids.proj_w), self.store.value(self.ids.proj_b), d, e);
        let pos = self.store.value(self.ids.pos_emb);
        for p in 0..n_tok {
            let row = &mut emb[p * e..(p + 1) * e];
            row.iter_mut().zip(&pos[p * e..(p + 1) * e]).for_each(|(a, b)| *a += *b);
            if let Some(id) = self.ids.type_emb {
                let kind = usize::from(p >= hg);
                let ty = &self.store.value(id)[kind * e..(kind + 1) * e];
                row.iter_mut().zip(ty).for_each(|(a, b)| *a += *b);
            }
        }
        let trace = self.decoder.forward_sequence(&self.store, &emb, n_tok, dropout)?;
        let feats = &trace.output()[hg * e..];
        let raw = ops::linear_forward(
            feats,
            len,
            self.store.value(self.ids.head_w),
            self.store.value(self.ids.head_b),
            e,
            self.cfg.head_width(),
        );
        Ok(Pass { len, tokens, masked, trace, raw })
    }

    fn raw_at(&self, pass: &Pass<T>, t: usize) -> Result<RawHeadOutputs> {
        let w = self.cfg.head_width();
        let flat: Vec<f64> = pass.raw[t * w..(t + 1) * w].iter().map(|v| v.as_f64()).collect();
        RawHeadOutputs::from_flat(self.cfg.mixtures, self.cfg.target_dim(), &flat)
    }

    fn backward(&self, pass: &Pass<T>, draw: &[T], grads: &mut Grads<T>) -> Result<()> {
        let (d, e, hg) = (self.cfg.state_dim, self.cfg.embed_dim, self.cfg.goal_horizon);
        let n_tok = hg + pass.len;
        let feats = &pass.trace.output()[hg * e..];
        let (dw, db) = grads.pair_mut(self.ids.head_w, self.ids.head_b);
        let dfeat = ops::linear_backward(feats, pass.len, self.store.value(self.ids.head_w), draw, e, self.cfg.head_width(), dw, db);
        let mut dout = vec![T::zero(); n_tok * e];
        dout[hg * e..].copy_from_slice(&dfeat);
        let demb = self.decoder.backward_sequence(&self.store, &pass.trace, &dout, grads)?;
        {
            let dpos = grads.get_mut(self.ids.pos_emb);
            dpos[..n_tok * e].iter_mut().zip(&demb).for_each(|(a, b)| *a += *b);
        }
        if let Some(id) = self.ids.type_emb {
            let dty = grads.get_mut(id);
            for p in 0..n_tok {
                let kind = usize::from(p >= hg);
                for j in 0..e {
                    dty[kind * e + j] += demb[p * e + j];
                }
            }
        }
        let (dw, db) = grads.pair_mut(self.ids.proj_w, self.ids.proj_b);
        let dtok = ops::linear_backward(&pass.tokens, n_tok, self.store.value(self.ids.proj_w), &demb, d, e, dw, db);
        let dmask = grads.get_mut(self.ids.mask_token);
        for p in (0..n_tok).filter(|p| pass.masked[*p]) {
            dmask.iter_mut().zip(&dtok[p * d..(p + 1) * d]).for_each(|(a, b)| *a += *b);
        }
        Ok(())
    }

    /// Decoder output at the last state position, evaluation mode. Together
    /// with [`Policy::decode_head`] this splits a query for timing.
    pub fn backbone_features(&self, states: &[f64], len: usize, goals: &[f64]) -> Result<Vec<T>> {
        self.check_inputs(states, len, goals)?;
        let (d, e, hg) = (self.cfg.state_dim, self.cfg.embed_dim, self.cfg.goal_horizon);
        let n_tok = hg + len;
        let tokens: Vec<T> = goals.iter().chain(states).map(|v| T::of(*v)).collect();
        let mut emb = ops::linear_forward(&tokens, n_tok, self.store.value(self.ids.proj_w), self.store.value(self.ids.proj_b), d, e);
        let pos = self.store.value(self.ids.pos_emb);
        emb.iter_mut().zip(pos).for_each(|(a, b)| *a += *b);
        if let Some(id) = self.ids.type_emb {
            let ty = self.store.value(id);
            for p in 0..n_tok {
                let kind = usize::from(p >= hg);
                emb[p * e..(p + 1) * e].iter_mut().zip(&ty[kind * e..(kind + 1) * e]).for_each(|(a, b)| *a += *b);
            }
        }
        let trace = self.decoder.forward_sequence::<T, rng::Rng>(&self.store, &emb, n_tok, None)?;
        Ok(trace.output()[(n_tok - 1) * e..].to_vec())
    }

    /// Head projection and mixture construction for one feature vector.
    pub fn decode_head(&self, features: &[T]) -> Result<GmmParams> {
        let e = self.cfg.embed_dim;
        if features.len() != e {
            return Err(Error::Shape(format!("{} features, expected {e}", features.len())));
        }
        let raw = ops::linear_forward(features, 1, self.store.value(self.ids.head_w), self.store.value(self.ids.head_b), e, self.cfg.head_width());
        let flat: Vec<f64> = raw.iter().map(|v| v.as_f64()).collect();
        RawHeadOutputs::from_flat(self.cfg.mixtures, self.cfg.target_dim(), &flat)?.to_gmm()
    }

    /// One mixture per state position, evaluation mode.
    pub fn forward(&self, states: &[f64], len: usize, goals: &[f64]) -> Result<Vec<GmmParams>> {
        let pass = self.run::<rng::Rng>(states, len, goals, false, None)?;
        (0..len).map(|t| self.raw_at(&pass, t)?.to_gmm()).collect()
    }

    /// Raw head numbers for every state position, evaluation mode.
    pub fn forward_raw(&self, states: &[f64], len: usize, goals: &[f64]) -> Result<Vec<RawHeadOutputs>> {
        let pass = self.run::<rng::Rng>(states, len, goals, false, None)?;
        (0..len).map(|t| self.raw_at(&pass, t)).collect()
    }

    fn window_loss(&self, w: &Window, scale: f64, dropout_seed: Option<(u64, u64)>, grads: &mut Grads<T>) -> Result<f64> {
        let mut drop_rng = dropout_seed.map(|(s, i)| rng::indexed_stream(s, "dropout", i));
        let pass = self.run(&w.states, w.len, &w.goals, w.history_masked, drop_rng.as_mut())?;
        let (wd, td) = (self.cfg.head_width(), self.cfg.target_dim());
        if w.targets.len() != w.len * td {
            return Err(Error::Shape(format!("{} target values for {} positions of dim {td}", w.targets.len(), w.len)));
        }
        let mut draw = vec![T::zero(); w.len * wd];
        let mut total = 0.0;
        for t in w.loss_positions() {
            let g = gmm::nll_param_grads(&self.raw_at(&pass, t)?, &w.targets[t * td..(t + 1) * td])?;
            total += g.nll;
            for (dst, src) in draw[t * wd..(t + 1) * wd].iter_mut().zip(g.grads.to_flat()) {
                *dst = T::of(src * scale);
            }
        }
        self.backward(&pass, &draw, grads)?;
        Ok(total)
    }

    /// Mean NLL over every loss position of every window, with its gradient.
    /// Dropout is applied when `dropout_seed` is given; window `i` draws its
    /// masks from a stream derived from the seed and `i`.
    pub fn nll_loss(&self, windows: &[Window], dropout_seed: Option<u64>) -> Result<LossOutput<T>> {
        let positions: usize = windows.iter().map(|w| w.loss_positions().len()).sum();
        if positions == 0 {
            return Err(Error::InvalidArgument("no loss positions in batch".into()));
        }
        let scale = 1.0 / positions as f64;
        let parts = windows
            .par_chunks(LOSS_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut grads = self.store.grads_like();
                let mut nll = 0.0;
                for (j, w) in chunk.iter().enumerate() {
                    let seed = dropout_seed.map(|s| (s, (c * LOSS_CHUNK + j) as u64));
                    nll += self.window_loss(w, scale, seed, &mut grads)?;
                }
                Ok((nll, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut parts = parts.into_iter();
        let (mut nll, mut grads) = parts.next().expect("at least one chunk");
        for (n, g) in parts {
            nll += n;
            grads.add_assign(&g);
        }
        Ok(LossOutput { loss: nll * scale, positions, grads })
    }

    /// Mean NLL and mean active-component count over all loss positions,
    /// without dropout.
    pub fn evaluate(&self, windows: &[Window], active_threshold: f64) -> Result<EvalStats> {
        let td = self.cfg.target_dim();
        let parts = windows
            .par_iter()
            .map(|w| {
                let pass = self.run::<rng::Rng>(&w.states, w.len, &w.goals, w.history_masked, None)?;
                let (mut nll, mut active, mut n) = (0.0, 0.0, 0usize);
                for t in w.loss_positions() {
                    let raw = self.raw_at(&pass, t)?;
                    nll += gmm::nll_param_grads(&raw, &w.targets[t * td..(t + 1) * td])?.nll;
                    active += count_active_components(&raw.to_gmm()?, active_threshold) as f64;
                    n += 1;
                }
                Ok((nll, active, n))
            })
            .collect::<Result<Vec<_>>>()?;
        let (nll, active, n) = parts.iter().fold((0.0, 0.0, 0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
        if n == 0 {
            return Err(Error::InvalidArgument("no evaluation positions".into()));
        }
        Ok(EvalStats { nll: nll / n as f64, mean_active: active / n as f64, positions: n })
    }

    /// Samples an action chunk for the last state of `states` (normalized,
    /// oldest first). Histories longer than `state_history` keep their most
    /// recent part.
    pub fn act<R: Rng + ?Sized>(&self, states: &[f64], goals: &[f64], sampler: &SamplerSpec, rng: &mut R) -> Result<Action> {
        let d = self.cfg.state_dim;
        if states.is_empty() || states.len() % d != 0 {
            return Err(Error::Shape(format!("{} state values for state dim {d}", states.len())));
        }
        let len = (states.len() / d).min(self.cfg.state_history);
        let recent = &states[states.len() - len * d..];
        let pass = self.run::<rng::Rng>(recent, len, goals, false, None)?;
        let gmm = self.raw_at(&pass, len - 1)?.to_gmm()?;
        let (flat, degraded, noise_fallback) = match sampler {
            SamplerSpec::Vanilla => (sample_vanilla(&gmm, rng, 1).remove(0), false, false),
            SamplerSpec::Scaled { alpha } => (sample_vanilla(&scale_variances(&gmm, *alpha)?, rng, 1).remove(0), false, false),
            SamplerSpec::Mode { noise } => {
                let modes = find_modes(&gmm, &ModeFinderConfig::default(), rng)?;
                let s = sample_mode(&modes, rng, *noise)?;
                (s.action, modes.degraded, s.noise_fallback)
            }
        };
        let m = self.cfg.action_dim;
        Ok(Action { actions: flat.chunks(m).map(<[f64]>::to_vec).collect(), gmm, degraded, noise_fallback })
    }
}
