use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, LayerNormCache};
use super::params::{Init, ParamId, ParameterStore};
use super::{Grads, Real};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Longest sequence the caller will feed (sizes nothing here, checked on
    /// every forward).
    pub max_len: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument("decoder sizes must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Post-norm causal transformer stack:
/// `x ← LN(x + Attn(x))`, `x ← LN(x + W₂ GELU(W₁ x))` per layer.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    blocks: Vec<BlockIds>,
}

/// Token embeddings for a batch of equal-length sequences. Attention is
/// always causal; `loss_mask` marks positions that contribute to a loss.
#[derive(Clone, Debug)]
pub struct SequenceBatch<T> {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub embeddings: Vec<T>,
    pub loss_mask: Option<Vec<bool>>,
}

impl<T: Real> SequenceBatch<T> {
    pub fn new(batch: usize, len: usize, dim: usize, embeddings: Vec<T>) -> Result<Self> {
        if embeddings.len() != batch * len * dim {
            return Err(Error::Shape(format!(
                "{} embedding values for batch {batch} × len {len} × dim {dim}",
                embeddings.len()
            )));
        }
        Ok(SequenceBatch { batch, len, dim, embeddings, loss_mask: None })
    }

    pub fn sequence(&self, b: usize) -> &[T] {
        let n = self.len * self.dim;
        &self.embeddings[b * n..(b + 1) * n]
    }
}

struct BlockCache<T> {
    x_in: Vec<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    attn_y: Vec<T>,
    drop1: Option<Vec<T>>,
    r1: Vec<T>,
    ln1: LayerNormCache<T>,
    x1: Vec<T>,
    pre_gelu: Vec<T>,
    post_gelu: Vec<T>,
    drop2: Option<Vec<T>>,
    r2: Vec<T>,
    ln2: LayerNormCache<T>,
}

/// Activations retained by a forward pass over one sequence.
pub struct SequenceTrace<T> {
    len: usize,
    input_drop: Option<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    output: Vec<T>,
}

impl<T: Real> SequenceTrace<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Forward traces for a whole [`SequenceBatch`].
pub struct BatchTrace<T> {
    traces: Vec<SequenceTrace<T>>,
}

impl<T> Default for BatchTrace<T> {
    fn default() -> Self {
        BatchTrace { traces: Vec::new() }
    }
}

impl<T: Real> BatchTrace<T> {
    pub fn output(&self, b: usize) -> &[T] {
        self.traces[b].output()
    }

    /// All outputs, `batch × len × dim`.
    pub fn outputs(&self) -> Vec<T> {
        self.traces.iter().flat_map(|t| t.output.iter().copied()).collect()
    }
}

fn dropout_mask<T: Real, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, s)| *v *= *s);
    }
}

impl Decoder {
    /// Registers the decoder parameters under `prefix` with the standard
    /// initialization: projections `N(0, 0.02)`, biases zero, norm gains one.
    pub fn register<T: Real, R: Rng + ?Sized>(
        cfg: DecoderConfig,
        store: &mut ParameterStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        for l in 0..cfg.layers {
            let p = |s: &str| format!("{prefix}blocks.{l}.{s}");
            store.add(&p("attn.qkv.weight"), &[e, 3 * e], Init::Normal(INIT_STD), rng)?;
            store.add(&p("attn.qkv.bias"), &[3 * e], Init::Zeros, rng)?;
            store.add(&p("attn.proj.weight"), &[e, e], Init::Normal(INIT_STD), rng)?;
            store.add(&p("attn.proj.bias"), &[e], Init::Zeros, rng)?;
            store.add(&p("ln1.gain"), &[e], Init::Ones, rng)?;
            store.add(&p("ln1.bias"), &[e], Init::Zeros, rng)?;
            store.add(&p("mlp.fc.weight"), &[e, 4 * e], Init::Normal(INIT_STD), rng)?;
            store.add(&p("mlp.fc.bias"), &[4 * e], Init::Zeros, rng)?;
            store.add(&p("mlp.proj.weight"), &[4 * e, e], Init::Normal(INIT_STD), rng)?;
            store.add(&p("mlp.proj.bias"), &[e], Init::Zeros, rng)?;
            store.add(&p("ln2.gain"), &[e], Init::Ones, rng)?;
            store.add(&p("ln2.bias"), &[e], Init::Zeros, rng)?;
        }
        Self::attach(cfg, store, prefix)
    }

    /// Binds to parameters already present in `store` (e.g. after loading).
    pub fn attach<T: Real>(cfg: DecoderConfig, store: &ParameterStore<T>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = |s: &str| format!("{prefix}blocks.{l}.{s}");
                Ok(BlockIds {
                    qkv_w: store.expect(&p("attn.qkv.weight"), &[e, 3 * e])?,
                    qkv_b: store.expect(&p("attn.qkv.bias"), &[3 * e])?,
                    proj_w: store.expect(&p("attn.proj.weight"), &[e, e])?,
                    proj_b: store.expect(&p("attn.proj.bias"), &[e])?,
                    ln1_g: store.expect(&p("ln1.gain"), &[e])?,
                    ln1_b: store.expect(&p("ln1.bias"), &[e])?,
                    fc_w: store.expect(&p("mlp.fc.weight"), &[e, 4 * e])?,
                    fc_b: store.expect(&p("mlp.fc.bias"), &[4 * e])?,
                    fc2_w: store.expect(&p("mlp.proj.weight"), &[4 * e, e])?,
                    fc2_b: store.expect(&p("mlp.proj.bias"), &[e])?,
                    ln2_g: store.expect(&p("ln2.gain"), &[e])?,
                    ln2_b: store.expect(&p("ln2.bias"), &[e])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder { cfg, blocks })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Output projections of every block (attention and MLP), for tests and
    /// special initializations.
    pub fn output_projections(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.proj_w, b.fc2_w]).collect()
    }

    /// Forward over one sequence of `len × embed_dim` token embeddings.
    /// Dropout is active iff a random source is supplied.
    pub fn forward_sequence<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParameterStore<T>,
        input: &[T],
        len: usize,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<SequenceTrace<T>> {
        let e = self.cfg.embed_dim;
        if len == 0 || len > self.cfg.max_len {
            return Err(Error::Shape(format!("sequence length {len} outside 1..={}", self.cfg.max_len)));
        }
        if input.len() != len * e {
            return Err(Error::Shape(format!("{} input values for len {len} × dim {e}", input.len())));
        }
        let p = self.cfg.dropout;
        let mut draw = |n: usize| -> Option<Vec<T>> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if p > 0.0 => Some(dropout_mask(n, p, rng)),
                _ => None,
            }
        };
        let v = |id: ParamId| store.value(id);

        let mut x = input.to_vec();
        let input_drop = draw(len * e);
        apply_mask(&mut x, &input_drop);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let qkv = ops::linear_forward(&x, len, v(b.qkv_w), v(b.qkv_b), e, 3 * e);
            let (attn_y, att) = ops::attention_forward(&qkv, len, e, self.cfg.heads);
            let mut a = ops::linear_forward(&attn_y, len, v(b.proj_w), v(b.proj_b), e, e);
            let drop1 = draw(len * e);
            apply_mask(&mut a, &drop1);
            let r1: Vec<T> = x.iter().zip(&a).map(|(p, q)| *p + *q).collect();
            let (x1, ln1) = ops::layernorm_forward(&r1, len, e, v(b.ln1_g), v(b.ln1_b));
            let pre_gelu = ops::linear_forward(&x1, len, v(b.fc_w), v(b.fc_b), e, 4 * e);
            let post_gelu: Vec<T> = pre_gelu.iter().map(|h| ops::gelu(*h)).collect();
            let mut f = ops::linear_forward(&post_gelu, len, v(b.fc2_w), v(b.fc2_b), 4 * e, e);
            let drop2 = draw(len * e);
            apply_mask(&mut f, &drop2);
            let r2: Vec<T> = x1.iter().zip(&f).map(|(p, q)| *p + *q).collect();
            let (x2, ln2) = ops::layernorm_forward(&r2, len, e, v(b.ln2_g), v(b.ln2_b));
            blocks.push(BlockCache {
                x_in: std::mem::replace(&mut x, x2),
                qkv,
                att,
                attn_y,
                drop1,
                r1,
                ln1,
                x1,
                pre_gelu,
                post_gelu,
                drop2,
                r2,
                ln2,
            });
        }
        Ok(SequenceTrace { len, input_drop, blocks, output: x })
    }

    /// Reverse pass for one sequence. Parameter gradients are added into
    /// `grads`; the gradient with respect to the input embeddings is returned.
    pub fn backward_sequence<T: Real>(
        &self,
        store: &ParameterStore<T>,
        trace: &SequenceTrace<T>,
        dout: &[T],
        grads: &mut Grads<T>,
    ) -> Result<Vec<T>> {
        let (e, len) = (self.cfg.embed_dim, trace.len);
        if trace.blocks.len() != self.blocks.len() {
            return Err(Error::NoForward);
        }
        if dout.len() != len * e {
            return Err(Error::Shape(format!("upstream gradient has {} values, expected {}", dout.len(), len * e)));
        }
        let v = |id: ParamId| store.value(id);
        let mut dx = dout.to_vec();
        for (b, c) in self.blocks.iter().zip(&trace.blocks).rev() {
            let (dg, db) = grads.pair_mut(b.ln2_g, b.ln2_b);
            let dr2 = ops::layernorm_backward(&dx, &c.r2, &c.ln2, v(b.ln2_g), len, e, dg, db);
            let mut df = dr2.clone();
            apply_mask(&mut df, &c.drop2);
            let (dw, dbias) = grads.pair_mut(b.fc2_w, b.fc2_b);
            let mut dh = ops::linear_backward(&c.post_gelu, len, v(b.fc2_w), &df, 4 * e, e, dw, dbias);
            dh.iter_mut().zip(&c.pre_gelu).for_each(|(d, h)| *d *= ops::gelu_grad(*h));
            let (dw, dbias) = grads.pair_mut(b.fc_w, b.fc_b);
            let dx1_mlp = ops::linear_backward(&c.x1, len, v(b.fc_w), &dh, e, 4 * e, dw, dbias);
            let dx1: Vec<T> = dr2.iter().zip(&dx1_mlp).map(|(p, q)| *p + *q).collect();

            let (dg, db) = grads.pair_mut(b.ln1_g, b.ln1_b);
            let dr1 = ops::layernorm_backward(&dx1, &c.r1, &c.ln1, v(b.ln1_g), len, e, dg, db);
            let mut da = dr1.clone();
            apply_mask(&mut da, &c.drop1);
            let (dw, dbias) = grads.pair_mut(b.proj_w, b.proj_b);
            let day = ops::linear_backward(&c.attn_y, len, v(b.proj_w), &da, e, e, dw, dbias);
            let dqkv = ops::attention_backward(&day, &c.qkv, &c.att, len, e, self.cfg.heads);
            let (dw, dbias) = grads.pair_mut(b.qkv_w, b.qkv_b);
            let dx_attn = ops::linear_backward(&c.x_in, len, v(b.qkv_w), &dqkv, e, 3 * e, dw, dbias);
            dx = dr1.iter().zip(&dx_attn).map(|(p, q)| *p + *q).collect();
        }
        apply_mask(&mut dx, &trace.input_drop);
        Ok(dx)
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParameterStore<T>,
        batch: &SequenceBatch<T>,
        train: bool,
        rng: &mut R,
    ) -> Result<BatchTrace<T>> {
        if batch.dim != self.cfg.embed_dim {
            return Err(Error::Shape(format!("batch dim {} vs embed_dim {}", batch.dim, self.cfg.embed_dim)));
        }
        let traces = (0..batch.batch)
            .map(|b| {
                let r = if train { Some(&mut *rng) } else { None };
                self.forward_sequence(store, batch.sequence(b), batch.len, r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchTrace { traces })
    }

    /// Reverse pass for a batch; `upstream` is `batch × len × dim`.
    pub fn backward<T: Real>(
        &self,
        store: &ParameterStore<T>,
        trace: &BatchTrace<T>,
        upstream: &[T],
    ) -> Result<(Grads<T>, Vec<T>)> {
        if trace.traces.is_empty() {
            return Err(Error::NoForward);
        }
        let n = trace.traces[0].len * self.cfg.embed_dim;
        if upstream.len() != n * trace.traces.len() {
            return Err(Error::Shape("upstream gradient does not match the recorded batch".into()));
        }
        let mut grads = store.grads_like();
        let mut dinput = Vec::with_capacity(upstream.len());
        for (b, t) in trace.traces.iter().enumerate() {
            dinput.extend(self.backward_sequence(store, t, &upstream[b * n..(b + 1) * n], &mut grads)?);
        }
        Ok((grads, dinput))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(dropout: f64) -> (Decoder, ParameterStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParameterStore::new();
        let cfg = DecoderConfig { layers: 1, heads: 2, embed_dim: 8, max_len: 4, dropout };
        let dec = Decoder::register(cfg, &mut store, "", &mut rng).unwrap();
        // larger weights than the default init so every path carries signal
        for p in store.params_mut() {
            if p.name.ends_with("weight") {
                p.value.iter_mut().for_each(|v| *v *= 15.0);
            }
        }
        (dec, store)
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_input_with_zero_output_projections_gives_norm_bias() {
        let (dec, mut store) = tiny(0.0);
        for id in dec.output_projections() {
            store.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let ln2_bias = store.id("blocks.0.ln2.bias").unwrap();
        store.value_mut(ln2_bias).iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        let trace = dec.forward_sequence::<f64, ChaCha8Rng>(&store, &[0.0; 32], 4, None).unwrap();
        for t in 0..4 {
            for j in 0..8 {
                assert!((trace.output()[t * 8 + j] - j as f64 * 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_are_causal() {
        let (dec, store) = tiny(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input(&mut rng, 32);
        let base = dec.forward_sequence::<f64, ChaCha8Rng>(&store, &x, 4, None).unwrap();
        for t in 0..4 {
            let mut y = x.clone();
            y[t * 8 + 3] += 0.5;
            let out = dec.forward_sequence::<f64, ChaCha8Rng>(&store, &y, 4, None).unwrap();
            for s in 0..4 {
                let same = base.output()[s * 8..(s + 1) * 8] == out.output()[s * 8..(s + 1) * 8];
                assert_eq!(same, s < t, "perturb {t}, position {s}");
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_permutation_covariant() {
        let (dec, store) = tiny(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_input(&mut rng, 32);
        let b = random_input(&mut rng, 32);
        let ab = SequenceBatch::new(2, 4, 8, [a.clone(), b.clone()].concat()).unwrap();
        let ba = SequenceBatch::new(2, 4, 8, [b, a].concat()).unwrap();
        let t1 = dec.forward(&store, &ab, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let t2 = dec.forward(&store, &ab, false, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let t3 = dec.forward(&store, &ba, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(t1.outputs(), t2.outputs());
        assert_eq!(t1.output(0), t3.output(1));
        assert_eq!(t1.output(1), t3.output(0));
        let d1 = dec.forward(&store, &ab, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_ne!(d1.outputs(), t1.outputs());
    }

    #[test]
    fn backward_requires_forward_and_zero_upstream_gives_zero_grads() {
        let (dec, store) = tiny(0.0);
        let empty = BatchTrace::<f64>::default();
        assert!(matches!(dec.backward(&store, &empty, &[0.0; 32]), Err(Error::NoForward)));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = SequenceBatch::new(1, 4, 8, random_input(&mut rng, 32)).unwrap();
        let trace = dec.forward(&store, &batch, false, &mut rng).unwrap();
        let (grads, dinput) = dec.backward(&store, &trace, &[0.0; 32]).unwrap();
        assert!(grads.is_all_zero());
        assert!(dinput.iter().all(|v| *v == 0.0));
        assert!(dec.backward(&store, &trace, &[0.0; 31]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut store = ParameterStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DecoderConfig { layers: 1, heads: 3, embed_dim: 8, max_len: 4, dropout: 0.0 };
        assert!(Decoder::register(cfg, &mut store, "", &mut rng).is_err());
        let (dec, store) = tiny(0.0);
        assert!(dec.forward_sequence::<f64, ChaCha8Rng>(&store, &[0.0; 40], 5, None).is_err());
        assert!(dec.forward_sequence::<f64, ChaCha8Rng>(&store, &[0.0; 30], 4, None).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_in_double() {
        let (dec, mut store) = tiny(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input(&mut rng, 32);
        let probe = random_input(&mut rng, 32);
        let loss = |s: &ParameterStore<f64>| -> f64 {
            let t = dec.forward_sequence::<f64, ChaCha8Rng>(s, &x, 4, None).unwrap();
            t.output().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let trace = dec.forward_sequence::<f64, ChaCha8Rng>(&store, &x, 4, None).unwrap();
        let mut grads = store.grads_like();
        let dinput = dec.backward_sequence(&store, &trace, &probe, &mut grads).unwrap();
        let coords = gradcheck::sample_coords(&store, 100, &mut rng);
        let report = gradcheck::check(&mut store, &grads, &coords, 1e-5, loss);
        assert!(report.max_rel_err < 1e-5, "{report:?}");

        // input gradient
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let f = |v: &[f64]| -> f64 {
                let t = dec.forward_sequence::<f64, ChaCha8Rng>(&store, v, 4, None).unwrap();
                t.output().iter().zip(&probe).map(|(p, q)| p * q).sum()
            };
            let fd = (f(&a) - f(&b)) / 2e-5;
            assert!(gradcheck::rel_err(dinput[i], fd) < 1e-5);
        }
    }

    #[test]
    fn single_precision_gradients_match_double_finite_differences() {
        let (dec, mut store64) = tiny(0.0);
        let store32: ParameterStore<f32> = store64.cast();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_input(&mut rng, 32);
        let probe = random_input(&mut rng, 32);
        let x32: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        let p32: Vec<f32> = probe.iter().map(|v| *v as f32).collect();
        let trace = dec.forward_sequence::<f32, ChaCha8Rng>(&store32, &x32, 4, None).unwrap();
        let mut g32 = store32.grads_like();
        dec.backward_sequence(&store32, &trace, &p32, &mut g32).unwrap();
        let g64 = Grads(g32.0.iter().map(|g| g.iter().map(|v| *v as f64).collect()).collect());
        let loss = |s: &ParameterStore<f64>| -> f64 {
            let t = dec.forward_sequence::<f64, ChaCha8Rng>(s, &x, 4, None).unwrap();
            t.output().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let coords = gradcheck::sample_coords(&store64, 100, &mut rng);
        let report = gradcheck::check(&mut store64, &g64, &coords, 1e-5, loss);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
