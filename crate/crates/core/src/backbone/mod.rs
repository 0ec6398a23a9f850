//! A small differentiable substrate: a post-norm causal transformer decoder
//! with hand-written reverse-mode gradients, a named parameter store, a flat
//! binary checkpoint format and a finite-difference checker.

pub mod checkpoint;
pub mod decoder;
pub mod gradcheck;
pub mod ops;
pub mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use decoder::{BatchTrace, Decoder, DecoderConfig, SequenceBatch, SequenceTrace};
pub use params::{Grads, ParamId, ParameterStore};

/// Scalar type of the backbone. Training runs in `f32`; gradient checks
/// run the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}
