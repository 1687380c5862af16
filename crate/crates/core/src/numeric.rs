//! Scalar abstraction: everything numeric is generic over `Real` so the
//! same code runs in f32 (deployment) and f64 (oracle/gradient-check mode).

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign, NumCast};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Real:
    Float
    + NumAssign
    + NumCast
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Send
    + Sync
    + Display
    + Debug
    + 'static
{
    /// Lossy conversion from f64 literals; the only place constants enter.
    fn c(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite f64 constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("real to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Relative error with an absolute floor, used by equivalence oracles.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / denom
}

/// Max element-wise relative error over two equally shaped slices.
///
/// Each element's denominator is floored at 1% of the arrays' peak
/// magnitude: elements incidentally near zero would otherwise turn a few
/// ulps of round-off into a spurious relative blow-up, while any actual
/// logic error still shows up orders of magnitude above any tolerance
/// used in this crate.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let peak = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        .max(1e-30);
    let floor = 1e-2 * peak;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
