//! Plain (non-autodiff) neural net primitives shared by the inference
//! paths of the encoder and decoder.

use crate::numeric::Real;
use crate::tape::sigmoid_scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

pub fn linear<F: Real>(x: &ArrayView2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut out = x.dot(w);
    for mut row in out.rows_mut() {
        row += b;
    }
    out
}

pub fn linear_row<F: Real>(x: &ArrayView1<F>, w: &Array2<F>, b: &Array1<F>) -> Array1<F> {
    &x.dot(w) + b
}

pub fn swish_inplace<F: Real>(x: &mut Array2<F>) {
    x.mapv_inplace(|v| v * sigmoid_scalar(v));
}

/// Layer norm over the last axis with per-channel scale/shift, eps 1e-5.
pub fn layer_norm_rows<F: Real>(x: &ArrayView2<F>, scale: &Array1<F>, shift: &Array1<F>) -> Array2<F> {
    let eps = F::c(1e-5);
    let d = x.ncols();
    let mut out = Array2::zeros(x.raw_dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / F::c(d as f64);
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / F::c(d as f64);
        let istd = F::one() / (var + eps).sqrt();
        for c in 0..d {
            out[[r, c]] = (row[c] - mean) * istd * scale[c] + shift[c];
        }
    }
    out
}

pub fn layer_norm_row<F: Real>(x: &ArrayView1<F>, scale: &Array1<F>, shift: &Array1<F>) -> Array1<F> {
    let x2 = x.insert_axis(ndarray::Axis(0));
    let out = layer_norm_rows(&x2, scale, shift);
    out.row(0).to_owned()
}

/// Rows scaled to unit L2 norm (rows below `eps` norm are scaled by 1/eps).
pub fn l2_normalize_rows<F: Real>(x: &mut Array2<F>, eps: f64) {
    let epsf = F::c(eps);
    for mut row in x.rows_mut() {
        let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(epsf);
        row.mapv_inplace(|v| v / n);
    }
}

pub fn l2_normalize_row<F: Real>(x: &mut Array1<F>, eps: f64) {
    let epsf = F::c(eps);
    let n = x.iter().map(|&v| v * v).sum::<F>().sqrt().max(epsf);
    x.mapv_inplace(|v| v / n);
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows<F: Real>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}
