//! Multi-scale retention layer with three exactly equivalent computation
//! paths.
//!
//! Retention is softmax-free attention: per head,
//! `out_t = q_t * sum_{tau<=t} gamma^(t-tau) k_tau^T v_tau`. The sum admits
//! a parallel form (masked score matrix), a recurrent form with an O(1)
//! state `S_t = gamma*S_{t-1} + k_t^T v_t`, and a chunkwise form that runs
//! the parallel kernel inside fixed-size chunks and carries the state
//! across chunk boundaries. The cross-paradigm equivalence tests in this
//! module are the normative contract; everything else is arranged so they
//! hold exactly.
//!
//! Three scale stabilizers replace the removed softmax (all toggled by
//! `score_norm`, all expressible in every paradigm):
//! 1. queries scaled by 1/sqrt(d_head),
//! 2. each decay-mask row divided by its row sum `c_t = sum gamma^j`,
//! 3. each attention row divided by `max(1, |row sum|)`, with the row sum
//!    tracked recurrently as `q_t . z_t / c_t` where
//!    `z_t = gamma*z_{t-1} + k_t`.
//!
//! Stabilizer 3 uses the absolute value of the row *sum* (not the sum of
//! absolute values) precisely because that quantity has an exact O(1)
//! recurrent form.
//!
//! A full layer is retention -> group norm (one group per head) -> swish
//! gate on the layer input -> output projection.

use crate::error::{DiarError, Result};
use crate::numeric::Real;
use crate::tape::{sigmoid_scalar, Tape, Var};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

pub const GROUPNORM_EPS: f64 = 1e-5;

/// Per-head decay factors `1 - 2^(-5-k)`, k = 0..h-1.
pub fn multiscale_gammas<F: Real>(h: usize) -> Result<Vec<F>> {
    if h == 0 {
        return Err(DiarError::invalid("head count must be >= 1"));
    }
    Ok((0..h)
        .map(|k| F::c(1.0 - 2f64.powi(-5 - k as i32)))
        .collect())
}

/// Weights of one retention layer. Immutable after construction and safe
/// to share across streams.
#[derive(Debug, Clone)]
pub struct RetentionWeights<F: Real> {
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub w_out: Array2<F>,
    pub gate_w: Array2<F>,
    pub gn_scale: Array1<F>,
    pub gn_shift: Array1<F>,
    pub n_heads: usize,
    /// Per-head decay; the shipped configuration is all-ones (no decay).
    pub gammas: Vec<F>,
    /// Apply the three scale stabilizers. Group norm makes the layer
    /// output invariant to them up to its epsilon; off is useful for
    /// textbook-identity tests.
    pub score_norm: bool,
    /// Rotary/xPos position terms; present in the type only as a disabled
    /// extension and rejected by `validate`.
    pub use_rotary: bool,
}

impl<F: Real> RetentionWeights<F> {
    pub fn new(d: usize, n_heads: usize, gammas: Vec<F>, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut init = |r: usize, c: usize| gaussian_matrix(r, c, std, rng);
        RetentionWeights {
            w_q: init(d, d),
            w_k: init(d, d),
            w_v: init(d, d),
            w_out: init(d, d),
            gate_w: init(d, d),
            gn_scale: Array1::ones(d),
            gn_shift: Array1::zeros(d),
            n_heads,
            gammas,
            score_norm: true,
            use_rotary: false,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(DiarError::invalid(format!(
                "d_model {d} not divisible by n_heads {}",
                self.n_heads
            )));
        }
        if self.gammas.len() != self.n_heads {
            return Err(DiarError::invalid("one gamma per head required"));
        }
        if self.gammas.iter().any(|&g| g <= F::zero() || g > F::one()) {
            return Err(DiarError::invalid("gamma must lie in (0, 1]"));
        }
        if self.use_rotary {
            return Err(DiarError::invalid(
                "rotary position terms are disabled in this implementation",
            ));
        }
        Ok(())
    }
}

pub fn gaussian_matrix<F: Real>(r: usize, c: usize, std: f64, rng: &mut impl Rng) -> Array2<F> {
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, std).expect("std > 0");
    Array2::from_shape_fn((r, c), |_| F::c(n.sample(rng)))
}

/// Recurrent memory of one retention layer: per-head state matrix plus the
/// two normalizer accumulators. Size is independent of `step`.
#[derive(Debug, Clone)]
pub struct RetentionState<F: Real> {
    pub s: Vec<Array2<F>>,
    pub z: Vec<Array1<F>>,
    pub c: Vec<F>,
    pub step: usize,
}

impl<F: Real> RetentionState<F> {
    pub fn zeros(w: &RetentionWeights<F>) -> Self {
        let dh = w.head_dim();
        RetentionState {
            s: vec![Array2::zeros((dh, dh)); w.n_heads],
            z: vec![Array1::zeros(dh); w.n_heads],
            c: vec![F::zero(); w.n_heads],
            step: 0,
        }
    }
}

/// Carry between chunks of the chunkwise paradigm.
#[derive(Debug, Clone)]
pub struct ChunkState<F: Real> {
    pub r: Vec<Array2<F>>,
    pub z: Vec<Array1<F>>,
    pub c: Vec<F>,
    /// Global index of the next chunk's first frame.
    pub start: usize,
    /// Declared chunk length; a shorter chunk is accepted once as the
    /// final chunk, after which further pushes are rejected.
    pub chunk_len: usize,
    pub finished: bool,
}

impl<F: Real> ChunkState<F> {
    pub fn zeros(w: &RetentionWeights<F>, chunk_len: usize) -> Self {
        let dh = w.head_dim();
        ChunkState {
            r: vec![Array2::zeros((dh, dh)); w.n_heads],
            z: vec![Array1::zeros(dh); w.n_heads],
            c: vec![F::zero(); w.n_heads],
            start: 0,
            chunk_len,
            finished: false,
        }
    }
}

/// Lower-triangular decay mask: `mask[t1][t2] = gamma^(t1-t2)` for t2 <= t1.
pub fn decay_mask<F: Real>(len: usize, gamma: F) -> Array2<F> {
    let mut m = Array2::zeros((len, len));
    for t1 in 0..len {
        let mut p = F::one();
        for t2 in (0..=t1).rev() {
            m[[t1, t2]] = p;
            p = p * gamma;
        }
    }
    m
}

/// `c_t` for global 1-based step counts start+1 ..= start+len.
fn decay_counts<F: Real>(start: usize, len: usize, gamma: F) -> Array1<F> {
    let mut c = Array1::zeros(len);
    let mut acc = if gamma == F::one() {
        F::c(start as f64)
    } else {
        // sum_{j=0..start-1} gamma^j
        (F::one() - gamma.powi(start as i32)) / (F::one() - gamma)
    };
    for m in 0..len {
        acc = gamma * acc + F::one();
        c[m] = acc;
    }
    c
}

/// Per-head retention for one chunk with explicit carry. The single-chunk
/// case with zero carry is the parallel paradigm. Returns the pre-norm
/// concatenated head outputs and advances the carry.
fn heads_chunk<F: Real>(
    x: &Array2<F>,
    w: &RetentionWeights<F>,
    carry: &mut ChunkState<F>,
) -> Array2<F> {
    let (b, d) = x.dim();
    let h = w.n_heads;
    let dh = d / h;
    let inv_sqrt = F::c(1.0 / (dh as f64).sqrt());
    let q_all = x.dot(&w.w_q);
    let k_all = x.dot(&w.w_k);
    let v_all = x.dot(&w.w_v);
    let mut out = Array2::zeros((b, d));

    for head in 0..h {
        let gamma = w.gammas[head];
        let cols = s![.., head * dh..(head + 1) * dh];
        let q = q_all.slice(cols).mapv(|x| x * inv_sqrt);
        let k = k_all.slice(cols);
        let v = v_all.slice(cols);

        let mask = decay_mask(b, gamma);
        let inner = &q.dot(&k.t()) * &mask; // [b x b]
        let mut num = inner.dot(&v); // [b x dh]
        let mut rsum = inner.sum_axis(Axis(1)); // [b]

        // cross-chunk terms, xi_m = gamma^(m+1)
        let cross = q.dot(&carry.r[head]);
        let zq = q.dot(&carry.z[head]);
        let mut xi = gamma;
        for m in 0..b {
            for c in 0..dh {
                num[[m, c]] += xi * cross[[m, c]];
            }
            rsum[m] += xi * zq[m];
            xi = xi * gamma;
        }

        if w.score_norm {
            let counts = decay_counts(carry.start, b, gamma);
            for m in 0..b {
                let r = rsum[m] / counts[m];
                let denom = counts[m] * r.abs().max(F::one());
                for c in 0..dh {
                    num[[m, c]] = num[[m, c]] / denom;
                }
            }
        }
        out.slice_mut(cols).assign(&num);

        // carry update: R <- gamma^B R + K^T (V . zeta), zeta_m = gamma^(B-1-m)
        let gb = gamma.powi(b as i32);
        let mut zeta = Array1::zeros(b);
        let mut p = F::one();
        for m in (0..b).rev() {
            zeta[m] = p;
            p = p * gamma;
        }
        let kz = &k.to_owned() * &zeta.view().insert_axis(Axis(1));
        carry.r[head] = &carry.r[head] * gb + &kz.t().dot(&v);
        carry.z[head] = &carry.z[head] * gb + &kz.t().dot(&Array1::ones(b));
        carry.c[head] = carry.c[head] * gb + zeta.sum();
    }
    carry.start += b;
    out
}

/// Group norm with one group per head, per frame, followed by per-channel
/// scale/shift.
pub fn group_norm_heads<F: Real>(
    x: &Array2<F>,
    n_heads: usize,
    scale: &Array1<F>,
    shift: &Array1<F>,
    eps: f64,
) -> Array2<F> {
    let (t, d) = x.dim();
    let dh = d / n_heads;
    let epsf = F::c(eps);
    let mut out = Array2::zeros((t, d));
    for r in 0..t {
        for head in 0..n_heads {
            let lo = head * dh;
            let seg = x.slice(s![r, lo..lo + dh]);
            let mean = seg.sum() / F::c(dh as f64);
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / F::c(dh as f64);
            let istd = F::one() / (var + epsf).sqrt();
            for c in 0..dh {
                out[[r, lo + c]] = (x[[r, lo + c]] - mean) * istd * scale[lo + c] + shift[lo + c];
            }
        }
    }
    out
}

fn finish_layer<F: Real>(x: &Array2<F>, pre: &Array2<F>, w: &RetentionWeights<F>) -> Array2<F> {
    let gn = group_norm_heads(pre, w.n_heads, &w.gn_scale, &w.gn_shift, GROUPNORM_EPS);
    let gate = x.dot(&w.gate_w).mapv(|v| v * sigmoid_scalar(v));
    (&gn * &gate).dot(&w.w_out)
}

fn check_input<F: Real>(x: &ArrayView2<F>, w: &RetentionWeights<F>) -> Result<()> {
    if x.ncols() != w.d_model() {
        return Err(DiarError::invalid(format!(
            "input dim {} != layer dim {}",
            x.ncols(),
            w.d_model()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DiarError::numeric("non-finite retention input"));
    }
    Ok(())
}

/// Full retention layer on a whole sequence (parallel paradigm).
pub fn retention_parallel<F: Real>(x: &Array2<F>, w: &RetentionWeights<F>) -> Result<Array2<F>> {
    w.validate()?;
    check_input(&x.view(), w)?;
    if x.nrows() == 0 {
        return Err(DiarError::invalid("empty sequence"));
    }
    let mut carry = ChunkState::zeros(w, x.nrows());
    let pre = heads_chunk(x, w, &mut carry);
    Ok(finish_layer(x, &pre, w))
}

/// Pre-groupnorm multi-head retention output (parallel), exposed for the
/// textbook identities in tests.
pub fn retention_heads_parallel<F: Real>(
    x: &Array2<F>,
    w: &RetentionWeights<F>,
) -> Result<Array2<F>> {
    w.validate()?;
    check_input(&x.view(), w)?;
    let mut carry = ChunkState::zeros(w, x.nrows());
    Ok(heads_chunk(x, w, &mut carry))
}

/// One frame of the recurrent paradigm. Cost and state size are constants
/// independent of `state.step`.
pub fn retention_recurrent_step<F: Real>(
    x_t: ArrayView1<F>,
    state: &mut RetentionState<F>,
    w: &RetentionWeights<F>,
) -> Result<Array1<F>> {
    let d = w.d_model();
    if x_t.len() != d {
        return Err(DiarError::invalid("frame dim mismatch"));
    }
    let h = w.n_heads;
    let dh = d / h;
    let inv_sqrt = F::c(1.0 / (dh as f64).sqrt());
    let q_all = x_t.dot(&w.w_q);
    let k_all = x_t.dot(&w.w_k);
    let v_all = x_t.dot(&w.w_v);
    let mut pre = Array1::zeros(d);

    for head in 0..h {
        let gamma = w.gammas[head];
        let lo = head * dh;
        let q = q_all.slice(s![lo..lo + dh]).mapv(|v| v * inv_sqrt);
        let k = k_all.slice(s![lo..lo + dh]);
        let v = v_all.slice(s![lo..lo + dh]);

        // S <- gamma S + k^T v ; z <- gamma z + k ; c <- gamma c + 1
        let st = &mut state.s[head];
        for i in 0..dh {
            let ki = k[i];
            for j in 0..dh {
                st[[i, j]] = gamma * st[[i, j]] + ki * v[j];
            }
        }
        let zt = &mut state.z[head];
        for i in 0..dh {
            zt[i] = gamma * zt[i] + k[i];
        }
        state.c[head] = gamma * state.c[head] + F::one();

        let num = q.dot(&state.s[head]);
        if w.score_norm {
            let r = q.dot(&state.z[head]) / state.c[head];
            let denom = state.c[head] * r.abs().max(F::one());
            for i in 0..dh {
                pre[lo + i] = num[i] / denom;
            }
        } else {
            for i in 0..dh {
                pre[lo + i] = num[i];
            }
        }
    }
    state.step += 1;

    // group norm + gate + projection on the single frame
    let pre2 = pre.insert_axis(Axis(0));
    let gn = group_norm_heads(&pre2, h, &w.gn_scale, &w.gn_shift, GROUPNORM_EPS);
    let gate = x_t.dot(&w.gate_w).mapv(|v| v * sigmoid_scalar(v));
    let gated = &gn.row(0).to_owned() * &gate;
    Ok(gated.dot(&w.w_out))
}

/// One chunk of the chunkwise paradigm; `state` carries across chunks.
pub fn retention_chunkwise<F: Real>(
    x_chunk: &Array2<F>,
    state: &mut ChunkState<F>,
    w: &RetentionWeights<F>,
) -> Result<Array2<F>> {
    w.validate()?;
    check_input(&x_chunk.view(), w)?;
    let b = x_chunk.nrows();
    if b == 0 {
        return Err(DiarError::invalid("empty chunk"));
    }
    if state.finished {
        return Err(DiarError::invalid(
            "chunk pushed after a final partial chunk",
        ));
    }
    if b > state.chunk_len {
        return Err(DiarError::invalid(format!(
            "chunk length {b} exceeds declared {len}",
            len = state.chunk_len
        )));
    }
    if b < state.chunk_len {
        state.finished = true;
    }
    let pre = heads_chunk(x_chunk, w, state);
    Ok(finish_layer(x_chunk, &pre, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetentionMode {
    Parallel,
    Recurrent,
    Chunkwise { chunk_len: usize },
}

/// Mode-carrying state for `msr_layer_forward`.
#[derive(Debug, Clone)]
pub enum MsrState<F: Real> {
    Recurrent(RetentionState<F>),
    Chunkwise(ChunkState<F>),
}

/// Full layer over a sequence in any paradigm. Stateful modes require a
/// matching `state`; the three modes agree within floating-point tolerance.
pub fn msr_layer_forward<F: Real>(
    x: &Array2<F>,
    w: &RetentionWeights<F>,
    mode: RetentionMode,
    state: Option<&mut MsrState<F>>,
) -> Result<Array2<F>> {
    match mode {
        RetentionMode::Parallel => retention_parallel(x, w),
        RetentionMode::Recurrent => {
            let Some(MsrState::Recurrent(st)) = state else {
                return Err(DiarError::invalid("recurrent mode requires a state"));
            };
            let mut out = Array2::zeros(x.dim());
            for (t, row) in x.rows().into_iter().enumerate() {
                let o = retention_recurrent_step(row, st, w)?;
                out.row_mut(t).assign(&o);
            }
            Ok(out)
        }
        RetentionMode::Chunkwise { chunk_len } => {
            let Some(MsrState::Chunkwise(st)) = state else {
                return Err(DiarError::invalid("chunkwise mode requires a state"));
            };
            if chunk_len != st.chunk_len {
                return Err(DiarError::invalid("chunk length mismatch with state"));
            }
            let t = x.nrows();
            let mut out = Array2::zeros(x.dim());
            let mut lo = 0;
            while lo < t {
                let hi = (lo + chunk_len).min(t);
                let chunk = x.slice(s![lo..hi, ..]).to_owned();
                let o = retention_chunkwise(&chunk, st, w)?;
                out.slice_mut(s![lo..hi, ..]).assign(&o);
                lo = hi;
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Tape (training) version
// ---------------------------------------------------------------------------

/// Tape handles of one retention layer's weights.
#[derive(Debug, Clone)]
pub struct RetentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub gate_w: Var,
    pub gn_scale: Var,
    pub gn_shift: Var,
    pub n_heads: usize,
    pub gammas: Vec<f64>,
    pub score_norm: bool,
}

/// Differentiable cross-chunk carry; gradients flow across chunk
/// boundaries during chunkwise training because `r`/`z` are tape nodes.
pub struct TapeCarry {
    pub r: Vec<Var>,
    pub z: Vec<Var>,
    pub start: usize,
}

impl TapeCarry {
    pub fn zeros<F: Real>(tape: &mut Tape<F>, n_heads: usize, dh: usize) -> Self {
        let r = (0..n_heads)
            .map(|_| tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[dh, dh]))))
            .collect();
        let z = (0..n_heads)
            .map(|_| tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[dh, 1]))))
            .collect();
        TapeCarry { r, z, start: 0 }
    }
}

/// Retention layer on the tape, optionally split into fixed-size chunks
/// with a differentiable carry. `None` runs the whole sequence as a single
/// chunk (the parallel paradigm). Both paths compute the same function.
pub fn retention_tape_chunked<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    rv: &RetentionVars,
    chunk: Option<usize>,
    head_dim: usize,
) -> Var {
    let t = tape.value(x).shape()[0];
    let mut carry = TapeCarry::zeros(tape, rv.n_heads, head_dim);
    match chunk {
        None => retention_layer_tape(tape, x, rv, &mut carry),
        Some(b) => {
            let mut outs = Vec::new();
            let mut lo = 0;
            while lo < t {
                let hi = (lo + b).min(t);
                let rows = tape.slice_rows(x, lo, hi);
                outs.push(retention_layer_tape(tape, rows, rv, &mut carry));
                lo = hi;
            }
            tape.concat_rows(&outs)
        }
    }
}

/// Full retention layer on the tape covering one chunk (the whole sequence
/// when `carry` starts at zero). Mirrors `heads_chunk` + `finish_layer`.
pub fn retention_layer_tape<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    rv: &RetentionVars,
    carry: &mut TapeCarry,
) -> Var {
    let b = tape.value(x).shape()[0];
    let d = tape.value(x).shape()[1];
    let h = rv.n_heads;
    let dh = d / h;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let q_all = tape.matmul(x, rv.w_q);
    let k_all = tape.matmul(x, rv.w_k);
    let v_all = tape.matmul(x, rv.w_v);

    let mut head_outs = Vec::with_capacity(h);
    for head in 0..h {
        let gamma = rv.gammas[head];
        let gf = F::c(gamma);
        let lo = head * dh;
        let q0 = tape.slice_cols(q_all, lo, lo + dh);
        let q = tape.scale(q0, inv_sqrt);
        let k = tape.slice_cols(k_all, lo, lo + dh);
        let v = tape.slice_cols(v_all, lo, lo + dh);

        let mask = decay_mask::<F>(b, gf).into_dyn();
        let kt = tape.transpose2(k);
        let scores = tape.matmul(q, kt);
        let inner = tape.mul_const(scores, mask);
        let mut num = tape.matmul(inner, v);
        let mut rsum = tape.row_sum(inner);

        // cross-chunk, xi_m = gamma^(m+1) as a [b x 1] constant column
        let xi = Array2::from_shape_fn((b, 1), |(m, _)| gf.powi(m as i32 + 1)).into_dyn();
        let cross0 = tape.matmul(q, carry.r[head]);
        let cross = tape.mul_const(cross0, xi.clone());
        num = tape.add(num, cross);
        let zq0 = tape.matmul(q, carry.z[head]);
        let zq = tape.mul_const(zq0, xi);
        rsum = tape.add(rsum, zq);

        let out = if rv.score_norm {
            let counts = decay_counts::<F>(carry.start, b, gf)
                .insert_axis(Axis(1))
                .into_dyn();
            let inv_counts = counts.mapv(|c| F::one() / c);
            let r = tape.mul_const(rsum, inv_counts.clone());
            let dmax = tape.max1_abs(r);
            let scaled = tape.mul_const(num, inv_counts);
            tape.div_bycol(scaled, dmax)
        } else {
            num
        };
        head_outs.push(out);

        // carry update
        let zeta = Array2::from_shape_fn((b, 1), |(m, _)| gf.powi((b - 1 - m) as i32)).into_dyn();
        let kz = tape.mul_const(k, zeta.clone());
        let kzt = tape.transpose2(kz);
        let rv_new = tape.matmul(kzt, v);
        let r_old = tape.scale(carry.r[head], gamma.powi(b as i32));
        carry.r[head] = tape.add(r_old, rv_new);
        let ones = tape.leaf(ndarray::ArrayD::ones(ndarray::IxDyn(&[b, 1])));
        let kz2 = tape.mul_const(k, zeta);
        let kzt2 = tape.transpose2(kz2);
        let z_new = tape.matmul(kzt2, ones);
        let z_old = tape.scale(carry.z[head], gamma.powi(b as i32));
        carry.z[head] = tape.add(z_old, z_new);
    }
    carry.start += b;

    // concat heads back to [b x d]
    let mut pre = head_outs[0];
    for &ho in &head_outs[1..] {
        pre = tape.concat_cols(pre, ho);
    }
    let gn = tape.norm_groups(pre, rv.gn_scale, rv.gn_shift, h, GROUPNORM_EPS);
    let gate_lin = tape.matmul(x, rv.gate_w);
    let gate = tape.swish(gate_lin);
    let gated = tape.mul(gn, gate);
    tape.matmul(gated, rv.w_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::max_rel_err;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_input<F: Real>(t: usize, d: usize, seed: u64) -> Array2<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian_matrix(t, d, 1.0, &mut rng)
    }

    fn weights<F: Real>(d: usize, h: usize, gamma: Option<f64>, seed: u64) -> RetentionWeights<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gammas = match gamma {
            Some(g) => vec![F::c(g); h],
            None => multiscale_gammas(h).unwrap(),
        };
        RetentionWeights::new(d, h, gammas, &mut rng)
    }

    #[test]
    fn gammas_match_hand_values() {
        let g: Vec<f64> = multiscale_gammas(4).unwrap();
        assert_eq!(g, vec![0.96875, 0.984375, 0.9921875, 0.99609375]);
        let g1: Vec<f64> = multiscale_gammas(1).unwrap();
        assert_eq!(g1, vec![0.96875]);
        assert!(multiscale_gammas::<f64>(0).is_err());
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_frame_matches_recurrent_base_case() {
        let w = weights::<f64>(16, 4, Some(0.9), 7);
        let x = rand_input::<f64>(1, 16, 3);
        let par = retention_parallel(&x, &w).unwrap();
        let mut st = RetentionState::zeros(&w);
        let rec = retention_recurrent_step(x.row(0), &mut st, &w).unwrap();
        assert!(max_rel_err(par.row(0).to_slice().unwrap(), rec.as_slice().unwrap()) < 1e-12);
        // S_1 = K_1^T V_1 exactly
        let k = x.row(0).dot(&w.w_k);
        let v = x.row(0).dot(&w.w_v);
        let dh = w.head_dim();
        for head in 0..w.n_heads {
            for i in 0..dh {
                for j in 0..dh {
                    let expect = k[head * dh + i] * v[head * dh + j];
                    assert!((st.s[head][[i, j]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gamma_one_two_step_textbook_identity() {
        // pre-projection head output at frame 2 = Q2 (K1^T V1 + K2^T V2),
        // checked with the stabilizers off.
        let mut w = weights::<f64>(8, 2, Some(1.0), 11);
        w.score_norm = false;
        let x = rand_input::<f64>(2, 8, 5);
        let heads = retention_heads_parallel(&x, &w).unwrap();
        let q = x.dot(&w.w_q);
        let k = x.dot(&w.w_k);
        let v = x.dot(&w.w_v);
        let dh = w.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for head in 0..w.n_heads {
            let lo = head * dh;
            for j in 0..dh {
                let mut expect = 0.0;
                for i in 0..dh {
                    let s_ij = k[[0, lo + i]] * v[[0, lo + j]] + k[[1, lo + i]] * v[[1, lo + j]];
                    expect += q[[1, lo + i]] * inv_sqrt * s_ij;
                }
                assert!((heads[[1, lo + j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma_one_state_is_t_independent() {
        let w = weights::<f64>(8, 2, Some(1.0), 13);
        let mut x = rand_input::<f64>(40, 8, 17);
        // all frames after the first are zero: frame-1 contribution to S_T
        // must be independent of T when gamma = 1
        for t in 1..40 {
            for c in 0..8 {
                x[[t, c]] = 0.0;
            }
        }
        let mut st = RetentionState::zeros(&w);
        let mut snapshots = Vec::new();
        for t in 0..40 {
            retention_recurrent_step(x.row(t), &mut st, &w).unwrap();
            if t == 0 || t == 9 || t == 39 {
                snapshots.push(st.s[0].clone());
            }
        }
        for later in &snapshots[1..] {
            assert_eq!(later, &snapshots[0]);
        }
    }

    fn paradigm_equivalence<F: Real>(
        t: usize,
        d: usize,
        h: usize,
        gamma: Option<f64>,
        chunk: usize,
        seed: u64,
    ) -> (f64, f64) {
        let w = weights::<F>(d, h, gamma, seed);
        let x = rand_input::<F>(t, d, seed ^ 0xabc);
        let par = retention_parallel(&x, &w).unwrap();

        let mut st = MsrState::Recurrent(RetentionState::zeros(&w));
        let rec = msr_layer_forward(&x, &w, RetentionMode::Recurrent, Some(&mut st)).unwrap();

        let mut cst = MsrState::Chunkwise(ChunkState::zeros(&w, chunk));
        let chw = msr_layer_forward(
            &x,
            &w,
            RetentionMode::Chunkwise { chunk_len: chunk },
            Some(&mut cst),
        )
        .unwrap();

        let pv: Vec<f64> = par.iter().map(|v| v.f64()).collect();
        let rv: Vec<f64> = rec.iter().map(|v| v.f64()).collect();
        let cv: Vec<f64> = chw.iter().map(|v| v.f64()).collect();
        (max_rel_err(&pv, &rv), max_rel_err(&pv, &cv))
    }

    #[test]
    fn paradigms_agree_f32() {
        for (seed, gamma) in [(1u64, Some(1.0)), (2, Some(0.97)), (3, None)] {
            let (er, ec) = paradigm_equivalence::<f32>(256, 64, 4, gamma, 50, seed);
            assert!(er < 1e-4, "recurrent err {er}");
            assert!(ec < 1e-4, "chunkwise err {ec}");
        }
    }

    #[test]
    fn paradigms_agree_f64() {
        for (seed, gamma) in [(4u64, Some(1.0)), (5, Some(0.97)), (6, None)] {
            let (er, ec) = paradigm_equivalence::<f64>(200, 32, 4, gamma, 50, seed);
            assert!(er < 1e-9, "recurrent err {er}");
            assert!(ec < 1e-9, "chunkwise err {ec}");
        }
    }

    #[test]
    fn single_chunk_equals_parallel_exactly() {
        let w = weights::<f64>(16, 4, Some(0.97), 21);
        let x = rand_input::<f64>(64, 16, 23);
        let par = retention_parallel(&x, &w).unwrap();
        let mut st = ChunkState::zeros(&w, 64);
        let chw = retention_chunkwise(&x, &mut st, &w).unwrap();
        assert_eq!(par, chw);
    }

    #[test]
    fn gamma_one_chunk_carry_is_plain_gram_sum() {
        // with gamma = 1, zeta and xi collapse to ones and
        // R_i = R_{i-1} + K^T V
        let w = weights::<f64>(8, 2, Some(1.0), 31);
        let x = rand_input::<f64>(20, 8, 33);
        let mut st = ChunkState::zeros(&w, 10);
        for lo in [0usize, 10] {
            let chunk = x.slice(s![lo..lo + 10, ..]).to_owned();
            retention_chunkwise(&chunk, &mut st, &w).unwrap();
        }
        let k = x.dot(&w.w_k);
        let v = x.dot(&w.w_v);
        let dh = w.head_dim();
        for head in 0..w.n_heads {
            let lo = head * dh;
            for i in 0..dh {
                for j in 0..dh {
                    let expect: f64 = (0..20).map(|t| k[[t, lo + i]] * v[[t, lo + j]]).sum();
                    assert!((st.r[head][[i, j]] - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn chunk_metadata_is_enforced() {
        let w = weights::<f64>(8, 2, Some(1.0), 41);
        let x = rand_input::<f64>(30, 8, 43);
        let mut st = ChunkState::zeros(&w, 16);
        retention_chunkwise(&x.slice(s![0..16, ..]).to_owned(), &mut st, &w).unwrap();
        // final short chunk is fine once
        retention_chunkwise(&x.slice(s![16..30, ..]).to_owned(), &mut st, &w).unwrap();
        // but nothing may follow it
        let err = retention_chunkwise(&x.slice(s![0..16, ..]).to_owned(), &mut st, &w);
        assert!(matches!(err, Err(DiarError::InvalidArgument(_))));
        // oversized chunks are rejected
        let mut st2 = ChunkState::zeros(&w, 8);
        let err2 = retention_chunkwise(&x.slice(s![0..16, ..]).to_owned(), &mut st2, &w);
        assert!(matches!(err2, Err(DiarError::InvalidArgument(_))));
    }

    #[test]
    fn zero_input_and_zero_gate_identities() {
        let mut w = weights::<f64>(8, 2, Some(1.0), 51);
        let x = Array2::<f64>::zeros((3, 8));
        // zero input: retention scores vanish; group norm emits its shift,
        // and the swish(0) gate annihilates the layer output.
        let heads = retention_heads_parallel(&x, &w).unwrap();
        assert!(heads.iter().all(|&v| v == 0.0));
        let out = retention_parallel(&x, &w).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let gn = group_norm_heads(&heads, w.n_heads, &w.gn_scale, &w.gn_shift, GROUPNORM_EPS);
        for r in 0..3 {
            for c in 0..8 {
                assert_eq!(gn[[r, c]], w.gn_shift[c]);
            }
        }
        // gate_w = 0 annihilates even for nonzero input
        w.gate_w.fill(0.0);
        let x2 = rand_input::<f64>(4, 8, 53);
        let out2 = retention_parallel(&x2, &w).unwrap();
        assert!(out2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causality_under_future_perturbation() {
        let w = weights::<f64>(16, 4, Some(0.97), 61);
        let mut x = rand_input::<f64>(32, 16, 63);
        let base = retention_parallel(&x, &w).unwrap();
        x[[20, 3]] += 10.0;
        let pert = retention_parallel(&x, &w).unwrap();
        for t in 0..20 {
            for c in 0..16 {
                assert_eq!(base[[t, c]], pert[[t, c]], "frame {t} changed");
            }
        }
        assert_ne!(base.row(20), pert.row(20));
    }

    #[test]
    fn score_norm_only_rescales_head_rows() {
        // The stabilizers multiply each (frame, head) row by a positive
        // scalar. Group norm then removes that scalar exactly up to its
        // epsilon, so the normalized group *direction* must be identical.
        let mut w = weights::<f64>(32, 4, Some(1.0), 71);
        let x = rand_input::<f64>(50, 32, 73);
        w.score_norm = true;
        let with = retention_heads_parallel(&x, &w).unwrap();
        w.score_norm = false;
        let without = retention_heads_parallel(&x, &w).unwrap();
        let dh = w.head_dim();
        for t in 0..50usize {
            for head in 0..w.n_heads {
                let lo = head * dh;
                let a = with.slice(s![t, lo..lo + dh]);
                let b = without.slice(s![t, lo..lo + dh]);
                let ratio = b[0] / a[0];
                assert!(ratio > 0.0, "stabilizer scale must be positive");
                for c in 0..dh {
                    assert!(
                        (a[c] * ratio - b[c]).abs() < 1e-9 * b[c].abs().max(1.0),
                        "frame {t} head {head} is not a pure rescale"
                    );
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_and_nonfinite_are_rejected() {
        let w = weights::<f64>(8, 2, Some(1.0), 81);
        let bad = rand_input::<f64>(4, 6, 83);
        assert!(matches!(
            retention_parallel(&bad, &w),
            Err(DiarError::InvalidArgument(_))
        ));
        let mut nf = rand_input::<f64>(4, 8, 85);
        nf[[1, 1]] = f64::NAN;
        assert!(matches!(
            retention_parallel(&nf, &w),
            Err(DiarError::NumericError(_))
        ));
        assert!(matches!(
            msr_layer_forward(
                &rand_input::<f64>(4, 8, 87),
                &w,
                RetentionMode::Recurrent,
                None
            ),
            Err(DiarError::InvalidArgument(_))
        ));
    }

    fn retention_vars_for_test(tape: &mut Tape<f64>, w: &RetentionWeights<f64>) -> RetentionVars {
        RetentionVars {
            w_q: tape.leaf(w.w_q.clone().into_dyn()),
            w_k: tape.leaf(w.w_k.clone().into_dyn()),
            w_v: tape.leaf(w.w_v.clone().into_dyn()),
            w_out: tape.leaf(w.w_out.clone().into_dyn()),
            gate_w: tape.leaf(w.gate_w.clone().into_dyn()),
            gn_scale: tape.leaf(
                ArrayD::from_shape_vec(ndarray::IxDyn(&[w.d_model()]), w.gn_scale.to_vec())
                    .unwrap(),
            ),
            gn_shift: tape.leaf(
                ArrayD::from_shape_vec(ndarray::IxDyn(&[w.d_model()]), w.gn_shift.to_vec())
                    .unwrap(),
            ),
            n_heads: w.n_heads,
            gammas: w.gammas.iter().map(|g| g.f64()).collect(),
            score_norm: w.score_norm,
        }
    }

    #[test]
    fn tape_layer_matches_plain_parallel_and_chunkwise() {
        for score_norm in [true, false] {
            let mut w = weights::<f64>(16, 4, Some(0.97), 91);
            w.score_norm = score_norm;
            let x = rand_input::<f64>(40, 16, 93);
            let plain = retention_parallel(&x, &w).unwrap();

            let mut tape = Tape::<f64>::new();
            let rv = retention_vars_for_test(&mut tape, &w);
            let xv = tape.leaf(x.clone().into_dyn());
            let mut carry = TapeCarry::zeros(&mut tape, w.n_heads, w.head_dim());
            let out = retention_layer_tape(&mut tape, xv, &rv, &mut carry);
            let tv = tape.value(out);
            let a: Vec<f64> = plain.iter().copied().collect();
            let b: Vec<f64> = tv.iter().copied().collect();
            assert!(max_rel_err(&a, &b) < 1e-12);

            // two tape chunks equal plain parallel as well
            let mut tape2 = Tape::<f64>::new();
            let rv2 = retention_vars_for_test(&mut tape2, &w);
            let mut carry2 = TapeCarry::zeros(&mut tape2, w.n_heads, w.head_dim());
            let x1 = tape2.leaf(x.slice(s![0..25, ..]).to_owned().into_dyn());
            let x2 = tape2.leaf(x.slice(s![25..40, ..]).to_owned().into_dyn());
            let o1 = retention_layer_tape(&mut tape2, x1, &rv2, &mut carry2);
            let o2 = retention_layer_tape(&mut tape2, x2, &rv2, &mut carry2);
            let c: Vec<f64> = tape2
                .value(o1)
                .iter()
                .chain(tape2.value(o2).iter())
                .copied()
                .collect();
            assert!(max_rel_err(&a, &c) < 1e-9);
        }
    }

    #[test]
    fn tape_layer_gradients_match_finite_differences() {
        let mut w = weights::<f64>(8, 2, Some(0.97), 101);
        w.score_norm = true;
        let x = rand_input::<f64>(6, 8, 103);

        let loss_of = |w: &RetentionWeights<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let rv = retention_vars_for_test(&mut tape, w);
            let xv = tape.leaf(x.clone().into_dyn());
            let mut carry = TapeCarry::zeros(&mut tape, w.n_heads, w.head_dim());
            let out = retention_layer_tape(&mut tape, xv, &rv, &mut carry);
            let sq = tape.mul(out, out);
            let l = tape.sum_all(sq);
            tape.value(l)[[0]]
        };

        let mut tape = Tape::<f64>::new();
        let rv = retention_vars_for_test(&mut tape, &w);
        let xv = tape.leaf(x.clone().into_dyn());
        let mut carry = TapeCarry::zeros(&mut tape, w.n_heads, w.head_dim());
        let out = retention_layer_tape(&mut tape, xv, &rv, &mut carry);
        let sq = tape.mul(out, out);
        let l = tape.sum_all(sq);
        tape.backward(l);

        let h = 1e-6;
        let names = ["w_q", "w_k", "w_v", "w_out", "gate_w", "gn_scale", "gn_shift"];
        let vars = [rv.w_q, rv.w_k, rv.w_v, rv.w_out, rv.gate_w, rv.gn_scale, rv.gn_shift];
        fn field<'a>(w: &'a mut RetentionWeights<f64>, name: &str) -> &'a mut [f64] {
            match name {
                "w_q" => w.w_q.as_slice_mut().unwrap(),
                "w_k" => w.w_k.as_slice_mut().unwrap(),
                "w_v" => w.w_v.as_slice_mut().unwrap(),
                "w_out" => w.w_out.as_slice_mut().unwrap(),
                "gate_w" => w.gate_w.as_slice_mut().unwrap(),
                "gn_scale" => w.gn_scale.as_slice_mut().unwrap(),
                "gn_shift" => w.gn_shift.as_slice_mut().unwrap(),
                _ => unreachable!(),
            }
        }
        for (name, var) in names.iter().zip(vars) {
            let ana = tape.grad(var);
            for idx in [0usize, 3, 7] {
                let mut wp = w.clone();
                field(&mut wp, name)[idx] += h;
                let mut wm = w.clone();
                field(&mut wm, name)[idx] -= h;
                let num = (loss_of(&wp) - loss_of(&wm)) / (2.0 * h);
                let a = ana.as_slice().unwrap()[idx];
                let err = (num - a).abs() / num.abs().max(a.abs()).max(1.0);
                assert!(err < 1e-5, "{name}[{idx}]: numeric {num} vs analytic {a}");
            }
        }
    }
}
