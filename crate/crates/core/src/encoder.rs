//! Causal Conformer-style embedding encoder.
//!
//! Input projection (345 -> D), then N pre-norm blocks of
//! retention -> causal depthwise convolution -> feed-forward (each with a
//! residual), then a convolutional look-ahead over +/-9 frames and row
//! L2-normalization. Pre-norm keeps the residual path exactly identity
//! when a sub-layer's weights are zero, which the block contract relies
//! on.
//!
//! The streaming path is frame-exact with the offline path: retention runs
//! its recurrent paradigm, the depthwise convolution keeps a K-1 frame
//! ring buffer, and the look-ahead holds a 19-frame window that delays
//! output by exactly 9 frames (offline zero padding reproduced at the
//! stream head and tail).

use crate::error::{DiarError, Result};
use crate::features::SPLICED_DIM;
use crate::nn;
use crate::numeric::Real;
use crate::retention::{
    retention_parallel, retention_recurrent_step, RetentionState, RetentionWeights,
};
use crate::tape::{Tape, Var};
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub lookahead_kernel: usize,
    pub lookahead_pad: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_blocks: 4,
            d_model: 256,
            n_heads: 4,
            ff_dim: 1024,
            conv_kernel: 16,
            lookahead_kernel: 19,
            lookahead_pad: 9,
        }
    }
}

impl EncoderConfig {
    /// Future frames consumed by the look-ahead convolution.
    pub fn lookahead_frames(&self) -> usize {
        self.lookahead_kernel - 1 - self.lookahead_pad
    }

    /// Causal left padding of the Conformer convolution.
    pub fn conv_left_pad(&self) -> usize {
        self.conv_kernel - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(DiarError::invalid("d_model must divide by n_heads"));
        }
        if self.lookahead_kernel == 0 || self.lookahead_pad + 1 > self.lookahead_kernel {
            return Err(DiarError::invalid("lookahead_pad must be < lookahead_kernel"));
        }
        if self.conv_kernel == 0 || self.n_blocks == 0 {
            return Err(DiarError::invalid("conv_kernel and n_blocks must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConformerBlockWeights<F: Real> {
    pub ln1_scale: Array1<F>,
    pub ln1_shift: Array1<F>,
    pub retention: RetentionWeights<F>,
    pub ln2_scale: Array1<F>,
    pub ln2_shift: Array1<F>,
    pub conv_pw1_w: Array2<F>,
    pub conv_pw1_b: Array1<F>,
    /// Depthwise kernel [K x D].
    pub conv_dw_w: Array2<F>,
    pub conv_dw_b: Array1<F>,
    /// Layer norm standing in for the Conformer batch norm.
    pub conv_ln_scale: Array1<F>,
    pub conv_ln_shift: Array1<F>,
    pub conv_pw2_w: Array2<F>,
    pub conv_pw2_b: Array1<F>,
    pub ln3_scale: Array1<F>,
    pub ln3_shift: Array1<F>,
    pub ff1_w: Array2<F>,
    pub ff1_b: Array1<F>,
    pub ff2_w: Array2<F>,
    pub ff2_b: Array1<F>,
}

impl<F: Real> ConformerBlockWeights<F> {
    fn new(cfg: &EncoderConfig, gammas: Vec<F>, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (cfg.ff_dim as f64).sqrt();
        ConformerBlockWeights {
            ln1_scale: Array1::ones(d),
            ln1_shift: Array1::zeros(d),
            retention: RetentionWeights::new(d, cfg.n_heads, gammas, rng),
            ln2_scale: Array1::ones(d),
            ln2_shift: Array1::zeros(d),
            conv_pw1_w: crate::retention::gaussian_matrix(d, d, std, rng),
            conv_pw1_b: Array1::zeros(d),
            conv_dw_w: crate::retention::gaussian_matrix(
                cfg.conv_kernel,
                d,
                1.0 / (cfg.conv_kernel as f64).sqrt(),
                rng,
            ),
            conv_dw_b: Array1::zeros(d),
            conv_ln_scale: Array1::ones(d),
            conv_ln_shift: Array1::zeros(d),
            conv_pw2_w: crate::retention::gaussian_matrix(d, d, std, rng),
            conv_pw2_b: Array1::zeros(d),
            ln3_scale: Array1::ones(d),
            ln3_shift: Array1::zeros(d),
            ff1_w: crate::retention::gaussian_matrix(d, cfg.ff_dim, std, rng),
            ff1_b: Array1::zeros(cfg.ff_dim),
            ff2_w: crate::retention::gaussian_matrix(cfg.ff_dim, d, ff_std, rng),
            ff2_b: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderWeights<F: Real> {
    pub config: EncoderConfig,
    pub input_w: Array2<F>,
    pub input_b: Array1<F>,
    pub blocks: Vec<ConformerBlockWeights<F>>,
    /// Look-ahead convolution kernel [K x D x D].
    pub la_w: Array3<F>,
    pub la_b: Array1<F>,
}

impl<F: Real> EncoderWeights<F> {
    pub fn new(cfg: &EncoderConfig, gammas: &[F], rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.n_blocks)
            .map(|_| ConformerBlockWeights::new(cfg, gammas.to_vec(), rng))
            .collect();
        let la_std = 1.0 / ((cfg.lookahead_kernel * d) as f64).sqrt();
        use rand_distr::{Distribution, Normal};
        let n = Normal::new(0.0, la_std).unwrap();
        EncoderWeights {
            config: cfg.clone(),
            input_w: crate::retention::gaussian_matrix(
                SPLICED_DIM,
                d,
                1.0 / (SPLICED_DIM as f64).sqrt(),
                rng,
            ),
            input_b: Array1::zeros(d),
            blocks,
            la_w: Array3::from_shape_fn((cfg.lookahead_kernel, d, d), |_| F::c(n.sample(rng))),
            la_b: Array1::zeros(d),
        }
    }
}

// ---------------------------------------------------------------------------
// Offline forward
// ---------------------------------------------------------------------------

fn conv_module_offline<F: Real>(
    u: &Array2<F>,
    bw: &ConformerBlockWeights<F>,
    kernel: usize,
) -> Array2<F> {
    let (t, d) = u.dim();
    let p = nn::linear(&u.view(), &bw.conv_pw1_w, &bw.conv_pw1_b);
    // causal depthwise: left pad K-1 zeros
    let mut dw = Array2::zeros((t, d));
    for to in 0..t {
        for kk in 0..kernel {
            let ti = to as isize - (kernel - 1 - kk) as isize;
            if ti < 0 {
                continue;
            }
            for c in 0..d {
                dw[[to, c]] += p[[ti as usize, c]] * bw.conv_dw_w[[kk, c]];
            }
        }
        for c in 0..d {
            dw[[to, c]] += bw.conv_dw_b[c];
        }
    }
    let mut a = nn::layer_norm_rows(&dw.view(), &bw.conv_ln_scale, &bw.conv_ln_shift);
    nn::swish_inplace(&mut a);
    nn::linear(&a.view(), &bw.conv_pw2_w, &bw.conv_pw2_b)
}

fn ffn_offline<F: Real>(u: &Array2<F>, bw: &ConformerBlockWeights<F>) -> Array2<F> {
    let mut h = nn::linear(&u.view(), &bw.ff1_w, &bw.ff1_b);
    nn::swish_inplace(&mut h);
    nn::linear(&h.view(), &bw.ff2_w, &bw.ff2_b)
}

/// One pre-norm Conformer block: x + Ret(LN(x)), x + Conv(LN(x)),
/// x + FFN(LN(x)).
pub fn conformer_block_offline<F: Real>(
    x: &Array2<F>,
    bw: &ConformerBlockWeights<F>,
    cfg: &EncoderConfig,
) -> Result<Array2<F>> {
    if x.ncols() != cfg.d_model {
        return Err(DiarError::invalid("block input dim mismatch"));
    }
    let n1 = nn::layer_norm_rows(&x.view(), &bw.ln1_scale, &bw.ln1_shift);
    let r = retention_parallel(&n1, &bw.retention)?;
    let x = x + &r;
    let n2 = nn::layer_norm_rows(&x.view(), &bw.ln2_scale, &bw.ln2_shift);
    let c = conv_module_offline(&n2, bw, cfg.conv_kernel);
    let x = &x + &c;
    let n3 = nn::layer_norm_rows(&x.view(), &bw.ln3_scale, &bw.ln3_shift);
    let f = ffn_offline(&n3, bw);
    Ok(&x + &f)
}

/// Look-ahead convolution: full conv along time, kernel 19, zero padding 9
/// on both ends. Output frame t sees frames t-9 .. t+9.
pub fn lookahead<F: Real>(e: &Array2<F>, w: &Array3<F>, b: &Array1<F>, pad: usize) -> Array2<F> {
    let (t, d) = e.dim();
    let k = w.dim().0;
    let t_out = t + 2 * pad + 1 - k;
    let mut out = Array2::zeros((t_out, d));
    for to in 0..t_out {
        for kk in 0..k {
            let ti = (to + kk) as isize - pad as isize;
            if ti < 0 || ti >= t as isize {
                continue;
            }
            let row = e.row(ti as usize);
            let wk = w.index_axis(Axis(0), kk);
            for o in 0..d {
                let mut acc = F::zero();
                for i in 0..d {
                    acc += row[i] * wk[[i, o]];
                }
                out[[to, o]] += acc;
            }
        }
        for o in 0..d {
            out[[to, o]] += b[o];
        }
    }
    out
}

/// Full offline encoder: normalized features in, unit-norm embeddings out.
pub fn encode_offline<F: Real>(feats: &Array2<F>, w: &EncoderWeights<F>) -> Result<Array2<F>> {
    w.config.validate()?;
    if feats.ncols() != w.input_w.nrows() {
        return Err(DiarError::invalid(format!(
            "feature dim {} != expected {}",
            feats.ncols(),
            w.input_w.nrows()
        )));
    }
    let mut x = nn::linear(&feats.view(), &w.input_w, &w.input_b);
    for bw in &w.blocks {
        x = conformer_block_offline(&x, bw, &w.config)?;
    }
    let mut e = lookahead(&x, &w.la_w, &w.la_b, w.config.lookahead_pad);
    nn::l2_normalize_rows(&mut e, L2_EPS);
    Ok(e)
}

// ---------------------------------------------------------------------------
// Streaming forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BlockStreamState<F: Real> {
    retention: RetentionState<F>,
    /// Last K-1 pointwise-conv outputs (the depthwise input history).
    conv_hist: VecDeque<Array1<F>>,
}

/// Per-stream encoder state; size independent of stream length.
#[derive(Debug, Clone)]
pub struct EncoderStreamState<F: Real> {
    blocks: Vec<BlockStreamState<F>>,
    /// Sliding window of block outputs feeding the look-ahead conv,
    /// pre-seeded with `pad` zero frames.
    la_window: VecDeque<Array1<F>>,
    pub frames_in: usize,
    pub frames_out: usize,
}

impl<F: Real> EncoderStreamState<F> {
    pub fn new(w: &EncoderWeights<F>) -> Self {
        let d = w.config.d_model;
        let mut la_window = VecDeque::with_capacity(w.config.lookahead_kernel);
        for _ in 0..w.config.lookahead_pad {
            la_window.push_back(Array1::zeros(d));
        }
        EncoderStreamState {
            blocks: w
                .blocks
                .iter()
                .map(|b| BlockStreamState {
                    retention: RetentionState::zeros(&b.retention),
                    conv_hist: VecDeque::with_capacity(w.config.conv_kernel - 1),
                })
                .collect(),
            la_window,
            frames_in: 0,
            frames_out: 0,
        }
    }
}

fn block_step<F: Real>(
    x: &Array1<F>,
    bw: &ConformerBlockWeights<F>,
    cfg: &EncoderConfig,
    st: &mut BlockStreamState<F>,
) -> Result<Array1<F>> {
    let n1 = nn::layer_norm_row(&x.view(), &bw.ln1_scale, &bw.ln1_shift);
    let r = retention_recurrent_step(n1.view(), &mut st.retention, &bw.retention)?;
    let x = x + &r;

    let n2 = nn::layer_norm_row(&x.view(), &bw.ln2_scale, &bw.ln2_shift);
    let p = nn::linear_row(&n2.view(), &bw.conv_pw1_w, &bw.conv_pw1_b);
    let d = cfg.d_model;
    let k = cfg.conv_kernel;
    let mut dw = bw.conv_dw_b.clone();
    // kernel tap k-1 hits the current frame, earlier taps the history
    for c in 0..d {
        dw[c] += p[c] * bw.conv_dw_w[[k - 1, c]];
    }
    for (age, past) in st.conv_hist.iter().rev().enumerate() {
        let kk = k - 2 - age;
        for c in 0..d {
            dw[c] += past[c] * bw.conv_dw_w[[kk, c]];
        }
    }
    if st.conv_hist.len() == k - 1 {
        st.conv_hist.pop_front();
    }
    st.conv_hist.push_back(p);
    let mut a = nn::layer_norm_row(&dw.view(), &bw.conv_ln_scale, &bw.conv_ln_shift);
    a.mapv_inplace(|v| v * crate::tape::sigmoid_scalar(v) );
    let c_out = nn::linear_row(&a.view(), &bw.conv_pw2_w, &bw.conv_pw2_b);
    let x = &x + &c_out;

    let n3 = nn::layer_norm_row(&x.view(), &bw.ln3_scale, &bw.ln3_shift);
    let mut h = nn::linear_row(&n3.view(), &bw.ff1_w, &bw.ff1_b);
    h.mapv_inplace(|v| v * crate::tape::sigmoid_scalar(v));
    let f = nn::linear_row(&h.view(), &bw.ff2_w, &bw.ff2_b);
    Ok(&x + &f)
}

fn la_emit<F: Real>(w: &EncoderWeights<F>, st: &mut EncoderStreamState<F>) -> Array1<F> {
    let d = w.config.d_model;
    let k = w.config.lookahead_kernel;
    let mut out = w.la_b.clone();
    for (kk, frame) in st.la_window.iter().enumerate() {
        debug_assert!(kk < k);
        let wk = w.la_w.index_axis(Axis(0), kk);
        for o in 0..d {
            let mut acc = F::zero();
            for i in 0..d {
                acc += frame[i] * wk[[i, o]];
            }
            out[o] += acc;
        }
    }
    st.la_window.pop_front();
    st.frames_out += 1;
    nn::l2_normalize_row(&mut out, L2_EPS);
    out
}

/// Push one normalized feature frame. Returns the embedding for the frame
/// `lookahead_frames` behind the push, once enough context has arrived.
pub fn encoder_push<F: Real>(
    feat: ArrayView1<F>,
    w: &EncoderWeights<F>,
    st: &mut EncoderStreamState<F>,
) -> Result<Option<Array1<F>>> {
    let mut x = nn::linear_row(&feat, &w.input_w, &w.input_b);
    for (bw, bs) in w.blocks.iter().zip(st.blocks.iter_mut()) {
        x = block_step(&x, bw, &w.config, bs)?;
    }
    st.la_window.push_back(x);
    st.frames_in += 1;
    if st.la_window.len() == w.config.lookahead_kernel {
        Ok(Some(la_emit(w, st)))
    } else {
        Ok(None)
    }
}

/// Emit the delayed tail by zero-padding the look-ahead context, exactly
/// like the offline forward's trailing zero padding.
pub fn encoder_flush<F: Real>(
    w: &EncoderWeights<F>,
    st: &mut EncoderStreamState<F>,
) -> Vec<Array1<F>> {
    let d = w.config.d_model;
    let mut out = Vec::new();
    while st.frames_out < st.frames_in {
        st.la_window.push_back(Array1::zeros(d));
        if st.la_window.len() == w.config.lookahead_kernel {
            out.push(la_emit(w, st));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tape (training) forward
// ---------------------------------------------------------------------------

use crate::retention::{retention_tape_chunked, RetentionVars};

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln1_scale: Var,
    pub ln1_shift: Var,
    pub retention: RetentionVars,
    pub ln2_scale: Var,
    pub ln2_shift: Var,
    pub conv_pw1_w: Var,
    pub conv_pw1_b: Var,
    pub conv_dw_w: Var,
    pub conv_dw_b: Var,
    pub conv_ln_scale: Var,
    pub conv_ln_shift: Var,
    pub conv_pw2_w: Var,
    pub conv_pw2_b: Var,
    pub ln3_scale: Var,
    pub ln3_shift: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub input_w: Var,
    pub input_b: Var,
    pub blocks: Vec<BlockVars>,
    pub la_w: Var,
    pub la_b: Var,
}

pub struct EncoderTapeOpts {
    /// Run the retention layers chunkwise with this many frames per chunk
    /// (None = parallel over the whole sequence). Convolutions and norms
    /// are time-local and always run over the full sequence, so chunked
    /// and monolithic forwards compute the same function.
    pub retention_chunk: Option<usize>,
    /// Dropout rate on feed-forward hidden activations, with its mask
    /// source. None disables dropout (evaluation mode).
    pub dropout: Option<f64>,
}

fn dropout_mask<F: Real>(shape: &[usize], rate: f64, rng: &mut impl Rng) -> ndarray::ArrayD<F> {
    let keep = 1.0 - rate;
    ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        if rng.random::<f64>() < keep {
            F::c(1.0 / keep)
        } else {
            F::zero()
        }
    })
}

pub fn conformer_block_tape<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    bv: &BlockVars,
    cfg: &EncoderConfig,
    opts: &EncoderTapeOpts,
    rng: &mut impl Rng,
) -> Var {
    let dh = cfg.d_model / cfg.n_heads;
    let n1 = tape.layer_norm(x, bv.ln1_scale, bv.ln1_shift, 1e-5);
    let r = retention_tape_chunked(tape, n1, &bv.retention, opts.retention_chunk, dh);
    let x = tape.add(x, r);

    let n2 = tape.layer_norm(x, bv.ln2_scale, bv.ln2_shift, 1e-5);
    let p0 = tape.matmul(n2, bv.conv_pw1_w);
    let p = tape.add_bias(p0, bv.conv_pw1_b);
    let dw = tape.conv1d_depthwise_causal(p, bv.conv_dw_w, bv.conv_dw_b);
    let a0 = tape.layer_norm(dw, bv.conv_ln_scale, bv.conv_ln_shift, 1e-5);
    let a = tape.swish(a0);
    let c0 = tape.matmul(a, bv.conv_pw2_w);
    let c = tape.add_bias(c0, bv.conv_pw2_b);
    let x = tape.add(x, c);

    let n3 = tape.layer_norm(x, bv.ln3_scale, bv.ln3_shift, 1e-5);
    let h0 = tape.matmul(n3, bv.ff1_w);
    let h1 = tape.add_bias(h0, bv.ff1_b);
    let mut h = tape.swish(h1);
    if let Some(rate) = opts.dropout {
        let shape = tape.value(h).shape().to_vec();
        let mask = dropout_mask::<F>(&shape, rate, rng);
        h = tape.mul_const(h, mask);
    }
    let f0 = tape.matmul(h, bv.ff2_w);
    let f = tape.add_bias(f0, bv.ff2_b);
    tape.add(x, f)
}

/// Training-graph encoder; value-equal to `encode_offline`.
pub fn encode_tape<F: Real>(
    tape: &mut Tape<F>,
    feats: Var,
    ev: &EncoderVars,
    cfg: &EncoderConfig,
    opts: &EncoderTapeOpts,
    rng: &mut impl Rng,
) -> Var {
    let x0 = tape.matmul(feats, ev.input_w);
    let mut x = tape.add_bias(x0, ev.input_b);
    for bv in &ev.blocks {
        x = conformer_block_tape(tape, x, bv, cfg, opts, rng);
    }
    let la = tape.conv1d_time(x, ev.la_w, ev.la_b, cfg.lookahead_pad, cfg.lookahead_pad);
    tape.l2norm_rows(la, L2_EPS)
}
