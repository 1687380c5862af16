//! Non-autoregressive online attractor decoder.
//!
//! Each frame's embedding is repeated across S+2 attractor slots
//! (slot 0 = non-speech, 1..S = speakers in appearance order,
//! S+1 = termination), tagged with a sinusoidal speaker-index positional
//! code, and projected back to D. Decoder blocks then interleave
//! - temporal retention: each slot's sequence processed independently
//!   along time (the only path coupling time, causal by construction),
//! - cross-attractor self-attention: standard softmax attention across
//!   slots, each frame independent,
//! - a feed-forward layer,
//! all post-norm (residual, then layer norm). Outputs are L2-normalized
//! per vector; activity probabilities are sigmoids of attractor-embedding
//! inner products, hence confined to [sigmoid(-1), sigmoid(1)].

use crate::encoder::L2_EPS;
use crate::error::{DiarError, Result};
use crate::nn;
use crate::numeric::Real;
use crate::retention::{
    retention_parallel, retention_recurrent_step, RetentionState, RetentionWeights,
};
use crate::tape::{sigmoid_scalar, Tape, Var};
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_speakers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_blocks: 2,
            d_model: 256,
            n_heads: 4,
            ff_dim: 2048,
            max_speakers: 8,
        }
    }
}

impl DecoderConfig {
    /// Attractor slots: non-speech + S speakers + termination.
    pub fn n_slots(&self) -> usize {
        self.max_speakers + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % 2 != 0 {
            return Err(DiarError::invalid("d_model must be even for the PE"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(DiarError::invalid("d_model must divide by n_heads"));
        }
        if self.max_speakers == 0 || self.n_blocks == 0 {
            return Err(DiarError::invalid("max_speakers and n_blocks must be >= 1"));
        }
        Ok(())
    }
}

/// Sinusoidal positional code along the speaker/attractor index, reused at
/// every frame: PE(s, 2d) = sin(s / 10000^(2d/D)), PE(s, 2d+1) = cos(...).
pub fn speaker_index_pe<F: Real>(n_slots: usize, d: usize) -> Result<Array2<F>> {
    if d % 2 != 0 {
        return Err(DiarError::invalid("PE dimension must be even"));
    }
    let mut pe = Array2::zeros((n_slots, d));
    for slot in 0..n_slots {
        for pair in 0..d / 2 {
            let angle = slot as f64 / 10000f64.powf(2.0 * pair as f64 / d as f64);
            pe[[slot, 2 * pair]] = F::c(angle.sin());
            pe[[slot, 2 * pair + 1]] = F::c(angle.cos());
        }
    }
    Ok(pe)
}

#[derive(Debug, Clone)]
pub struct DecoderBlockWeights<F: Real> {
    pub temporal: RetentionWeights<F>,
    pub ln1_scale: Array1<F>,
    pub ln1_shift: Array1<F>,
    pub attn_wq: Array2<F>,
    pub attn_bq: Array1<F>,
    pub attn_wk: Array2<F>,
    pub attn_bk: Array1<F>,
    pub attn_wv: Array2<F>,
    pub attn_bv: Array1<F>,
    pub attn_wo: Array2<F>,
    pub attn_bo: Array1<F>,
    pub ln2_scale: Array1<F>,
    pub ln2_shift: Array1<F>,
    pub ff1_w: Array2<F>,
    pub ff1_b: Array1<F>,
    pub ff2_w: Array2<F>,
    pub ff2_b: Array1<F>,
    pub ln3_scale: Array1<F>,
    pub ln3_shift: Array1<F>,
}

impl<F: Real> DecoderBlockWeights<F> {
    fn new(cfg: &DecoderConfig, gammas: Vec<F>, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        DecoderBlockWeights {
            temporal: RetentionWeights::new(d, cfg.n_heads, gammas, rng),
            ln1_scale: Array1::ones(d),
            ln1_shift: Array1::zeros(d),
            attn_wq: crate::retention::gaussian_matrix(d, d, std, rng),
            attn_bq: Array1::zeros(d),
            attn_wk: crate::retention::gaussian_matrix(d, d, std, rng),
            attn_bk: Array1::zeros(d),
            attn_wv: crate::retention::gaussian_matrix(d, d, std, rng),
            attn_bv: Array1::zeros(d),
            attn_wo: crate::retention::gaussian_matrix(d, d, std, rng),
            attn_bo: Array1::zeros(d),
            ln2_scale: Array1::ones(d),
            ln2_shift: Array1::zeros(d),
            ff1_w: crate::retention::gaussian_matrix(d, cfg.ff_dim, std, rng),
            ff1_b: Array1::zeros(cfg.ff_dim),
            ff2_w: crate::retention::gaussian_matrix(
                cfg.ff_dim,
                d,
                1.0 / (cfg.ff_dim as f64).sqrt(),
                rng,
            ),
            ff2_b: Array1::zeros(d),
            ln3_scale: Array1::ones(d),
            ln3_shift: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderWeights<F: Real> {
    pub config: DecoderConfig,
    /// Shared affine map restoring D after the PE concat: [2D x D].
    pub in_w: Array2<F>,
    pub in_b: Array1<F>,
    /// Fixed sinusoidal speaker-index code, not a trained parameter.
    pub pe: Array2<F>,
    pub blocks: Vec<DecoderBlockWeights<F>>,
}

impl<F: Real> DecoderWeights<F> {
    pub fn new(cfg: &DecoderConfig, gammas: &[F], rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(DecoderWeights {
            config: cfg.clone(),
            in_w: crate::retention::gaussian_matrix(2 * d, d, 1.0 / (2.0 * d as f64).sqrt(), rng),
            in_b: Array1::zeros(d),
            pe: speaker_index_pe(cfg.n_slots(), d)?,
            blocks: (0..cfg.n_blocks)
                .map(|_| DecoderBlockWeights::new(cfg, gammas.to_vec(), rng))
                .collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Offline forward
// ---------------------------------------------------------------------------

/// Repeat each embedding across slots, concatenate the speaker-index PE on
/// the feature axis, and apply the shared affine map back to D.
pub fn build_decoder_input<F: Real>(e: &ArrayView2<F>, w: &DecoderWeights<F>) -> Array3<F> {
    let (t, d) = e.dim();
    let slots = w.config.n_slots();
    let mut h = Array3::zeros((t, slots, d));
    let mut cat = Array2::zeros((t, 2 * d));
    for s in 0..slots {
        cat.slice_mut(ndarray::s![.., 0..d]).assign(e);
        for r in 0..t {
            for c in 0..d {
                cat[[r, d + c]] = w.pe[[s, c]];
            }
        }
        let proj = nn::linear(&cat.view(), &w.in_w, &w.in_b);
        h.index_axis_mut(Axis(1), s).assign(&proj);
    }
    h
}

/// Retention along time, independently per slot (slot axis batched).
pub fn temporal_retention<F: Real>(
    h: &Array3<F>,
    rw: &RetentionWeights<F>,
) -> Result<Array3<F>> {
    let mut out = Array3::zeros(h.raw_dim());
    for s in 0..h.dim().1 {
        let slot = h.index_axis(Axis(1), s).to_owned();
        let r = retention_parallel(&slot, rw)?;
        out.index_axis_mut(Axis(1), s).assign(&r);
    }
    Ok(out)
}

/// Multi-head softmax attention over the slot axis for one frame.
fn slot_attention_frame<F: Real>(
    h: &ArrayView2<F>,
    bw: &DecoderBlockWeights<F>,
    n_heads: usize,
) -> Array2<F> {
    let (slots, d) = h.dim();
    let dh = d / n_heads;
    let q = nn::linear(h, &bw.attn_wq, &bw.attn_bq);
    let k = nn::linear(h, &bw.attn_wk, &bw.attn_bk);
    let v = nn::linear(h, &bw.attn_wv, &bw.attn_bv);
    let scale = F::c(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros((slots, d));
    for head in 0..n_heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()).mapv(|x| x * scale);
        nn::softmax_rows(&mut scores);
        let o = scores.dot(&vh);
        ctx.slice_mut(cols).assign(&o);
    }
    nn::linear(&ctx.view(), &bw.attn_wo, &bw.attn_bo)
}

/// Attention weights per head for one frame (diagnostic/test hook).
pub fn cross_attention_weights_frame<F: Real>(
    h: &ArrayView2<F>,
    bw: &DecoderBlockWeights<F>,
    n_heads: usize,
) -> Vec<Array2<F>> {
    let (_, d) = h.dim();
    let dh = d / n_heads;
    let q = nn::linear(h, &bw.attn_wq, &bw.attn_bq);
    let k = nn::linear(h, &bw.attn_wk, &bw.attn_bk);
    let scale = F::c(1.0 / (dh as f64).sqrt());
    (0..n_heads)
        .map(|head| {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()).mapv(|x| x * scale);
            nn::softmax_rows(&mut scores);
            scores
        })
        .collect()
}

/// Softmax self-attention across slots, each frame independent.
pub fn cross_attractor_attention<F: Real>(
    h: &Array3<F>,
    bw: &DecoderBlockWeights<F>,
    n_heads: usize,
) -> Array3<F> {
    let mut out = Array3::zeros(h.raw_dim());
    for t in 0..h.dim().0 {
        let frame = h.index_axis(Axis(0), t);
        out.index_axis_mut(Axis(0), t)
            .assign(&slot_attention_frame(&frame, bw, n_heads));
    }
    out
}

fn layer_norm_3d<F: Real>(h: &Array3<F>, scale: &Array1<F>, shift: &Array1<F>) -> Array3<F> {
    let (t, slots, d) = h.dim();
    let flat = h.view().into_shape_with_order((t * slots, d)).unwrap();
    let out = nn::layer_norm_rows(&flat, scale, shift);
    out.into_shape_with_order((t, slots, d)).unwrap()
}

fn decoder_block_offline<F: Real>(
    h: &Array3<F>,
    bw: &DecoderBlockWeights<F>,
    n_heads: usize,
) -> Result<Array3<F>> {
    let r = temporal_retention(h, &bw.temporal)?;
    let h = layer_norm_3d(&(h + &r), &bw.ln1_scale, &bw.ln1_shift);
    let a = cross_attractor_attention(&h, bw, n_heads);
    let h = layer_norm_3d(&(&h + &a), &bw.ln2_scale, &bw.ln2_shift);
    let (t, slots, d) = h.dim();
    let flat = h.view().into_shape_with_order((t * slots, d)).unwrap();
    let mut ff = nn::linear(&flat, &bw.ff1_w, &bw.ff1_b);
    nn::swish_inplace(&mut ff);
    let ff = nn::linear(&ff.view(), &bw.ff2_w, &bw.ff2_b);
    let ff3 = ff.into_shape_with_order((t, slots, d)).unwrap();
    Ok(layer_norm_3d(&(&h + &ff3), &bw.ln3_scale, &bw.ln3_shift))
}

/// Full offline decode: unit-norm attractors [T x (S+2) x D].
pub fn decode_offline<F: Real>(e: &Array2<F>, w: &DecoderWeights<F>) -> Result<Array3<F>> {
    w.config.validate()?;
    let mut h = build_decoder_input(&e.view(), w);
    for bw in &w.blocks {
        h = decoder_block_offline(&h, bw, w.config.n_heads)?;
    }
    let (t, slots, d) = h.dim();
    let mut flat = h.into_shape_with_order((t * slots, d)).unwrap();
    nn::l2_normalize_rows(&mut flat, L2_EPS);
    Ok(flat.into_shape_with_order((t, slots, d)).unwrap())
}

/// Activity posteriors for one frame: sigmoid(A_t e_t). Entry 0 is the
/// non-speech posterior, entry S+1 the termination posterior.
pub fn activity_probs<F: Real>(a_t: &ArrayView2<F>, e_t: &ArrayView1<F>) -> Array1<F> {
    a_t.dot(e_t).mapv(sigmoid_scalar)
}

/// Inner products A_t . e_t for all frames: [T x (S+2)].
pub fn activity_logits<F: Real>(attractors: &Array3<F>, e: &Array2<F>) -> Array2<F> {
    let (t, slots, _) = attractors.dim();
    let mut z = Array2::zeros((t, slots));
    for ti in 0..t {
        let a_t = attractors.index_axis(Axis(0), ti);
        z.row_mut(ti).assign(&a_t.dot(&e.row(ti)));
    }
    z
}

// ---------------------------------------------------------------------------
// Streaming forward
// ---------------------------------------------------------------------------

/// Per-stream decoder state: one retention state per (block, slot).
#[derive(Debug, Clone)]
pub struct DecoderStreamState<F: Real> {
    states: Vec<Vec<RetentionState<F>>>,
}

impl<F: Real> DecoderStreamState<F> {
    pub fn new(w: &DecoderWeights<F>) -> Self {
        DecoderStreamState {
            states: w
                .blocks
                .iter()
                .map(|b| (0..w.config.n_slots()).map(|_| RetentionState::zeros(&b.temporal)).collect())
                .collect(),
        }
    }
}

/// One frame of streaming decode; exact counterpart of `decode_offline`.
pub fn decoder_step<F: Real>(
    e_t: ArrayView1<F>,
    w: &DecoderWeights<F>,
    st: &mut DecoderStreamState<F>,
) -> Result<Array2<F>> {
    let d = w.config.d_model;
    let slots = w.config.n_slots();
    // decoder input for one frame
    let mut h = Array2::zeros((slots, d));
    let mut cat = Array1::zeros(2 * d);
    for s in 0..slots {
        cat.slice_mut(ndarray::s![0..d]).assign(&e_t);
        for c in 0..d {
            cat[d + c] = w.pe[[s, c]];
        }
        h.row_mut(s).assign(&nn::linear_row(&cat.view(), &w.in_w, &w.in_b));
    }

    for (bw, block_states) in w.blocks.iter().zip(st.states.iter_mut()) {
        let mut r = Array2::zeros((slots, d));
        for s in 0..slots {
            let o = retention_recurrent_step(h.row(s), &mut block_states[s], &bw.temporal)?;
            r.row_mut(s).assign(&o);
        }
        let h1 = nn::layer_norm_rows(&(&h + &r).view(), &bw.ln1_scale, &bw.ln1_shift);
        let a = slot_attention_frame(&h1.view(), bw, w.config.n_heads);
        let h2 = nn::layer_norm_rows(&(&h1 + &a).view(), &bw.ln2_scale, &bw.ln2_shift);
        let mut ff = nn::linear(&h2.view(), &bw.ff1_w, &bw.ff1_b);
        nn::swish_inplace(&mut ff);
        let ff = nn::linear(&ff.view(), &bw.ff2_w, &bw.ff2_b);
        h = nn::layer_norm_rows(&(&h2 + &ff).view(), &bw.ln3_scale, &bw.ln3_shift);
    }
    nn::l2_normalize_rows(&mut h, L2_EPS);
    Ok(h)
}

// ---------------------------------------------------------------------------
// Tape (training) forward
// ---------------------------------------------------------------------------

use crate::retention::RetentionVars;

#[derive(Debug, Clone)]
pub struct DecoderBlockVars {
    pub temporal: RetentionVars,
    pub ln1_scale: Var,
    pub ln1_shift: Var,
    pub attn_wq: Var,
    pub attn_bq: Var,
    pub attn_wk: Var,
    pub attn_bk: Var,
    pub attn_wv: Var,
    pub attn_bv: Var,
    pub attn_wo: Var,
    pub attn_bo: Var,
    pub ln2_scale: Var,
    pub ln2_shift: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln3_scale: Var,
    pub ln3_shift: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub in_w: Var,
    pub in_b: Var,
    pub blocks: Vec<DecoderBlockVars>,
}

fn slot_attention_tape<F: Real>(
    tape: &mut Tape<F>,
    h: Var, // [T, S, D]
    bv: &DecoderBlockVars,
    n_heads: usize,
) -> Var {
    let shape = tape.value(h).shape().to_vec();
    let (t, slots, d) = (shape[0], shape[1], shape[2]);
    let dh = d / n_heads;
    let flat = tape.reshape(h, &[t * slots, d]);
    let project = |tape: &mut Tape<F>, w, b| {
        let p0 = tape.matmul(flat, w);
        let p = tape.add_bias(p0, b);
        let p4 = tape.reshape(p, &[t, slots, n_heads, dh]);
        let pp = tape.permute(p4, &[0, 2, 1, 3]);
        tape.reshape(pp, &[t * n_heads, slots, dh])
    };
    let q = project(tape, bv.attn_wq, bv.attn_bq);
    let k = project(tape, bv.attn_wk, bv.attn_bk);
    let v = project(tape, bv.attn_wv, bv.attn_bv);
    let kt = tape.permute(k, &[0, 2, 1]);
    let scores0 = tape.bmm(q, kt);
    let scores = tape.scale(scores0, 1.0 / (dh as f64).sqrt());
    let att = tape.softmax_last(scores);
    let ctx = tape.bmm(att, v);
    let ctx4 = tape.reshape(ctx, &[t, n_heads, slots, dh]);
    let ctxp = tape.permute(ctx4, &[0, 2, 1, 3]);
    let ctx_flat = tape.reshape(ctxp, &[t * slots, d]);
    let o0 = tape.matmul(ctx_flat, bv.attn_wo);
    let o = tape.add_bias(o0, bv.attn_bo);
    tape.reshape(o, &[t, slots, d])
}

pub struct DecoderTapeOpts {
    pub retention_chunk: Option<usize>,
    pub dropout: Option<f64>,
}

/// Training-graph decoder. Returns unit-norm attractors [T x (S+2) x D].
pub fn decode_tape<F: Real>(
    tape: &mut Tape<F>,
    e: Var, // [T, D]
    pe: &Array2<F>,
    dv: &DecoderVars,
    cfg: &DecoderConfig,
    opts: &DecoderTapeOpts,
    rng: &mut impl Rng,
) -> Var {
    let t = tape.value(e).shape()[0];
    let d = cfg.d_model;
    let slots = cfg.n_slots();
    let dh = d / cfg.n_heads;

    // decoder input
    let mut slot_vars = Vec::with_capacity(slots);
    for s in 0..slots {
        let pe_row = Array2::from_shape_fn((t, d), |(_, c)| pe[[s, c]]).into_dyn();
        let pe_const = tape.leaf(pe_row);
        let cat = tape.concat_cols(e, pe_const);
        let p0 = tape.matmul(cat, dv.in_w);
        let p = tape.add_bias(p0, dv.in_b);
        slot_vars.push(p);
    }
    let mut h = tape.stack_slots(&slot_vars);

    for bv in &dv.blocks {
        // temporal retention per slot
        let mut outs = Vec::with_capacity(slots);
        for s in 0..slots {
            let hs = tape.slot(h, s);
            let r = crate::retention::retention_tape_chunked(
                tape,
                hs,
                &bv.temporal,
                opts.retention_chunk,
                dh,
            );
            outs.push(r);
        }
        let r3 = tape.stack_slots(&outs);
        let sum1 = tape.add(h, r3);
        let h1 = tape.layer_norm(sum1, bv.ln1_scale, bv.ln1_shift, 1e-5);

        let a = slot_attention_tape(tape, h1, bv, cfg.n_heads);
        let sum2 = tape.add(h1, a);
        let h2 = tape.layer_norm(sum2, bv.ln2_scale, bv.ln2_shift, 1e-5);

        let flat = tape.reshape(h2, &[t * slots, d]);
        let f0 = tape.matmul(flat, bv.ff1_w);
        let f1 = tape.add_bias(f0, bv.ff1_b);
        let mut fh = tape.swish(f1);
        if let Some(rate) = opts.dropout {
            let shape = tape.value(fh).shape().to_vec();
            let keep = 1.0 - rate;
            let mask = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| {
                if rng.random::<f64>() < keep {
                    F::c(1.0 / keep)
                } else {
                    F::zero()
                }
            });
            fh = tape.mul_const(fh, mask);
        }
        let f2 = tape.matmul(fh, bv.ff2_w);
        let f3 = tape.add_bias(f2, bv.ff2_b);
        let ff = tape.reshape(f3, &[t, slots, d]);
        let sum3 = tape.add(h2, ff);
        h = tape.layer_norm(sum3, bv.ln3_scale, bv.ln3_shift, 1e-5);
    }

    let flat = tape.reshape(h, &[t * slots, d]);
    let normed = tape.l2norm_rows(flat, L2_EPS);
    tape.reshape(normed, &[t, slots, d])
}

/// Inner products between attractors and embeddings on the tape:
/// [T, S, D] x [T, D] -> logits [T, S].
pub fn activity_logits_tape<F: Real>(tape: &mut Tape<F>, attractors: Var, e: Var) -> Var {
    let shape = tape.value(attractors).shape().to_vec();
    let (t, slots, d) = (shape[0], shape[1], shape[2]);
    let e3 = tape.reshape(e, &[t, d, 1]);
    let z = tape.bmm(attractors, e3);
    tape.reshape(z, &[t, slots])
}
