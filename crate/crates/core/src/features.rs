//! Acoustic frontend: 23-band LogMel at 10 ms, context splicing to 345
//! dimensions at 100 ms, and streaming cumulative-mean normalization.
//!
//! The pipeline also accepts precomputed feature matrices (the simulator
//! injects synthetic features directly), stored in a small binary format.

use crate::error::{DiarError, Result};
use crate::numeric::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};
use std::io::{Read, Write};
use std::path::Path;

pub const SAMPLE_RATE: u32 = 8000;
pub const RAW_FEAT_DIM: usize = 23;
/// 7 raw frames of context on each side of every 10th frame.
pub const SPLICE_CONTEXT: usize = 7;
pub const SUBSAMPLE_FACTOR: usize = 10;
pub const SPLICED_DIM: usize = RAW_FEAT_DIM * (2 * SPLICE_CONTEXT + 1);
pub const RAW_FRAME_PERIOD: f64 = 0.010;
pub const SPLICED_FRAME_PERIOD: f64 = 0.100;

const WIN_SAMPLES: usize = 200; // 25 ms at 8 kHz
const HOP_SAMPLES: usize = 80; // 10 ms
const NFFT: usize = 256;
const MEL_LOW_HZ: f64 = 0.0;
const MEL_HIGH_HZ: f64 = 4000.0;
const LOG_FLOOR: f64 = 1e-10;

/// A feature matrix with its frame period, the unit moved between stages.
#[derive(Debug, Clone)]
pub struct FeatureSequence<F: Real> {
    pub data: Array2<F>,
    pub frame_period: f64,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank on the power-spectrum bins.
fn mel_filterbank(sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
    let n_bins = NFFT / 2 + 1;
    let mel_lo = hz_to_mel(MEL_LOW_HZ);
    let mel_hi = hz_to_mel(MEL_HIGH_HZ);
    let edges: Vec<f64> = (0..RAW_FEAT_DIM + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (RAW_FEAT_DIM + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / NFFT as f64;
    let mut filters = Vec::with_capacity(RAW_FEAT_DIM);
    for m in 0..RAW_FEAT_DIM {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut taps = Vec::new();
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f > lo && f < mid {
                (f - lo) / (mid - lo)
            } else if (f - mid).abs() < f64::EPSILON || (f >= mid && f < hi) {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                taps.push((b, w));
            }
        }
        filters.push(taps);
    }
    filters
}

/// 23 LogMel bands per 10 ms hop from 8 kHz mono samples. Frames are
/// centered on `t * hop` with zero padding; frame count is
/// ceil(len / hop), so 1 s of audio yields exactly 100 frames.
pub fn logmel(samples: &[i16], sample_rate: u32) -> Result<Array2<f32>> {
    if sample_rate != SAMPLE_RATE {
        return Err(DiarError::invalid(format!(
            "expected {SAMPLE_RATE} Hz input, got {sample_rate}"
        )));
    }
    let n = samples.len();
    if n == 0 {
        return Ok(Array2::zeros((0, RAW_FEAT_DIM)));
    }
    let n_frames = n.div_ceil(HOP_SAMPLES);
    let window: Vec<f64> = (0..WIN_SAMPLES)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (WIN_SAMPLES - 1) as f64).cos())
        .collect();
    let filters = mel_filterbank(sample_rate);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(NFFT);

    let mut out = Array2::<f32>::zeros((n_frames, RAW_FEAT_DIM));
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    let half = WIN_SAMPLES / 2;
    for t in 0..n_frames {
        let center = t * HOP_SAMPLES;
        for cell in buf.iter_mut() {
            *cell = Complex::new(0.0, 0.0);
        }
        for i in 0..WIN_SAMPLES {
            let src = center as isize - half as isize + i as isize;
            if src >= 0 && (src as usize) < n {
                buf[i] = Complex::new(samples[src as usize] as f64 / 32768.0 * window[i], 0.0);
            }
        }
        fft.process(&mut buf);
        for (m, taps) in filters.iter().enumerate() {
            let mut e = 0.0;
            for &(b, w) in taps {
                e += w * buf[b].norm_sqr();
            }
            out[[t, m]] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    Ok(out)
}

/// Concatenate each 10th raw frame with 7 frames of context on either side
/// (edges replicated). Output length is ceil(T_raw / 10), dimension 345.
pub fn splice_subsample<F: Real>(raw: &ArrayView2<F>) -> Array2<F> {
    let t_raw = raw.nrows();
    let f = raw.ncols();
    let t_out = t_raw.div_ceil(SUBSAMPLE_FACTOR);
    let mut out = Array2::zeros((t_out, f * (2 * SPLICE_CONTEXT + 1)));
    for k in 0..t_out {
        let center = k * SUBSAMPLE_FACTOR;
        for (slot, off) in (-(SPLICE_CONTEXT as isize)..=SPLICE_CONTEXT as isize).enumerate() {
            let src = (center as isize + off).clamp(0, t_raw as isize - 1) as usize;
            for c in 0..f {
                out[[k, slot * f + c]] = raw[[src, c]];
            }
        }
    }
    out
}

/// Streaming cumulative mean state; `mu` after t frames is the exact
/// arithmetic mean of frames 1..t.
#[derive(Debug, Clone)]
pub struct CmnState<F: Real> {
    pub mu: Array1<F>,
    pub count: usize,
}

impl<F: Real> CmnState<F> {
    pub fn new(dim: usize) -> Self {
        CmnState {
            mu: Array1::zeros(dim),
            count: 0,
        }
    }
}

/// One step of cumulative mean normalization: updates the running mean to
/// include the current frame and returns `x_t - mu_t`.
pub fn cmn_step<F: Real>(x_t: ArrayView1<F>, state: &mut CmnState<F>) -> Array1<F> {
    state.count += 1;
    let t = F::c(state.count as f64);
    let keep = (t - F::one()) / t;
    let take = F::one() / t;
    for (m, &x) in state.mu.iter_mut().zip(x_t.iter()) {
        *m = keep * *m + take * x;
    }
    &x_t.to_owned() - &state.mu
}

/// Offline prefix-mean normalization, frame-exact with `cmn_step`.
pub fn cmn_offline<F: Real>(x: &ArrayView2<F>) -> Array2<F> {
    let mut st = CmnState::new(x.ncols());
    let mut out = Array2::zeros(x.raw_dim());
    for (t, row) in x.rows().into_iter().enumerate() {
        out.row_mut(t).assign(&cmn_step(row, &mut st));
    }
    out
}

// ---------------------------------------------------------------------------
// Feature file format: 16-byte header (magic "FEAT", u32 T, u32 F,
// u32 version) followed by row-major little-endian f32.
// ---------------------------------------------------------------------------

const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const FEAT_VERSION: u32 = 1;

pub fn write_feature_file(path: &Path, data: &ArrayView2<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(FEAT_MAGIC)?;
    f.write_all(&(data.nrows() as u32).to_le_bytes())?;
    f.write_all(&(data.ncols() as u32).to_le_bytes())?;
    f.write_all(&FEAT_VERSION.to_le_bytes())?;
    for &v in data.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Array2<f32>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    f.read_exact(&mut header)?;
    if &header[0..4] != FEAT_MAGIC {
        return Err(DiarError::format("not a feature file (bad magic)"));
    }
    let t = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let version = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if version != FEAT_VERSION {
        return Err(DiarError::format(format!(
            "unsupported feature file version {version}"
        )));
    }
    let mut payload = vec![0u8; t * d * 4];
    f.read_exact(&mut payload)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((t, d), values)
        .map_err(|e| DiarError::format(format!("feature payload shape: {e}")))
}
