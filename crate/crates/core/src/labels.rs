//! Diarization label algebra.
//!
//! Training targets order speakers by first appearance and augment the
//! label matrix with a non-speech row (index 0, the implicit SAD task) and
//! an all-zero termination row right after the last active speaker (the
//! speaker counter). Segment/frame conversions and RTTM round out the
//! plumbing.

use crate::error::{DiarError, Result};
use crate::numeric::Real;
use ndarray::Array2;
use std::fmt::Write as _;
use std::path::Path;

/// Per-speaker binary activity, in whatever column order the source used.
#[derive(Debug, Clone)]
pub struct RawLabels {
    /// [T x n_actual], entries 0/1.
    pub y: Array2<u8>,
    pub speaker_ids: Vec<String>,
}

/// Appearance-ordered labels with non-speech and termination rows.
///
/// Column layout: 0 = non-speech, 1..=n_actual = speakers by first active
/// frame, n_actual+1 = termination (all zeros), anything beyond stays zero
/// and is excluded from losses.
#[derive(Debug, Clone)]
pub struct AugmentedLabels {
    /// [T x (S+2)], entries 0/1.
    pub y: Array2<u8>,
    pub n_actual: usize,
    /// Maps output speaker slot (0-based among speakers) to the original
    /// column in the raw labels.
    pub order: Vec<usize>,
}

impl AugmentedLabels {
    pub fn n_frames(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_slots(&self) -> usize {
        self.y.ncols()
    }

    /// Label matrix as reals.
    pub fn to_real<F: Real>(&self) -> Array2<F> {
        self.y.mapv(|v| F::c(v as f64))
    }

    /// 1 on slots taking part in the diarization loss: non-speech through
    /// the termination marker, nothing beyond.
    pub fn loss_mask<F: Real>(&self) -> Array2<F> {
        let mut m = Array2::zeros(self.y.raw_dim());
        let hi = (self.n_actual + 2).min(self.n_slots());
        for t in 0..self.n_frames() {
            for s in 0..hi {
                m[[t, s]] = F::one();
            }
        }
        m
    }
}

/// Sort speakers by first active frame (ties keep original column order),
/// drop never-active speakers, prepend the non-speech row and append the
/// zero termination row.
pub fn appearance_order_permute(raw: &RawLabels, max_speakers: usize) -> Result<AugmentedLabels> {
    let t = raw.y.nrows();
    let n_cols = raw.y.ncols();
    let mut first_active: Vec<(usize, usize)> = Vec::new(); // (first frame, col)
    for c in 0..n_cols {
        if let Some(f) = (0..t).find(|&f| raw.y[[f, c]] != 0) {
            first_active.push((f, c));
        }
    }
    first_active.sort();
    let n_actual = first_active.len();
    if n_actual > max_speakers {
        return Err(DiarError::CapacityExceeded {
            actual: n_actual,
            capacity: max_speakers,
        });
    }
    let slots = max_speakers + 2;
    let mut y = Array2::zeros((t, slots));
    for (rank, &(_, col)) in first_active.iter().enumerate() {
        for f in 0..t {
            y[[f, rank + 1]] = raw.y[[f, col]];
        }
    }
    for f in 0..t {
        let any = (0..n_cols).any(|c| raw.y[[f, c]] != 0);
        y[[f, 0]] = u8::from(!any);
    }
    Ok(AugmentedLabels {
        y,
        n_actual,
        order: first_active.into_iter().map(|(_, c)| c).collect(),
    })
}

/// Maximal runs of 1s as half-open time intervals.
pub fn frames_to_segments(row: &[u8], frame_period: f64) -> Vec<(f64, f64)> {
    let mut segs = Vec::new();
    let mut start: Option<usize> = None;
    for (t, &v) in row.iter().enumerate() {
        match (v != 0, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                segs.push((s as f64 * frame_period, t as f64 * frame_period));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segs.push((s as f64 * frame_period, row.len() as f64 * frame_period));
    }
    segs
}

/// Frame t is active iff its center falls inside a segment. Left inverse
/// of `frames_to_segments` on frame-aligned segments.
pub fn segments_to_frames(segments: &[(f64, f64)], t: usize, frame_period: f64) -> Vec<u8> {
    let mut row = vec![0u8; t];
    for &(onset, offset) in segments {
        for (f, slot) in row.iter_mut().enumerate() {
            let center = (f as f64 + 0.5) * frame_period;
            if center >= onset && center < offset {
                *slot = 1;
            }
        }
    }
    row
}

// ---------------------------------------------------------------------------
// RTTM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RttmSegment {
    pub file_id: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

/// RTTM text with 2-decimal times, segments ordered by (onset, speaker).
pub fn format_rttm(segments: &[RttmSegment]) -> String {
    let mut sorted: Vec<&RttmSegment> = segments.iter().collect();
    sorted.sort_by(|a, b| {
        a.onset
            .partial_cmp(&b.onset)
            .unwrap()
            .then_with(|| a.speaker.cmp(&b.speaker))
    });
    let mut out = String::new();
    for s in sorted {
        writeln!(
            out,
            "SPEAKER {} 1 {:.2} {:.2} <NA> <NA> {} <NA> <NA>",
            s.file_id, s.onset, s.duration, s.speaker
        )
        .unwrap();
    }
    out
}

pub fn write_rttm(path: &Path, segments: &[RttmSegment]) -> Result<()> {
    std::fs::write(path, format_rttm(segments))?;
    Ok(())
}

pub fn parse_rttm(text: &str) -> Result<Vec<RttmSegment>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 8 || fields[0] != "SPEAKER" {
            return Err(DiarError::format(format!("RTTM line {}: {line}", ln + 1)));
        }
        let onset: f64 = fields[3]
            .parse()
            .map_err(|_| DiarError::format(format!("RTTM line {}: bad onset", ln + 1)))?;
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| DiarError::format(format!("RTTM line {}: bad duration", ln + 1)))?;
        out.push(RttmSegment {
            file_id: fields[1].to_string(),
            onset,
            duration,
            speaker: fields[7].to_string(),
        });
    }
    Ok(out)
}

pub fn read_rttm(path: &Path) -> Result<Vec<RttmSegment>> {
    parse_rttm(&std::fs::read_to_string(path)?)
}

/// Segments grouped by speaker id, in first-appearance order.
pub fn rttm_by_speaker(segments: &[RttmSegment]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: std::collections::HashMap<String, Vec<(f64, f64)>> =
        std::collections::HashMap::new();
    let mut sorted: Vec<&RttmSegment> = segments.iter().collect();
    sorted.sort_by(|a, b| a.onset.partial_cmp(&b.onset).unwrap());
    for s in sorted {
        if !map.contains_key(&s.speaker) {
            order.push(s.speaker.clone());
        }
        map.entry(s.speaker.clone())
            .or_default()
            .push((s.onset, s.onset + s.duration));
    }
    order
        .into_iter()
        .map(|name| {
            let segs = map.remove(&name).unwrap();
            (name, segs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn raw(y: Array2<u8>) -> RawLabels {
        let ids = (0..y.ncols()).map(|c| format!("spk{c}")).collect();
        RawLabels { y, speaker_ids: ids }
    }

    #[test]
    fn appearance_order_fixture() {
        // T=4; given column order (B, A): B active frames {2,3} (0-based),
        // A active {1,2,3}. A appears first, so output order is (A, B).
        let y = array![[0u8, 0], [0, 1], [1, 1], [1, 1]];
        let aug = appearance_order_permute(&raw(y), 3).unwrap();
        assert_eq!(aug.n_actual, 2);
        assert_eq!(aug.order, vec![1, 0]);
        // non-speech row
        assert_eq!(
            (0..4).map(|t| aug.y[[t, 0]]).collect::<Vec<_>>(),
            vec![1, 0, 0, 0]
        );
        // speaker slots in appearance order
        assert_eq!(
            (0..4).map(|t| aug.y[[t, 1]]).collect::<Vec<_>>(),
            vec![0, 1, 1, 1]
        );
        assert_eq!(
            (0..4).map(|t| aug.y[[t, 2]]).collect::<Vec<_>>(),
            vec![0, 0, 1, 1]
        );
        // termination row (slot n_actual+1) and everything after are zero
        for s in 3..aug.n_slots() {
            assert!((0..4).all(|t| aug.y[[t, s]] == 0));
        }
    }

    #[test]
    fn all_silent_input() {
        let y = Array2::<u8>::zeros((5, 2));
        let aug = appearance_order_permute(&raw(y), 3).unwrap();
        assert_eq!(aug.n_actual, 0);
        assert!((0..5).all(|t| aug.y[[t, 0]] == 1));
        // termination marker occupies slot 1 (all zeros, like the rest)
        for s in 1..aug.n_slots() {
            assert!((0..5).all(|t| aug.y[[t, s]] == 0));
        }
    }

    #[test]
    fn already_ordered_is_identity_and_capacity_is_enforced() {
        let y = array![[1u8, 0], [1, 1], [0, 1]];
        let aug = appearance_order_permute(&raw(y.clone()), 2).unwrap();
        assert_eq!(aug.order, vec![0, 1]);
        assert!(matches!(
            appearance_order_permute(&raw(y), 1),
            Err(DiarError::CapacityExceeded { actual: 2, capacity: 1 })
        ));
    }

    #[test]
    fn simultaneous_first_appearance_keeps_column_order() {
        let y = array![[0u8, 0, 0], [1, 1, 0], [0, 0, 1]];
        let aug = appearance_order_permute(&raw(y), 3).unwrap();
        assert_eq!(aug.order, vec![0, 1, 2]);
    }

    #[test]
    fn nonspeech_is_nor_of_speaker_rows() {
        let y = array![[1u8, 0], [0, 0], [1, 1], [0, 1]];
        let aug = appearance_order_permute(&raw(y), 4).unwrap();
        for t in 0..4 {
            let any = (1..aug.n_slots()).any(|s| aug.y[[t, s]] != 0);
            assert_eq!(aug.y[[t, 0]] == 1, !any);
        }
    }

    #[test]
    fn frames_to_segments_fixtures() {
        assert_eq!(frames_to_segments(&[0, 1, 1, 0], 0.1), vec![(0.1, 0.30000000000000004)]);
        assert!(frames_to_segments(&[0, 0, 0], 0.1).is_empty());
        assert_eq!(
            frames_to_segments(&[1, 0, 1], 0.1),
            vec![(0.0, 0.1), (0.2, 0.30000000000000004)]
        );
    }

    #[test]
    fn segment_frame_round_trip() {
        for row in [
            vec![0u8, 1, 1, 0],
            vec![0, 0, 0],
            vec![1, 0, 1],
            vec![1, 1, 1, 1],
        ] {
            let segs = frames_to_segments(&row, 0.1);
            let back = segments_to_frames(&segs, row.len(), 0.1);
            assert_eq!(row, back);
        }
    }

    #[test]
    fn rttm_round_trip_and_format() {
        let segs = vec![
            RttmSegment {
                file_id: "conv0".into(),
                onset: 1.0,
                duration: 2.5,
                speaker: "spk1".into(),
            },
            RttmSegment {
                file_id: "conv0".into(),
                onset: 0.25,
                duration: 0.75,
                speaker: "spk2".into(),
            },
        ];
        let text = format_rttm(&segs);
        assert_eq!(
            text,
            "SPEAKER conv0 1 0.25 0.75 <NA> <NA> spk2 <NA> <NA>\n\
             SPEAKER conv0 1 1.00 2.50 <NA> <NA> spk1 <NA> <NA>\n"
        );
        let parsed = parse_rttm(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].speaker, "spk2");
        assert!((parsed[1].duration - 2.5).abs() < 1e-9);
        assert!(parse_rttm("JUNK line").is_err());
    }
}
