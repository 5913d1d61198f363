//! Phoneme-timing synchronisation metric and a DTW stand-in aligner.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meldsp::MelSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimeSyncError {
    #[error("alignment format error on line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T, E = TimeSyncError> = std::result::Result<T, E>;

pub const SILENCE_LABEL: &str = "sp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeSegment {
    pub label: String,
    pub start: f64,
    pub end: f64,
}

impl PhonemeSegment {
    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentSource {
    #[default]
    GroundTruth,
    Generated,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhonemeAlignment {
    pub segments: Vec<PhonemeSegment>,
    pub source: AlignmentSource,
}

impl PhonemeAlignment {
    /// Validates ordering: `0 ≤ start < end`, sorted, non-overlapping.
    pub fn new(segments: Vec<PhonemeSegment>, source: AlignmentSource) -> Result<Self> {
        let mut prev_end = 0.0;
        for (i, s) in segments.iter().enumerate() {
            let bad = |detail: String| TimeSyncError::Format { line: i + 1, detail };
            if !(s.start.is_finite() && s.end.is_finite()) || s.start < 0.0 || s.start >= s.end {
                return Err(bad(format!("segment [{}, {}) is not a positive interval", s.start, s.end)));
            }
            if s.start < prev_end {
                return Err(bad(format!("segment starts at {} before previous end {prev_end}", s.start)));
            }
            if s.label.is_empty() || s.label.contains(['\t', '\n']) {
                return Err(bad(format!("invalid label {:?}", s.label)));
            }
            prev_end = s.end;
        }
        Ok(Self { segments, source })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.label.as_str()).collect()
    }

    /// Tab-separated `label start end`, one segment per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            writeln!(out, "{}\t{}\t{}", s.label, s.start, s.end).unwrap();
        }
        out
    }

    /// Every segment moved by `delta` seconds.
    pub fn shifted(&self, delta: f64) -> Result<Self> {
        let segments = self
            .segments
            .iter()
            .map(|s| PhonemeSegment {
                label: s.label.clone(),
                start: s.start + delta,
                end: s.end + delta,
            })
            .collect();
        Self::new(segments, self.source)
    }
}

/// Parses `label<TAB>start<TAB>end` lines. Blank lines are ignored.
pub fn parse_alignment(text: &str, source: AlignmentSource) -> Result<PhonemeAlignment> {
    let mut segments = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| TimeSyncError::Format { line: i + 1, detail };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        segments.push(PhonemeSegment {
            label: fields[0].to_string(),
            start: num(fields[1])?,
            end: num(fields[2])?,
        });
    }
    PhonemeAlignment::new(segments, source)
}

pub fn strip_silence(a: &PhonemeAlignment) -> PhonemeAlignment {
    strip_labels(a, &[SILENCE_LABEL])
}

pub fn strip_labels(a: &PhonemeAlignment, silence: &[&str]) -> PhonemeAlignment {
    PhonemeAlignment {
        segments: a
            .segments
            .iter()
            .filter(|s| !silence.contains(&s.label.as_str()))
            .cloned()
            .collect(),
        source: a.source,
    }
}

/// Aligned `(gt_index, gen_index)` pairs from a minimum-cost edit script
/// with unit costs. Matches and substitutions pair up; insertions and
/// deletions do not. Ties prefer more exact matches, then the
/// lexicographically smallest pair list.
pub fn match_phonemes(gt: &PhonemeAlignment, gen: &PhonemeAlignment) -> Vec<(usize, usize)> {
    match_labels(&gt.labels(), &gen.labels())
}

pub fn match_labels<S: PartialEq>(a: &[S], b: &[S]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    // best[i][j]: optimal (cost, -matches, pairs) for the suffixes a[i..], b[j..].
    type Best = (usize, isize, Vec<(usize, usize)>);
    let mut best: Vec<Vec<Best>> = vec![vec![(0, 0, Vec::new()); m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            if i == n && j == m {
                continue;
            }
            let mut cands: Vec<Best> = Vec::with_capacity(3);
            if i < n && j < m {
                let (c, neg, ref rest) = best[i + 1][j + 1];
                let same = a[i] == b[j];
                let mut pairs = Vec::with_capacity(rest.len() + 1);
                pairs.push((i, j));
                pairs.extend_from_slice(rest);
                cands.push((c + usize::from(!same), neg - isize::from(same), pairs));
            }
            if i < n {
                let (c, neg, ref rest) = best[i + 1][j];
                cands.push((c + 1, neg, rest.clone()));
            }
            if j < m {
                let (c, neg, ref rest) = best[i][j + 1];
                cands.push((c + 1, neg, rest.clone()));
            }
            best[i][j] = cands.into_iter().min().expect("at least one move");
        }
    }
    std::mem::take(&mut best[0][0].2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSyncReport {
    /// Mean absolute center offset over matched pairs, `None` without pairs.
    pub mean: Option<f64>,
    /// Population standard deviation of the absolute offsets.
    pub std: Option<f64>,
    pub n_pairs: usize,
    pub n_gt: usize,
    /// Sum of absolute offsets divided by the ground-truth phoneme count.
    pub mean_over_gt: Option<f64>,
    /// `center_gen - center_gt` per matched pair.
    pub offsets: Vec<f64>,
}

/// Center-offset statistics after silence stripping and label pairing.
pub fn timesync(gt: &PhonemeAlignment, gen: &PhonemeAlignment) -> TimeSyncReport {
    let (gt, gen) = (strip_silence(gt), strip_silence(gen));
    let pairs = match_phonemes(&gt, &gen);
    let offsets: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| gen.segments[j].center() - gt.segments[i].center())
        .collect();
    let n = offsets.len();
    let sum: f64 = offsets.iter().map(|d| d.abs()).sum();
    let (mean, std) = if n == 0 {
        (None, None)
    } else {
        let mean = sum / n as f64;
        let var = offsets.iter().map(|d| (d.abs() - mean).powi(2)).sum::<f64>() / n as f64;
        (Some(mean), Some(var.sqrt()))
    };
    TimeSyncReport {
        mean,
        std,
        n_pairs: n,
        n_gt: gt.len(),
        mean_over_gt: (gt.len() > 0 && n > 0).then(|| sum / gt.len() as f64),
        offsets,
    }
}

/// Histogram CSV of signed and absolute offsets: `bin_start,bin_end,signed,absolute`.
pub fn offset_histogram_csv(offsets: &[f64], bin_width: f64, max_abs: f64) -> String {
    let bins = (max_abs / bin_width).ceil().max(1.0) as usize;
    let mut signed = vec![0usize; 2 * bins];
    let mut absolute = vec![0usize; 2 * bins];
    for &d in offsets {
        let s = (((d + max_abs) / bin_width).floor().max(0.0) as usize).min(2 * bins - 1);
        signed[s] += 1;
        let a = ((d.abs() / bin_width).floor() as usize).min(bins - 1);
        absolute[bins + a] += 1;
    }
    let mut out = String::from("bin_start,bin_end,signed,absolute\n");
    for k in 0..2 * bins {
        let lo = -max_abs + k as f64 * bin_width;
        writeln!(out, "{lo:.6},{:.6},{},{}", lo + bin_width, signed[k], absolute[k]).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

fn frame_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Dynamic time warping with Euclidean frame distance and steps
/// `(1,0)`, `(0,1)`, `(1,1)`. Traceback prefers the diagonal on ties.
pub fn dtw_align(a: &MelSpec, b: &MelSpec) -> Result<DtwPath> {
    if a.n_frames() == 0 || b.n_frames() == 0 {
        return Err(TimeSyncError::Shape("empty spectrogram".into()));
    }
    if a.n_mels() != b.n_mels() {
        return Err(TimeSyncError::Shape(format!("{} vs {} mel channels", a.n_mels(), b.n_mels())));
    }
    let (n, m) = (a.n_frames(), b.n_frames());
    let mut d = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = frame_dist(a.frame(i), b.frame(j));
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { d[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { d[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { d[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            d[i * m + j] = c + prev;
        }
    }
    let (mut i, mut j) = (n - 1, m - 1);
    let mut pairs = vec![(i, j)];
    while i > 0 || j > 0 {
        if i == 0 {
            j -= 1;
        } else if j == 0 {
            i -= 1;
        } else {
            let diag = d[(i - 1) * m + j - 1];
            let up = d[(i - 1) * m + j];
            let left = d[i * m + j - 1];
            if diag <= up && diag <= left {
                i -= 1;
                j -= 1;
            } else if up <= left {
                i -= 1;
            } else {
                j -= 1;
            }
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath {
        cost: d[n * m - 1],
        pairs,
    })
}

impl DtwPath {
    pub fn path_cost(&self, a: &MelSpec, b: &MelSpec) -> f64 {
        self.pairs.iter().map(|&(i, j)| frame_dist(a.frame(i), b.frame(j))).sum()
    }
}

/// Maps ground-truth segment boundaries through a DTW path. A boundary at
/// source frame `f` moves to the earliest target frame matched with `f`; a
/// boundary at the end of the source maps to the end of the target.
pub fn map_alignment(path: &DtwPath, gt: &PhonemeAlignment, hop_a: f64, hop_b: f64) -> PhonemeAlignment {
    let n = path.pairs.last().map_or(0, |p| p.0 + 1);
    let m = path.pairs.last().map_or(0, |p| p.1 + 1);
    let mut earliest = vec![usize::MAX; n + 1];
    for &(i, j) in &path.pairs {
        earliest[i] = earliest[i].min(j);
    }
    earliest[n] = m;
    let map = |t: f64| -> f64 {
        let f = ((t / hop_a).round() as usize).min(n);
        earliest[f] as f64 * hop_b
    };
    let mut segments = Vec::with_capacity(gt.len());
    let mut prev_end: f64 = 0.0;
    for s in &gt.segments {
        let start = map(s.start).max(prev_end);
        let end = map(s.end).max(start + hop_b);
        segments.push(PhonemeSegment {
            label: s.label.clone(),
            start,
            end,
        });
        prev_end = end;
    }
    PhonemeAlignment {
        segments,
        source: AlignmentSource::Generated,
    }
}

/// TimeSync of `gen` against `gt`, with the generated alignment obtained by
/// carrying `gt_align` along the DTW path between the two spectrograms.
pub fn dtw_timesync(gt: &MelSpec, gt_align: &PhonemeAlignment, gen: &MelSpec) -> Result<TimeSyncReport> {
    let path = dtw_align(gt, gen)?;
    let mapped = map_alignment(&path, gt_align, gt.frame_hop_seconds(), gen.frame_hop_seconds());
    Ok(timesync(gt_align, &mapped))
}
