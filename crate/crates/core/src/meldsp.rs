//! Waveform, log-mel and discrete dMel conversions.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorfile::{TensorData, TensorFile, TensorFileError, TENSOR_MAGIC};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("degenerate codebook range: min = max = {0}")]
    DegenerateRange(f64),
    #[error("corrupt sequence: {0}")]
    CorruptSequence(String),
    #[error("invalid mel config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    File(#[from] TensorFileError),
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

/// Number of discrete levels per channel for the default 4-bit codebook.
pub const LEVELS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::Config("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::Config("non-finite sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window_len: 400,
            hop_len: 400,
            fft_size: 512,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DspError::Config(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop_len == 0 || self.hop_len > self.window_len || self.window_len > self.fft_size {
            return bad("need 0 < hop_len <= window_len <= fft_size");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_len as f64 / self.sample_rate as f64
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.window_len {
            0
        } else {
            (n_samples - self.window_len) / self.hop_len + 1
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge and centre frequencies in Hz: `n_mels + 2` points evenly spaced on the
/// mel scale.
pub fn mel_points_hz(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let n = cfg.n_mels + 1;
    (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
}

/// Triangular filters, area normalised, row-major `[n_mels, n_bins]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<f64> {
    let pts = mel_points_hz(cfg);
    let n_bins = cfg.n_bins();
    let mut fb = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        let norm = 2.0 / (r - l);
        for k in 0..n_bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            let w = ((f - l) / (c - l)).min((r - f) / (r - c));
            if w > 0.0 {
                fb[m * n_bins + k] = w * norm;
            }
        }
    }
    fb
}

/// Log-mel energies, `T^s × F` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    values: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
    frame_hop_seconds: f64,
}

impl MelSpec {
    pub fn new(values: Vec<f64>, n_frames: usize, n_mels: usize, frame_hop_seconds: f64) -> Result<Self> {
        if values.len() != n_frames * n_mels {
            return Err(DspError::Shape(format!(
                "{} values for {n_frames}x{n_mels}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DspError::Config("non-finite mel value".into()));
        }
        Ok(Self {
            values,
            n_frames,
            n_mels,
            frame_hop_seconds,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame_hop_seconds(&self) -> f64 {
        self.frame_hop_seconds
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(TENSOR_MAGIC);
        f.push("mel", vec![self.n_frames, self.n_mels], TensorData::F64(self.values.clone()))
            .expect("shape checked at construction");
        f.meta = serde_json::json!({ "frame_hop_seconds": self.frame_hop_seconds });
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let e = f.get("mel")?;
        let TensorData::F64(v) = &e.data else {
            return Err(DspError::Shape("mel entry must be f64".into()));
        };
        if e.shape.len() != 2 {
            return Err(DspError::Shape(format!("mel shape {:?}", e.shape)));
        }
        let hop = f.meta["frame_hop_seconds"].as_f64().unwrap_or(0.025);
        Self::new(v.clone(), e.shape[0], e.shape[1], hop)
    }
}

/// Log-mel analysis with a rectangular window and no padding.
pub fn compute_logmel(audio: &AudioSignal, cfg: &MelConfig) -> Result<MelSpec> {
    cfg.validate()?;
    if audio.sample_rate != cfg.sample_rate {
        return Err(DspError::Config(format!(
            "audio at {} Hz, config expects {} Hz",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    let n_frames = cfg.n_frames(audio.samples.len());
    if n_frames == 0 {
        return Err(DspError::EmptyInput(format!(
            "{} samples is shorter than one {}-sample window",
            audio.samples.len(),
            cfg.window_len
        )));
    }
    let fb = mel_filterbank(cfg);
    let n_bins = cfg.n_bins();
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; n_bins];
    let mut values = Vec::with_capacity(n_frames * cfg.n_mels);
    for t in 0..n_frames {
        let start = t * cfg.hop_len;
        for (i, b) in buf.iter_mut().enumerate() {
            let x = if i < cfg.window_len { audio.samples[start + i] } else { 0.0 };
            *b = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb[m * n_bins..(m + 1) * n_bins].iter().zip(&power).map(|(w, p)| w * p).sum();
            values.push(e.max(cfg.log_floor).ln());
        }
    }
    MelSpec::new(values, n_frames, cfg.n_mels, cfg.hop_seconds())
}

/// Evenly spaced quantisation levels with inclusive endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DMelCodebook {
    pub m: f64,
    #[serde(rename = "M")]
    pub max: f64,
    pub bits: u32,
}

impl DMelCodebook {
    pub fn new(m: f64, max: f64, bits: u32) -> Result<Self> {
        if !(m.is_finite() && max.is_finite()) {
            return Err(DspError::Config("codebook range must be finite".into()));
        }
        if m == max {
            return Err(DspError::DegenerateRange(m));
        }
        if m > max {
            return Err(DspError::Config(format!("codebook min {m} > max {max}")));
        }
        if !(1..=8).contains(&bits) {
            return Err(DspError::Config(format!("bits must be in 1..=8, got {bits}")));
        }
        Ok(Self { m, max, bits })
    }

    pub fn n_levels(&self) -> usize {
        1 << self.bits
    }

    pub fn delta(&self) -> f64 {
        (self.max - self.m) / (self.n_levels() - 1) as f64
    }

    pub fn levels(&self) -> Vec<f64> {
        let n = self.n_levels();
        let mut lv: Vec<f64> = (0..n).map(|i| self.m + (self.max - self.m) * i as f64 / (n - 1) as f64).collect();
        lv[n - 1] = self.max;
        lv
    }

    /// Nearest level for one value; out-of-range values clamp and exact ties
    /// pick the lower index.
    pub fn quantize(&self, levels: &[f64], y: f64) -> u8 {
        let last = levels.len() - 1;
        if y <= self.m {
            return 0;
        }
        if y >= self.max {
            return last as u8;
        }
        let guess = ((y - self.m) / self.delta()).floor() as usize;
        let lo = guess.saturating_sub(1);
        let hi = (guess + 2).min(last);
        let mut best = lo;
        for i in lo + 1..=hi {
            if (y - levels[i]).abs() < (y - levels[best]).abs() {
                best = i;
            }
        }
        best as u8
    }

    /// `m <value>`, `M <value>`, `bits <n>`, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "m {:?}", self.m).unwrap();
        writeln!(s, "M {:?}", self.max).unwrap();
        writeln!(s, "bits {}", self.bits).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (mut m, mut max, mut bits) = (None, None, None);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            let (Some(k), Some(v), None) = (it.next(), it.next(), it.next()) else {
                return Err(DspError::Config(format!("bad codebook line {line:?}")));
            };
            let num = |v: &str| v.parse::<f64>().map_err(|_| DspError::Config(format!("bad number {v:?}")));
            match k {
                "m" => m = Some(num(v)?),
                "M" => max = Some(num(v)?),
                "bits" => bits = Some(v.parse().map_err(|_| DspError::Config(format!("bad bits {v:?}")))?),
                _ => return Err(DspError::Config(format!("unknown codebook key {k:?}"))),
            }
        }
        match (m, max, bits) {
            (Some(m), Some(max), Some(bits)) => Self::new(m, max, bits),
            _ => Err(DspError::Config("codebook needs m, M and bits".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::tensorfile::io_err(path, e))?;
        Self::from_text(&text)
    }
}

/// Global min/max over every cell of every spec.
pub fn fit_codebook<'a>(specs: impl IntoIterator<Item = &'a MelSpec>, bits: u32) -> Result<DMelCodebook> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in specs {
        for &v in &s.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return Err(DspError::EmptyInput("no mel cells to fit a codebook on".into()));
    }
    DMelCodebook::new(lo, hi, bits)
}

/// Discrete speech frames, `T^s × F` row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DMelSeq {
    indices: Vec<u8>,
    n_frames: usize,
    n_channels: usize,
    frame_hop_us: u64,
}

impl DMelSeq {
    pub fn new(indices: Vec<u8>, n_frames: usize, n_channels: usize, frame_hop_seconds: f64) -> Result<Self> {
        if indices.len() != n_frames * n_channels {
            return Err(DspError::Shape(format!(
                "{} indices for {n_frames}x{n_channels}",
                indices.len()
            )));
        }
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= LEVELS) {
            return Err(DspError::CorruptSequence(format!("index {bad} >= {LEVELS}")));
        }
        Ok(Self {
            indices,
            n_frames,
            n_channels,
            frame_hop_us: (frame_hop_seconds * 1e6).round() as u64,
        })
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn frame_hop_seconds(&self) -> f64 {
        self.frame_hop_us as f64 / 1e6
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.indices[t * self.n_channels..(t + 1) * self.n_channels]
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(TENSOR_MAGIC);
        let data = self.indices.iter().map(|&i| i as i32).collect();
        f.push("dmel", vec![self.n_frames, self.n_channels], TensorData::I32(data))
            .expect("shape checked at construction");
        f.meta = serde_json::json!({ "frame_hop_seconds": self.frame_hop_seconds() });
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let e = f.get("dmel")?;
        let TensorData::I32(v) = &e.data else {
            return Err(DspError::Shape("dmel entry must be i32".into()));
        };
        if e.shape.len() != 2 {
            return Err(DspError::Shape(format!("dmel shape {:?}", e.shape)));
        }
        let mut idx = Vec::with_capacity(v.len());
        for &x in v {
            if !(0..LEVELS as i32).contains(&x) {
                return Err(DspError::CorruptSequence(format!("index {x} out of range")));
            }
            idx.push(x as u8);
        }
        let hop = f.meta["frame_hop_seconds"].as_f64().unwrap_or(0.025);
        Self::new(idx, e.shape[0], e.shape[1], hop)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(self.to_tensor_file().write(path)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path, TENSOR_MAGIC)?)
    }
}

pub fn discretize(spec: &MelSpec, cb: &DMelCodebook) -> Result<DMelSeq> {
    if cb.n_levels() != LEVELS {
        return Err(DspError::Config(format!("dMel sequences need {LEVELS} levels")));
    }
    let levels = cb.levels();
    let indices = spec.values.iter().map(|&y| cb.quantize(&levels, y)).collect();
    DMelSeq::new(indices, spec.n_frames, spec.n_mels, spec.frame_hop_seconds)
}

pub fn invert(seq: &DMelSeq, cb: &DMelCodebook) -> Result<MelSpec> {
    let levels = cb.levels();
    let mut values = Vec::with_capacity(seq.indices.len());
    for &i in &seq.indices {
        let c = levels
            .get(i as usize)
            .ok_or_else(|| DspError::CorruptSequence(format!("index {i} >= {}", levels.len())))?;
        values.push(*c);
    }
    MelSpec::new(values, seq.n_frames, seq.n_channels, seq.frame_hop_seconds())
}

/// Waveform estimate from a log-mel spectrogram.
///
/// Mel energies map back to linear power through the filterbank
/// pseudo-inverse (negative values clamped to zero). Phases start from a fixed
/// seed, so the output is deterministic. Returns the signal and the final
/// spectral-convergence residual `‖A − |STFT(x)|‖ / ‖A‖`.
pub fn griffin_lim_with_residual(spec: &MelSpec, cfg: &MelConfig, iterations: usize) -> Result<(AudioSignal, f64)> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(DspError::Config("iterations must be at least 1".into()));
    }
    if spec.n_mels != cfg.n_mels {
        return Err(DspError::Shape(format!("spec has {} mels, config {}", spec.n_mels, cfg.n_mels)));
    }
    let n_bins = cfg.n_bins();
    let fb = DMatrix::from_row_slice(cfg.n_mels, n_bins, &mel_filterbank(cfg));
    let pinv = fb
        .pseudo_inverse(1e-10)
        .map_err(|e| DspError::Config(format!("filterbank pseudo-inverse: {e}")))?;
    let floor_ln = cfg.log_floor.ln();
    let t_frames = spec.n_frames;
    let mut target = vec![0.0; t_frames * n_bins];
    for t in 0..t_frames {
        let energies = nalgebra::DVector::from_iterator(
            cfg.n_mels,
            spec.frame(t).iter().map(|&v| if v <= floor_ln { 0.0 } else { v.exp() }),
        );
        let lin = &pinv * energies;
        for k in 0..n_bins {
            target[t * n_bins + k] = lin[k].max(0.0).sqrt();
        }
    }

    let n_samples = if t_frames == 0 { 0 } else { (t_frames - 1) * cfg.hop_len + cfg.window_len };
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(cfg.fft_size);
    let inv = planner.plan_fft_inverse(cfg.fft_size);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c_696d);
    let mut phase: Vec<Complex<f64>> = (0..t_frames * n_bins)
        .map(|_| Complex::from_polar(1.0, rng.random::<f64>() * std::f64::consts::TAU))
        .collect();
    let mut signal = vec![0.0; n_samples];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];

    let overlap: Vec<f64> = {
        let mut c = vec![0.0; n_samples];
        for t in 0..t_frames {
            for v in &mut c[t * cfg.hop_len..t * cfg.hop_len + cfg.window_len] {
                *v += 1.0;
            }
        }
        c
    };
    let analyse = |x: &[f64], buf: &mut Vec<Complex<f64>>, t: usize| {
        for (i, b) in buf.iter_mut().enumerate() {
            let v = if i < cfg.window_len { x[t * cfg.hop_len + i] } else { 0.0 };
            *b = Complex::new(v, 0.0);
        }
        fwd.process(buf);
    };

    for _ in 0..iterations {
        signal.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..t_frames {
            for k in 0..n_bins {
                buf[k] = phase[t * n_bins + k] * target[t * n_bins + k];
            }
            for k in n_bins..cfg.fft_size {
                buf[k] = buf[cfg.fft_size - k].conj();
            }
            buf[0].im = 0.0;
            if cfg.fft_size % 2 == 0 {
                buf[cfg.fft_size / 2].im = 0.0;
            }
            inv.process(&mut buf);
            let scale = 1.0 / cfg.fft_size as f64;
            for i in 0..cfg.window_len {
                signal[t * cfg.hop_len + i] += buf[i].re * scale;
            }
        }
        for (s, c) in signal.iter_mut().zip(&overlap) {
            *s /= c;
        }
        for t in 0..t_frames {
            analyse(&signal, &mut buf, t);
            for k in 0..n_bins {
                let z = buf[k];
                let n = z.norm();
                phase[t * n_bins + k] = if n > 1e-12 { z / n } else { Complex::new(1.0, 0.0) };
            }
        }
    }

    for s in &mut signal {
        *s = s.clamp(-1.0, 1.0);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..t_frames {
        analyse(&signal, &mut buf, t);
        for k in 0..n_bins {
            let a = target[t * n_bins + k];
            num += (a - buf[k].norm()).powi(2);
            den += a * a;
        }
    }
    let residual = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
    Ok((AudioSignal::new(signal, cfg.sample_rate)?, residual))
}

pub fn griffin_lim(spec: &MelSpec, cfg: &MelConfig, iterations: usize) -> Result<AudioSignal> {
    griffin_lim_with_residual(spec, cfg, iterations).map(|(a, _)| a)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn sine(freq: f64, n: usize, amp: f64) -> AudioSignal {
        let s = (0..n)
            .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / 16000.0).sin())
            .collect();
        AudioSignal::new(s, 16000).unwrap()
    }

    fn spec_from(values: Vec<f64>, t: usize, f: usize) -> MelSpec {
        MelSpec::new(values, t, f, 0.025).unwrap()
    }

    #[test]
    fn frame_count_and_silence() {
        let cfg = MelConfig::default();
        let a = AudioSignal::new(vec![0.0; 16000], 16000).unwrap();
        let s = compute_logmel(&a, &cfg).unwrap();
        assert_eq!(s.n_frames(), 40);
        assert!(s.values().iter().all(|&v| v == 1e-5f64.ln()));
        let short = AudioSignal::new(vec![0.0; 399], 16000).unwrap();
        assert!(matches!(compute_logmel(&short, &cfg), Err(DspError::EmptyInput(_))));
    }

    /// Naive DFT of one zero-padded frame plus explicit triangle sums.
    fn oracle_frame(x: &[f64], cfg: &MelConfig) -> Vec<f64> {
        let pts = mel_points_hz(cfg);
        let n = cfg.fft_size;
        let mut out = Vec::new();
        let power: Vec<f64> = (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &v) in x.iter().enumerate() {
                    let ang = -std::f64::consts::TAU * (k * i) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        for m in 0..cfg.n_mels {
            let mut e = 0.0;
            for (k, p) in power.iter().enumerate() {
                let f = k as f64 * 16000.0 / n as f64;
                let up = (f - pts[m]) / (pts[m + 1] - pts[m]);
                let down = (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]);
                let w = up.min(down).max(0.0) * 2.0 / (pts[m + 2] - pts[m]);
                e += w * p;
            }
            out.push(e.max(cfg.log_floor).ln());
        }
        out
    }

    #[test]
    fn sine_peaks_at_nearest_mel_bin() {
        let cfg = MelConfig::default();
        let a = sine(1000.0, 1600, 0.5);
        let s = compute_logmel(&a, &cfg).unwrap();
        let centers = &mel_points_hz(&cfg)[1..=cfg.n_mels];
        let nearest = (0..cfg.n_mels)
            .min_by(|&i, &j| (centers[i] - 1000.0).abs().total_cmp(&(centers[j] - 1000.0).abs()))
            .unwrap();
        for t in 0..s.n_frames() {
            let want = oracle_frame(&a.samples()[t * 400..t * 400 + 400], &cfg);
            for (x, y) in s.frame(t).iter().zip(&want) {
                assert!((x - y).abs() < 1e-9);
            }
            let argmax = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
            assert_eq!(argmax(s.frame(t)), argmax(&want));
            assert_eq!(argmax(s.frame(t)), nearest);
        }
    }

    #[test]
    fn logmel_is_deterministic() {
        let cfg = MelConfig::default();
        let a = sine(440.0, 4000, 0.3);
        let x = compute_logmel(&a, &cfg).unwrap();
        let y = compute_logmel(&a, &cfg).unwrap();
        assert_eq!(
            x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn codebook_endpoints() {
        let s = spec_from(vec![-2.0, 0.0, 2.0], 1, 3);
        let cb = fit_codebook([&s], 4).unwrap();
        assert_eq!((cb.m, cb.max), (-2.0, 2.0));
        assert!((cb.delta() - 4.0 / 15.0).abs() < 1e-15);
        let lv = cb.levels();
        assert_eq!((lv[0], lv[15]), (-2.0, 2.0));

        let a = spec_from(vec![-3.0, 1.0], 1, 2);
        let b = spec_from(vec![-1.0, 5.0], 1, 2);
        let cb = fit_codebook([&a, &b], 4).unwrap();
        assert_eq!((cb.m, cb.max), (-3.0, 5.0));
        let cb2 = fit_codebook([&b, &a], 4).unwrap();
        assert_eq!(cb, cb2);

        let flat = spec_from(vec![1.0, 1.0], 1, 2);
        assert!(matches!(fit_codebook([&flat], 4), Err(DspError::DegenerateRange(_))));
    }

    #[test]
    fn codebook_matches_flat_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let specs: Vec<MelSpec> = (0..100)
            .map(|_| {
                let t = rng.random_range(1..6);
                spec_from((0..t * 4).map(|_| rng.random_range(-20.0..10.0)).collect(), t, 4)
            })
            .collect();
        let cb = fit_codebook(&specs, 4).unwrap();
        let all: Vec<f64> = specs.iter().flat_map(|s| s.values().to_vec()).collect();
        assert_eq!(cb.m, all.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(cb.max, all.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn discretize_endpoints_and_ties() {
        let cb = DMelCodebook::new(0.0, 15.0, 4).unwrap();
        let s = spec_from(vec![0.0, 15.0, 3.5, -4.0, 99.0, 4.5000001], 1, 6);
        let d = discretize(&s, &cb).unwrap();
        assert_eq!(d.indices(), &[0, 15, 3, 0, 15, 5]);
    }

    #[test]
    fn discretize_matches_exhaustive_scan() {
        let cb = DMelCodebook::new(-11.5, 3.2, 4).unwrap();
        let lv = cb.levels();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..5000).map(|_| rng.random_range(-13.0..5.0)).collect();
        let d = discretize(&spec_from(vals.clone(), 1000, 5), &cb).unwrap();
        for (y, &got) in vals.iter().zip(d.indices()) {
            let mut best = 0;
            for i in 1..16 {
                if (y - lv[i]).abs() < (y - lv[best]).abs() {
                    best = i;
                }
            }
            assert_eq!(got as usize, best);
        }
    }

    #[test]
    fn invert_cases() {
        let cb = DMelCodebook::new(-4.0, 2.0, 4).unwrap();
        let seq = DMelSeq::new(vec![0; 6], 2, 3, 0.025).unwrap();
        assert!(invert(&seq, &cb).unwrap().values().iter().all(|&v| v == -4.0));
        assert!(DMelSeq::new(vec![16], 1, 1, 0.025).is_err());
        let bad = DMelCodebook::new(0.0, 1.0, 2).unwrap();
        let seq = DMelSeq::new(vec![9], 1, 1, 0.025).unwrap();
        assert!(matches!(invert(&seq, &bad), Err(DspError::CorruptSequence(_))));
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(
            lo in -20.0f64..0.0, width in 0.1f64..30.0,
            fracs in prop::collection::vec(0.0f64..=1.0, 1..64)
        ) {
            let cb = DMelCodebook::new(lo, lo + width, 4).unwrap();
            let vals: Vec<f64> = fracs.iter().map(|f| lo + f * width).collect();
            let n = vals.len();
            let s = spec_from(vals.clone(), n, 1);
            let back = invert(&discretize(&s, &cb).unwrap(), &cb).unwrap();
            for (a, b) in vals.iter().zip(back.values()) {
                prop_assert!((a - b).abs() <= (cb.max - cb.m) / 30.0);
            }
        }

        #[test]
        fn indices_survive_invert(idx in prop::collection::vec(0u8..16, 1..64)) {
            let cb = DMelCodebook::new(-7.0, 1.5, 4).unwrap();
            let n = idx.len();
            let seq = DMelSeq::new(idx, n, 1, 0.025).unwrap();
            prop_assert_eq!(discretize(&invert(&seq, &cb).unwrap(), &cb).unwrap(), seq);
        }
    }

    #[test]
    fn codebook_text_round_trip() {
        let cb = DMelCodebook::new(-11.512925464970229, 2.0, 4).unwrap();
        assert_eq!(DMelCodebook::from_text(&cb.to_text()).unwrap(), cb);
        assert!(DMelCodebook::from_text("m 1\nM 2\n").is_err());
    }

    #[test]
    fn griffin_lim_silence() {
        let cfg = MelConfig::default();
        let s = spec_from(vec![1e-5f64.ln(); 10 * 80], 10, 80);
        let a = griffin_lim(&s, &cfg, 5).unwrap();
        assert_eq!(a.samples().len(), 4000);
        assert!(a.rms() < 1e-3);
    }

    fn dominant_bin(x: &[f64], n: usize) -> usize {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> = (0..n).map(|i| Complex::new(*x.get(i).unwrap_or(&0.0), 0.0)).collect();
        fft.process(&mut buf);
        (0..=n / 2).max_by(|&i, &j| buf[i].norm().total_cmp(&buf[j].norm())).unwrap()
    }

    #[test]
    fn griffin_lim_keeps_the_tone_and_converges() {
        let cfg = MelConfig::default();
        let a = sine(1000.0, 8000, 0.5);
        let s = compute_logmel(&a, &cfg).unwrap();
        let (one, r1) = griffin_lim_with_residual(&s, &cfg, 1).unwrap();
        let (sixty, r60) = griffin_lim_with_residual(&s, &cfg, 60).unwrap();
        assert!(r60 < r1, "{r60} vs {r1}");
        assert_eq!(one.samples().len(), 8000);
        let n = 8192;
        let want = dominant_bin(a.samples(), n);
        let got = dominant_bin(sixty.samples(), n);
        let bin_per_fft_bin = n / cfg.fft_size;
        assert!(want.abs_diff(got) <= bin_per_fft_bin, "{want} vs {got}");
    }
}
