//! Deterministic toy corpus: text decides what is said, video decides when.
//!
//! Each character of a fixed alphabet owns an `L × F` dMel template. A sample
//! places its characters, in order, into the speech frames covered by the
//! active spans of a speak/pause video track. Speech outside the spans is the
//! all-zero silence frame.

use std::fs;
use std::hash::Hasher;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meldsp::{DMelCodebook, DMelSeq, DspError, LEVELS};
use crate::timesync::{parse_alignment, AlignmentSource, PhonemeAlignment, PhonemeSegment, TimeSyncError};
use crate::tokenizers::{
    build_char_vocab, load_video_tokens, tokenize, CharVocab, SpeakerVector, TextTokens, TokenizerError,
    VideoTokenGrid,
};

pub const SPEECH_FRAME_SECONDS: f64 = 0.025;
const VOICED_LEVELS: u8 = LEVELS as u8 - 1;
const MAX_TEMPLATE_TRIES: usize = 1000;
const MAX_TIMING_TRIES: usize = 200;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid toy-world config: {0}")]
    Config(String),
    #[error("infeasible timing: {0}")]
    InfeasibleTiming(String),
    #[error("invalid text: {0}")]
    Text(String),
    #[error("unknown speaker {0}")]
    Speaker(usize),
    #[error("corpus format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Alignment(#[from] TimeSyncError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyWorldConfig {
    pub alphabet_size: usize,
    /// Speech frames per character template.
    pub template_len: usize,
    pub video_codebook: u32,
    pub grid: [usize; 2],
    pub n_speakers: usize,
    pub n_channels: usize,
    pub pause_token_threshold: u32,
    pub min_video_frames: usize,
    pub max_video_frames: usize,
    pub max_spans: usize,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            alphabet_size: 12,
            template_len: 4,
            video_codebook: 32,
            grid: [4, 4],
            n_speakers: 4,
            n_channels: 16,
            pause_token_threshold: 16,
            min_video_frames: 20,
            max_video_frames: 60,
            max_spans: 3,
            seed: 0,
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if !(1..=26).contains(&self.alphabet_size) {
            return bad(format!("alphabet_size {} outside 1..=26", self.alphabet_size));
        }
        if self.template_len == 0 {
            return bad("template_len must be at least 1".into());
        }
        if self.n_channels < 4 {
            return bad(format!("n_channels {} < 4", self.n_channels));
        }
        if self.n_speakers == 0 {
            return bad("n_speakers must be at least 1".into());
        }
        if self.grid[0] == 0 || self.grid[1] == 0 {
            return bad(format!("empty grid {:?}", self.grid));
        }
        if self.pause_token_threshold == 0 || self.pause_token_threshold >= self.video_codebook {
            return bad(format!(
                "pause_token_threshold {} must lie in 1..{}",
                self.pause_token_threshold, self.video_codebook
            ));
        }
        if self.min_video_frames < 3 || self.min_video_frames > self.max_video_frames {
            return bad(format!(
                "video frame range {}..={} is empty or shorter than one span",
                self.min_video_frames, self.max_video_frames
            ));
        }
        if self.max_spans == 0 {
            return bad("max_spans must be at least 1".into());
        }
        Ok(())
    }

    /// Minimum Hamming distance between templates of different characters.
    pub fn min_template_distance(&self) -> usize {
        self.template_len * self.n_channels / 4
    }

    /// Mismatching channels tolerated when reading a frame back.
    pub fn row_tolerance(&self) -> usize {
        self.n_channels / 8
    }

    /// Channels that carry the speaker offset.
    pub fn offset_channels(&self) -> usize {
        self.n_channels / 4
    }
}

/// Half-open video-frame spans during which the speaker is talking.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingPattern {
    pub video_frames: usize,
    pub spans: Vec<[usize; 2]>,
}

impl TimingPattern {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0;
        for &[a, b] in &self.spans {
            if a >= b || a < prev || b > self.video_frames {
                return Err(SynthError::InfeasibleTiming(format!(
                    "span [{a}, {b}) is empty, overlapping or outside {} frames",
                    self.video_frames
                )));
            }
            prev = b;
        }
        Ok(())
    }

    pub fn speech_frames(&self) -> usize {
        speech_frame_ceil(self.video_frames)
    }

    /// Speech-frame spans: video frame `v` maps to speech frames with `⌊5t/8⌋ = v`.
    pub fn speech_spans(&self) -> Vec<[usize; 2]> {
        self.spans
            .iter()
            .map(|&[a, b]| [speech_frame_ceil(a), speech_frame_ceil(b)])
            .collect()
    }

    pub fn is_active(&self, video_frame: usize) -> bool {
        self.spans.iter().any(|&[a, b]| (a..b).contains(&video_frame))
    }
}

/// `⌈v · 0.040 / 0.025⌉`.
fn speech_frame_ceil(v: usize) -> usize {
    (8 * v).div_ceil(5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub id: String,
    pub text: String,
    pub tokens: TextTokens,
    pub video: VideoTokenGrid,
    pub speech: DMelSeq,
    pub speaker_id: usize,
    pub speaker: SpeakerVector,
    pub alignment: PhonemeAlignment,
    pub timing: TimingPattern,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld {
    config: ToyWorldConfig,
    alphabet: Vec<char>,
    vocab: CharVocab,
    /// `P` templates, each `L × F` row-major.
    templates: Vec<Vec<u8>>,
    /// Per-speaker additive offset on the first `F/4` channels.
    offsets: Vec<Vec<u8>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

struct SeedHasher(FnvHasher);

impl SeedHasher {
    fn new(tag: &str) -> Self {
        let mut h = FnvHasher::default();
        h.write(tag.as_bytes());
        Self(h)
    }

    fn u64(mut self, x: u64) -> Self {
        self.0.write_u64(x);
        self
    }

    fn bytes(mut self, b: &[u8]) -> Self {
        self.0.write_usize(b.len());
        self.0.write(b);
        self
    }

    fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0.finish())
    }
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Voiced values stay in `1..=15`, so offsets rotate within that range.
fn shift_level(v: u8, off: u8) -> u8 {
    if v == 0 {
        0
    } else {
        1 + (v - 1 + off) % VOICED_LEVELS
    }
}

pub fn make_world(cfg: &ToyWorldConfig) -> Result<ToyWorld> {
    cfg.validate()?;
    let alphabet: Vec<char> = (b'a'..).take(cfg.alphabet_size).map(char::from).collect();
    let vocab = build_char_vocab([alphabet.iter().collect::<String>().as_str()])?;
    let (l, f) = (cfg.template_len, cfg.n_channels);

    let mut rng = SeedHasher::new("world").u64(cfg.seed).rng();
    let mut offsets = vec![vec![0u8; f]];
    for _ in 1..cfg.n_speakers {
        let mut o = vec![0u8; f];
        for x in &mut o[..cfg.offset_channels()] {
            *x = rng.random_range(1..VOICED_LEVELS);
        }
        offsets.push(o);
    }

    for _ in 0..MAX_TEMPLATE_TRIES {
        let templates: Vec<Vec<u8>> = (0..cfg.alphabet_size)
            .map(|_| (0..l * f).map(|_| rng.random_range(1..=VOICED_LEVELS)).collect())
            .collect();
        let world = ToyWorld {
            config: cfg.clone(),
            alphabet: alphabet.clone(),
            vocab: vocab.clone(),
            templates,
            offsets: offsets.clone(),
        };
        if world.min_pairwise_distance() >= cfg.min_template_distance()
            && world.min_row_distance() > 2 * cfg.row_tolerance()
        {
            return Ok(world);
        }
    }
    Err(SynthError::Config(format!(
        "no template set with distance {} after {MAX_TEMPLATE_TRIES} draws",
        cfg.min_template_distance()
    )))
}

impl ToyWorld {
    pub fn config(&self) -> &ToyWorldConfig {
        &self.config
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn templates(&self) -> &[Vec<u8>] {
        &self.templates
    }

    pub fn speaker_offset(&self, speaker: usize) -> &[u8] {
        &self.offsets[speaker]
    }

    pub fn silence_frame(&self) -> Vec<u8> {
        vec![0; self.config.n_channels]
    }

    pub fn speaker_vector(&self, speaker: usize) -> Result<SpeakerVector> {
        if speaker >= self.config.n_speakers {
            return Err(SynthError::Speaker(speaker));
        }
        let seed = SeedHasher::new("speaker").u64(self.config.seed).u64(speaker as u64).0.finish();
        Ok(SpeakerVector::random_unit(seed))
    }

    /// Template of character index `c` as voiced by `speaker`.
    pub fn voiced_template(&self, c: usize, speaker: usize) -> Vec<u8> {
        let f = self.config.n_channels;
        let off = &self.offsets[speaker];
        self.templates[c]
            .iter()
            .enumerate()
            .map(|(i, &v)| shift_level(v, off[i % f]))
            .collect()
    }

    /// Smallest distance between templates of different characters over all
    /// speaker pairings.
    pub fn min_pairwise_distance(&self) -> usize {
        let voiced: Vec<Vec<Vec<u8>>> = (0..self.templates.len())
            .map(|c| (0..self.offsets.len()).map(|s| self.voiced_template(c, s)).collect())
            .collect();
        let mut best = usize::MAX;
        for p in 0..voiced.len() {
            for q in p + 1..voiced.len() {
                for a in &voiced[p] {
                    for b in &voiced[q] {
                        best = best.min(hamming(a, b));
                    }
                }
            }
        }
        best
    }

    /// `(character, row, values)` for every row of every voiced template.
    fn template_rows(&self) -> Vec<(usize, usize, Vec<u8>)> {
        let f = self.config.n_channels;
        let mut rows = Vec::new();
        for c in 0..self.templates.len() {
            for s in 0..self.offsets.len() {
                let t = self.voiced_template(c, s);
                rows.extend(t.chunks(f).enumerate().map(|(r, row)| (c, r, row.to_vec())));
            }
        }
        rows
    }

    /// Smallest distance between template rows of different characters over
    /// all speakers.
    pub fn min_row_distance(&self) -> usize {
        let rows = self.template_rows();
        let mut best = usize::MAX;
        for (i, a) in rows.iter().enumerate() {
            for b in rows[i + 1..].iter().filter(|b| b.0 != a.0) {
                best = best.min(hamming(&a.2, &b.2));
            }
        }
        best
    }

    fn char_index(&self, c: char) -> Option<usize> {
        self.alphabet.iter().position(|&a| a == c)
    }

    /// Characters per span: one each, then the rest by largest remaining
    /// quota (proportional to span length), never exceeding `⌊S/L⌋`.
    fn allocate(&self, n_chars: usize, speech_spans: &[[usize; 2]]) -> Result<Vec<usize>> {
        let l = self.config.template_len;
        let k = speech_spans.len();
        if n_chars == 0 && k == 0 {
            return Ok(Vec::new());
        }
        if n_chars < k {
            return Err(SynthError::InfeasibleTiming(format!("{k} active spans but only {n_chars} characters")));
        }
        let lens: Vec<usize> = speech_spans.iter().map(|&[a, b]| b - a).collect();
        let caps: Vec<usize> = lens.iter().map(|&s| s / l).collect();
        if let Some(i) = caps.iter().position(|&c| c == 0) {
            return Err(SynthError::InfeasibleTiming(format!(
                "span {i} has {} speech frames, shorter than one {l}-frame character",
                lens[i]
            )));
        }
        if caps.iter().sum::<usize>() < n_chars {
            return Err(SynthError::InfeasibleTiming(format!(
                "{n_chars} characters need {} speech frames, spans hold {}",
                n_chars * l,
                lens.iter().sum::<usize>()
            )));
        }
        let total: usize = lens.iter().sum();
        let quota: Vec<f64> = lens.iter().map(|&s| (n_chars * s) as f64 / total as f64).collect();
        let mut alloc = vec![1; k];
        for _ in k..n_chars {
            let i = (0..k)
                .filter(|&i| alloc[i] < caps[i])
                .max_by(|&a, &b| {
                    let (ra, rb) = (quota[a] - alloc[a] as f64, quota[b] - alloc[b] as f64);
                    ra.total_cmp(&rb).then(b.cmp(&a))
                })
                .expect("capacity checked above");
            alloc[i] += 1;
        }
        Ok(alloc)
    }

    pub fn make_sample(&self, text: &str, timing: &TimingPattern, speaker_id: usize) -> Result<ToySample> {
        self.make_sample_with_id(String::new(), text, timing, speaker_id)
    }

    fn make_sample_with_id(
        &self,
        id: String,
        text: &str,
        timing: &TimingPattern,
        speaker_id: usize,
    ) -> Result<ToySample> {
        let cfg = &self.config;
        if speaker_id >= cfg.n_speakers {
            return Err(SynthError::Speaker(speaker_id));
        }
        let chars: Vec<usize> = text
            .chars()
            .map(|c| self.char_index(c).ok_or_else(|| SynthError::Text(format!("{c:?} is not in the alphabet"))))
            .collect::<Result<_>>()?;
        timing.validate()?;
        let speech_spans = timing.speech_spans();
        let alloc = self.allocate(chars.len(), &speech_spans)?;

        let (l, f) = (cfg.template_len, cfg.n_channels);
        let n_speech = timing.speech_frames();
        let mut speech = vec![0u8; n_speech * f];
        let mut segments = Vec::with_capacity(chars.len());
        let mut next = chars.iter();
        for (&[s0, s1], &n) in speech_spans.iter().zip(&alloc) {
            for j in 0..n {
                let c = *next.next().expect("allocation sums to text length");
                let tpl = self.voiced_template(c, speaker_id);
                let start = s0 + j * l;
                let end = if j + 1 == n { s1 } else { start + l };
                for t in start..end {
                    let row = (t - start).min(l - 1);
                    speech[t * f..(t + 1) * f].copy_from_slice(&tpl[row * f..(row + 1) * f]);
                }
                segments.push(PhonemeSegment {
                    label: self.alphabet[c].to_string(),
                    start: start as f64 * SPEECH_FRAME_SECONDS,
                    end: end as f64 * SPEECH_FRAME_SECONDS,
                });
            }
        }

        let mut rng = SeedHasher::new("sample")
            .u64(cfg.seed)
            .bytes(text.as_bytes())
            .u64(timing.video_frames as u64)
            .bytes(&timing.spans.iter().flat_map(|s| s.map(|x| x as u32)).flat_map(u32::to_le_bytes).collect::<Vec<_>>())
            .u64(speaker_id as u64)
            .rng();
        let cells = cfg.grid[0] * cfg.grid[1];
        let mut video = Vec::with_capacity(timing.video_frames * cells);
        for v in 0..timing.video_frames {
            let range = if timing.is_active(v) {
                cfg.pause_token_threshold..cfg.video_codebook
            } else {
                0..cfg.pause_token_threshold
            };
            video.extend((0..cells).map(|_| rng.random_range(range.clone())));
        }

        Ok(ToySample {
            id,
            text: text.to_string(),
            tokens: tokenize(text, &self.vocab),
            video: VideoTokenGrid::new(video, timing.video_frames, cfg.grid[0], cfg.grid[1], cfg.video_codebook)?,
            speech: DMelSeq::new(speech, n_speech, f, SPEECH_FRAME_SECONDS)?,
            speaker_id,
            speaker: self.speaker_vector(speaker_id)?,
            alignment: PhonemeAlignment::new(segments, AlignmentSource::GroundTruth)?,
            timing: timing.clone(),
        })
    }

    /// Sample `index` of `split`: distinct characters, 1 to `max_spans`
    /// spans of at least 3 video frames, and a random speaker.
    pub fn random_sample(&self, split: Split, index: usize) -> Result<ToySample> {
        let cfg = &self.config;
        let mut rng = SeedHasher::new(split.as_str()).u64(cfg.seed).u64(index as u64).rng();
        let tv = rng.random_range(cfg.min_video_frames..=cfg.max_video_frames);
        let max_chars = (tv / 8).clamp(1, cfg.alphabet_size);
        let mut n_chars = rng.random_range(1..=max_chars);
        let speaker = rng.random_range(0..cfg.n_speakers);
        let mut letters = self.alphabet.clone();
        letters.shuffle(&mut rng);

        loop {
            let text: String = letters[..n_chars].iter().collect();
            let max_k = cfg.max_spans.min(n_chars).min((tv + 1) / 4);
            for _ in 0..MAX_TIMING_TRIES {
                let k = rng.random_range(1..=max_k);
                let timing = random_timing(&mut rng, tv, k);
                let spans = timing.speech_spans();
                if self.allocate(n_chars, &spans).is_ok() {
                    let id = format!("{}-{index:05}", split.as_str());
                    return self.make_sample_with_id(id, &text, &timing, speaker);
                }
            }
            if n_chars == 1 {
                return Err(SynthError::InfeasibleTiming(format!("no timing found for {tv} video frames")));
            }
            n_chars -= 1;
        }
    }

    pub fn make_corpus(&self, n_train: usize, n_eval: usize) -> Result<ToyCorpus> {
        Ok(ToyCorpus {
            train: (0..n_train).map(|i| self.random_sample(Split::Train, i)).collect::<Result<_>>()?,
            eval: (0..n_eval).map(|i| self.random_sample(Split::Eval, i)).collect::<Result<_>>()?,
        })
    }

    /// Frame-level reader. Each voiced frame is matched to the nearest
    /// template row over all speakers and accepted within `F/8` mismatches;
    /// other frames are skipped. A new character starts after silence, on a
    /// change of character, or when the row index moves backwards.
    pub fn decode_content(&self, speech: &DMelSeq) -> String {
        let rows = self.template_rows();
        let tol = self.config.row_tolerance();
        let mut out = String::new();
        let mut prev: Option<(usize, usize)> = None;
        for t in 0..speech.n_frames() {
            let frame = speech.frame(t);
            if frame.iter().all(|&v| v == 0) {
                prev = None;
                continue;
            }
            let (d, c, r) = rows
                .iter()
                .map(|(c, r, row)| (hamming(frame, row), *c, *r))
                .min()
                .expect("alphabet is non-empty");
            if d > tol {
                continue;
            }
            if prev.is_none_or(|(pc, pr)| pc != c || r < pr) {
                out.push(self.alphabet[c]);
            }
            prev = Some((c, r));
        }
        out
    }
}

pub fn random_timing(rng: &mut impl Rng, video_frames: usize, n_spans: usize) -> TimingPattern {
    let k = n_spans;
    let inner_gaps = k.saturating_sub(1);
    let lo = (3 * k).max(video_frames / 2);
    let hi = video_frames.saturating_sub(inner_gaps).max(lo);
    let active = rng.random_range(lo..=hi);
    let lens = composition(rng, active, k, 3);
    let mut gaps = composition(rng, video_frames - active - inner_gaps, k + 1, 0);
    for g in &mut gaps[1..k] {
        *g += 1;
    }
    let mut spans = Vec::with_capacity(k);
    let mut v = gaps[0];
    for i in 0..k {
        spans.push([v, v + lens[i]]);
        v += lens[i] + gaps[i + 1];
    }
    TimingPattern { video_frames, spans }
}

/// Splits `total` into `parts` values of at least `min` each, uniformly
/// placing the surplus one unit at a time.
fn composition(rng: &mut impl Rng, total: usize, parts: usize, min: usize) -> Vec<usize> {
    let mut out = vec![min; parts];
    for _ in 0..total.saturating_sub(min * parts) {
        out[rng.random_range(0..parts)] += 1;
    }
    out
}

/// `max(0, 1 − lev(hyp, reference) / |reference|)` over characters.
pub fn content_accuracy(hyp: &str, reference: &str) -> f64 {
    let n = reference.chars().count();
    if n == 0 {
        return if hyp.is_empty() { 1.0 } else { 0.0 };
    }
    (1.0 - strsim::levenshtein(hyp, reference) as f64 / n as f64).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub train: Vec<ToySample>,
    pub eval: Vec<ToySample>,
}

/// One manifest line. Paths are relative to the corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub split: Split,
    pub text: String,
    pub speaker_id: usize,
    pub timing: TimingPattern,
    pub video: String,
    pub speech: String,
    pub align: String,
    pub speaker: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldRecord {
    config: ToyWorldConfig,
    templates: Vec<Vec<u8>>,
    offsets: Vec<Vec<u8>>,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Codebook matching the toy dMel range.
pub fn toy_codebook() -> DMelCodebook {
    DMelCodebook::new(1e-5f64.ln(), 2.0, 4).expect("constant range is valid")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serialises")
}

/// Writes the corpus layout: `manifest.jsonl`, `world.json`, `vocab.json`,
/// `codebook.txt` and per-sample files under `video/`, `speech/`, `align/`,
/// `speakers/`.
pub fn write_corpus(world: &ToyWorld, dir: &Path, n_train: usize, n_eval: usize) -> Result<Vec<CorpusRecord>> {
    for sub in ["video", "speech", "align", "speakers"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let record = WorldRecord {
        config: world.config.clone(),
        templates: world.templates.clone(),
        offsets: world.offsets.clone(),
    };
    write_file(&dir.join("world.json"), serde_json::to_string_pretty(&record).unwrap().as_bytes())?;
    write_file(&dir.join("vocab.json"), to_json(&world.vocab).as_bytes())?;
    write_file(&dir.join("codebook.txt"), toy_codebook().to_text().as_bytes())?;
    for s in 0..world.config.n_speakers {
        world
            .speaker_vector(s)?
            .to_tensor_file()
            .write(&dir.join(format!("speakers/{s}.vtt")))
            .map_err(TokenizerError::from)?;
    }

    let manifest_path = dir.join(MANIFEST);
    let mut manifest = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut records = Vec::with_capacity(n_train + n_eval);
    let jobs = (0..n_train).map(|i| (Split::Train, i)).chain((0..n_eval).map(|i| (Split::Eval, i)));
    for (split, i) in jobs {
        let s = world.random_sample(split, i)?;
        let rec = CorpusRecord {
            video: format!("video/{}.vtt", s.id),
            speech: format!("speech/{}.dmel", s.id),
            align: format!("align/{}.tsv", s.id),
            speaker: format!("speakers/{}.vtt", s.speaker_id),
            id: s.id.clone(),
            split,
            text: s.text.clone(),
            speaker_id: s.speaker_id,
            timing: s.timing.clone(),
        };
        s.video
            .to_tensor_file()
            .write(&dir.join(&rec.video))
            .map_err(TokenizerError::from)?;
        s.speech.write(&dir.join(&rec.speech))?;
        write_file(&dir.join(&rec.align), s.alignment.render().as_bytes())?;
        writeln!(manifest, "{}", to_json(&rec)).map_err(io_err(&manifest_path))?;
        records.push(rec);
    }
    Ok(records)
}

/// Reads `world.json` and checks it against a regenerated world.
pub fn load_world(dir: &Path) -> Result<ToyWorld> {
    let path = dir.join("world.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let rec: WorldRecord = serde_json::from_str(&text).map_err(|e| SynthError::Format(format!("world.json: {e}")))?;
    let world = make_world(&rec.config)?;
    if world.templates != rec.templates || world.offsets != rec.offsets {
        return Err(SynthError::Format("world.json templates do not match its config".into()));
    }
    Ok(world)
}

pub fn read_manifest(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| SynthError::Format(format!("manifest line {}: {e}", i + 1))))
        .collect()
}

/// Loads one manifest entry from disk. The text is re-tokenised with `vocab`.
pub fn load_sample(dir: &Path, rec: &CorpusRecord, vocab: &CharVocab) -> Result<ToySample> {
    let align_path = dir.join(&rec.align);
    let align = fs::read_to_string(&align_path).map_err(io_err(&align_path))?;
    let speaker = crate::tensorfile::TensorFile::read(&dir.join(&rec.speaker), crate::tensorfile::TENSOR_MAGIC)
        .map_err(TokenizerError::from)?;
    Ok(ToySample {
        id: rec.id.clone(),
        text: rec.text.clone(),
        tokens: tokenize(&rec.text, vocab),
        video: load_video_tokens(&dir.join(&rec.video))?,
        speech: DMelSeq::read(&dir.join(&rec.speech))?,
        speaker_id: rec.speaker_id,
        speaker: SpeakerVector::from_tensor_file(&speaker)?,
        alignment: parse_alignment(&align, AlignmentSource::GroundTruth)?,
        timing: rec.timing.clone(),
    })
}
