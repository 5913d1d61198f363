//! Text, video-grid and speaker inputs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorfile::{TensorData, TensorFile, TensorFileError, TENSOR_MAGIC};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corrupt video grid: {0}")]
    CorruptGrid(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid speaker vector: {0}")]
    Speaker(String),
    #[error("bad vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    File(#[from] TensorFileError),
}

pub type Result<T, E = TokenizerError> = std::result::Result<T, E>;

pub const SPEAKER_DIM: usize = 512;
pub const VIDEO_FRAME_SECONDS: f64 = 0.040;

/// Character vocabulary. Characters sorted by codepoint take ids `0..n`,
/// followed by PAD (`n`) and UNK (`n + 1`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRecord", into = "VocabRecord")]
pub struct CharVocab {
    chars: Vec<char>,
    ids: BTreeMap<char, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    chars: Vec<char>,
}

impl TryFrom<VocabRecord> for CharVocab {
    type Error = TokenizerError;

    fn try_from(r: VocabRecord) -> Result<Self> {
        let chars = r.chars;
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TokenizerError::Vocab("characters must be strictly ascending".into()));
        }
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        Ok(Self { chars, ids })
    }
}

impl From<CharVocab> for VocabRecord {
    fn from(v: CharVocab) -> Self {
        VocabRecord { chars: v.chars }
    }
}

impl CharVocab {
    /// K^t, including the two reserved ids.
    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn pad_id(&self) -> u32 {
        self.chars.len() as u32
    }

    pub fn unk_id(&self) -> u32 {
        self.chars.len() as u32 + 1
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.ids.get(&c).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

pub fn build_char_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<CharVocab> {
    let mut seen = false;
    let mut set = std::collections::BTreeSet::new();
    for s in corpus {
        seen = true;
        set.extend(s.chars());
    }
    if !seen {
        return Err(TokenizerError::EmptyCorpus);
    }
    let chars: Vec<char> = set.into_iter().collect();
    CharVocab::try_from(VocabRecord { chars })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TextTokens {
    pub ids: Vec<u32>,
}

impl TextTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str, vocab: &CharVocab) -> TextTokens {
    TextTokens {
        ids: text.chars().map(|c| vocab.id(c).unwrap_or(vocab.unk_id())).collect(),
    }
}

/// Inverse of [`tokenize`] on in-vocabulary text. PAD is dropped and UNK
/// renders as U+FFFD.
pub fn detokenize(tokens: &TextTokens, vocab: &CharVocab) -> String {
    tokens
        .ids
        .iter()
        .filter(|&&id| id != vocab.pad_id())
        .map(|&id| vocab.symbol(id).unwrap_or('\u{FFFD}'))
        .collect()
}

/// `T^v × H' × W'` codebook indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VideoTokenGrid {
    tokens: Vec<u32>,
    frames: usize,
    height: usize,
    width: usize,
    codebook_size: u32,
    frame_period_us: u64,
}

impl VideoTokenGrid {
    pub fn new(tokens: Vec<u32>, frames: usize, height: usize, width: usize, codebook_size: u32) -> Result<Self> {
        Self::with_period(tokens, frames, height, width, codebook_size, VIDEO_FRAME_SECONDS)
    }

    pub fn with_period(
        tokens: Vec<u32>,
        frames: usize,
        height: usize,
        width: usize,
        codebook_size: u32,
        frame_period_seconds: f64,
    ) -> Result<Self> {
        if tokens.len() != frames * height * width || height == 0 || width == 0 {
            return Err(TokenizerError::Shape(format!(
                "{} tokens for {frames}x{height}x{width}",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= codebook_size) {
            return Err(TokenizerError::CorruptGrid(format!("token {bad} >= K^v = {codebook_size}")));
        }
        if !(frame_period_seconds > 0.0) {
            return Err(TokenizerError::Shape("frame period must be positive".into()));
        }
        Ok(Self {
            tokens,
            frames,
            height,
            width,
            codebook_size,
            frame_period_us: (frame_period_seconds * 1e6).round() as u64,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn codebook_size(&self) -> u32 {
        self.codebook_size
    }

    pub fn frame_period_seconds(&self) -> f64 {
        self.frame_period_us as f64 / 1e6
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Row-major cells of frame `t`.
    pub fn frame(&self, t: usize) -> &[u32] {
        let c = self.cells();
        &self.tokens[t * c..(t + 1) * c]
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(TENSOR_MAGIC);
        let data = self.tokens.iter().map(|&t| t as i32).collect();
        f.push("video", vec![self.frames, self.height, self.width], TensorData::I32(data))
            .expect("shape checked at construction");
        f.meta = serde_json::json!({
            "codebook_size": self.codebook_size,
            "frame_period_seconds": self.frame_period_seconds(),
        });
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let e = f.get("video")?;
        let TensorData::I32(v) = &e.data else {
            return Err(TokenizerError::CorruptGrid("video payload must be integer".into()));
        };
        if e.shape.len() != 3 {
            return Err(TokenizerError::Shape(format!("video grid must be rank 3, got {:?}", e.shape)));
        }
        let k = f.meta["codebook_size"]
            .as_u64()
            .ok_or_else(|| TokenizerError::CorruptGrid("missing codebook_size".into()))? as u32;
        let period = f.meta["frame_period_seconds"].as_f64().unwrap_or(VIDEO_FRAME_SECONDS);
        let mut tokens = Vec::with_capacity(v.len());
        for &x in v {
            if x < 0 {
                return Err(TokenizerError::CorruptGrid(format!("negative token {x}")));
            }
            tokens.push(x as u32);
        }
        Self::with_period(tokens, e.shape[0], e.shape[1], e.shape[2], k, period)
    }
}

pub fn load_video_tokens(path: &Path) -> Result<VideoTokenGrid> {
    VideoTokenGrid::from_tensor_file(&TensorFile::read(path, TENSOR_MAGIC)?)
}

/// Average-pools each `H × W` frame (row-major values in `[0, 1]`) to the
/// `grid` shape and bins the pooled intensity into `k` uniform levels.
pub fn toy_quantize_video(
    frames: &[f64],
    shape: (usize, usize, usize),
    grid: (usize, usize),
    k: u32,
) -> Result<VideoTokenGrid> {
    let (t, h, w) = shape;
    let (gh, gw) = grid;
    if frames.len() != t * h * w {
        return Err(TokenizerError::Shape(format!("{} values for {t}x{h}x{w}", frames.len())));
    }
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(TokenizerError::Shape(format!("{h}x{w} frames do not divide into a {gh}x{gw} grid")));
    }
    let (bh, bw) = (h / gh, w / gw);
    let mut tokens = Vec::with_capacity(t * gh * gw);
    for f in 0..t {
        let frame = &frames[f * h * w..(f + 1) * h * w];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut s = 0.0;
                for y in gy * bh..(gy + 1) * bh {
                    s += frame[y * w + gx * bw..y * w + (gx + 1) * bw].iter().sum::<f64>();
                }
                let mean = s / (bh * bw) as f64;
                let bin = (mean * k as f64).floor().clamp(0.0, (k - 1) as f64) as u32;
                tokens.push(bin);
            }
        }
    }
    VideoTokenGrid::new(tokens, t, gh, gw, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerVector {
    values: Vec<f64>,
}

impl SpeakerVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != SPEAKER_DIM {
            return Err(TokenizerError::Speaker(format!("dimension {} != {SPEAKER_DIM}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TokenizerError::Speaker("non-finite value".into()));
        }
        Ok(Self { values })
    }

    /// Unit-norm Gaussian direction determined by `seed`.
    pub fn random_unit(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..SPEAKER_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        Self { values: v }
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; SPEAKER_DIM],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(TENSOR_MAGIC);
        f.push("speaker", vec![SPEAKER_DIM], TensorData::F64(self.values.clone()))
            .expect("fixed dimension");
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        match &f.get("speaker")?.data {
            TensorData::F64(v) => Self::new(v.clone()),
            TensorData::F32(v) => Self::new(v.iter().map(|&x| x as f64).collect()),
            TensorData::I32(_) => Err(TokenizerError::Speaker("integer payload".into())),
        }
    }
}
