//! Per-modality embedders mapping discrete inputs to decoder-width vectors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError, Result, EOS_CLASS, SPEECH_CLASSES};
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizers::SPEAKER_DIM;

/// How a frame's `H' × W'` token embeddings collapse to one vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoAggregation {
    Attention,
    #[default]
    Sum,
    Mean,
    Max,
    Stack,
}

/// Rows of the special-token table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    BosText = 0,
    EosText = 1,
    BosVideo = 2,
    EosVideo = 3,
    BosSpeech = 4,
}

pub const N_SPECIALS: usize = 5;

/// Rows of the mask-vector table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskRow {
    Video = 0,
    Text = 1,
    Speech = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoParams {
    pub table: ParamId,
    pub query: Option<ParamId>,
    pub key: Option<ParamId>,
    pub value: Option<ParamId>,
    pub stack: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub video: VideoParams,
    pub speech_table: ParamId,
    pub speech_proj: ParamId,
    pub text_table: ParamId,
    pub speaker_proj: ParamId,
    pub specials: ParamId,
    pub masks: ParamId,
}

/// Modality whose terminal map is rescaled by norm-matched initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Video,
    Text,
    Speech,
    Speaker,
}

impl EncoderParams {
    /// Registers every embedder parameter with scaled Gaussian initialisation:
    /// tables use std `1/√D'`, linear maps `1/√fan_in`.
    pub fn register<T: Float, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let table_std = 1.0 / (d as f64).sqrt();
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let cells = cfg.video_grid[0] * cfg.video_grid[1];
        let video_table = store.add("video.table", Tensor::randn(vec![cfg.video_codebook, d], table_std, rng), false);
        let (mut query, mut key, mut value, mut stack) = (None, None, None, None);
        match cfg.aggregation {
            VideoAggregation::Attention => {
                query = Some(store.add("video.query", Tensor::randn(vec![d, d], lin(d), rng), true));
                key = Some(store.add("video.key", Tensor::randn(vec![d, d], lin(d), rng), true));
                value = Some(store.add("video.value", Tensor::randn(vec![d, d], lin(d), rng), true));
            }
            VideoAggregation::Stack => {
                stack = Some(store.add(
                    "video.stack",
                    Tensor::randn(vec![cells * d, d], lin(cells * d), rng),
                    true,
                ));
            }
            VideoAggregation::Sum | VideoAggregation::Mean | VideoAggregation::Max => {}
        }
        let de = cfg.speech_embed_dim;
        let speech_table = store.add(
            "speech.table",
            Tensor::randn(vec![SPEECH_CLASSES, de], 1.0 / (de as f64).sqrt(), rng),
            false,
        );
        let speech_proj = store.add(
            "speech.proj",
            Tensor::randn(vec![cfg.n_channels * de, d], lin(cfg.n_channels * de), rng),
            true,
        );
        let text_table = store.add("text.table", Tensor::randn(vec![cfg.text_vocab, d], table_std, rng), false);
        let speaker_proj = store.add("speaker.proj", Tensor::randn(vec![SPEAKER_DIM, d], lin(SPEAKER_DIM), rng), true);
        let specials = store.add("specials", Tensor::randn(vec![N_SPECIALS, d], table_std, rng), false);
        let masks = store.add("masks", Tensor::randn(vec![3, d], table_std, rng), false);
        Self {
            video: VideoParams {
                table: video_table,
                query,
                key,
                value,
                stack,
            },
            speech_table,
            speech_proj,
            text_table,
            speaker_proj,
            specials,
            masks,
        }
    }

    /// The parameter whose scale linearly scales a modality's output.
    pub fn terminal(&self, cfg: &ModelConfig, m: Modality) -> ParamId {
        match m {
            Modality::Video => match cfg.aggregation {
                VideoAggregation::Attention => self.video.value.expect("attention params"),
                VideoAggregation::Stack => self.video.stack.expect("stack params"),
                _ => self.video.table,
            },
            Modality::Text => self.text_table,
            Modality::Speech => self.speech_proj,
            Modality::Speaker => self.speaker_proj,
        }
    }
}

/// Embeds whole video frames. `tokens` holds `n` frames of `H'·W'` row-major
/// cells. Returns `[n, D']`.
pub fn embed_video<'a, T: Float>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &EncoderParams,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<Var> {
    let cells = cfg.video_grid[0] * cfg.video_grid[1];
    let d = cfg.d_model;
    if tokens.len() % cells != 0 {
        return Err(ModelError::Config(format!("{} video tokens for {cells}-cell frames", tokens.len())));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.video_codebook) {
        return Err(ModelError::CorruptInput(format!("video token {bad} >= {}", cfg.video_codebook)));
    }
    let n = tokens.len() / cells;
    let table = g.param(store, p.video.table);
    let e = g.embedding(table, tokens)?;
    let e3 = g.reshape(e, vec![n, cells, d])?;
    Ok(match cfg.aggregation {
        VideoAggregation::Sum => g.sum_axis(e3, 1)?,
        VideoAggregation::Mean => {
            let s = g.sum_axis(e3, 1)?;
            g.scale(s, 1.0 / cells as f64)?
        }
        VideoAggregation::Max => g.max_axis(e3, 1)?,
        VideoAggregation::Stack => {
            let flat = g.reshape(e3, vec![n, cells * d])?;
            let w = g.param(store, p.video.stack.expect("stack params"));
            g.matmul(flat, w)?
        }
        VideoAggregation::Attention => {
            let (_, z) = video_attention(g, store, p, e3, n, cells, d)?;
            z
        }
    })
}

fn video_attention<'a, T: Float>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &EncoderParams,
    e3: Var,
    n: usize,
    cells: usize,
    d: usize,
) -> Result<(Var, Var)> {
    let wq = g.param(store, p.video.query.expect("attention params"));
    let wk = g.param(store, p.video.key.expect("attention params"));
    let wv = g.param(store, p.video.value.expect("attention params"));
    let first = g.slice(e3, 1, 0, 1)?;
    let q = g.matmul(first, wq)?;
    let k = g.matmul(e3, wk)?;
    let kt = g.transpose(k)?;
    let logits = g.batched_matmul(q, kt)?;
    let weights = g.softmax(logits, 2)?;
    let v = g.matmul(e3, wv)?;
    let z = g.batched_matmul(weights, v)?;
    let z = g.reshape(z, vec![n, d])?;
    let z = g.scale(z, 1.0 / (d as f64).sqrt())?;
    let weights = g.reshape(weights, vec![n, cells])?;
    Ok((weights, z))
}

/// Spatial attention weights for each frame, `[n, H'·W']`. Only meaningful
/// for the attention aggregation.
pub fn video_attention_weights<T: Float>(
    store: &ParamStore<T>,
    p: &EncoderParams,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<Tensor<T>> {
    if cfg.aggregation != VideoAggregation::Attention {
        return Err(ModelError::Config("model does not use spatial attention".into()));
    }
    let cells = cfg.video_grid[0] * cfg.video_grid[1];
    let n = tokens.len() / cells;
    let mut g = Graph::inference();
    let table = g.param(store, p.video.table);
    let e = g.embedding(table, tokens)?;
    let e3 = g.reshape(e, vec![n, cells, cfg.d_model])?;
    let (w, _) = video_attention(&mut g, store, p, e3, n, cells, cfg.d_model)?;
    Ok(g.value(w).clone())
}

/// Embeds speech frames given as `n · F` class indices (0..=16), channel
/// order low to high. Returns `[n, D']`.
pub fn embed_speech<'a, T: Float>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &EncoderParams,
    cfg: &ModelConfig,
    values: &[usize],
) -> Result<Var> {
    let f = cfg.n_channels;
    if values.len() % f != 0 {
        return Err(ModelError::Config(format!("{} speech values for {f} channels", values.len())));
    }
    if let Some(&bad) = values.iter().find(|&&v| v > EOS_CLASS) {
        return Err(ModelError::CorruptInput(format!("speech class {bad} > {EOS_CLASS}")));
    }
    let n = values.len() / f;
    let table = g.param(store, p.speech_table);
    let e = g.embedding(table, values)?;
    let flat = g.reshape(e, vec![n, f * cfg.speech_embed_dim])?;
    let proj = g.param(store, p.speech_proj);
    Ok(g.matmul(flat, proj)?)
}

pub fn embed_text<'a, T: Float>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &EncoderParams,
    cfg: &ModelConfig,
    ids: &[usize],
) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.text_vocab) {
        return Err(ModelError::CorruptInput(format!("text id {bad} >= {}", cfg.text_vocab)));
    }
    let table = g.param(store, p.text_table);
    Ok(g.embedding(table, ids)?)
}

/// Bias-free projection of a 512-d speaker vector. Returns `[1, D']`.
pub fn embed_speaker<'a, T: Float>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &EncoderParams,
    speaker: &[f64],
) -> Result<Var> {
    if speaker.len() != SPEAKER_DIM {
        return Err(ModelError::CorruptInput(format!("speaker vector has {} dims", speaker.len())));
    }
    let x = g.constant(Tensor::new(vec![1, SPEAKER_DIM], speaker.iter().map(|&v| T::from_f64(v)).collect())?);
    let w = g.param(store, p.speaker_proj);
    Ok(g.matmul(x, w)?)
}

const PROBES: usize = 256;

/// Mean L2 norm of one modality's embeddings over `PROBES` random valid
/// inputs drawn from `rng`.
pub fn probe_norm<T: Float, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    p: &EncoderParams,
    cfg: &ModelConfig,
    m: Modality,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::inference();
    let out = match m {
        Modality::Video => {
            let cells = cfg.video_grid[0] * cfg.video_grid[1];
            let tokens: Vec<usize> = (0..PROBES * cells).map(|_| rng.random_range(0..cfg.video_codebook)).collect();
            embed_video(&mut g, store, p, cfg, &tokens)?
        }
        Modality::Text => {
            let ids: Vec<usize> = (0..PROBES).map(|_| rng.random_range(0..cfg.text_vocab)).collect();
            embed_text(&mut g, store, p, cfg, &ids)?
        }
        Modality::Speech => {
            let values: Vec<usize> = (0..PROBES * cfg.n_channels).map(|_| rng.random_range(0..16)).collect();
            embed_speech(&mut g, store, p, cfg, &values)?
        }
        Modality::Speaker => {
            let mut rows = Vec::with_capacity(PROBES);
            for _ in 0..PROBES {
                let mut v: Vec<f64> = (0..SPEAKER_DIM).map(|_| StandardNormal.sample(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                let z = embed_speaker(&mut g, store, p, &v)?;
                rows.push(z);
            }
            g.concat(&rows, 0)?
        }
    };
    let t = g.value(out);
    let (rows, _) = t.rows_cols();
    let total: f64 = (0..rows)
        .map(|r| t.row(r).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .sum();
    Ok(total / rows as f64)
}

/// Rescales each modality's terminal map so its mean probe norm is `target`.
pub fn norm_matched_init<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    p: &EncoderParams,
    cfg: &ModelConfig,
    target: f64,
    rng: &mut R,
) -> Result<()> {
    for m in [Modality::Video, Modality::Text, Modality::Speech, Modality::Speaker] {
        let norm = probe_norm(store, p, cfg, m, rng)?;
        if norm > 0.0 {
            let s = T::from_f64(target / norm);
            store.get_mut(p.terminal(cfg, m)).scale_in_place(s);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg(agg: VideoAggregation) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            n_channels: 3,
            speech_embed_dim: 4,
            video_codebook: 10,
            video_grid: [2, 2],
            text_vocab: 6,
            aggregation: agg,
            ..ModelConfig::default()
        }
    }

    fn setup(agg: VideoAggregation) -> (ModelConfig, ParamStore<f64>, EncoderParams) {
        let c = cfg(agg);
        let mut s = ParamStore::new();
        let p = EncoderParams::register(&c, &mut s, &mut ChaCha8Rng::seed_from_u64(1));
        (c, s, p)
    }

    fn video(agg: VideoAggregation, tokens: &[usize]) -> Vec<f64> {
        let (c, s, p) = setup(agg);
        let mut g = Graph::inference();
        let v = embed_video(&mut g, &s, &p, &c, tokens).unwrap();
        g.value(v).data().to_vec()
    }

    #[test]
    fn identical_cells() {
        let (c, s, p) = setup(VideoAggregation::Sum);
        let e: Vec<f64> = s.get(p.video.table).row(7).to_vec();
        let sum = video(VideoAggregation::Sum, &[7; 4]);
        let mean = video(VideoAggregation::Mean, &[7; 4]);
        let max = video(VideoAggregation::Max, &[7; 4]);
        for i in 0..c.d_model {
            assert!((sum[i] - 4.0 * e[i]).abs() < 1e-12);
            assert!((mean[i] - e[i]).abs() < 1e-12);
            assert_eq!(max[i], e[i]);
        }

        let (c, s, p) = setup(VideoAggregation::Attention);
        let att = video(VideoAggregation::Attention, &[7; 4]);
        let e = s.get(p.video.table).row(7);
        let v = s.get(p.video.value.unwrap());
        for j in 0..c.d_model {
            let ve: f64 = (0..c.d_model).map(|i| e[i] * v.data()[i * c.d_model + j]).sum();
            assert!((att[j] - ve / (c.d_model as f64).sqrt()).abs() < 1e-12);
        }
        let w = video_attention_weights(&s, &p, &c, &[7; 4]).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn attention_matches_loops() {
        let (c, s, p) = setup(VideoAggregation::Attention);
        let tokens = [3usize, 0, 9, 4];
        let got = video(VideoAggregation::Attention, &tokens);
        let d = c.d_model;
        let table = s.get(p.video.table);
        let mat = |id: ParamId, x: &[f64]| -> Vec<f64> {
            let w = s.get(id).data();
            (0..d).map(|j| (0..d).map(|i| x[i] * w[i * d + j]).sum()).collect()
        };
        let es: Vec<&[f64]> = tokens.iter().map(|&t| table.row(t)).collect();
        let q = mat(p.video.query.unwrap(), es[0]);
        let logits: Vec<f64> = es
            .iter()
            .map(|e| {
                let k = mat(p.video.key.unwrap(), e);
                (0..d).map(|i| q[i] * k[i]).sum()
            })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let mut want = vec![0.0; d];
        for (e, l) in es.iter().zip(&logits) {
            let a = (l - mx).exp() / z;
            let v = mat(p.video.value.unwrap(), e);
            for i in 0..d {
                want[i] += a * v[i] / (d as f64).sqrt();
            }
        }
        for i in 0..d {
            assert!((got[i] - want[i]).abs() < 1e-12);
        }
        let w = video_attention_weights(&s, &p, &c, &tokens).unwrap();
        assert!(w.data().iter().all(|&x| x >= 0.0));
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stack_with_identity_blocks_is_sum() {
        let (c, mut s, p) = setup(VideoAggregation::Stack);
        let d = c.d_model;
        let id = p.video.stack.unwrap();
        *s.get_mut(id) = Tensor::from_fn(vec![4 * d, d], |i| if (i / d) % d == i % d { 1.0 } else { 0.0 });
        let tokens = [1usize, 2, 3, 4];
        let mut g = Graph::inference();
        let z = embed_video(&mut g, &s, &p, &c, &tokens).unwrap();
        let table = s.get(p.video.table);
        for j in 0..d {
            let want: f64 = tokens.iter().map(|&t| table.row(t)[j]).sum();
            assert!((g.value(z).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let a = [1usize, 5, 2, 8];
        let b = [8usize, 2, 5, 1];
        for agg in [VideoAggregation::Sum, VideoAggregation::Mean, VideoAggregation::Max] {
            let (x, y) = (video(agg, &a), video(agg, &b));
            for (u, v) in x.iter().zip(&y) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        for agg in [VideoAggregation::Attention, VideoAggregation::Stack] {
            assert_ne!(video(agg, &a), video(agg, &b));
        }
    }

    #[test]
    fn speech_matches_concat_then_multiply() {
        let (c, s, p) = setup(VideoAggregation::Sum);
        let frame = [3usize, 16, 0];
        let mut g = Graph::inference();
        let z = embed_speech(&mut g, &s, &p, &c, &frame).unwrap();
        let cat: Vec<f64> = frame.iter().flat_map(|&v| s.get(p.speech_table).row(v).to_vec()).collect();
        let w = s.get(p.speech_proj).data();
        for j in 0..c.d_model {
            let want: f64 = (0..cat.len()).map(|i| cat[i] * w[i * c.d_model + j]).sum();
            assert!((g.value(z).data()[j] - want).abs() < 1e-12);
        }
        let permuted = embed_speech(&mut g, &s, &p, &c, &[0, 16, 3]).unwrap();
        assert_ne!(g.value(z), g.value(permuted));
        assert!(embed_speech(&mut g, &s, &p, &c, &[17, 0, 0]).is_err());

        let mut s0 = s.clone();
        *s0.get_mut(p.speech_proj) = Tensor::zeros(s.get(p.speech_proj).shape().to_vec());
        let mut g = Graph::inference();
        let z = embed_speech(&mut g, &s0, &p, &c, &frame).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn text_and_speaker() {
        let (c, s, p) = setup(VideoAggregation::Sum);
        let mut g = Graph::inference();
        let t = embed_text(&mut g, &s, &p, &c, &[4, 1]).unwrap();
        assert_eq!(g.value(t).row(0), s.get(p.text_table).row(4));
        assert_eq!(g.value(t).row(1), s.get(p.text_table).row(1));
        assert!(embed_text(&mut g, &s, &p, &c, &[6]).is_err());
        let z = embed_speaker(&mut g, &s, &p, &[0.0; SPEAKER_DIM]).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_matching_brings_modalities_together() {
        for agg in [
            VideoAggregation::Sum,
            VideoAggregation::Attention,
            VideoAggregation::Stack,
            VideoAggregation::Max,
        ] {
            let c = ModelConfig {
                aggregation: agg,
                ..ModelConfig::default()
            };
            let mut s = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let p = EncoderParams::register(&c, &mut s, &mut rng);
            norm_matched_init(&mut s, &p, &c, 1.0, &mut rng).unwrap();
            let mut probe = ChaCha8Rng::seed_from_u64(77);
            let norms: Vec<f64> = [Modality::Video, Modality::Text, Modality::Speech, Modality::Speaker]
                .iter()
                .map(|&m| probe_norm(&s, &p, &c, m, &mut probe).unwrap())
                .collect();
            let hi = norms.iter().copied().fold(0.0, f64::max);
            let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(hi / lo <= 1.25, "{agg:?}: {norms:?}");
            assert!(norms.iter().all(|n| (0.8..=1.25).contains(n)), "{norms:?}");
        }
    }

    #[test]
    fn terminal_scaling_is_linear() {
        let (c, mut s, p) = setup(VideoAggregation::Attention);
        for m in [Modality::Video, Modality::Text, Modality::Speech, Modality::Speaker] {
            let before = probe_norm(&s, &p, &c, m, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            s.get_mut(p.terminal(&c, m)).scale_in_place(3.0);
            let after = probe_norm(&s, &p, &c, m, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert!((after - 3.0 * before).abs() < 1e-9 * after.max(1.0));
        }
    }
}
