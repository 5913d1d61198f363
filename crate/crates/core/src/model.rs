//! Decoder-only transformer over multimodal sequence plans.
//!
//! Every slot of a [`SequencePlan`] becomes one row of the residual stream.
//! Attention is causal in plan order and rotary-encoded with each slot's
//! position index. A single linear head of width `F·17` produces per-channel
//! logits over the 16 dMel levels plus the EOS class.

use std::ops::Range;
use std::rc::Rc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{
    embed_speaker, embed_speech, embed_text, embed_video, norm_matched_init, EncoderParams, MaskRow, Special,
    VideoAggregation, N_SPECIALS,
};
use crate::layout::{LayoutError, SequencePlan, SlotKind, SpeechTarget, Stream};
use crate::tensor::{Float, Graph, ParamId, ParamStore, RopeTable, Tensor, TensorError, Var};
use crate::tokenizers::VideoTokenGrid;

pub const SPEECH_LEVELS: usize = 16;
pub const EOS_CLASS: usize = 16;
pub const SPEECH_CLASSES: usize = 17;

const LN_EPS: f64 = 1e-5;
const NEG_INF: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("corrupt model input: {0}")]
    CorruptInput(String),
    #[error("plan has no active loss targets")]
    EmptyLoss,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_channels: usize,
    pub speech_embed_dim: usize,
    pub video_codebook: usize,
    pub video_grid: [usize; 2],
    pub text_vocab: usize,
    pub aggregation: VideoAggregation,
    pub rope_base: f64,
    pub dropout: f64,
    pub mlp_ratio: usize,
    /// Common mean embedding norm targeted by norm-matched initialisation.
    pub init_norm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            n_channels: 16,
            speech_embed_dim: 24,
            video_codebook: 32,
            video_grid: [4, 4],
            text_vocab: 14,
            aggregation: VideoAggregation::Sum,
            rope_base: 10000.0,
            dropout: 0.0,
            mlp_ratio: 4,
            init_norm: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return err("d_model, n_heads and n_layers must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return err(format!("head dim {} must be even for rotary pairs", self.head_dim()));
        }
        if self.n_channels == 0 || self.speech_embed_dim == 0 || self.mlp_ratio == 0 {
            return err("n_channels, speech_embed_dim and mlp_ratio must be positive".into());
        }
        if self.video_codebook == 0 || self.text_vocab == 0 || self.video_grid.contains(&0) {
            return err("vocabulary sizes and grid must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.rope_base > 1.0) || !(self.init_norm > 0.0) {
            return err("rope_base must exceed 1 and init_norm be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn head_width(&self) -> usize {
        self.n_channels * SPEECH_CLASSES
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_1: ParamId,
    b_1: ParamId,
    w_2: ParamId,
    b_2: ParamId,
}

/// Frame payloads referenced by a plan's slots.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'c> {
    pub speaker: &'c [f64],
    pub video: Option<&'c VideoTokenGrid>,
    /// Speech frames as `n·F` level indices (0..=15).
    pub speech: &'c [u8],
}

/// Per-layer, per-head rotated keys and values of already processed slots.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<Vec<Tensor<T>>>,
    values: Vec<Vec<Tensor<T>>>,
    len: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let empty = || vec![vec![Tensor::zeros(vec![0, cfg.head_dim()]); cfg.n_heads]; cfg.n_layers];
        Self {
            keys: empty(),
            values: empty(),
            len: 0,
        }
    }

    /// Number of slots already attended.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn append_rows<T: Float>(t: &mut Tensor<T>, rows: &Tensor<T>) {
    let (n, d) = (t.shape()[0] + rows.shape()[0], t.shape()[1]);
    let mut data = std::mem::replace(t, Tensor::zeros(vec![0, d])).into_data();
    data.extend_from_slice(rows.data());
    *t = Tensor::new(vec![n, d], data).expect("row counts add up");
}

#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    enc: EncoderParams,
    layers: Vec<LayerParams>,
    ln_f: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

fn register_layout<T: Float, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> (EncoderParams, Vec<LayerParams>, (ParamId, ParamId), ParamId, ParamId) {
    let d = cfg.d_model;
    let hidden = d * cfg.mlp_ratio;
    let enc = EncoderParams::register(cfg, store, rng);
    let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerParams {
            ln1_g: store.add(name("ln1.gamma"), Tensor::ones(vec![d]), false),
            ln1_b: store.add(name("ln1.beta"), Tensor::zeros(vec![d]), false),
            w_qkv: store.add(name("attn.qkv"), Tensor::randn(vec![d, 3 * d], lin(d), rng), true),
            b_qkv: store.add(name("attn.qkv_bias"), Tensor::zeros(vec![3 * d]), false),
            w_o: store.add(name("attn.out"), Tensor::randn(vec![d, d], lin(d) * resid, rng), true),
            b_o: store.add(name("attn.out_bias"), Tensor::zeros(vec![d]), false),
            ln2_g: store.add(name("ln2.gamma"), Tensor::ones(vec![d]), false),
            ln2_b: store.add(name("ln2.beta"), Tensor::zeros(vec![d]), false),
            w_1: store.add(name("mlp.in"), Tensor::randn(vec![d, hidden], lin(d), rng), true),
            b_1: store.add(name("mlp.in_bias"), Tensor::zeros(vec![hidden]), false),
            w_2: store.add(name("mlp.out"), Tensor::randn(vec![hidden, d], lin(hidden) * resid, rng), true),
            b_2: store.add(name("mlp.out_bias"), Tensor::zeros(vec![d]), false),
        });
    }
    let ln_f = (
        store.add("final_ln.gamma", Tensor::ones(vec![d]), false),
        store.add("final_ln.beta", Tensor::zeros(vec![d]), false),
    );
    let head_w = store.add("head.weight", Tensor::randn(vec![d, cfg.head_width()], 0.5 * lin(d), rng), true);
    let head_b = store.add("head.bias", Tensor::zeros(vec![cfg.head_width()]), false);
    (enc, layers, ln_f, head_w, head_b)
}

impl<T: Float> Model<T> {
    /// Fresh model with seeded initialisation followed by norm matching.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (enc, layers, ln_f, head_w, head_b) = register_layout(&config, &mut params, &mut rng);
        norm_matched_init(&mut params, &enc, &config, config.init_norm, &mut rng)?;
        Ok(Self {
            config,
            params,
            enc,
            layers,
            ln_f,
            head_w,
            head_b,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    /// Weight-decay flags are taken from the architecture.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut template = ParamStore::<T>::new();
        let (enc, layers, ln_f, head_w, head_b) =
            register_layout(&config, &mut template, &mut ChaCha8Rng::seed_from_u64(0));
        if template.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                template.len(),
                params.len()
            )));
        }
        for id in template.ids() {
            if template.name(id) != params.name(id) || template.get(id).shape() != params.get(id).shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    template.name(id),
                    template.get(id).shape()
                )));
            }
        }
        // decay flags follow the architecture, not the stored tensors
        let mut store = ParamStore::new();
        for id in template.ids() {
            store.add(template.name(id), params.get(id).clone(), template.decays(id));
        }
        let params = store;
        Ok(Self {
            config,
            params,
            enc,
            layers,
            ln_f,
            head_w,
            head_b,
        })
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            enc: self.enc.clone(),
            layers: self.layers.clone(),
            ln_f: self.ln_f,
            head_w: self.head_w,
            head_b: self.head_b,
        }
    }

    pub fn encoder_params(&self) -> &EncoderParams {
        &self.enc
    }

    /// Columns of the output head belonging to channel `f`.
    pub fn channel_columns(&self, f: usize) -> Range<usize> {
        f * SPEECH_CLASSES..(f + 1) * SPEECH_CLASSES
    }

    /// Input embeddings `[range.len(), D']` for a contiguous run of slots.
    pub fn embed_slots<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        plan: &SequencePlan,
        cond: &Conditioning<'_>,
        range: Range<usize>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let f = cfg.n_channels;
        let slots = &plan.slots[range];
        let mut text_ids = Vec::new();
        let mut video_tokens = Vec::new();
        let mut speech_values = Vec::new();
        let (mut need_speaker, mut need_eos) = (false, false);
        for s in slots.iter().filter(|s| !s.masked) {
            match s.kind {
                SlotKind::Speaker => need_speaker = true,
                SlotKind::Text { token } => text_ids.push(token as usize),
                SlotKind::Video { frame } => {
                    let v = cond
                        .video
                        .ok_or_else(|| ModelError::CorruptInput("plan references video but none given".into()))?;
                    if frame >= v.frames() {
                        return Err(ModelError::CorruptInput(format!("video frame {frame} of {}", v.frames())));
                    }
                    video_tokens.extend(v.frame(frame).iter().map(|&t| t as usize));
                }
                SlotKind::Speech { frame } => {
                    let row = cond.speech.get(frame * f..(frame + 1) * f).ok_or_else(|| {
                        ModelError::CorruptInput(format!("speech frame {frame} beyond {} values", cond.speech.len()))
                    })?;
                    speech_values.extend(row.iter().map(|&v| v as usize));
                }
                SlotKind::Eos(Stream::Speech) => need_eos = true,
                SlotKind::Bos(_) | SlotKind::Eos(_) => {}
            }
        }
        if need_eos {
            speech_values.extend(std::iter::repeat_n(EOS_CLASS, f));
        }

        let specials = g.param(store, self.enc.specials);
        let masks = g.param(store, self.enc.masks);
        let mut parts = vec![specials, masks];
        let mut next = N_SPECIALS + 3;
        let mut offset = |n: usize| {
            let o = next;
            next += n;
            o
        };
        let speaker_row = if need_speaker {
            parts.push(embed_speaker(g, store, &self.enc, cond.speaker)?);
            offset(1)
        } else {
            0
        };
        let text_row = if text_ids.is_empty() {
            0
        } else {
            parts.push(embed_text(g, store, &self.enc, cfg, &text_ids)?);
            offset(text_ids.len())
        };
        let cells = cfg.video_grid[0] * cfg.video_grid[1];
        let video_row = if video_tokens.is_empty() {
            0
        } else {
            if let Some(v) = cond.video {
                if v.cells() != cells {
                    return Err(ModelError::Config(format!("video grid has {} cells, model expects {cells}", v.cells())));
                }
            }
            parts.push(embed_video(g, store, &self.enc, cfg, &video_tokens)?);
            offset(video_tokens.len() / cells)
        };
        let speech_row = if speech_values.is_empty() {
            0
        } else {
            parts.push(embed_speech(g, store, &self.enc, cfg, &speech_values)?);
            offset(speech_values.len() / f)
        };
        let pool = g.concat(&parts, 0)?;

        let (mut ti, mut vi, mut si) = (text_row, video_row, speech_row);
        let eos_row = if need_eos { speech_row + speech_values.len() / f - 1 } else { 0 };
        let mut ids = Vec::with_capacity(slots.len());
        for s in slots {
            let id = if s.masked {
                let row = match s.kind.maskable_stream() {
                    Some(Stream::Video) => MaskRow::Video,
                    Some(Stream::Text) => MaskRow::Text,
                    Some(Stream::Speech) => MaskRow::Speech,
                    None => return Err(ModelError::CorruptInput(format!("{:?} slot cannot be masked", s.kind))),
                };
                N_SPECIALS + row as usize
            } else {
                match s.kind {
                    SlotKind::Speaker => speaker_row,
                    SlotKind::Bos(Stream::Text) => Special::BosText as usize,
                    SlotKind::Eos(Stream::Text) => Special::EosText as usize,
                    SlotKind::Bos(Stream::Video) => Special::BosVideo as usize,
                    SlotKind::Eos(Stream::Video) => Special::EosVideo as usize,
                    SlotKind::Bos(Stream::Speech) => Special::BosSpeech as usize,
                    SlotKind::Eos(Stream::Speech) => eos_row,
                    SlotKind::Text { .. } => post_inc(&mut ti),
                    SlotKind::Video { .. } => post_inc(&mut vi),
                    SlotKind::Speech { .. } => post_inc(&mut si),
                }
            };
            ids.push(id);
        }
        Ok(g.embedding(pool, &ids)?)
    }

    /// Runs the transformer trunk over `x: [n, D']` rows at `positions`,
    /// attending to `cache` (if any) before the new rows. Returns the final
    /// normalised hidden states `[n, D']`. The cache is extended in place.
    fn trunk<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        positions: &[usize],
        mut cache: Option<&mut KvCache<T>>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (d, dh, n) = (cfg.d_model, cfg.head_dim(), positions.len());
        let past = cache.as_ref().map_or(0, |c| c.len);
        let mask = g.constant(Tensor::from_fn(vec![n, past + n], |i| {
            let (r, c) = (i / (past + n), i % (past + n));
            if c <= past + r {
                T::zero()
            } else {
                T::from_f64(NEG_INF)
            }
        }));
        let scale = 1.0 / (dh as f64).sqrt();
        let rope = Rc::new(RopeTable::new(positions, dh, cfg.rope_base)?);
        let mut h = x;
        for (l, lp) in self.layers.iter().enumerate() {
            let (g1, b1) = (g.param(store, lp.ln1_g), g.param(store, lp.ln1_b));
            let a = g.layer_norm(h, g1, b1, LN_EPS)?;
            let w = g.param(store, lp.w_qkv);
            let b = g.param(store, lp.b_qkv);
            let qkv = g.matmul(a, w)?;
            let qkv = g.add(qkv, b)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let q = g.slice(qkv, 1, head * dh, dh)?;
                let k = g.slice(qkv, 1, d + head * dh, dh)?;
                let v = g.slice(qkv, 1, 2 * d + head * dh, dh)?;
                let q = g.rope_with(q, &rope)?;
                let mut k = g.rope_with(k, &rope)?;
                let mut v = v;
                if let Some(c) = cache.as_deref_mut() {
                    let new_k = g.value(k).clone();
                    let new_v = g.value(v).clone();
                    if past > 0 {
                        let ck = g.constant(c.keys[l][head].clone());
                        let cv = g.constant(c.values[l][head].clone());
                        k = g.concat(&[ck, k], 0)?;
                        v = g.concat(&[cv, v], 0)?;
                    }
                    append_rows(&mut c.keys[l][head], &new_k);
                    append_rows(&mut c.values[l][head], &new_v);
                }
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, scale)?;
                let s = g.add(s, mask)?;
                let p = g.softmax(s, 1)?;
                heads.push(g.matmul(p, v)?);
            }
            let att = g.concat(&heads, 1)?;
            let wo = g.param(store, lp.w_o);
            let bo = g.param(store, lp.b_o);
            let o = g.matmul(att, wo)?;
            let mut o = g.add(o, bo)?;
            if let Some(r) = rng.as_deref_mut() {
                o = g.dropout(o, cfg.dropout, r)?;
            }
            h = g.add(h, o)?;

            let (g2, b2) = (g.param(store, lp.ln2_g), g.param(store, lp.ln2_b));
            let a = g.layer_norm(h, g2, b2, LN_EPS)?;
            let (w1, bb1) = (g.param(store, lp.w_1), g.param(store, lp.b_1));
            let m = g.matmul(a, w1)?;
            let m = g.add(m, bb1)?;
            let m = g.gelu(m)?;
            let (w2, bb2) = (g.param(store, lp.w_2), g.param(store, lp.b_2));
            let m = g.matmul(m, w2)?;
            let mut m = g.add(m, bb2)?;
            if let Some(r) = rng.as_deref_mut() {
                m = g.dropout(m, cfg.dropout, r)?;
            }
            h = g.add(h, m)?;
        }
        if let Some(c) = cache {
            c.len += n;
        }
        let (gf, bf) = (g.param(store, self.ln_f.0), g.param(store, self.ln_f.1));
        Ok(g.layer_norm(h, gf, bf, LN_EPS)?)
    }

    fn head<'a>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, h: Var) -> Result<Var> {
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let z = g.matmul(h, w)?;
        Ok(g.add(z, b)?)
    }

    /// Logits `[n_targets, F·17]` at the plan's active loss-target slots, in
    /// slot order.
    pub fn speech_logits<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        plan: &SequencePlan,
        cond: &Conditioning<'_>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let x = self.embed_slots(g, store, plan, cond, 0..plan.len())?;
        let h = self.trunk(g, store, x, &plan.positions(), None, rng)?;
        let rows: Vec<usize> = plan
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_loss_target)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(ModelError::EmptyLoss);
        }
        let picked = g.embedding(h, &rows)?;
        self.head(g, store, picked)
    }

    /// Logits `[L, F·17]` at every slot of the plan.
    pub fn slot_logits<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        plan: &SequencePlan,
        cond: &Conditioning<'_>,
    ) -> Result<Var> {
        let x = self.embed_slots(g, store, plan, cond, 0..plan.len())?;
        let h = self.trunk(g, store, x, &plan.positions(), None, None)?;
        self.head(g, store, h)
    }

    /// Target classes, `F` per active loss-target slot.
    pub fn targets(&self, plan: &SequencePlan, cond: &Conditioning<'_>) -> Result<Vec<usize>> {
        let f = self.config.n_channels;
        let mut out = Vec::new();
        for s in plan.slots.iter().filter(|s| s.is_loss_target) {
            match s.target {
                Some(SpeechTarget::Frame(t)) => {
                    let row = cond
                        .speech
                        .get(t * f..(t + 1) * f)
                        .ok_or_else(|| ModelError::CorruptInput(format!("target frame {t} missing")))?;
                    out.extend(row.iter().map(|&v| v as usize));
                }
                Some(SpeechTarget::Eos) => out.extend(std::iter::repeat_n(EOS_CLASS, f)),
                None => return Err(ModelError::CorruptInput("loss target slot without target".into())),
            }
        }
        Ok(out)
    }

    /// Sum of negative log-likelihoods over a plan's active targets, scaled by
    /// `1/normaliser`. With `normaliser` equal to the target count this is the
    /// mean speech cross-entropy.
    pub fn loss_var<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        plan: &SequencePlan,
        cond: &Conditioning<'_>,
        normaliser: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let logits = self.speech_logits(g, store, plan, cond, rng)?;
        let targets = self.targets(plan, cond)?;
        speech_ce(g, logits, &targets, normaliser)
    }

    /// Mean speech cross-entropy for one plan.
    pub fn loss(&self, plan: &SequencePlan, cond: &Conditioning<'_>) -> Result<f64> {
        let mut g = Graph::inference();
        let n = plan.loss_target_count() * self.config.n_channels;
        let v = self.loss_var(&mut g, &self.params, plan, cond, n, None)?;
        Ok(g.value(v).item()?.as_f64())
    }

    /// Mean loss and summed parameter gradients over a batch. Every
    /// `(plan, channel)` target carries equal weight across the batch.
    pub fn loss_and_grads(
        &self,
        batch: &[(SequencePlan, Conditioning<'_>)],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let total = batch_normaliser(&self.config, batch.iter().map(|(p, _)| p))?;
        let mut grads = self.zero_grads();
        let mut loss = 0.0;
        for (plan, cond) in batch {
            let (l, g) = self.plan_loss_and_grads(plan, cond, total, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
            loss += l;
            for (acc, t) in grads.iter_mut().zip(&g) {
                acc.add_assign_tensor(t);
            }
        }
        Ok((loss, grads))
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params
            .ids()
            .map(|id| Tensor::zeros(self.params.get(id).shape().to_vec()))
            .collect()
    }

    /// Loss of one plan scaled by `1/normaliser` and its gradients. Plans
    /// without active targets contribute zero.
    pub fn plan_loss_and_grads(
        &self,
        plan: &SequencePlan,
        cond: &Conditioning<'_>,
        normaliser: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut grads = self.zero_grads();
        if plan.loss_target_count() == 0 {
            return Ok((0.0, grads));
        }
        let mut g = Graph::new();
        let v = self.loss_var(&mut g, &self.params, plan, cond, normaliser, rng)?;
        let loss = g.value(v).item()?.as_f64();
        let back = g.backward(v)?;
        for (acc, id) in grads.iter_mut().zip(self.params.ids()) {
            if let Some(t) = back.param(id) {
                acc.add_assign_tensor(t);
            }
        }
        Ok((loss, grads))
    }

    /// Feeds slots `range` of `plan` through the model, extending `cache`,
    /// and returns logits `[range.len(), F·17]` for those slots. Slots before
    /// `range.start` must already be in the cache.
    pub fn extend(
        &self,
        cache: &mut KvCache<T>,
        plan: &SequencePlan,
        cond: &Conditioning<'_>,
        range: Range<usize>,
    ) -> Result<Tensor<T>> {
        if range.start != cache.len || range.end > plan.len() || range.is_empty() {
            return Err(ModelError::CorruptInput(format!(
                "cache holds {} slots, asked to extend with {range:?} of {}",
                cache.len,
                plan.len()
            )));
        }
        let mut g = Graph::inference();
        let positions: Vec<usize> = plan.slots[range.clone()].iter().map(|s| s.position).collect();
        let x = self.embed_slots(&mut g, &self.params, plan, cond, range)?;
        let h = self.trunk(&mut g, &self.params, x, &positions, Some(cache), None)?;
        let z = self.head(&mut g, &self.params, h)?;
        Ok(g.value(z).clone())
    }
}

/// Total `(target, channel)` count of a batch.
pub fn batch_normaliser<'p>(cfg: &ModelConfig, plans: impl IntoIterator<Item = &'p SequencePlan>) -> Result<usize> {
    let total: usize = plans.into_iter().map(|p| p.loss_target_count() * cfg.n_channels).sum();
    if total == 0 {
        return Err(ModelError::EmptyLoss);
    }
    Ok(total)
}

fn post_inc(i: &mut usize) -> usize {
    *i += 1;
    *i - 1
}

/// `-(1/normaliser) Σ log_softmax(logits)[target]` over `[n, F·17]` logits and
/// `n·F` targets.
pub fn speech_ce<T: Float>(g: &mut Graph<'_, T>, logits: Var, targets: &[usize], normaliser: usize) -> Result<Var> {
    if targets.is_empty() || normaliser == 0 {
        return Err(ModelError::EmptyLoss);
    }
    let z = g.reshape(logits, vec![targets.len(), SPEECH_CLASSES])?;
    let lp = g.log_softmax(z, 1)?;
    let picked = g.gather(lp, targets)?;
    let s = g.sum_all(picked)?;
    Ok(g.scale(s, -1.0 / normaliser as f64)?)
}

/// Fraction of channels whose argmax matches the target over the active loss
/// targets of `plan`. Returns `(correct, total)`.
pub fn channel_accuracy<T: Float>(model: &Model<T>, plan: &SequencePlan, cond: &Conditioning<'_>) -> Result<(usize, usize)> {
    let mut g = Graph::inference();
    let z = model.speech_logits(&mut g, &model.params, plan, cond, None)?;
    let targets = model.targets(plan, cond)?;
    let logits = g.value(z).data();
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| argmax(&logits[i * SPEECH_CLASSES..(i + 1) * SPEECH_CLASSES]) == t)
        .count();
    Ok((correct, targets.len()))
}

/// Index of the first maximum.
pub fn argmax<T: Float>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
