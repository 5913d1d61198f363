//! Run configuration, the training loop and checkpoints.

use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{apply_span_masking, build_plan, LayoutError, LayoutKind, MaskingConfig, PlanInputs, PositionScheme, SequencePlan};
use crate::model::{batch_normaliser, channel_accuracy, Conditioning, Model, ModelConfig, ModelError};
use crate::synth::{SynthError, ToySample, ToyWorldConfig};
use crate::tensor::{clip_grad_norm, lr_schedule, AdamW, AdamWConfig, ParamStore, Tensor, TensorError};
use crate::tensorfile::{TensorData, TensorFile, TensorFileError, CHECKPOINT_MAGIC};
use crate::tokenizers::TextTokens;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    File(#[from] TensorFileError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup: u64,
    pub total_steps: u64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            warmup: 5000,
            total_steps: 20_000,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus directory written by `synth-data`; unset means generate in memory.
    pub corpus: Option<PathBuf>,
    pub world: ToyWorldConfig,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            world: ToyWorldConfig::default(),
            n_train: 2000,
            n_eval: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub layout: LayoutKind,
    pub pos: PositionScheme,
    pub masking: MaskingConfig,
    pub optimizer: OptimConfig,
    pub data: DataConfig,
    /// Probability of training a sample with its text (or, equally often, its
    /// video) replaced by an empty block.
    pub modality_dropout: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            layout: LayoutKind::VtOrdered,
            pos: PositionScheme::Global,
            masking: MaskingConfig::default(),
            optimizer: OptimConfig::default(),
            data: DataConfig::default(),
            modality_dropout: 0.0,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.masking.validate()?;
        self.data.world.validate()?;
        let o = &self.optimizer;
        let bad = |m: String| Err(TrainError::Config(m));
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("lr {} must be positive", o.lr));
        }
        if !(o.clip > 0.0) {
            return bad(format!("clip {} must be positive", o.clip));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad(format!("betas ({}, {}) outside [0, 1)", o.beta1, o.beta2));
        }
        if o.weight_decay < 0.0 {
            return bad(format!("weight_decay {} is negative", o.weight_decay));
        }
        if o.batch_size == 0 || o.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return bad(format!("modality_dropout {} outside [0, 1]", self.modality_dropout));
        }
        if self.modality_dropout > 0.0 && self.layout != LayoutKind::VtOrdered && self.layout != LayoutKind::TvOrdered {
            return bad("modality_dropout needs a layout with both text and video".into());
        }
        if self.data.n_train == 0 {
            return bad("n_train must be positive".into());
        }
        let w = &self.data.world;
        let m = &self.model;
        if w.n_channels != m.n_channels
            || w.video_codebook as usize != m.video_codebook
            || w.grid != m.video_grid
            || w.alphabet_size + 2 != m.text_vocab
        {
            return bad("model input sizes do not match the toy world".into());
        }
        Ok(())
    }
}

/// Which modality a training plan replaces by its empty block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dropped {
    None,
    Text,
    Video,
}

pub fn sample_plan(s: &ToySample, layout: LayoutKind, scheme: PositionScheme, dropped: Dropped) -> Result<SequencePlan> {
    let empty = TextTokens::default();
    let text = if dropped == Dropped::Text { &empty } else { &s.tokens };
    let video = if dropped == Dropped::Video { 0 } else { s.video.frames() };
    Ok(build_plan(
        &PlanInputs::new(Some(text), Some(video), s.speech.n_frames()),
        layout,
        scheme,
    )?)
}

pub fn conditioning(s: &ToySample) -> Conditioning<'_> {
    Conditioning {
        speaker: s.speaker.values(),
        video: Some(&s.video),
        speech: s.speech.indices(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut h = FnvHasher::default();
    h.write(b"batch");
    h.write_u64(seed);
    h.write_u64(step);
    ChaCha8Rng::seed_from_u64(h.finish())
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
    threads: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(config.optimizer.adamw(), &model.params);
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            threads: 1,
        })
    }

    /// Worker threads for per-sample gradients. Results do not depend on it.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    /// Batch indices, masking and dropout are drawn from `(seed, step)` alone,
    /// so a resumed run replays the same data as an unbroken one.
    pub fn batch_plans(&self, data: &[ToySample], step: u64) -> Result<Vec<(usize, SequencePlan)>> {
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, step);
        let mut out = Vec::with_capacity(cfg.optimizer.batch_size);
        for _ in 0..cfg.optimizer.batch_size {
            let i = rng.random_range(0..data.len());
            let dropped = if cfg.modality_dropout > 0.0 && rng.random::<f64>() < cfg.modality_dropout {
                if rng.random::<bool>() {
                    Dropped::Text
                } else {
                    Dropped::Video
                }
            } else {
                Dropped::None
            };
            let plan = sample_plan(&data[i], cfg.layout, cfg.pos, dropped)?;
            out.push((i, apply_span_masking(&plan, &cfg.masking, &mut rng)?));
        }
        Ok(out)
    }

    pub fn train_step(&mut self, data: &[ToySample]) -> Result<StepMetrics> {
        let batch = self.batch_plans(data, self.step)?;
        let total = batch_normaliser(&self.model.config, batch.iter().map(|(_, p)| p))?;
        let dropout_seed = step_rng(self.config.seed ^ 0x5eed, self.step).random::<u64>();
        let model = &self.model;
        let run = |k: usize| -> Result<(f64, Vec<Tensor<f32>>)> {
            let (i, plan) = &batch[k];
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.wrapping_add(k as u64));
            let rng: Option<&mut dyn rand::RngCore> = if model.config.dropout > 0.0 { Some(&mut rng) } else { None };
            Ok(model.plan_loss_and_grads(plan, &conditioning(&data[*i]), total, rng)?)
        };
        let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = if self.threads <= 1 {
            (0..batch.len()).map(run).collect()
        } else {
            let mut slots: Vec<Option<Result<(f64, Vec<Tensor<f32>>)>>> = (0..batch.len()).map(|_| None).collect();
            let chunk = batch.len().div_ceil(self.threads);
            std::thread::scope(|sc| {
                for (c, part) in slots.chunks_mut(chunk).enumerate() {
                    let run = &run;
                    sc.spawn(move || {
                        for (j, slot) in part.iter_mut().enumerate() {
                            *slot = Some(run(c * chunk + j));
                        }
                    });
                }
            });
            slots.into_iter().map(|s| s.expect("every slot filled")).collect()
        };
        let mut loss = 0.0;
        let mut grads = self.model.zero_grads();
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (acc, t) in grads.iter_mut().zip(&g) {
                acc.add_assign_tensor(t);
            }
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.optimizer.clip);
        let o = &self.config.optimizer;
        let lr = lr_schedule(self.step + 1, o.lr, o.warmup, o.total_steps);
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss,
            grad_norm,
            lr,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        Ok(self.checkpoint().write(path)?)
    }

    pub fn checkpoint(&self) -> TensorFile {
        let mut f = TensorFile::new(CHECKPOINT_MAGIC);
        let p = &self.model.params;
        let push = |f: &mut TensorFile, name: String, t: &Tensor<f32>| {
            f.push(name, t.shape().to_vec(), TensorData::F32(t.data().to_vec()))
                .expect("tensor shape matches its data");
        };
        for id in p.ids() {
            push(&mut f, p.name(id).to_string(), p.get(id));
        }
        for (id, (m, v)) in p.ids().zip(self.optimizer.first_moments().iter().zip(self.optimizer.second_moments())) {
            push(&mut f, format!("adam.m.{}", p.name(id)), m);
            push(&mut f, format!("adam.v.{}", p.name(id)), v);
        }
        f.meta = serde_json::json!({
            "step": self.step,
            "optimizer_step": self.optimizer.step_count(),
            "run_config": self.config,
        });
        f
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&TensorFile::read(path, CHECKPOINT_MAGIC)?)
    }

    pub fn from_checkpoint(f: &TensorFile) -> Result<Self> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        let config: RunConfig = serde_json::from_value(f.meta["run_config"].clone())
            .map_err(|e| TrainError::Checkpoint(format!("run_config: {e}")))?;
        config.validate()?;
        let step = f.meta["step"].as_u64().ok_or_else(|| bad("missing step"))?;
        let opt_step = f.meta["optimizer_step"].as_u64().ok_or_else(|| bad("missing optimizer_step"))?;
        let (params, rest) = load_params(f)?;
        let model = Model::from_params(config.model.clone(), params)?;
        let tensor = |name: String| -> Result<Tensor<f32>> { entry_tensor(f, &name) };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in model.params.ids() {
            m.push(tensor(format!("adam.m.{}", model.params.name(id)))?);
            v.push(tensor(format!("adam.v.{}", model.params.name(id)))?);
        }
        if rest != 2 * model.params.len() {
            return Err(bad("unexpected extra entries"));
        }
        let optimizer = AdamW::from_state(config.optimizer.adamw(), opt_step, m, v)?;
        Ok(Self {
            config,
            model,
            optimizer,
            step,
            threads: 1,
        })
    }
}

fn entry_tensor(f: &TensorFile, name: &str) -> Result<Tensor<f32>> {
    let e = f.get(name)?;
    match &e.data {
        TensorData::F32(v) => Ok(Tensor::new(e.shape.clone(), v.clone())?),
        _ => Err(TrainError::Checkpoint(format!("{name} is not f32"))),
    }
}

/// Model parameters in file order, plus the count of optimizer entries.
fn load_params(f: &TensorFile) -> Result<(ParamStore<f32>, usize)> {
    let mut store = ParamStore::new();
    let mut rest = 0;
    for e in &f.entries {
        if e.name.starts_with("adam.") {
            rest += 1;
            continue;
        }
        store.add(e.name.clone(), entry_tensor(f, &e.name)?, false);
    }
    Ok((store, rest))
}

/// Loads model weights only (for generation).
pub fn load_model(path: &Path) -> Result<(RunConfig, Model<f32>)> {
    let t = Trainer::load_checkpoint(path)?;
    Ok((t.config, t.model))
}

/// Fraction of `(target, channel)` argmax predictions equal to the ground
/// truth, pooled over `samples` with unmasked plans.
pub fn eval_accuracy(model: &Model<f32>, samples: &[ToySample], layout: LayoutKind, scheme: PositionScheme) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for s in samples {
        let plan = sample_plan(s, layout, scheme, Dropped::None)?;
        let (c, t) = channel_accuracy(model, &plan, &conditioning(s))?;
        correct += c;
        total += t;
    }
    if total == 0 {
        return Err(ModelError::EmptyLoss.into());
    }
    Ok(correct as f64 / total as f64)
}

/// Mean unmasked loss over `samples`.
pub fn eval_loss(model: &Model<f32>, samples: &[ToySample], layout: LayoutKind, scheme: PositionScheme) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let plan = sample_plan(s, layout, scheme, Dropped::None)?;
        sum += model.loss(&plan, &conditioning(s))?;
    }
    Ok(sum / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_world;

    fn tiny_config() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                speech_embed_dim: 8,
                ..Default::default()
            },
            optimizer: OptimConfig {
                lr: 3e-3,
                warmup: 5,
                total_steps: 200,
                batch_size: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn data(n: usize) -> Vec<ToySample> {
        make_world(&ToyWorldConfig::default()).unwrap().make_corpus(n, 0).unwrap().train
    }

    #[test]
    fn config_toml_round_trip_and_rejects_unknown_keys() {
        let cfg = tiny_config();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nlr = 1e-3\nmomentum = 0.9\n").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nlr = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nn_channels = 8\n").is_err());
        let t = RunConfig::from_toml("layout = \"tts\"\n[pos]\nkind = \"time_aligned\"\nbase_unit_seconds = 0.005\n").unwrap();
        assert_eq!(t.layout, LayoutKind::Tts);
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let d = data(4);
        let mut t = Trainer::new(RunConfig {
            masking: MaskingConfig { p: 0.0, ..Default::default() },
            ..tiny_config()
        })
        .unwrap();
        let first = t.train_step(&d[..1]).unwrap().loss;
        let mut last = first;
        for _ in 0..60 {
            last = t.train_step(&d[..1]).unwrap().loss;
        }
        assert!(last < 0.7 * first, "{first} -> {last}");
    }

    #[test]
    fn reruns_and_threads_bit_match() {
        let d = data(6);
        let run = |threads| {
            let mut t = Trainer::new(tiny_config()).unwrap().with_threads(threads);
            (0..4).map(|_| t.train_step(&d).unwrap().loss).collect::<Vec<_>>()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let d = data(6);
        let mut full = Trainer::new(tiny_config()).unwrap();
        let losses: Vec<f64> = (0..6).map(|_| full.train_step(&d).unwrap().loss).collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.vtt");
        let mut first = Trainer::new(tiny_config()).unwrap();
        for _ in 0..3 {
            first.train_step(&d).unwrap();
        }
        first.save_checkpoint(&path).unwrap();
        let mut resumed = Trainer::load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step, 3);
        let tail: Vec<f64> = (0..3).map(|_| resumed.train_step(&d).unwrap().loss).collect();
        for (a, b) in tail.iter().zip(&losses[3..]) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }

        // save -> load -> save is byte identical
        let again = dir.path().join("again.vtt");
        Trainer::load_checkpoint(&path).unwrap().save_checkpoint(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn checkpoint_rejects_tampering() {
        let t = Trainer::new(tiny_config()).unwrap();
        let mut f = t.checkpoint();
        f.entries.retain(|e| e.name != "adam.v.head.bias");
        assert!(Trainer::from_checkpoint(&f).is_err());
        let mut bytes = t.checkpoint().to_bytes();
        bytes.pop();
        assert!(TensorFile::from_bytes(&bytes, CHECKPOINT_MAGIC).is_err());
    }

    #[test]
    fn decay_flags_survive_reload() {
        let t = Trainer::new(tiny_config()).unwrap();
        let back = Trainer::from_checkpoint(&t.checkpoint()).unwrap();
        for id in t.model.params.ids() {
            assert_eq!(t.model.params.decays(id), back.model.params.decays(id), "{}", t.model.params.name(id));
        }
    }

    #[test]
    fn modality_dropout_draws_empty_blocks() {
        let d = data(4);
        let t = Trainer::new(RunConfig {
            modality_dropout: 1.0,
            masking: MaskingConfig { p: 0.0, ..Default::default() },
            ..tiny_config()
        })
        .unwrap();
        let plans = t.batch_plans(&d, 0).unwrap();
        assert!(plans.iter().all(|(_, p)| p.n_text == 0 || p.n_video == 0));
    }
}
