//! Criteria that train models on the synthetic corpus.

use std::sync::OnceLock;
use std::time::Instant;

use vtts_core::evaluate::{evaluate_generation, summarize, EvalSummary};
use vtts_core::layout::{LayoutKind, PositionScheme};
use vtts_core::model::{Model, ModelConfig};
use vtts_core::sampler::GenOptions;
use vtts_core::synth::{make_world, ToyCorpus, ToyWorld, ToyWorldConfig};
use vtts_core::tensorfile::{TensorFile, CHECKPOINT_MAGIC};
use vtts_core::train::{eval_accuracy, OptimConfig, RunConfig, StepMetrics, Trainer};

use super::{ensure, Check};

fn tiny_run(seed: u64) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            speech_embed_dim: 8,
            ..ModelConfig::default()
        },
        optimizer: OptimConfig {
            lr: 3e-3,
            warmup: 2,
            total_steps: 8,
            batch_size: 3,
            ..OptimConfig::default()
        },
        seed,
        ..RunConfig::default()
    }
}

fn bits(m: &StepMetrics) -> (u64, u64, u64, u64) {
    (m.step, m.loss.to_bits(), m.grad_norm.to_bits(), m.lr.to_bits())
}

pub fn determinism_and_resume() -> Check {
    let world = make_world(&ToyWorldConfig::default()).map_err(|e| e.to_string())?;
    let data = world.make_corpus(24, 0).map_err(|e| e.to_string())?.train;
    let err = |e: vtts_core::train::TrainError| e.to_string();
    let run = |steps: usize| -> Result<(Vec<StepMetrics>, Vec<u8>), String> {
        let mut t = Trainer::new(tiny_run(5)).map_err(err)?;
        let metrics = (0..steps).map(|_| t.train_step(&data)).collect::<Result<Vec<_>, _>>().map_err(err)?;
        Ok((metrics, t.checkpoint().to_bytes()))
    };
    let (first, ckpt_a) = run(8)?;
    let (second, ckpt_b) = run(8)?;
    ensure(first.iter().map(bits).eq(second.iter().map(bits)), || "reruns disagree".into())?;
    ensure(ckpt_a == ckpt_b, || "rerun checkpoints differ".into())?;

    let mut head = Trainer::new(tiny_run(5)).map_err(err)?;
    for _ in 0..4 {
        head.train_step(&data).map_err(err)?;
    }
    let saved = TensorFile::from_bytes(&head.checkpoint().to_bytes(), CHECKPOINT_MAGIC).map_err(|e| e.to_string())?;
    drop(head);
    let mut tail = Trainer::from_checkpoint(&saved).map_err(err)?;
    let mut worst = 0.0f64;
    for want in &first[4..] {
        let got = tail.train_step(&data).map_err(err)?;
        ensure(got.step == want.step, || format!("resumed step {} vs {}", got.step, want.step))?;
        worst = worst.max((got.loss - want.loss).abs());
    }
    ensure(worst <= 1e-6, || format!("resumed loss differs by {worst:e}"))?;
    ensure(tail.checkpoint().to_bytes() == ckpt_a, || "resumed checkpoint differs from unbroken run".into())?;
    Ok(format!("8 steps bit-identical across reruns, resume max |Δloss| = {worst:.1e}"))
}

struct Trained {
    model: Model<f32>,
    layout: LayoutKind,
    scheme: PositionScheme,
    secs: f64,
}

struct Toy {
    world: ToyWorld,
    corpus: ToyCorpus,
}

fn toy() -> Result<&'static Toy, String> {
    static TOY: OnceLock<Result<Toy, String>> = OnceLock::new();
    TOY.get_or_init(|| {
        let world = make_world(&ToyWorldConfig::default()).map_err(|e| e.to_string())?;
        let corpus = world.make_corpus(2000, 200).map_err(|e| e.to_string())?;
        Ok(Toy { world, corpus })
    })
    .as_ref()
    .map_err(Clone::clone)
}

/// Shared recipe for the toy models: D'=64, 2 layers, 4 heads, time-aligned
/// positions, batch 8.
fn train_toy(layout: LayoutKind, steps: u64, modality_dropout: f64) -> Result<Trained, String> {
    let toy = toy()?;
    let scheme = PositionScheme::time_aligned();
    let config = RunConfig {
        model: ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ..ModelConfig::default()
        },
        layout,
        pos: scheme,
        optimizer: OptimConfig {
            lr: 1e-3,
            warmup: 500,
            total_steps: steps,
            batch_size: 8,
            ..OptimConfig::default()
        },
        modality_dropout,
        ..RunConfig::default()
    };
    let start = Instant::now();
    let mut t = Trainer::new(config).map_err(|e| e.to_string())?;
    for _ in 0..steps {
        t.train_step(&toy.corpus.train).map_err(|e| e.to_string())?;
    }
    Ok(Trained { model: t.model, layout, scheme, secs: start.elapsed().as_secs_f64() })
}

fn cached(cell: &'static OnceLock<Result<Trained, String>>, f: impl FnOnce() -> Result<Trained, String>) -> Result<&'static Trained, String> {
    cell.get_or_init(f).as_ref().map_err(Clone::clone)
}

fn vt_model() -> Result<&'static Trained, String> {
    static M: OnceLock<Result<Trained, String>> = OnceLock::new();
    cached(&M, || train_toy(LayoutKind::VtOrdered, 20_000, 0.3))
}

fn tv_model() -> Result<&'static Trained, String> {
    static M: OnceLock<Result<Trained, String>> = OnceLock::new();
    cached(&M, || train_toy(LayoutKind::TvOrdered, TV_TTS_STEPS, 0.3))
}

fn tts_model() -> Result<&'static Trained, String> {
    static M: OnceLock<Result<Trained, String>> = OnceLock::new();
    cached(&M, || train_toy(LayoutKind::Tts, TV_TTS_STEPS, 0.0))
}

const TV_TTS_STEPS: u64 = 6000;
const EVAL_SAMPLES: usize = 100;

fn sampled(drop_video: bool, drop_text: bool) -> GenOptions {
    GenOptions { temperature: 1.0, drop_video, drop_text, seed: 11, ..GenOptions::default() }
}

fn run_eval(m: &Trained, opts: &GenOptions) -> Result<EvalSummary, String> {
    let toy = toy()?;
    let evals = evaluate_generation(&m.model, &toy.world, &toy.corpus.eval[..EVAL_SAMPLES], m.layout, m.scheme, opts)
        .map_err(|e| e.to_string())?;
    Ok(summarize(&evals))
}

pub fn convergence() -> Check {
    let m = vt_model()?;
    let acc = eval_accuracy(&m.model, &toy()?.corpus.eval, m.layout, m.scheme).map_err(|e| e.to_string())?;
    ensure(m.secs < 7200.0, || format!("training took {:.0} s", m.secs))?;
    ensure(acc >= 0.9, || format!("held-out channel accuracy {acc:.4}"))?;
    Ok(format!("held-out channel accuracy {acc:.4} after 20k steps ({:.0} s training)", m.secs))
}

pub fn synchronization() -> Check {
    let mut rows = Vec::new();
    for (name, m) in [("vt", vt_model()?), ("tv", tv_model()?), ("tts", tts_model()?)] {
        let s = run_eval(m, &sampled(false, false))?;
        let ts = s.timesync.ok_or_else(|| format!("{name}: no paired characters"))?;
        rows.push((name, ts, s.overshoot_rate, s.mean_frames, s.mean_gt_frames));
    }
    let detail = rows
        .iter()
        .map(|(n, ts, o, f, gt)| format!("{n} ts {ts:.3}s overshoot {o:.2} frames {f:.1}/{gt:.1}"))
        .collect::<Vec<_>>()
        .join(", ");
    let (vt, tv, tts) = (rows[0], rows[1], rows[2]);
    ensure(vt.1 < tts.1 && tv.1 < tts.1, || format!("timesync not below tts: {detail}"))?;
    ensure(tts.2 > vt.2 && tts.2 > tv.2, || format!("tts does not overshoot more often: {detail}"))?;
    Ok(detail)
}

pub fn modality_ablation() -> Check {
    let m = vt_model()?;
    let full = run_eval(m, &sampled(false, false))?.content_accuracy;
    let no_video = run_eval(m, &sampled(true, false))?.content_accuracy;
    let no_text = run_eval(m, &sampled(false, true))?.content_accuracy;
    let detail = format!("content accuracy full {full:.3}, drop-video {no_video:.3}, drop-text {no_text:.3}");
    ensure(no_text < no_video && no_video < full, || detail.clone())?;
    Ok(detail)
}
