//! Generation-level scores over a set of toy samples.

use serde::Serialize;

use crate::layout::{LayoutKind, PositionScheme};
use crate::meldsp::invert;
use crate::model::Model;
use crate::sampler::{generate, GenInputs, GenOptions, SamplerError};
use crate::synth::{content_accuracy, toy_codebook, ToySample, ToyWorld};
use crate::tensor::Float;
use crate::timesync::dtw_timesync;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceEval {
    pub id: String,
    pub n_frames: usize,
    pub gt_frames: usize,
    pub stopped_by_eos: bool,
    pub decoded: String,
    pub content_accuracy: f64,
    /// Signed center offsets from DTW TimeSync; empty when nothing was paired.
    pub offsets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub n: usize,
    pub content_accuracy: f64,
    /// Mean absolute offset pooled over all paired phonemes.
    pub timesync: Option<f64>,
    /// Utterances without any paired phoneme.
    pub timesync_failed: usize,
    pub overshoot_rate: f64,
    pub mean_frames: f64,
    pub mean_gt_frames: f64,
}

pub fn evaluate_generation<T: Float>(
    model: &Model<T>,
    world: &ToyWorld,
    samples: &[ToySample],
    layout: LayoutKind,
    scheme: PositionScheme,
    opts: &GenOptions,
) -> Result<Vec<UtteranceEval>, SamplerError> {
    let cb = toy_codebook();
    samples
        .iter()
        .map(|s| {
            let inputs = GenInputs {
                speaker: &s.speaker,
                video: Some(&s.video),
                text: Some(&s.tokens),
            };
            let g = generate(model, &inputs, layout, scheme, opts)?;
            let decoded = world.decode_content(&g.speech);
            let offsets = if g.n_frames() > 0 && s.speech.n_frames() > 0 {
                let gt = invert(&s.speech, &cb)?;
                let gen = invert(&g.speech, &cb)?;
                dtw_timesync(&gt, &s.alignment, &gen)
                    .map(|r| r.offsets)
                    .unwrap_or_default()
            } else {
                Vec::new()
            };
            Ok(UtteranceEval {
                id: s.id.clone(),
                n_frames: g.n_frames(),
                gt_frames: s.speech.n_frames(),
                stopped_by_eos: g.stopped_by_eos,
                content_accuracy: content_accuracy(&decoded, &s.text),
                decoded,
                offsets,
            })
        })
        .collect()
}

pub fn summarize(evals: &[UtteranceEval]) -> EvalSummary {
    let n = evals.len();
    let nf = n.max(1) as f64;
    let offsets: Vec<f64> = evals.iter().flat_map(|e| e.offsets.iter().copied()).collect();
    EvalSummary {
        n,
        content_accuracy: evals.iter().map(|e| e.content_accuracy).sum::<f64>() / nf,
        timesync: (!offsets.is_empty()).then(|| offsets.iter().map(|d| d.abs()).sum::<f64>() / offsets.len() as f64),
        timesync_failed: evals.iter().filter(|e| e.offsets.is_empty()).count(),
        overshoot_rate: evals.iter().filter(|e| e.n_frames > e.gt_frames).count() as f64 / nf,
        mean_frames: evals.iter().map(|e| e.n_frames).sum::<usize>() as f64 / nf,
        mean_gt_frames: evals.iter().map(|e| e.gt_frames).sum::<usize>() as f64 / nf,
    }
}
