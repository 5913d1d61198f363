//! Autoregressive speech generation over a KV cache.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{build_plan, LayoutError, LayoutKind, PlanInputs, PositionScheme, SlotKind, SpeechTarget};
use crate::meldsp::{DMelSeq, DspError};
use crate::model::{Conditioning, KvCache, Model, ModelError, EOS_CLASS, SPEECH_CLASSES};
use crate::tensor::Float;
use crate::tokenizers::{SpeakerVector, TextTokens, VideoTokenGrid};

pub const SPEECH_HOP_SECONDS: f64 = 0.025;
/// Length cap when no video duration is known.
pub const FALLBACK_MAX_FRAMES: usize = 512;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid generation options: {0}")]
    Options(String),
    #[error("cannot drop both video and text")]
    DropBoth,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    /// 0 selects argmax decoding.
    pub temperature: f64,
    /// `None` derives the cap from the video duration.
    pub max_frames: Option<usize>,
    pub stop_rule: f64,
    pub drop_video: bool,
    pub drop_text: bool,
    pub seed: u64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_frames: None,
            stop_rule: 0.5,
            drop_video: false,
            drop_text: false,
            seed: 0,
        }
    }
}

impl GenOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(SamplerError::Options(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        if self.max_frames == Some(0) {
            return Err(SamplerError::Options("max_frames must be at least 1".into()));
        }
        if !(self.stop_rule > 0.0 && self.stop_rule <= 1.0) {
            return Err(SamplerError::Options(format!("stop_rule {} outside (0, 1]", self.stop_rule)));
        }
        if self.drop_video && self.drop_text {
            return Err(SamplerError::DropBoth);
        }
        Ok(())
    }
}

/// `⌈1.6 · T^v · 0.040 / 0.025⌉ = ⌈64 T^v / 25⌉`.
pub fn default_max_frames(video_frames: Option<usize>) -> usize {
    match video_frames {
        Some(n) => (64 * n).div_ceil(25).max(1),
        None => FALLBACK_MAX_FRAMES,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GenInputs<'a> {
    pub speaker: &'a SpeakerVector,
    pub video: Option<&'a VideoTokenGrid>,
    pub text: Option<&'a TextTokens>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub speech: DMelSeq,
    /// EOS predictions in kept frames that were replaced by level 15.
    pub stray_eos: usize,
    pub stopped_by_eos: bool,
    /// Slots in the cache when each frame (including a terminal one) was predicted.
    pub attended: Vec<usize>,
    /// Video frames in the cache when each frame was predicted.
    pub video_in_prefix: Vec<usize>,
}

impl Generation {
    pub fn n_frames(&self) -> usize {
        self.speech.n_frames()
    }
}

pub fn generate<T: Float>(
    model: &Model<T>,
    inputs: &GenInputs<'_>,
    layout: LayoutKind,
    scheme: PositionScheme,
    opts: &GenOptions,
) -> Result<Generation> {
    opts.validate()?;
    let f = model.config.n_channels;
    let empty_text = TextTokens::default();
    let text = if opts.drop_text { Some(&empty_text) } else { inputs.text };
    let video = if opts.drop_video { None } else { inputs.video };
    let video_frames = if layout.uses_video() {
        if opts.drop_video {
            Some(0)
        } else {
            video.map(|v| v.frames())
        }
    } else {
        None
    };
    let max_frames = opts
        .max_frames
        .unwrap_or_else(|| default_max_frames(inputs.video.map(|v| v.frames())));

    let mut plan_inputs = PlanInputs::new(text, video_frames, max_frames);
    if let Some(v) = video {
        plan_inputs.video_period_us = (v.frame_period_seconds() * 1e6).round() as u64;
    }
    let plan = build_plan(&plan_inputs, layout, scheme)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cache = KvCache::new(&model.config);
    let mut speech: Vec<u8> = Vec::with_capacity(max_frames * f);
    let mut result = Generation {
        speech: DMelSeq::new(Vec::new(), 0, f, SPEECH_HOP_SECONDS)?,
        stray_eos: 0,
        stopped_by_eos: false,
        attended: Vec::new(),
        video_in_prefix: Vec::new(),
    };
    let mut fed = 0;
    let mut videos_fed = 0;
    let mut frame = vec![0u8; f];
    while speech.len() / f < max_frames {
        // feed up to and including the slot that predicts the next frame
        let want = speech.len() / f;
        let end = plan.slots[fed..]
            .iter()
            .position(|s| s.target == Some(SpeechTarget::Frame(want)))
            .map(|i| fed + i + 1)
            .ok_or_else(|| SamplerError::Layout(LayoutError::Internal(format!("no slot predicts frame {want}"))))?;
        videos_fed += plan.slots[fed..end]
            .iter()
            .filter(|s| matches!(s.kind, SlotKind::Video { .. }))
            .count();
        let cond = Conditioning {
            speaker: inputs.speaker.values(),
            video,
            speech: &speech,
        };
        let logits = model.extend(&mut cache, &plan, &cond, fed..end)?;
        fed = end;
        result.attended.push(cache.len());
        result.video_in_prefix.push(videos_fed);

        let row = logits.row(logits.shape()[0] - 1);
        let mut eos = 0;
        for (c, out) in frame.iter_mut().enumerate() {
            let z = &row[c * SPEECH_CLASSES..(c + 1) * SPEECH_CLASSES];
            let k = sample_class(z, opts.temperature, &mut rng);
            if k == EOS_CLASS {
                eos += 1;
            }
            *out = k as u8;
        }
        if eos as f64 >= opts.stop_rule * f as f64 {
            result.stopped_by_eos = true;
            break;
        }
        result.stray_eos += eos;
        speech.extend(frame.iter().map(|&k| k.min(EOS_CLASS as u8 - 1)));
    }
    let n = speech.len() / f;
    result.speech = DMelSeq::new(speech, n, f, SPEECH_HOP_SECONDS)?;
    Ok(result)
}

/// Generation with video interleaved into the prefix by timestamp.
pub fn generate_streaming<T: Float>(
    model: &Model<T>,
    inputs: &GenInputs<'_>,
    scheme: PositionScheme,
    opts: &GenOptions,
) -> Result<Generation> {
    generate(model, inputs, LayoutKind::TvStreaming, scheme, opts)
}

fn sample_class<T: Float, R: Rng>(z: &[T], temperature: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        return crate::model::argmax(z);
    }
    let max = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|v| ((v.as_f64() - max) / temperature).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (k, &p) in w.iter().enumerate() {
        if u < p {
            return k;
        }
        u -= p;
    }
    w.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{make_world, ToyWorldConfig, TimingPattern};
    use crate::tensor::{AdamW, AdamWConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 1,
            speech_embed_dim: 16,
            ..Default::default()
        }
    }

    fn sample() -> crate::synth::ToySample {
        let w = make_world(&ToyWorldConfig::default()).unwrap();
        let t = TimingPattern {
            video_frames: 12,
            spans: vec![[2, 6], [7, 11]],
        };
        w.make_sample("ab", &t, 1).unwrap()
    }

    fn inputs(s: &crate::synth::ToySample) -> GenInputs<'_> {
        GenInputs {
            speaker: &s.speaker,
            video: Some(&s.video),
            text: Some(&s.tokens),
        }
    }

    #[test]
    fn options_validation() {
        let bad = [
            GenOptions {
                temperature: -1.0,
                ..Default::default()
            },
            GenOptions {
                max_frames: Some(0),
                ..Default::default()
            },
            GenOptions {
                stop_rule: 0.0,
                ..Default::default()
            },
            GenOptions {
                stop_rule: 1.5,
                ..Default::default()
            },
        ];
        for o in bad {
            assert!(matches!(o.validate(), Err(SamplerError::Options(_))), "{o:?}");
        }
        let both = GenOptions {
            drop_video: true,
            drop_text: true,
            ..Default::default()
        };
        assert!(matches!(both.validate(), Err(SamplerError::DropBoth)));
    }

    #[test]
    fn max_frame_cap() {
        assert_eq!(default_max_frames(Some(25)), 64);
        assert_eq!(default_max_frames(Some(1)), 3);
        assert_eq!(default_max_frames(None), FALLBACK_MAX_FRAMES);
    }

    #[test]
    fn deterministic_and_in_range() {
        let m = Model::<f32>::new(small_config(), 3).unwrap();
        let s = sample();
        for temperature in [0.0, 1.0] {
            let o = GenOptions {
                temperature,
                max_frames: Some(10),
                seed: 9,
                ..Default::default()
            };
            let a = generate(&m, &inputs(&s), LayoutKind::VtOrdered, PositionScheme::Global, &o).unwrap();
            let b = generate(&m, &inputs(&s), LayoutKind::VtOrdered, PositionScheme::Global, &o).unwrap();
            assert_eq!(a, b);
            assert!(a.n_frames() <= 10);
            assert!(a.speech.indices().iter().all(|&v| v <= 15));
        }
    }

    #[test]
    fn eos_bias_stops_immediately_and_stray_eos_is_replaced() {
        let mut m = Model::<f64>::new(small_config(), 1).unwrap();
        let id = m.params.find("head.bias").unwrap();
        let f = m.config.n_channels;
        for c in 0..f {
            m.params.get_mut(id).data_mut()[c * SPEECH_CLASSES + EOS_CLASS] = 100.0;
        }
        let s = sample();
        let o = GenOptions::default();
        let g = generate(&m, &inputs(&s), LayoutKind::TvOrdered, PositionScheme::Global, &o).unwrap();
        assert!(g.stopped_by_eos);
        assert_eq!(g.n_frames(), 0);

        // a few channels voting EOS is below the stop rule
        for c in 3..f {
            m.params.get_mut(id).data_mut()[c * SPEECH_CLASSES + EOS_CLASS] = 0.0;
            m.params.get_mut(id).data_mut()[c * SPEECH_CLASSES + 7] = 100.0;
        }
        let o = GenOptions {
            max_frames: Some(5),
            ..Default::default()
        };
        let g = generate(&m, &inputs(&s), LayoutKind::TvOrdered, PositionScheme::Global, &o).unwrap();
        assert!(!g.stopped_by_eos);
        assert_eq!(g.n_frames(), 5);
        assert_eq!(g.stray_eos, 15);
        assert!(g.speech.indices().chunks(f).all(|fr| fr[..3] == [15, 15, 15]));
    }

    #[test]
    fn dropped_modalities_and_missing_inputs() {
        let m = Model::<f32>::new(small_config(), 2).unwrap();
        let s = sample();
        let o = GenOptions {
            max_frames: Some(3),
            drop_video: true,
            ..Default::default()
        };
        let g = generate(&m, &inputs(&s), LayoutKind::VtOrdered, PositionScheme::Global, &o).unwrap();
        assert_eq!(g.video_in_prefix, vec![0; g.attended.len()]);
        let o = GenOptions {
            max_frames: Some(3),
            drop_text: true,
            ..Default::default()
        };
        generate(&m, &inputs(&s), LayoutKind::VtOrdered, PositionScheme::Global, &o).unwrap();
        let no_text = GenInputs {
            text: None,
            ..inputs(&s)
        };
        assert!(matches!(
            generate(&m, &no_text, LayoutKind::TvOrdered, PositionScheme::Global, &GenOptions::default()),
            Err(SamplerError::Layout(_))
        ));
        // without video the cap falls back to 512 frames
        let tts = GenInputs {
            video: None,
            ..inputs(&s)
        };
        let g = generate(&m, &tts, LayoutKind::Tts, PositionScheme::Global, &GenOptions::default()).unwrap();
        assert!(g.n_frames() <= FALLBACK_MAX_FRAMES);
    }

    #[test]
    fn streaming_prefix_and_attended_length() {
        let m = Model::<f32>::new(small_config(), 4).unwrap();
        let s = sample();
        let o = GenOptions {
            max_frames: Some(24),
            stop_rule: 1.0,
            ..Default::default()
        };
        let scheme = PositionScheme::time_aligned();
        let st = generate_streaming(&m, &inputs(&s), scheme, &o).unwrap();
        let direct = generate(&m, &inputs(&s), LayoutKind::TvStreaming, scheme, &o).unwrap();
        assert_eq!(st, direct);
        let ordered = generate(&m, &inputs(&s), LayoutKind::TvOrdered, scheme, &o).unwrap();
        let nv = s.video.frames();
        for (t, (&vids, &len)) in st.video_in_prefix.iter().zip(&st.attended).enumerate() {
            // frame t is predicted from the slot of frame t - 1 (BOS for t = 0)
            let time_us = t.saturating_sub(1) as u64 * 25_000;
            let want = if t == 0 { 0 } else { ((time_us / 40_000) as usize + 1).min(nv) };
            assert_eq!(vids, want, "frame {t}");
            if want < nv {
                assert!(len < ordered.attended[t], "frame {t}: {len} vs {}", ordered.attended[t]);
            }
        }
    }

    #[test]
    fn overfit_one_sample_reproduces_it() {
        let s = sample();
        let cfg = ModelConfig {
            d_model: 48,
            n_heads: 2,
            n_layers: 1,
            ..Default::default()
        };
        let mut m = Model::<f32>::new(cfg, 5).unwrap();
        let layout = LayoutKind::VtOrdered;
        let scheme = PositionScheme::time_aligned();
        let plan = build_plan(
            &PlanInputs::new(Some(&s.tokens), Some(s.video.frames()), s.speech.n_frames()),
            layout,
            scheme,
        )
        .unwrap();
        let cond = Conditioning {
            speaker: s.speaker.values(),
            video: Some(&s.video),
            speech: s.speech.indices(),
        };
        let mut opt = AdamW::new(AdamWConfig::default(), &m.params);
        let o = GenOptions::default();
        let mut reproduced = false;
        for step in 0..600 {
            let (_, grads) = m.loss_and_grads(&[(plan.clone(), cond)], None).unwrap();
            opt.step(&mut m.params, &grads, 3e-3).unwrap();
            if step % 50 == 49 {
                let g = generate(&m, &inputs(&s), layout, scheme, &o).unwrap();
                if g.speech == s.speech && g.stopped_by_eos && g.stray_eos == 0 {
                    reproduced = true;
                    break;
                }
            }
        }
        assert!(reproduced);
    }
}
