//! Python module `vtts`: dMel codec, toy corpus, sequence plans, training,
//! generation and TimeSync scoring.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use vtts_core::evaluate;
use vtts_core::layout::{build_plan, LayoutKind, PlanInputs, PositionScheme};
use vtts_core::meldsp::{self, AudioSignal};
use vtts_core::model::Model as CoreModel;
use vtts_core::sampler::{self, GenInputs, GenOptions};
use vtts_core::synth::{self, Split, ToyWorldConfig};
use vtts_core::timesync::{self, AlignmentSource, PhonemeAlignment, PhonemeSegment};
use vtts_core::tokenizers::tokenize;
use vtts_core::train::{self, RunConfig};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_layout(s: &str) -> PyResult<LayoutKind> {
    Ok(match s {
        "tts" => LayoutKind::Tts,
        "tv_ordered" => LayoutKind::TvOrdered,
        "vt_ordered" => LayoutKind::VtOrdered,
        "tv_streaming" => LayoutKind::TvStreaming,
        "v_only" => LayoutKind::VOnly,
        _ => return Err(PyValueError::new_err(format!("unknown layout {s:?}"))),
    })
}

fn parse_pos(s: &str) -> PyResult<PositionScheme> {
    match s {
        "global" => Ok(PositionScheme::Global),
        "time_aligned" => Ok(PositionScheme::time_aligned()),
        _ => Err(PyValueError::new_err(format!("unknown position scheme {s:?}"))),
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct MelConfig {
    inner: meldsp::MelConfig,
}

#[pymethods]
impl MelConfig {
    #[new]
    #[pyo3(signature = (sample_rate=16000, window_len=400, hop_len=400, fft_size=512, n_mels=80, fmin=0.0, fmax=8000.0, log_floor=1e-5))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        sample_rate: u32,
        window_len: usize,
        hop_len: usize,
        fft_size: usize,
        n_mels: usize,
        fmin: f64,
        fmax: f64,
        log_floor: f64,
    ) -> PyResult<Self> {
        let inner = meldsp::MelConfig { sample_rate, window_len, hop_len, fft_size, n_mels, fmin, fmax, log_floor };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn hop_seconds(&self) -> f64 {
        self.inner.hop_seconds()
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct MelSpec {
    inner: meldsp::MelSpec,
}

#[pymethods]
impl MelSpec {
    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn n_mels(&self) -> usize {
        self.inner.n_mels()
    }

    #[getter]
    fn frame_hop_seconds(&self) -> f64 {
        self.inner.frame_hop_seconds()
    }

    /// Row-major `[n_frames][n_mels]` log-mel values.
    fn to_list(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_frames()).map(|t| self.inner.frame(t).to_vec()).collect()
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct DMelSeq {
    inner: meldsp::DMelSeq,
}

#[pymethods]
impl DMelSeq {
    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.inner.n_channels()
    }

    fn to_list(&self) -> Vec<Vec<u8>> {
        (0..self.inner.n_frames()).map(|t| self.inner.frame(t).to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_frames()
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct DMelCodebook {
    inner: meldsp::DMelCodebook,
}

#[pymethods]
impl DMelCodebook {
    #[new]
    #[pyo3(signature = (m, max, bits=4))]
    fn new(m: f64, max: f64, bits: u32) -> PyResult<Self> {
        meldsp::DMelCodebook::new(m, max, bits).map(|inner| Self { inner }).map_err(value_err)
    }

    /// Codebook spanning the global range of `specs`.
    #[staticmethod]
    #[pyo3(signature = (specs, bits=4))]
    fn fit(specs: Vec<MelSpec>, bits: u32) -> PyResult<Self> {
        meldsp::fit_codebook(specs.iter().map(|s| &s.inner), bits)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta()
    }

    fn levels(&self) -> Vec<f64> {
        self.inner.levels()
    }

    fn discretize(&self, spec: &MelSpec) -> PyResult<DMelSeq> {
        meldsp::discretize(&spec.inner, &self.inner).map(|inner| DMelSeq { inner }).map_err(value_err)
    }

    fn invert(&self, seq: &DMelSeq) -> PyResult<MelSpec> {
        meldsp::invert(&seq.inner, &self.inner).map(|inner| MelSpec { inner }).map_err(value_err)
    }
}

#[pyfunction]
#[pyo3(signature = (samples, config=None))]
fn compute_logmel(samples: Vec<f64>, config: Option<MelConfig>) -> PyResult<MelSpec> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let audio = AudioSignal::new(samples, cfg.sample_rate).map_err(value_err)?;
    meldsp::compute_logmel(&audio, &cfg).map(|inner| MelSpec { inner }).map_err(value_err)
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct ToySample {
    inner: synth::ToySample,
}

#[pymethods]
impl ToySample {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn text(&self) -> &str {
        &self.inner.text
    }

    #[getter]
    fn speaker_id(&self) -> usize {
        self.inner.speaker_id
    }

    #[getter]
    fn video_frames(&self) -> usize {
        self.inner.video.frames()
    }

    #[getter]
    fn speech(&self) -> DMelSeq {
        DMelSeq { inner: self.inner.speech.clone() }
    }

    /// Half-open active video spans.
    #[getter]
    fn spans(&self) -> Vec<(usize, usize)> {
        self.inner.timing.spans.iter().map(|s| (s[0], s[1])).collect()
    }

    /// `(label, start, end)` per character, in seconds.
    #[getter]
    fn alignment(&self) -> Vec<(String, f64, f64)> {
        self.inner.alignment.segments.iter().map(|s| (s.label.clone(), s.start, s.end)).collect()
    }
}

#[pyclass]
struct ToyWorld {
    inner: synth::ToyWorld,
}

#[pymethods]
impl ToyWorld {
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> PyResult<Self> {
        let cfg = ToyWorldConfig { seed, ..Default::default() };
        synth::make_world(&cfg).map(|inner| Self { inner }).map_err(value_err)
    }

    #[pyo3(signature = (index, split="train"))]
    fn sample(&self, index: usize, split: &str) -> PyResult<ToySample> {
        let split = match split {
            "train" => Split::Train,
            "eval" => Split::Eval,
            _ => return Err(PyValueError::new_err(format!("unknown split {split:?}"))),
        };
        self.inner.random_sample(split, index).map(|inner| ToySample { inner }).map_err(value_err)
    }

    /// Sample with a chosen text and half-open video spans.
    fn make_sample(&self, text: &str, video_frames: usize, spans: Vec<(usize, usize)>, speaker: usize) -> PyResult<ToySample> {
        let timing = synth::TimingPattern { video_frames, spans: spans.into_iter().map(|(a, b)| [a, b]).collect() };
        self.inner.make_sample(text, &timing, speaker).map(|inner| ToySample { inner }).map_err(value_err)
    }

    fn decode_content(&self, speech: &DMelSeq) -> String {
        self.inner.decode_content(&speech.inner)
    }
}

#[pyfunction]
#[pyo3(signature = (text, video_frames, speech_frames, layout="vt_ordered", pos="global"))]
fn inspect_plan(text: &str, video_frames: Option<usize>, speech_frames: usize, layout: &str, pos: &str) -> PyResult<String> {
    let world = synth::make_world(&ToyWorldConfig::default()).map_err(value_err)?;
    let tokens = tokenize(text, world.vocab());
    let inputs = PlanInputs::new(Some(&tokens), video_frames, speech_frames);
    build_plan(&inputs, parse_layout(layout)?, parse_pos(pos)?)
        .map(|p| p.render())
        .map_err(value_err)
}

#[pyclass]
struct Model {
    config: RunConfig,
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, inner) = train::load_model(&path).map_err(value_err)?;
        Ok(Self { config, inner })
    }

    #[getter]
    fn layout(&self) -> String {
        format!("{:?}", self.config.layout)
    }

    #[pyo3(signature = (sample, drop_video=false, drop_text=false, temperature=0.0, max_frames=None, seed=0))]
    fn generate(
        &self,
        sample: &ToySample,
        drop_video: bool,
        drop_text: bool,
        temperature: f64,
        max_frames: Option<usize>,
        seed: u64,
    ) -> PyResult<DMelSeq> {
        let s = &sample.inner;
        let inputs = GenInputs { speaker: &s.speaker, video: Some(&s.video), text: Some(&s.tokens) };
        let opts = GenOptions { temperature, max_frames, drop_video, drop_text, seed, ..Default::default() };
        sampler::generate(&self.inner, &inputs, self.config.layout, self.config.pos, &opts)
            .map(|g| DMelSeq { inner: g.speech })
            .map_err(value_err)
    }

    /// Held-out next-frame channel accuracy under teacher forcing.
    fn accuracy(&self, samples: Vec<ToySample>) -> PyResult<f64> {
        let samples: Vec<_> = samples.into_iter().map(|s| s.inner).collect();
        train::eval_accuracy(&self.inner, &samples, self.config.layout, self.config.pos).map_err(value_err)
    }

    /// Greedy generation scored for content and DTW TimeSync.
    fn evaluate(&self, world: &ToyWorld, samples: Vec<ToySample>) -> PyResult<(f64, Option<f64>, f64)> {
        let samples: Vec<_> = samples.into_iter().map(|s| s.inner).collect();
        let evals = evaluate::evaluate_generation(
            &self.inner,
            &world.inner,
            &samples,
            self.config.layout,
            self.config.pos,
            &GenOptions::default(),
        )
        .map_err(value_err)?;
        let s = evaluate::summarize(&evals);
        Ok((s.content_accuracy, s.timesync, s.overshoot_rate))
    }
}

#[pyclass]
struct Trainer {
    inner: train::Trainer,
}

#[pymethods]
impl Trainer {
    /// Run config in TOML; missing keys take their defaults.
    #[new]
    #[pyo3(signature = (config=""))]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_toml(config).map_err(value_err)?;
        train::Trainer::new(cfg).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    /// One optimizer step; returns `(loss, grad_norm, lr)`.
    fn train_step(&mut self, samples: Vec<ToySample>) -> PyResult<(f64, f64, f64)> {
        let samples: Vec<_> = samples.into_iter().map(|s| s.inner).collect();
        let m = self.inner.train_step(&samples).map_err(value_err)?;
        Ok((m.loss, m.grad_norm, m.lr))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(value_err)
    }
}

#[pyfunction]
fn timesync_mean(gt: Vec<(String, f64, f64)>, gen: Vec<(String, f64, f64)>) -> PyResult<Option<f64>> {
    let to_align = |v: Vec<(String, f64, f64)>, src| {
        let segs = v.into_iter().map(|(label, start, end)| PhonemeSegment { label, start, end }).collect();
        PhonemeAlignment::new(segs, src).map_err(value_err)
    };
    let gt = to_align(gt, AlignmentSource::GroundTruth)?;
    let gen = to_align(gen, AlignmentSource::Generated)?;
    Ok(timesync::timesync(&gt, &gen).mean)
}

#[pyfunction]
fn content_accuracy(hyp: &str, reference: &str) -> f64 {
    synth::content_accuracy(hyp, reference)
}

#[pymodule]
fn vtts(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<MelConfig>()?;
    m.add_class::<MelSpec>()?;
    m.add_class::<DMelSeq>()?;
    m.add_class::<DMelCodebook>()?;
    m.add_class::<ToySample>()?;
    m.add_class::<ToyWorld>()?;
    m.add_class::<Model>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(compute_logmel, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_plan, m)?)?;
    m.add_function(wrap_pyfunction!(timesync_mean, m)?)?;
    m.add_function(wrap_pyfunction!(content_accuracy, m)?)?;
    Ok(())
}
