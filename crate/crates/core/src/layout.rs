//! Multimodal sequence plans: slot order, positions, loss targets and span
//! masking.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizers::TextTokens;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("layout {layout:?} requires {missing}")]
    MissingModality { layout: LayoutKind, missing: &'static str },
    #[error("invalid position scheme: {0}")]
    Scheme(String),
    #[error("internal layout error: {0}")]
    Internal(String),
    #[error("invalid masking parameters: {0}")]
    Masking(String),
}

pub type Result<T, E = LayoutError> = std::result::Result<T, E>;

pub const SPEECH_FRAME_US: u64 = 25_000;
pub const VIDEO_FRAME_US: u64 = 40_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Tts,
    TvOrdered,
    VtOrdered,
    TvStreaming,
    VOnly,
}

impl LayoutKind {
    pub fn uses_text(self) -> bool {
        self != LayoutKind::VOnly
    }

    pub fn uses_video(self) -> bool {
        self != LayoutKind::Tts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PositionScheme {
    Global,
    TimeAligned {
        #[serde(default = "default_base_unit")]
        base_unit_seconds: f64,
    },
}

fn default_base_unit() -> f64 {
    0.005
}

impl PositionScheme {
    pub fn time_aligned() -> Self {
        PositionScheme::TimeAligned {
            base_unit_seconds: default_base_unit(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Text,
    Video,
    Speech,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Speaker,
    Bos(Stream),
    Eos(Stream),
    Text { token: u32 },
    Video { frame: usize },
    Speech { frame: usize },
}

impl SlotKind {
    /// The stream whose mask vector replaces this slot when masked. The speech
    /// EOS slot is an input frame and belongs to the speech stream.
    pub fn maskable_stream(self) -> Option<Stream> {
        match self {
            SlotKind::Text { .. } => Some(Stream::Text),
            SlotKind::Video { .. } => Some(Stream::Video),
            SlotKind::Speech { .. } | SlotKind::Eos(Stream::Speech) => Some(Stream::Speech),
            _ => None,
        }
    }
}

/// What a loss-target slot predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpeechTarget {
    Frame(usize),
    Eos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub kind: SlotKind,
    pub position: usize,
    pub timestamp_us: Option<u64>,
    pub target: Option<SpeechTarget>,
    pub is_loss_target: bool,
    pub masked: bool,
}

impl Slot {
    fn new(kind: SlotKind) -> Self {
        Self {
            kind,
            position: 0,
            timestamp_us: None,
            target: None,
            is_loss_target: false,
            masked: false,
        }
    }

    pub fn timestamp_seconds(&self) -> Option<f64> {
        self.timestamp_us.map(|t| t as f64 / 1e6)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequencePlan {
    pub slots: Vec<Slot>,
    pub layout: LayoutKind,
    pub scheme: PositionScheme,
    pub n_text: usize,
    pub n_video: usize,
    pub n_speech: usize,
}

/// Conditioning shape for [`build_plan`]: text is absent for `VOnly`, video
/// absent for `Tts`. A dropped modality is present with length zero.
#[derive(Clone, Copy, Debug)]
pub struct PlanInputs<'a> {
    pub text: Option<&'a TextTokens>,
    pub video_frames: Option<usize>,
    pub video_period_us: u64,
    pub speech_frames: usize,
}

impl<'a> PlanInputs<'a> {
    pub fn new(text: Option<&'a TextTokens>, video_frames: Option<usize>, speech_frames: usize) -> Self {
        Self {
            text,
            video_frames,
            video_period_us: VIDEO_FRAME_US,
            speech_frames,
        }
    }
}

pub fn build_plan(inputs: &PlanInputs<'_>, layout: LayoutKind, scheme: PositionScheme) -> Result<SequencePlan> {
    let text = if layout.uses_text() {
        Some(inputs.text.ok_or(LayoutError::MissingModality {
            layout,
            missing: "text",
        })?)
    } else {
        None
    };
    let n_video = if layout.uses_video() {
        Some(inputs.video_frames.ok_or(LayoutError::MissingModality {
            layout,
            missing: "video",
        })?)
    } else {
        None
    };
    let n_speech = inputs.speech_frames;
    let vp = inputs.video_period_us;
    if vp == 0 {
        return Err(LayoutError::Scheme("video frame period must be positive".into()));
    }

    let text_block = |out: &mut Vec<Slot>| {
        if let Some(t) = text {
            out.push(Slot::new(SlotKind::Bos(Stream::Text)));
            out.extend(t.ids.iter().map(|&token| Slot::new(SlotKind::Text { token })));
            out.push(Slot::new(SlotKind::Eos(Stream::Text)));
        }
    };
    let video_slot = |f: usize| Slot {
        timestamp_us: Some(f as u64 * vp),
        ..Slot::new(SlotKind::Video { frame: f })
    };
    let speech_slot = |f: usize| Slot {
        timestamp_us: Some(f as u64 * SPEECH_FRAME_US),
        ..Slot::new(SlotKind::Speech { frame: f })
    };
    let video_block = |out: &mut Vec<Slot>| {
        if let Some(n) = n_video {
            out.push(Slot::new(SlotKind::Bos(Stream::Video)));
            out.extend((0..n).map(video_slot));
            out.push(Slot {
                timestamp_us: Some(n as u64 * vp),
                ..Slot::new(SlotKind::Eos(Stream::Video))
            });
        }
    };
    let eos_speech = Slot {
        timestamp_us: Some(n_speech as u64 * SPEECH_FRAME_US),
        ..Slot::new(SlotKind::Eos(Stream::Speech))
    };

    let mut slots = vec![Slot::new(SlotKind::Speaker)];
    match layout {
        LayoutKind::Tts | LayoutKind::TvOrdered | LayoutKind::VOnly => {
            text_block(&mut slots);
            video_block(&mut slots);
        }
        LayoutKind::VtOrdered => {
            video_block(&mut slots);
            text_block(&mut slots);
        }
        LayoutKind::TvStreaming => {
            text_block(&mut slots);
            let nv = n_video.expect("checked above");
            slots.push(Slot::new(SlotKind::Bos(Stream::Video)));
            slots.push(Slot::new(SlotKind::Bos(Stream::Speech)));
            let (mut v, mut s) = (0, 0);
            while v < nv || s < n_speech {
                let vt = (v < nv).then(|| v as u64 * vp);
                let st = (s < n_speech).then(|| s as u64 * SPEECH_FRAME_US);
                let take_video = match (vt, st) {
                    (Some(a), Some(b)) => a <= b,
                    (Some(_), None) => true,
                    _ => false,
                };
                if take_video {
                    slots.push(video_slot(v));
                    v += 1;
                } else {
                    slots.push(speech_slot(s));
                    s += 1;
                }
            }
            slots.push(Slot {
                timestamp_us: Some(nv as u64 * vp),
                ..Slot::new(SlotKind::Eos(Stream::Video))
            });
            slots.push(eos_speech);
        }
    }
    if layout != LayoutKind::TvStreaming {
        slots.push(Slot::new(SlotKind::Bos(Stream::Speech)));
        slots.extend((0..n_speech).map(speech_slot));
        slots.push(eos_speech);
    }

    for slot in &mut slots {
        let target = match slot.kind {
            SlotKind::Bos(Stream::Speech) => Some(0),
            SlotKind::Speech { frame } => Some(frame + 1),
            _ => None,
        };
        if let Some(next) = target {
            slot.target = Some(if next < n_speech {
                SpeechTarget::Frame(next)
            } else {
                SpeechTarget::Eos
            });
            slot.is_loss_target = true;
        }
    }

    assign_positions(&mut slots, scheme, vp)?;
    let plan = SequencePlan {
        slots,
        layout,
        scheme,
        n_text: text.map_or(0, |t| t.len()),
        n_video: n_video.unwrap_or(0),
        n_speech,
    };
    plan.check_timestamps()?;
    Ok(plan)
}

fn assign_positions(slots: &mut [Slot], scheme: PositionScheme, video_period_us: u64) -> Result<()> {
    match scheme {
        PositionScheme::Global => {
            for (i, s) in slots.iter_mut().enumerate() {
                s.position = i;
            }
        }
        PositionScheme::TimeAligned { base_unit_seconds } => {
            let unit = (base_unit_seconds * 1e6).round() as u64;
            if unit == 0 || SPEECH_FRAME_US % unit != 0 || video_period_us % unit != 0 {
                return Err(LayoutError::Scheme(format!(
                    "base unit {base_unit_seconds} s must divide both frame periods"
                )));
            }
            let timed = |k: SlotKind| {
                matches!(
                    k,
                    SlotKind::Video { .. }
                        | SlotKind::Speech { .. }
                        | SlotKind::Eos(Stream::Video)
                        | SlotKind::Eos(Stream::Speech)
                )
            };
            let mut next = 0;
            for s in slots.iter_mut().filter(|s| !timed(s.kind)) {
                s.position = next;
                next += 1;
            }
            let base = next;
            for s in slots.iter_mut().filter(|s| timed(s.kind)) {
                let ts = s.timestamp_us.ok_or_else(|| LayoutError::Internal("timed slot without timestamp".into()))?;
                s.position = base + (ts / unit) as usize;
            }
        }
    }
    Ok(())
}

impl SequencePlan {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.position).collect()
    }

    pub fn loss_target_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_loss_target).count()
    }

    /// Index of the last slot carrying a target, before masking exclusions.
    pub fn last_target_slot(&self) -> Option<usize> {
        self.slots.iter().rposition(|s| s.target.is_some())
    }

    pub fn slot_of(&self, kind: SlotKind) -> Option<usize> {
        self.slots.iter().position(|s| s.kind == kind)
    }

    /// Frame-bearing slots must appear in time order within each stream.
    fn check_timestamps(&self) -> Result<()> {
        let mut last_v = None;
        let mut last_s = None;
        for s in &self.slots {
            let prev = match s.kind {
                SlotKind::Video { .. } => &mut last_v,
                SlotKind::Speech { .. } => &mut last_s,
                _ => continue,
            };
            let ts = s.timestamp_us;
            if ts.is_none() || (prev.is_some() && *prev >= ts) {
                return Err(LayoutError::Internal("non-monotone timestamps".into()));
            }
            *prev = ts;
        }
        Ok(())
    }

    /// Causal attention mask: slot `i` may attend to slot `j` iff `j <= i`.
    pub fn causal_reachability(&self) -> Vec<Vec<bool>> {
        let n = self.slots.len();
        (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()
    }

    /// One line per slot: index, kind, position, timestamp and flags.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# layout={:?} scheme={} text={} video={} speech={}",
            self.layout,
            match self.scheme {
                PositionScheme::Global => "global".to_string(),
                PositionScheme::TimeAligned { base_unit_seconds } => format!("time_aligned({base_unit_seconds})"),
            },
            self.n_text,
            self.n_video,
            self.n_speech
        )
        .unwrap();
        for (i, s) in self.slots.iter().enumerate() {
            let kind = match s.kind {
                SlotKind::Speaker => "speaker".to_string(),
                SlotKind::Bos(st) => format!("bos_{}", stream_name(st)),
                SlotKind::Eos(st) => format!("eos_{}", stream_name(st)),
                SlotKind::Text { token } => format!("text:{token}"),
                SlotKind::Video { frame } => format!("video:{frame}"),
                SlotKind::Speech { frame } => format!("speech:{frame}"),
            };
            let ts = s.timestamp_seconds().map_or("-".to_string(), |t| format!("{t:.3}"));
            let target = match s.target {
                None => "-".to_string(),
                Some(SpeechTarget::Frame(f)) => format!("frame:{f}"),
                Some(SpeechTarget::Eos) => "eos".to_string(),
            };
            let mut flags = Vec::new();
            if s.is_loss_target {
                flags.push("loss");
            }
            if s.masked {
                flags.push("masked");
            }
            let flags = if flags.is_empty() { "-".to_string() } else { flags.join(",") };
            writeln!(out, "{i}\t{kind}\t{}\t{ts}\t{target}\t{flags}", s.position).unwrap();
        }
        out
    }
}

fn stream_name(s: Stream) -> &'static str {
    match s {
        Stream::Text => "t",
        Stream::Video => "v",
        Stream::Speech => "s",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub p: f64,
    pub mean_span: f64,
    pub ratio: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            mean_span: 3.0,
            ratio: 0.5,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(LayoutError::Masking(format!("p = {} outside [0, 1]", self.p)));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(LayoutError::Masking(format!("ratio = {} outside [0, 1]", self.ratio)));
        }
        if !(self.mean_span >= 1.0) {
            return Err(LayoutError::Masking(format!("mean_span = {} below 1", self.mean_span)));
        }
        Ok(())
    }
}

/// Span masking applied to a whole sample with probability `cfg.p`.
///
/// For each stream (video frames, text tokens, speech frames including the
/// speech EOS slot) a target count `floor(ratio·n + u)`, `u ~ U[0, 1)`, is
/// masked with spans whose starts are uniform and whose lengths are geometric
/// with mean `mean_span`; the span that reaches the target is truncated.
/// Loss targets whose target frame slot is masked are dropped.
pub fn apply_span_masking<R: Rng + ?Sized>(plan: &SequencePlan, cfg: &MaskingConfig, rng: &mut R) -> Result<SequencePlan> {
    cfg.validate()?;
    let mut out = plan.clone();
    if cfg.p == 0.0 || rng.random::<f64>() >= cfg.p {
        return Ok(out);
    }
    let geom = Geometric::new(1.0 / cfg.mean_span).map_err(|e| LayoutError::Masking(e.to_string()))?;
    for stream in [Stream::Video, Stream::Text, Stream::Speech] {
        let members: Vec<usize> = out
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind.maskable_stream() == Some(stream))
            .map(|(i, _)| i)
            .collect();
        let n = members.len();
        if n == 0 {
            continue;
        }
        let goal = ((cfg.ratio * n as f64 + rng.random::<f64>()).floor() as usize).min(n);
        let mut hit = vec![false; n];
        let mut count = 0;
        while count < goal {
            let start = rng.random_range(0..n);
            let len = geom.sample(rng) as usize + 1;
            for k in start..(start + len).min(n) {
                if count == goal {
                    break;
                }
                if !hit[k] {
                    hit[k] = true;
                    count += 1;
                }
            }
        }
        for (k, &i) in members.iter().enumerate() {
            out.slots[i].masked = hit[k];
        }
    }
    let eos_masked = out
        .slots
        .iter()
        .any(|s| s.kind == SlotKind::Eos(Stream::Speech) && s.masked);
    let mut frame_masked = vec![false; out.n_speech];
    for s in &out.slots {
        if let SlotKind::Speech { frame } = s.kind {
            frame_masked[frame] = s.masked;
        }
    }
    for s in &mut out.slots {
        let dropped = match s.target {
            Some(SpeechTarget::Frame(f)) => frame_masked[f],
            Some(SpeechTarget::Eos) => eos_masked,
            None => false,
        };
        if dropped {
            s.is_loss_target = false;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn text(n: usize) -> TextTokens {
        TextTokens {
            ids: (0..n as u32).collect(),
        }
    }

    fn plan(n: usize, tv: usize, ts: usize, layout: LayoutKind, scheme: PositionScheme) -> SequencePlan {
        let t = text(n);
        build_plan(&PlanInputs::new(Some(&t), Some(tv), ts), layout, scheme).unwrap()
    }

    #[test]
    fn vt_ordered_slot_count() {
        let p = plan(2, 3, 4, LayoutKind::VtOrdered, PositionScheme::Global);
        assert_eq!(p.len(), 16);
        assert_eq!(p.slots[1].kind, SlotKind::Bos(Stream::Video));
        assert_eq!(p.slots[6].kind, SlotKind::Bos(Stream::Text));
        assert_eq!(p.positions(), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn streaming_merge_order() {
        let p = plan(0, 3, 4, LayoutKind::TvStreaming, PositionScheme::Global);
        let order: Vec<String> = p
            .slots
            .iter()
            .filter_map(|s| match s.kind {
                SlotKind::Video { .. } => Some(format!("v{}", s.timestamp_us.unwrap() / 1000)),
                SlotKind::Speech { .. } => Some(format!("s{}", s.timestamp_us.unwrap() / 1000)),
                _ => None,
            })
            .collect();
        assert_eq!(order, ["v0", "s0", "s25", "v40", "s50", "s75", "v80"]);
    }

    #[test]
    fn time_aligned_positions() {
        let p = plan(2, 10, 12, LayoutKind::VtOrdered, PositionScheme::time_aligned());
        // speaker, bos_v, bos_t, 2 text, eos_t, bos_s
        let base = 7;
        let pos = |k| p.slots[p.slot_of(k).unwrap()].position;
        assert_eq!(pos(SlotKind::Video { frame: 1 }), base + 8);
        assert_eq!(pos(SlotKind::Speech { frame: 1 }), base + 5);
        assert_eq!(pos(SlotKind::Speech { frame: 8 }), base + 40);
        assert_eq!(pos(SlotKind::Video { frame: 5 }), base + 40);
        assert_eq!(pos(SlotKind::Eos(Stream::Video)), base + 80);
        assert_eq!(pos(SlotKind::Eos(Stream::Speech)), base + 60);
        let bad = PositionScheme::TimeAligned {
            base_unit_seconds: 0.003,
        };
        let t = text(1);
        assert!(build_plan(&PlanInputs::new(Some(&t), Some(2), 2), LayoutKind::TvOrdered, bad).is_err());
    }

    #[test]
    fn targets() {
        let p = plan(1, 2, 3, LayoutKind::TvOrdered, PositionScheme::Global);
        let targets: Vec<_> = p.slots.iter().filter_map(|s| s.target).collect();
        assert_eq!(
            targets,
            [
                SpeechTarget::Frame(0),
                SpeechTarget::Frame(1),
                SpeechTarget::Frame(2),
                SpeechTarget::Eos
            ]
        );
        let p = plan(1, 2, 0, LayoutKind::TvOrdered, PositionScheme::Global);
        assert_eq!(p.slots.iter().filter_map(|s| s.target).collect::<Vec<_>>(), [SpeechTarget::Eos]);
    }

    #[test]
    fn missing_modalities() {
        let t = text(1);
        let no_video = PlanInputs::new(Some(&t), None, 3);
        assert!(build_plan(&no_video, LayoutKind::TvOrdered, PositionScheme::Global).is_err());
        assert!(build_plan(&no_video, LayoutKind::Tts, PositionScheme::Global).is_ok());
        let no_text = PlanInputs::new(None, Some(2), 3);
        assert!(build_plan(&no_text, LayoutKind::VtOrdered, PositionScheme::Global).is_err());
        let v = build_plan(&no_text, LayoutKind::VOnly, PositionScheme::Global).unwrap();
        assert_eq!(v.len(), 1 + 4 + 5);
    }

    #[test]
    fn reachability_is_lower_triangular() {
        let p = plan(1, 2, 2, LayoutKind::TvStreaming, PositionScheme::Global);
        let m = p.causal_reachability();
        assert_eq!(m[0].iter().filter(|&&b| b).count(), 1);
        for (i, row) in m.iter().enumerate() {
            for (j, &b) in row.iter().enumerate() {
                assert_eq!(b, j <= i);
            }
        }
    }

    #[test]
    fn masking_edge_cases() {
        let p = plan(3, 10, 16, LayoutKind::VtOrdered, PositionScheme::Global);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = MaskingConfig {
            p: 0.0,
            ..Default::default()
        };
        assert_eq!(apply_span_masking(&p, &none, &mut rng).unwrap(), p);
        let all = MaskingConfig {
            p: 1.0,
            ratio: 1.0,
            ..Default::default()
        };
        let m = apply_span_masking(&p, &all, &mut rng).unwrap();
        assert_eq!(m.loss_target_count(), 0);
        assert!(!m.slots[0].masked);
        assert!(m
            .slots
            .iter()
            .filter(|s| matches!(s.kind, SlotKind::Bos(_)))
            .all(|s| !s.masked));
    }

    #[test]
    fn masked_fraction_is_near_ratio() {
        let p = plan(6, 30, 48, LayoutKind::TvOrdered, PositionScheme::Global);
        let cfg = MaskingConfig {
            p: 1.0,
            ..Default::default()
        };
        for stream in [Stream::Video, Stream::Text, Stream::Speech] {
            let mut frac = 0.0;
            for seed in 0..1000 {
                let m = apply_span_masking(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let members: Vec<_> = m.slots.iter().filter(|s| s.kind.maskable_stream() == Some(stream)).collect();
                frac += members.iter().filter(|s| s.masked).count() as f64 / members.len() as f64;
            }
            frac /= 1000.0;
            assert!((0.45..=0.55).contains(&frac), "{stream:?}: {frac}");
        }
    }

    proptest! {
        #[test]
        fn plan_invariants(
            n in 0usize..8, tv in 0usize..30, ts in 0usize..50,
            layout in prop_oneof![
                Just(LayoutKind::Tts), Just(LayoutKind::TvOrdered), Just(LayoutKind::VtOrdered),
                Just(LayoutKind::TvStreaming), Just(LayoutKind::VOnly)
            ],
            aligned in any::<bool>(),
        ) {
            let scheme = if aligned { PositionScheme::time_aligned() } else { PositionScheme::Global };
            let p = plan(n, tv, ts, layout, scheme);
            let mut want = 1 + ts + 2;
            if layout.uses_text() { want += n + 2; }
            if layout.uses_video() { want += tv + 2; }
            prop_assert_eq!(p.len(), want);
            prop_assert_eq!(p.loss_target_count(), ts + 1);
            prop_assert_eq!(p.slots.iter().filter(|s| s.kind == SlotKind::Speaker).count(), 1);
            if layout == LayoutKind::TvStreaming {
                let mut latest_video = None;
                for s in &p.slots {
                    match s.kind {
                        SlotKind::Video { .. } => latest_video = s.timestamp_us,
                        SlotKind::Speech { .. } => prop_assert!(latest_video <= s.timestamp_us),
                        _ => {}
                    }
                }
            }
        }
    }
}
