use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;

use vtts_core::layout::{build_plan, LayoutKind, PlanInputs, PositionScheme};
use vtts_core::meldsp::{compute_logmel, discretize, fit_codebook, griffin_lim, invert, AudioSignal, DMelSeq, MelConfig};
use vtts_core::sampler::{generate as sample_speech, GenInputs, GenOptions};
use vtts_core::synth::{
    content_accuracy, load_sample, load_world, make_world, read_manifest, toy_codebook, write_corpus, CorpusRecord,
    Split, ToySample, ToyWorld, ToyWorldConfig, MANIFEST,
};
use vtts_core::timesync::{dtw_timesync, offset_histogram_csv, parse_alignment, timesync, AlignmentSource, TimeSyncReport};
use vtts_core::tokenizers::tokenize;
use vtts_core::train::{eval_accuracy, eval_loss, load_model, RunConfig, Trainer};

use crate::{
    CliError, CodecRoundtripArgs, EvalTimesyncArgs, GenerateArgs, InspectPlanArgs, Result, SplitArg, SynthDataArgs,
    TrainArgs,
};

const DEFAULT_RUN_DIR: &str = "runs/default";
const GENERATED: &str = "generated.jsonl";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn env_threads() -> Result<usize> {
    match std::env::var("VTTS_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("VTTS_THREADS={v:?} is not a positive integer"))),
        Err(_) => Ok(1),
    }
}

fn load_corpus(dir: &Path) -> Result<(ToyWorld, Vec<CorpusRecord>)> {
    let world = load_world(dir)?;
    let records = read_manifest(&dir.join(MANIFEST))?;
    Ok((world, records))
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
    }
}

pub fn synth_data(a: &SynthDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str::<ToyWorldConfig>(&read_text(p)?)
            .map_err(|e| CliError::Runtime(format!("{}: {}", p.display(), e)))?,
        None => ToyWorldConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let world = make_world(&cfg)?;
    create_dir(&a.out)?;
    let records = write_corpus(&world, &a.out, a.n_train, a.n_eval)?;
    println!(
        "{}",
        json!({"out": a.out, "n_train": a.n_train, "n_eval": a.n_eval, "records": records.len(), "seed": cfg.seed})
    );
    Ok(())
}

/// Train and eval samples, from a corpus directory or generated in memory.
fn training_data(cfg: &RunConfig) -> Result<(Vec<ToySample>, Vec<ToySample>)> {
    match &cfg.data.corpus {
        Some(dir) => {
            let (world, records) = load_corpus(dir)?;
            if world.config() != &cfg.data.world {
                return Err(CliError::Runtime(format!(
                    "{} was generated with a different toy-world config",
                    dir.display()
                )));
            }
            let (mut train, mut eval) = (Vec::new(), Vec::new());
            for r in &records {
                let s = load_sample(dir, r, world.vocab())?;
                match r.split {
                    Split::Train => train.push(s),
                    Split::Eval => eval.push(s),
                }
            }
            if train.is_empty() {
                return Err(CliError::Runtime(format!("{} has no training samples", dir.display())));
            }
            Ok((train, eval))
        }
        None => {
            let c = make_world(&cfg.data.world)?.make_corpus(cfg.data.n_train, cfg.data.n_eval)?;
            Ok((c.train, c.eval))
        }
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let run_dir = a
        .run_dir
        .clone()
        .or_else(|| std::env::var_os("VTTS_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR));
    let threads = env_threads()?;
    let trainer = match (&a.resume, &a.config) {
        (Some(ckpt), config) => {
            let t = Trainer::load_checkpoint(ckpt)?;
            if let Some(p) = config {
                let given = RunConfig::from_toml(&read_text(p)?)?;
                if given != t.config {
                    return Err(CliError::Usage(format!("{} differs from the checkpoint's run config", p.display())));
                }
            }
            t
        }
        (None, Some(p)) => Trainer::new(RunConfig::from_toml(&read_text(p)?)?)?,
        (None, None) => return Err(CliError::Usage("train needs --config or --resume".into())),
    };
    let mut trainer = trainer.with_threads(threads);
    let cfg = trainer.config.clone();
    let until = a.until.unwrap_or(cfg.optimizer.total_steps);

    create_dir(&run_dir)?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
    let (train, eval) = training_data(&cfg)?;
    let eval = &eval[..a.eval_samples.min(eval.len())];
    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", metrics_path.display())))?;
    info!(
        "training {} samples from step {} to {until} into {}",
        train.len(),
        trainer.step,
        run_dir.display()
    );
    while trainer.step < until {
        let m = trainer.train_step(&train)?;
        writeln!(metrics, "{}", json!({"kind": "train", "step": m.step, "loss": m.loss, "grad_norm": m.grad_norm, "lr": m.lr}))?;
        if m.step % cfg.checkpoint_every.max(1) == 0 || m.step == until {
            let path = run_dir.join(format!("ckpt-{:06}.vtt", m.step));
            trainer.save_checkpoint(&path)?;
            trainer.save_checkpoint(&run_dir.join("last.vtt"))?;
            if !eval.is_empty() {
                let acc = eval_accuracy(&trainer.model, eval, cfg.layout, cfg.pos)?;
                let loss = eval_loss(&trainer.model, eval, cfg.layout, cfg.pos)?;
                writeln!(metrics, "{}", json!({"kind": "eval", "step": m.step, "loss": loss, "accuracy": acc}))?;
                info!("step {} loss {:.4} eval loss {loss:.4} accuracy {acc:.4}", m.step, m.loss);
            }
        }
    }
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let opts = GenOptions {
        temperature: a.temperature,
        max_frames: a.max_frames,
        stop_rule: a.stop_rule,
        drop_video: a.drop_video,
        drop_text: a.drop_text,
        seed: a.seed,
    };
    opts.validate()?;
    let (cfg, model) = load_model(&a.checkpoint)?;
    let (world, records) = load_corpus(&a.corpus)?;
    let split = split_of(a.split);
    let chosen: Vec<&CorpusRecord> = records
        .iter()
        .filter(|r| r.split == split)
        .take(a.limit.unwrap_or(usize::MAX))
        .collect();

    create_dir(&a.out.join("speech"))?;
    if a.mel {
        create_dir(&a.out.join("mel"))?;
    }
    if a.wav_iterations.is_some() {
        create_dir(&a.out.join("wav"))?;
    }
    fs::write(
        a.out.join("options.json"),
        serde_json::to_string_pretty(&json!({"checkpoint": a.checkpoint, "corpus": a.corpus, "options": opts}))?,
    )?;
    let mut log = create_file(&a.out.join(GENERATED))?;
    let cb = toy_codebook();
    let (mut acc_sum, mut frames, mut gt_frames, mut overshoot) = (0.0, 0usize, 0usize, 0usize);
    for rec in &chosen {
        let s = load_sample(&a.corpus, rec, world.vocab())?;
        let inputs = GenInputs {
            speaker: &s.speaker,
            video: Some(&s.video),
            text: Some(&s.tokens),
        };
        let g = sample_speech(&model, &inputs, cfg.layout, cfg.pos, &opts)?;
        g.speech.write(&a.out.join(format!("speech/{}.dmel", rec.id)))?;
        if a.mel || a.wav_iterations.is_some() {
            let mel = invert(&g.speech, &cb)?;
            if a.mel {
                mel.to_tensor_file().write(&a.out.join(format!("mel/{}.mel", rec.id)))?;
            }
            if let (Some(iters), true) = (a.wav_iterations, g.n_frames() > 0) {
                let mel_cfg = MelConfig {
                    n_mels: mel.n_mels(),
                    ..MelConfig::default()
                };
                write_wav(&a.out.join(format!("wav/{}.wav", rec.id)), &griffin_lim(&mel, &mel_cfg, iters)?)?;
            }
        }
        let decoded = world.decode_content(&g.speech);
        let acc = content_accuracy(&decoded, &s.text);
        acc_sum += acc;
        frames += g.n_frames();
        gt_frames += s.speech.n_frames();
        overshoot += usize::from(g.n_frames() > s.speech.n_frames());
        writeln!(
            log,
            "{}",
            json!({
                "id": rec.id,
                "n_frames": g.n_frames(),
                "gt_frames": s.speech.n_frames(),
                "stray_eos": g.stray_eos,
                "stopped_by_eos": g.stopped_by_eos,
                "text": s.text,
                "decoded": decoded,
                "content_accuracy": acc,
            })
        )?;
    }
    let n = chosen.len().max(1) as f64;
    println!(
        "{}",
        json!({
            "summary": true,
            "n": chosen.len(),
            "layout": cfg.layout,
            "content_accuracy": acc_sum / n,
            "mean_frames": frames as f64 / n,
            "mean_gt_frames": gt_frames as f64 / n,
            "overshoot_rate": overshoot as f64 / n,
        })
    );
    Ok(())
}

fn write_wav(path: &Path, audio: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &x in audio.samples() {
        w.write_sample(x as f32)?;
    }
    w.finalize()?;
    Ok(())
}

fn generated_ids(gen: &Path) -> Result<Vec<String>> {
    let log = gen.join(GENERATED);
    if log.exists() {
        return read_text(&log)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l)?;
                v["id"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| CliError::Runtime(format!("{}: record without id", log.display())))
            })
            .collect();
    }
    let mut ids: Vec<String> = fs::read_dir(gen.join("speech"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".dmel").map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn eval_timesync(a: &EvalTimesyncArgs) -> Result<()> {
    if !(a.bin_width > 0.0) {
        return Err(CliError::Usage(format!("--bin-width {} must be positive", a.bin_width)));
    }
    let (world, records) = load_corpus(&a.corpus)?;
    let by_id: HashMap<&str, &CorpusRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let cb = toy_codebook();
    let mut offsets = Vec::new();
    let (mut scored, mut failed) = (0usize, 0usize);
    for id in generated_ids(&a.gen)? {
        let rec = by_id
            .get(id.as_str())
            .ok_or_else(|| CliError::Runtime(format!("{id} is not in {}", a.corpus.display())))?;
        let gt = load_sample(&a.corpus, rec, world.vocab())?;
        let align_path = a.gen.join(format!("align/{id}.tsv"));
        let (report, method): (Option<TimeSyncReport>, &str) = if align_path.exists() {
            let gen = parse_alignment(&read_text(&align_path)?, AlignmentSource::Generated)?;
            (Some(timesync(&gt.alignment, &gen)), "alignment")
        } else {
            let gen = DMelSeq::read(&a.gen.join(format!("speech/{id}.dmel")))?;
            if gen.n_frames() == 0 || gt.speech.n_frames() == 0 {
                (None, "dtw")
            } else {
                let r = dtw_timesync(&invert(&gt.speech, &cb)?, &gt.alignment, &invert(&gen, &cb)?)?;
                (Some(r), "dtw")
            }
        };
        match report {
            Some(r) if r.n_pairs > 0 => {
                scored += 1;
                offsets.extend_from_slice(&r.offsets);
                println!(
                    "{}",
                    json!({"id": id, "method": method, "mean": r.mean, "std": r.std, "n_pairs": r.n_pairs, "n_gt": r.n_gt})
                );
            }
            _ => {
                failed += 1;
                println!("{}", json!({"id": id, "method": method, "mean": null, "n_pairs": 0}));
            }
        }
    }
    let n = offsets.len();
    let (mean, std) = if n == 0 {
        (None, None)
    } else {
        let mean = offsets.iter().map(|d: &f64| d.abs()).sum::<f64>() / n as f64;
        let var = offsets.iter().map(|d| (d.abs() - mean).powi(2)).sum::<f64>() / n as f64;
        (Some(mean), Some(var.sqrt()))
    };
    println!(
        "{}",
        json!({"summary": true, "mean": mean, "std": std, "n": n, "utterances": scored, "failed": failed})
    );
    if let Some(path) = &a.histogram {
        fs::write(path, offset_histogram_csv(&offsets, a.bin_width, 1.0))?;
    }
    Ok(())
}

fn read_wav(path: &Path) -> Result<AudioSignal> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<Result<_, _>>()?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let mono = raw.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    Ok(AudioSignal::new(mono, spec.sample_rate)?)
}

pub fn codec_roundtrip(a: &CodecRoundtripArgs) -> Result<()> {
    let mel_cfg = match &a.mel_config {
        Some(p) => toml::from_str::<MelConfig>(&read_text(p)?)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?,
        None => MelConfig::default(),
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&a.audio_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.audio_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Runtime(format!("no .wav files in {}", a.audio_dir.display())));
    }
    let specs = files
        .iter()
        .map(|p| compute_logmel(&read_wav(p)?, &mel_cfg).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    let cb = fit_codebook(specs.iter(), 4)?;
    let (mut max_err, mut sum, mut count) = (0.0f64, 0.0, 0usize);
    for s in &specs {
        let back = invert(&discretize(s, &cb)?, &cb)?;
        for (x, y) in s.values().iter().zip(back.values()) {
            let e = (x - y).abs();
            max_err = max_err.max(e);
            sum += e;
            count += 1;
        }
    }
    let bound = cb.delta() / 2.0;
    println!(
        "{}",
        json!({
            "files": files.len(),
            "values": count,
            "m": cb.m,
            "M": cb.max,
            "max_abs_error": max_err,
            "mean_abs_error": sum / count.max(1) as f64,
            "bound": bound,
            "within_bound": max_err <= bound * (1.0 + 1e-12),
        })
    );
    if max_err > bound * (1.0 + 1e-12) {
        return Err(CliError::Runtime(format!("round-trip error {max_err} exceeds bound {bound}")));
    }
    Ok(())
}

pub fn inspect_plan(a: &InspectPlanArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::from_toml(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    let layout: LayoutKind = a.layout.map_or(cfg.layout, Into::into);
    let pos: PositionScheme = a.pos.map_or(cfg.pos, Into::into);
    let plan = if let (Some(dir), Some(id)) = (&a.corpus, &a.sample) {
        let (world, records) = load_corpus(dir)?;
        let rec = records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| CliError::Runtime(format!("sample {id} not in {}", dir.display())))?;
        let s = load_sample(dir, rec, world.vocab())?;
        build_plan(
            &PlanInputs::new(Some(&s.tokens), Some(s.video.frames()), s.speech.n_frames()),
            layout,
            pos,
        )?
    } else {
        let speech = a
            .speech_frames
            .ok_or_else(|| CliError::Usage("inspect-plan needs --corpus/--sample or --speech-frames".into()))?;
        let world = make_world(&cfg.data.world)?;
        let tokens = a.text.as_deref().map(|t| tokenize(t, world.vocab()));
        build_plan(&PlanInputs::new(tokens.as_ref(), a.video_frames, speech), layout, pos)?
    };
    print!("{}", plan.render());
    Ok(())
}
