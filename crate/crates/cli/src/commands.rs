use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mmvae::chords::HarmonyModel;
use mmvae::codec::{decode_measure, Measure};
use mmvae::corpus::{build_dataset, process_file, read_dataset, split_measures, write_dataset, DatasetStats};
use mmvae::latent::{
    apply_attribute, attribute_vector, decode_progression, interpolate_measures, parse_progression, sample_prior,
    split_by_attribute, Attribute,
};
use mmvae::render::{notes_from_measures, notes_from_score, render as draw, total_steps, RenderFormat, RenderOptions};
use mmvae::smf::{parse_smf, segment_by_meter, write_smf};
use mmvae::vae::{sample_decode, Checkpoint, Example, ModelParams, VaeError};
use mmvae::{ChordClass, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::SamplingArgs;

fn io<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io(path))
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::usage(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn load_params(cfg: &RunConfig, common: &SamplingArgs) -> Result<ModelParams<f32>, CliError> {
    let path = required(common.checkpoint.clone(), &cfg.paths.checkpoint, "checkpoint")?;
    let bytes = fs::read(&path).map_err(io(&path))?;
    Ok(Checkpoint::from_bytes(&bytes)?.params)
}

fn sampling_setup(cfg: &mut RunConfig, common: &SamplingArgs) -> Result<(PathBuf, f64, ChaCha8Rng), CliError> {
    let out = required(common.out.clone(), &cfg.paths.out, "out")?;
    if let Some(t) = common.temperature {
        cfg.sampling.temperature = t;
    }
    if cfg.sampling.temperature.is_nan() || cfg.sampling.temperature < 0.0 {
        return Err(CliError::usage("temperature must be non-negative"));
    }
    let seed = cfg.resolve_seed(common.seed);
    cfg.echo(&out)?;
    Ok((out, cfg.sampling.temperature, ChaCha8Rng::seed_from_u64(seed)))
}

/// Measures of a MIDI file with inferred chords.
fn measures_from_midi(cfg: &RunConfig, path: &Path) -> Result<Vec<Measure>, CliError> {
    let bytes = fs::read(path).map_err(io(path))?;
    let model = HarmonyModel::new(cfg.corpus.chords.clone())?;
    let measures = process_file(&bytes, &model, &mut DatasetStats::default())?;
    if measures.is_empty() {
        return Err(CliError::data(format!("{}: no usable measures", path.display())));
    }
    Ok(measures)
}

/// Write measures as one MIDI file when the channels allow it, and always
/// as one file per measure.
fn write_measures(dir: &Path, stem: &str, measures: &[Measure], tempo: f64) -> Result<(), CliError> {
    write_dataset(&dir.join(format!("{stem}.jsonl")), measures)?;
    for (i, m) in measures.iter().enumerate() {
        write_file(
            &dir.join(format!("{stem}_{i:02}.mid")),
            &write_smf(std::slice::from_ref(m), tempo, 480)?,
        )?;
    }
    match write_smf(measures, tempo, 480) {
        Ok(bytes) => write_file(&dir.join(format!("{stem}.mid")), &bytes)?,
        Err(e) => log::warn!("not writing combined {stem}.mid: {e}"),
    }
    Ok(())
}

pub fn ingest(
    mut cfg: RunConfig,
    input: &Path,
    out: &Path,
    stats_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let seed = cfg.resolve_seed(seed);
    let dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io(dir))?;
    let stats = build_dataset(input, out, &cfg.corpus, seed)?;
    if !stats.is_conserved() {
        return Err(CliError::Internal("measure accounting does not balance".into()));
    }
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let default_stats = dir.join(format!("{stem}.stats.json"));
    write_file(stats_path.unwrap_or(&default_stats), format!("{text}\n").as_bytes())?;
    cfg.echo(dir)?;
    emit(&format!("{text}\n"));
    Ok(())
}

pub fn chords(cfg: &RunConfig, input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let bytes = fs::read(input).map_err(io(input))?;
    let score = parse_smf(&bytes)?;
    let model = HarmonyModel::new(cfg.corpus.chords.clone())?;
    let mut lines = Vec::new();
    let mut measure = 0;
    for (s, segment) in segment_by_meter(&score).iter().enumerate() {
        let split = split_measures(segment);
        let tracks: Vec<_> = split.measures.iter().map(|m| m.instrument_tracks()).collect();
        match model.infer_chords(&tracks) {
            Ok(inf) => {
                for i in 0..tracks.len() {
                    let names = |c: [ChordClass; 2]| [c[0].to_string(), c[1].to_string()];
                    lines.push(json!({
                        "segment": s,
                        "measure": measure + i,
                        "chords": names(inf.chords[i]),
                        "full_chords": [inf.full_chords[i][0].to_string(), inf.full_chords[i][1].to_string()],
                        "keys": inf.keys[i],
                    }));
                }
            }
            Err(e) => log::warn!("segment {s}: {e}"),
        }
        measure += tracks.len();
    }
    match out {
        Some(p) => {
            let text = serde_json::to_string_pretty(&lines).expect("values serialize");
            write_file(p, format!("{text}\n").as_bytes())
        }
        None => {
            emit(&lines.iter().map(|l| format!("{l}\n")).collect::<String>());
            Ok(())
        }
    }
}

pub fn train(
    mut cfg: RunConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<u64>,
    resume: Option<PathBuf>,
) -> Result<(), CliError> {
    let data = required(data, &cfg.paths.data, "data")?;
    let out = required(out, &cfg.paths.out, "out")?;
    let seed = cfg.resolve_seed(seed);
    cfg.model.seed = seed;
    if let Some(s) = steps {
        cfg.train.max_steps = s;
    }
    let mut trainer = match &resume {
        Some(path) => {
            let bytes = fs::read(path).map_err(io(path))?;
            let mut t = Trainer::from(Checkpoint::from_bytes_for(&bytes, &cfg.model)?);
            t.train = cfg.train.clone();
            t
        }
        None => Trainer::new(&cfg.model, &cfg.train)?,
    };
    cfg.echo(&out)?;
    let measures = read_dataset(&data)?;
    // fail before training if any measure does not fit the model
    for m in &measures {
        Example::from_measure(m, &cfg.model)?;
    }
    if measures.is_empty() {
        return Err(CliError::data(format!("{}: dataset is empty", data.display())));
    }
    let metrics_path = out.join("metrics.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(io(&metrics_path))?;
    let mut metrics = BufWriter::new(file);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ trainer.step);
    let every = cfg.train.checkpoint_every;
    let mut last_good: Option<PathBuf> = None;
    // max_steps is a total, so a resumed run only does the remainder
    let remaining = cfg.train.max_steps.saturating_sub(trainer.step);
    let result = trainer.fit_measures(&measures, remaining, &mut rng, |t, m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(metrics, "{line}").map_err(|e| VaeError::BadCheckpoint(e.to_string()))?;
        if every > 0 && t.step % every == 0 {
            let path = out.join(format!("checkpoint-{:06}.bin", t.step));
            fs::write(&path, Checkpoint::from(t).to_bytes()).map_err(|e| VaeError::BadCheckpoint(e.to_string()))?;
            last_good = Some(path);
        }
        Ok(())
    });
    metrics.flush().map_err(io(&metrics_path))?;
    if let Err(e) = result {
        let reference = last_good.map_or("none".to_string(), |p| p.display().to_string());
        return Err(CliError::Internal(format!("{e}; last good checkpoint: {reference}")));
    }
    let final_path = out.join("checkpoint.bin");
    write_file(&final_path, &Checkpoint::from(&trainer).to_bytes())?;
    println!("trained to step {}; checkpoint {}", trainer.step, final_path.display());
    Ok(())
}

fn parse_pair(text: &str) -> Result<[ChordClass; 2], CliError> {
    let chords = parse_progression(text)?;
    if chords.len() != 2 {
        return Err(CliError::usage("--chords takes exactly two chords for one measure"));
    }
    Ok([chords[0], chords[1]])
}

pub fn sample(mut cfg: RunConfig, common: &SamplingArgs, count: usize, chords: &str) -> Result<(), CliError> {
    let params = load_params(&cfg, common)?;
    let chords = parse_pair(chords)?;
    let (out, temperature, mut rng) = sampling_setup(&mut cfg, common)?;
    let mut measures = Vec::new();
    let mut codes = String::new();
    for _ in 0..count {
        let z = sample_prior(params.config.latent_dim, &mut rng);
        measures.push(sample_decode(&params, &z, chords, temperature, &mut rng)?);
        codes.push_str(&format!("{}\n", serde_json::to_string(&z).expect("floats serialize")));
    }
    write_file(&out.join("latents.jsonl"), codes.as_bytes())?;
    write_measures(&out, "sample", &measures, cfg.sampling.tempo_bpm)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

pub fn interp(mut cfg: RunConfig, common: &SamplingArgs, a: &Path, b: &Path, steps: usize) -> Result<(), CliError> {
    let params = load_params(&cfg, common)?;
    let x0 = measures_from_midi(&cfg, a)?.remove(0);
    let x1 = measures_from_midi(&cfg, b)?.remove(0);
    let (out, temperature, mut rng) = sampling_setup(&mut cfg, common)?;
    let measures = interpolate_measures(&params, &x0, &x1, steps, temperature, &mut rng)?;
    write_measures(&out, "interp", &measures, cfg.sampling.tempo_bpm)?;
    println!("wrote {} interpolation steps to {}", measures.len(), out.display());
    Ok(())
}

pub fn attr(
    mut cfg: RunConfig,
    common: &SamplingArgs,
    name: &str,
    scale: f64,
    data: Option<PathBuf>,
    index: usize,
) -> Result<(), CliError> {
    let attribute = Attribute::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = Attribute::ALL.iter().map(|a| a.name()).collect();
        CliError::usage(format!(
            "unknown attribute {name:?}; expected one of {}",
            known.join(", ")
        ))
    })?;
    let params = load_params(&cfg, common)?;
    let data = required(data, &cfg.paths.data, "data")?;
    let measures = read_dataset(&data)?;
    let x = measures.get(index).cloned().ok_or_else(|| {
        CliError::usage(format!(
            "--index {index} beyond the {} dataset measures",
            measures.len()
        ))
    })?;
    let threshold = cfg.attribute_thresholds.get(name).copied();
    let (with, without) = split_by_attribute(&measures, attribute, threshold);
    let vector = attribute_vector(&params, name, &with, &without)?;
    let (out, temperature, mut rng) = sampling_setup(&mut cfg, common)?;
    let y = apply_attribute(&params, &x, &vector, scale, temperature, &mut rng)?;
    let text = serde_json::to_string_pretty(&vector).expect("vector serializes");
    write_file(&out.join(format!("{name}.vector.json")), format!("{text}\n").as_bytes())?;
    write_measures(&out, "attr", &[x.clone(), y.clone()], cfg.sampling.tempo_bpm)?;
    println!(
        "{name}: {:.3} -> {:.3} ({} with, {} without)",
        attribute.value(&x),
        attribute.value(&y),
        vector.n_with,
        vector.n_without
    );
    Ok(())
}

pub fn progression(
    mut cfg: RunConfig,
    common: &SamplingArgs,
    chords: &str,
    z: Option<PathBuf>,
) -> Result<(), CliError> {
    let params = load_params(&cfg, common)?;
    let progression = parse_progression(chords)?;
    let (out, temperature, mut rng) = sampling_setup(&mut cfg, common)?;
    let z = match z {
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(io(&path))?;
            serde_json::from_str::<Vec<f64>>(&text).map_err(io(&path))?
        }
        None => sample_prior(params.config.latent_dim, &mut rng),
    };
    let (measures, midi) =
        decode_progression(&params, &z, &progression, temperature, cfg.sampling.tempo_bpm, &mut rng)?;
    write_file(&out.join("progression.mid"), &midi)?;
    write_dataset(&out.join("progression.jsonl"), &measures)?;
    write_file(
        &out.join("z.json"),
        serde_json::to_string(&z).expect("floats serialize").as_bytes(),
    )?;
    println!("decoded {} measures to {}", measures.len(), out.display());
    Ok(())
}

pub fn render(input: &Path, out: &Path, strip_drums: bool, strip_octaves: bool, format: &str) -> Result<(), CliError> {
    let opts = RenderOptions {
        format: format.parse::<RenderFormat>()?,
        strip_drums,
        strip_octaves,
    };
    let is_dataset = input.extension().is_some_and(|e| e == "jsonl");
    let (notes, steps) = if is_dataset {
        let measures = read_dataset(input)?;
        let notes = notes_from_measures(&measures);
        (notes, measures.len().max(1) as u32 * 96)
    } else {
        let bytes = fs::read(input).map_err(io(input))?;
        let notes = notes_from_score(&parse_smf(&bytes)?);
        let steps = total_steps(&notes);
        (notes, steps)
    };
    write_file(out, &draw(&notes, steps, &opts))
}

pub fn stats(data: &Path) -> Result<(), CliError> {
    let measures = read_dataset(data)?;
    let mut tracks: BTreeMap<usize, usize> = BTreeMap::new();
    let mut programs: BTreeMap<String, usize> = BTreeMap::new();
    let mut chords: BTreeMap<String, usize> = BTreeMap::new();
    let (mut tokens, mut notes) = (0usize, 0usize);
    for m in &measures {
        *tracks.entry(m.track_count()).or_default() += 1;
        tokens += m.tracks.iter().map(|t| t.len()).sum::<usize>();
        for t in decode_measure(m) {
            *programs.entry(t.program.to_string()).or_default() += 1;
            notes += t.notes.len();
        }
        for c in m.chords {
            *chords.entry(c.to_string()).or_default() += 1;
        }
    }
    let n = measures.len().max(1) as f64;
    let summary = json!({
        "measures": measures.len(),
        "mean_tokens_per_measure": tokens as f64 / n,
        "mean_notes_per_measure": notes as f64 / n,
        "track_count_histogram": tracks,
        "programs": programs,
        "half_measure_chords": chords,
    });
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    ));
    Ok(())
}

/// Write to stdout, tolerating a closed pipe (e.g. `| head`).
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}
