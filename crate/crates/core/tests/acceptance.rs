//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines come out in order and
//! uncaptured; the process exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use mmvae::chords::{Chord, ChordQuality, HarmonyState, PitchClassFrame, NUM_CHORDS, NUM_KEYS};
use mmvae::codec::{decode_measure, encode_measure};
use mmvae::corpus::{build_dataset, measures_from_smf, CorpusConfig};
use mmvae::latent::slerp;
use mmvae::smf::write_smf;
use mmvae::synth::{overfit_measures, random_measure, triad_corpus};
use mmvae::vae::{
    encode, evaluate, loss_and_gradients, sample_decode, sample_tracks, teacher_forced_accuracy, Example, ModelConfig,
    ModelParams, TrainConfig, Trainer,
};
use mmvae::{ChordClass, ChordInferenceParams, HarmonyModel};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn codec_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let (mut codec_bad, mut smf_bad) = (0, 0);
    for _ in 0..n {
        let m = random_measure(&mut rng, 2);
        let notes = decode_measure(&m);
        match encode_measure(&notes, m.chords) {
            Ok(back) if back == m && decode_measure(&back) == notes => {}
            _ => codec_bad += 1,
        }
        let ok = write_smf(std::slice::from_ref(&m), 120.0, 480)
            .ok()
            .and_then(|bytes| measures_from_smf(&bytes).ok())
            .is_some_and(|back| back.len() == 1 && back[0].tracks == m.tracks);
        if !ok {
            smf_bad += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        codec_bad == 0 && smf_bad == 0 && t < Duration::from_secs(30),
        format!(
            "{n} measures, {codec_bad} codec and {smf_bad} SMF mismatches, {}",
            secs(t)
        ),
    )
}

/// Best path by brute force; ties go to the path that is smallest when read
/// from the last frame backwards, which is what lowest-index backtracking picks.
fn exhaustive(model: &HarmonyModel, states: &[HarmonyState], frames: &[PitchClassFrame]) -> (Vec<usize>, f64) {
    let n = states.len();
    let t = frames.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut path = vec![0usize; t];
    for code in 0..n.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % n;
            c /= n;
        }
        let mut score =
            model.initial_logprob(states[path[0]]) + model.observation_logscore(&frames[0], states[path[0]]);
        for k in 1..t {
            score = score
                + model.transition_logprob(states[path[k - 1]], states[path[k]])
                + model.observation_logscore(&frames[k], states[path[k]]);
        }
        let better = match &best {
            None => true,
            Some((bp, bs)) => score > *bs || (score == *bs && path.iter().rev().lt(bp.iter().rev())),
        };
        if better {
            best = Some((path.clone(), score));
        }
    }
    best.expect("non-empty state space")
}

fn viterbi_oracle() -> Outcome {
    let start = Instant::now();
    let model = HarmonyModel::new(ChordInferenceParams::default()).expect("default params");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut score_bad, mut path_bad, mut worst) = (0, 0, 0.0f64);
    for case in 0..200 {
        // two keys x ten chords
        let keys = sample(&mut rng, NUM_KEYS, 2);
        let chords = sample(&mut rng, NUM_CHORDS, 10);
        let states: Vec<HarmonyState> = keys
            .iter()
            .flat_map(|k| {
                chords
                    .iter()
                    .map(move |c| HarmonyState::new(k as u8, Chord::from_index(c).unwrap()))
            })
            .collect();
        let t = rng.gen_range(1..=3);
        let frames: Vec<PitchClassFrame> = (0..t)
            .map(|_| {
                // every tenth case has silent frames, where ties are common
                if case % 10 == 0 {
                    PitchClassFrame::ZERO
                } else {
                    PitchClassFrame::from_weights(std::array::from_fn(|_| {
                        if rng.gen_bool(0.4) {
                            rng.gen::<f64>()
                        } else {
                            0.0
                        }
                    }))
                }
            })
            .collect();
        let (path, score) = model.viterbi_restricted(&states, &frames);
        let (want_idx, want_score) = exhaustive(&model, &states, &frames);
        let err = (score - want_score).abs();
        worst = worst.max(err);
        if err > 1e-9 {
            score_bad += 1;
        }
        let want: Vec<HarmonyState> = want_idx.iter().map(|&i| states[i]).collect();
        if path != want {
            path_bad += 1;
        }
    }
    let ceg = PitchClassFrame::from_pitch_classes(&[0, 4, 7]);
    let full = model.viterbi(&[ceg, ceg]);
    let c_major = Chord::new(0, ChordQuality::Major);
    let full_ok = full.len() == 2 && full.iter().all(|h| h.chord == c_major);
    let t = start.elapsed();
    outcome(
        score_bad == 0 && path_bad == 0 && full_ok && t < Duration::from_secs(60),
        format!(
            "200 cases, max score error {worst:.1e}, {path_bad} path mismatches; C-E-G -> {}, {}",
            full.iter().map(|h| h.chord.to_string()).collect::<Vec<_>>().join(" "),
            secs(t)
        ),
    )
}

fn transition_spot_values() -> Outcome {
    let model = HarmonyModel::new(ChordInferenceParams::default()).expect("default params");
    let c = Chord::new(0, ChordQuality::Major);
    let d = Chord::new(2, ChordQuality::Major);
    let stay = model.transition_prob(HarmonyState::new(0, c), HarmonyState::new(0, c));
    let f_c = model.membership(HarmonyState::new(0, c));
    let f_d = model.membership(HarmonyState::new(0, d));
    let errs = [(stay - 0.4995).abs(), (f_c - 0.970299).abs(), (f_d - 0.029403).abs()];
    outcome(
        errs.iter().all(|&e| e <= 1e-12),
        format!("no-change {stay:.12}, f(C|C) {f_c:.12}, f(D|C) {f_d:.12}"),
    )
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_tracks: 3,
        max_track_len: 8,
        latent_dim: 4,
        enc_hidden: 5,
        dec_hidden: 6,
        dec_layers: 2,
        free_bits: 0.0,
        seed: 7,
        ..ModelConfig::default()
    }
}

fn tiny_batch(cfg: &ModelConfig) -> Vec<Example> {
    let a = Example::new(
        vec![
            vec![360, 260, 60, 64, 287, 188, 192, 489],
            vec![488, 36, 269, 164, 489],
            vec![489],
        ],
        [ChordClass::major(0), ChordClass::minor(9)],
        cfg,
    )
    .expect("valid example");
    let b = Example::new(
        vec![vec![393, 43, 311, 171, 489], vec![489], vec![]],
        [ChordClass::major(7), ChordClass::NO_CHORD],
        cfg,
    )
    .expect("valid example");
    vec![a, b]
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config();
    let params = ModelParams::<f64>::init(&cfg).expect("tiny config");
    let data = tiny_batch(&cfg);
    let batch: Vec<&Example> = data.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps: Vec<f64> = (0..batch.len() * cfg.latent_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let (_, grads) = loss_and_gradients(&params, &batch, &eps, 0.0).expect("loss");
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..100 {
        let ti = rng.gen_range(0..params.tensors().len());
        let k = rng.gen_range(0..params.tensors()[ti].data.len());
        let mut p = params.clone();
        let x = p.tensors()[ti].data[k];
        p.tensors_mut()[ti].data[k] = x + h;
        let up = evaluate(&p, &batch, &eps, 0.0).expect("loss").loss;
        p.tensors_mut()[ti].data[k] = x - h;
        let down = evaluate(&p, &batch, &eps, 0.0).expect("loss").loss;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[ti].data[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(rel);
        if rel >= 1e-4 {
            failures += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        failures == 0 && t < Duration::from_secs(120),
        format!("100 coordinates, max relative error {worst:.2e}, {}", secs(t)),
    )
}

fn free_bits_identity() -> Outcome {
    let cfg = ModelConfig {
        num_tracks: 4,
        max_track_len: 16,
        ..ModelConfig::default()
    };
    let base = ModelParams::<f64>::init(&cfg).expect("config");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut active, mut inactive) = (0.0f64, 0, 0);
    for round in 0..20 {
        // blow up the mean head so the KL lands on both sides of the budget
        let mut params = base.clone();
        let gain = 1.0 + round as f64 * 6.0;
        let names: Vec<String> = params.names().to_vec();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            if name == "mu.w" || name == "mu.b" {
                t.data
                    .iter_mut()
                    .for_each(|x| *x = *x * gain + rng.gen_range(-0.5..0.5));
            }
        }
        let data: Vec<Example> = (0..4)
            .map(|_| {
                let mut m = random_measure(&mut rng, 1);
                m.tracks.truncate(4);
                Example::new(
                    m.tracks
                        .iter()
                        .map(|t| t.indices().into_iter().take(15).chain([489]).collect())
                        .collect(),
                    m.chords,
                    &cfg,
                )
                .expect("valid example")
            })
            .collect();
        let batch: Vec<&Example> = data.iter().collect();
        let eps: Vec<f64> = (0..batch.len() * cfg.latent_dim)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        for tau in [64.0, 256.0] {
            let r = evaluate(&params, &batch, &eps, tau).expect("loss");
            for i in 0..batch.len() {
                let want = (r.kl[i] - tau * std::f64::consts::LN_2).max(0.0);
                if want > 0.0 {
                    active += 1;
                } else {
                    inactive += 1;
                }
                worst = worst.max(((r.total[i] - r.recon[i]) - want).abs());
            }
        }
    }
    outcome(
        worst <= 1e-9 && active > 0 && inactive > 0,
        format!("max error {worst:.1e} over {active} active and {inactive} inactive hinge cases"),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let data: Vec<Example> = overfit_measures()
        .iter()
        .map(|m| Example::from_measure(m, &cfg).expect("fits"))
        .collect();
    let mut trainer = Trainer::new(&cfg, &TrainConfig::default()).expect("desk config");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut acc = 0.0;
    while trainer.step < 2000 {
        trainer.fit(&data, 50, &mut rng, |_, _| Ok(())).expect("training");
        acc = teacher_forced_accuracy(&trainer.params, &data).expect("accuracy");
        if acc >= 0.99 {
            break;
        }
    }
    let refs: Vec<&Example> = data.iter().collect();
    let posts = encode(&trainer.params, &refs).expect("encode");
    let (mut same, mut total) = (0, 0);
    for (ex, p) in data.iter().zip(&posts) {
        let raw = sample_tracks(&trainer.params, &p.mu, ex.chords, 0.0, &mut rng).expect("decode");
        for (got, want) in raw.iter().zip(&ex.tracks) {
            total += want.len();
            same += got.iter().zip(want).filter(|(a, b)| a == b).count();
        }
    }
    let reproduced = same as f64 / total as f64;
    let t = start.elapsed();
    outcome(
        acc >= 0.99 && reproduced >= 0.95 && t < Duration::from_secs(600),
        format!(
            "accuracy {acc:.4} at step {}, mu decode reproduces {same}/{total} tokens, {}",
            trainer.step,
            secs(t)
        ),
    )
}

fn chord_conditioning() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        free_bits: 0.0,
        ..ModelConfig::default()
    };
    let data: Vec<Example> = triad_corpus()
        .iter()
        .map(|m| Example::from_measure(m, &cfg).expect("fits"))
        .collect();
    let train = TrainConfig {
        batch_size: 12,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&cfg, &train).expect("desk config");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    trainer.fit(&data, 1000, &mut rng, |_, _| Ok(())).expect("training");
    let z = vec![0.0; cfg.latent_dim];
    let (mut inside, mut total) = (0, 0);
    for root in 0..12u8 {
        let chord = ChordClass::major(root);
        let m = sample_decode(&trainer.params, &z, [chord, chord], 0.0, &mut rng).expect("decode");
        let pcs = chord.pitch_classes();
        for track in decode_measure(&m).into_iter().filter(|t| !t.program.is_drums()) {
            for n in track.notes {
                total += 1;
                if pcs.contains(&(n.pitch % 12)) {
                    inside += 1;
                }
            }
        }
    }
    let frac = inside as f64 / total.max(1) as f64;
    outcome(
        total > 0 && frac >= 0.9,
        format!(
            "{inside}/{total} decoded notes inside the conditioning triad, {}",
            secs(start.elapsed())
        ),
    )
}

fn lr_floor_step() -> Outcome {
    let train = TrainConfig::default();
    let analytic = ((train.lr_floor / train.lr_start).ln() / train.lr_decay.ln()).ceil() as u64;
    let got = train.floor_step();
    outcome(
        got == analytic,
        format!("floor reached at step {got}, analytic {analytic}"),
    )
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn slerp_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for _ in 0..1000 {
        let a = unit(&mut rng, 16);
        let b = unit(&mut rng, 16);
        for k in 0..=10 {
            let alpha = k as f64 / 10.0;
            let ab = slerp(&a, &b, alpha).expect("unit vectors");
            let ba = slerp(&b, &a, 1.0 - alpha).expect("unit vectors");
            let norm = ab.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst = worst.max((norm - 1.0).abs()).max(dist(&ab, &ba));
            if k == 0 {
                worst = worst.max(dist(&ab, &a));
            }
            if k == 10 {
                worst = worst.max(dist(&ab, &b));
            }
        }
    }
    outcome(
        worst <= 1e-9,
        format!("1000 pairs x 11 alphas, max deviation {worst:.1e}"),
    )
}

fn pipeline_determinism() -> Outcome {
    let mini = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini");
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = CorpusConfig::default();
    let mut runs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let path = dir.path().join(name);
        match build_dataset(&mini, &path, &cfg, 2019) {
            Ok(stats) => runs.push((std::fs::read(&path).expect("written"), stats)),
            Err(e) => return outcome(false, format!("ingest failed: {e}")),
        }
    }
    let identical = runs[0].0 == runs[1].0 && runs[0].1 == runs[1].1;
    let s = &runs[0].1;
    outcome(
        identical && s.is_conserved() && s.retained > 0,
        format!(
            "identical: {identical}; {} seen = {} retained + {} discarded + {} duplicates",
            s.measures_seen,
            s.retained,
            s.discarded_bad_length + s.discarded_long_segment + s.discarded_track_count + s.discarded_event_count,
            s.duplicates_removed
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters meant for other targets land here too
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 10] = [
        ("codec round trip", codec_round_trip),
        ("viterbi oracle", viterbi_oracle),
        ("transition spot values", transition_spot_values),
        ("gradient check", gradient_check),
        ("free-bits identity", free_bits_identity),
        ("overfit", overfit),
        ("chord conditioning", chord_conditioning),
        ("lr floor step", lr_floor_step),
        ("slerp properties", slerp_properties),
        ("pipeline determinism", pipeline_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let r = check();
        if !r.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            i + 1,
            r.detail
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
