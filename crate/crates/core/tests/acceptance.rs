//! Acceptance suite: one PASS/FAIL line per criterion, then a nonzero exit if
//! any criterion failed. Run with `cargo test -p vmt-core --test acceptance`.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use vmt_core::codec::{self, CodecConfig, PerformanceToken, TokenId, VOCAB_SIZE};
use vmt_core::frames::{synth_pair, ClipPair};
use vmt_core::gradcheck::{self, SuiteOptions};
use vmt_core::infer::{self, GenConfig};
use vmt_core::midi::{self, MidiScore, Note};
use vmt_core::models::{Model, ModelConfig, ModelKind};
use vmt_core::nn::conv_channel_plan;
use vmt_core::tensor::{SeededRng, Tensor};
use vmt_core::train::{lr_schedule, TrainConfig, Trainer};

/// One quantization step of the default codec grid, halved.
const TIME_TOL_SEC: f64 = 0.015_625;
const CAUSAL_TOL: f64 = 1e-6;

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

fn run(id: &str, limit: Option<Duration>, failures: &mut Vec<String>, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if let Some(l) = limit {
        if took > l {
            o.pass = false;
            o.detail = format!("{} [runtime {:.1}s over {:.0}s limit]", o.detail, took.as_secs_f64(), l.as_secs_f64());
        }
    }
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{tag} {id:<22} {:>7.2}s  {}", took.as_secs_f64(), o.detail);
    if !o.pass {
        failures.push(id.to_string());
    }
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

// ---- vocabulary ----

fn vocabulary() -> Outcome {
    let mut counts = [0usize; 5];
    let mut bijective = codec::vocab_size() == VOCAB_SIZE;
    for id in 0..VOCAB_SIZE as u32 {
        let Ok(tok) = codec::id_to_token(id) else {
            bijective = false;
            continue;
        };
        let slot = match tok {
            PerformanceToken::NoteOn(_) => 0,
            PerformanceToken::NoteOff(_) => 1,
            PerformanceToken::TimeShift(_) => 2,
            PerformanceToken::Velocity(_) => 3,
            PerformanceToken::Start | PerformanceToken::End => 4,
        };
        counts[slot] += 1;
        bijective &= codec::token_to_id(tok).ok().map(|t| t.index()) == Some(id as usize);
    }
    bijective &= codec::id_to_token(VOCAB_SIZE as u32).is_err();
    let pass = bijective && counts == [88, 88, 32, 100, 2];
    outcome(pass, format!("size {} composition {:?} bijective {bijective}", codec::vocab_size(), counts))
}

// ---- codec and SMF ----

/// Seeded score that the codec can represent: within 10 s, piano range, and
/// no two notes of one pitch overlapping or touching on the grid.
fn random_score(rng: &mut SeededRng) -> MidiScore {
    let n = 1 + rng.below(40);
    let mut notes: Vec<Note> = Vec::new();
    for _ in 0..n {
        let on = rng.uniform(0.0, 9.5);
        let off = (on + rng.uniform(0.05, 2.0)).min(10.0);
        let pitch = 21 + rng.below(88) as u8;
        let vel = 1 + rng.below(127) as u8;
        let clear = notes
            .iter()
            .all(|o| o.pitch != pitch || on > o.offset_sec + 0.05 || off + 0.05 < o.onset_sec);
        if clear {
            notes.push(Note::new(on, off, pitch, vel).unwrap());
        }
    }
    MidiScore::new(notes)
}

/// Pairs each note of `a` with the unused note of `b` of the same pitch and
/// nearest onset; quantization may reorder near-simultaneous onsets.
fn match_notes<'a>(a: &'a [Note], b: &'a [Note]) -> Result<Vec<(&'a Note, &'a Note)>, String> {
    if a.len() != b.len() {
        return Err(format!("{} notes became {}", a.len(), b.len()));
    }
    let mut used = vec![false; b.len()];
    let mut out = Vec::with_capacity(a.len());
    for n in a {
        let d = |k: usize| (b[k].onset_sec - n.onset_sec).abs();
        let best = (0..b.len())
            .filter(|&j| !used[j] && b[j].pitch == n.pitch)
            .min_by(|&i, &j| d(i).total_cmp(&d(j)));
        let Some(j) = best else {
            return Err(format!("pitch {} at {:.3} s lost", n.pitch, n.onset_sec));
        };
        used[j] = true;
        out.push((n, &b[j]));
    }
    Ok(out)
}

fn time_err(x: &Note, y: &Note) -> f64 {
    (x.onset_sec - y.onset_sec).abs().max((x.offset_sec - y.offset_sec).abs())
}

fn codec_round_trip() -> Outcome {
    let cfg = CodecConfig::default();
    let (mut worst_t, mut worst_bin, mut warnings, mut bad) = (0.0f64, 0i32, 0usize, Vec::new());
    for seed in 0..100 {
        let score = random_score(&mut SeededRng::new(1000 + seed));
        let tokens = match codec::encode(&score, &cfg) {
            Ok(t) => t,
            Err(e) => {
                bad.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let (back, w) = codec::decode(&tokens, &cfg);
        warnings += w.total();
        match match_notes(&score.notes, &back.notes) {
            Ok(pairs) => {
                for (x, y) in pairs {
                    worst_t = worst_t.max(time_err(x, y));
                    let bins = codec::velocity_to_bin(x.velocity) as i32 - codec::velocity_to_bin(y.velocity) as i32;
                    worst_bin = worst_bin.max(bins.abs());
                }
            }
            Err(e) => bad.push(format!("seed {seed}: {e}")),
        }
    }
    let pass = bad.is_empty() && warnings == 0 && worst_t <= TIME_TOL_SEC + 1e-9 && worst_bin <= 1;
    let mut d = format!(
        "100 scores, max time err {:.3} ms, max velocity bin diff {worst_bin}, warnings {warnings}",
        worst_t * 1e3
    );
    if let Some(b) = bad.first() {
        let _ = write!(d, ", first problem: {b}");
    }
    outcome(pass, d)
}

fn smf_round_trip() -> Outcome {
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = SeededRng::new(2000 + seed);
        let us = 200_000 + rng.below(1_300_000) as u32;
        let base = random_score(&mut rng);
        let score = MidiScore::with_tempo(base.notes, us);
        let back = match midi::parse_smf(&midi::write_smf(&score)) {
            Ok(b) => b,
            Err(e) => {
                bad.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let half_tick = us as f64 / 1e6 / midi::WRITE_TICKS_PER_QUARTER as f64 / 2.0 + 1e-9;
        if back.tempo_map != score.tempo_map {
            bad.push(format!("seed {seed}: tempo map differs"));
            continue;
        }
        match match_notes(&score.notes, &back.notes) {
            Ok(pairs) => {
                for (x, y) in pairs {
                    worst = worst.max(time_err(x, y));
                    if x.velocity != y.velocity || time_err(x, y) > half_tick {
                        bad.push(format!("seed {seed}: note {x:?} read back as {y:?}"));
                    }
                }
            }
            Err(e) => bad.push(format!("seed {seed}: {e}")),
        }
    }
    let mut d = format!("100 scores, max time err {:.4} ms (half a tick)", worst * 1e3);
    if let Some(b) = bad.first() {
        let _ = write!(d, ", first problem: {b}");
    }
    outcome(bad.is_empty(), d)
}

// ---- numerics ----

fn gradient_suite() -> Outcome {
    let opts = SuiteOptions::default();
    let mut results = gradcheck::op_checks(&opts);
    results.extend(gradcheck::block_checks(&opts));
    let model_results = gradcheck::model_checks(&opts);
    let models = model_results.len();
    results.extend(model_results);
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let mut d = format!(
        "{} checks ({models} whole-model), max rel err {worst:.2e} < {:.0e}",
        results.len(),
        gradcheck::TOLERANCE
    );
    for f in failed.iter().take(3) {
        let _ = write!(d, "; failed {} ({:.2e} at {}{})", f.name, f.max_rel_err, f.worst, f.error.as_deref().unwrap_or(""));
    }
    outcome(failed.is_empty() && models >= 2, d)
}

fn shape_pipeline() -> Outcome {
    let plan = conv_channel_plan(512);
    let cfg = ModelConfig::vmt_full();
    let model = match Model::<f32>::new(cfg.clone(), 0) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("model: {e}")),
    };
    let (_, pair, _) = synth_pair(0, 0, &CodecConfig::default());
    let fv = match model.frame_vectors(&pair.clip) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("frame encoder: {e}")),
    };
    let params = model.num_parameters();
    let tcfg = TrainConfig {
        batch_size: 1,
        eval_every: 1,
        ..TrainConfig::new(1)
    };
    let step = Trainer::new(model, tcfg, CodecConfig::default(), std::slice::from_ref(&pair), &[])
        .and_then(|mut t| t.step());
    let pass = plan.as_ref().ok() == Some(&[64, 128, 512]) && fv.shape() == [40, 512] && step.as_ref().is_ok_and(|r| r.loss.is_finite());
    outcome(
        pass,
        format!(
            "channels {:?}, frame vectors {:?}, {params} params, one step loss {}",
            plan.unwrap_or_default(),
            fv.shape(),
            match step {
                Ok(r) => format!("{:.4}", r.loss),
                Err(e) => e.to_string(),
            }
        ),
    )
}

fn causality() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for cfg in [ModelConfig::vmt_reduced(), ModelConfig::seq2seq_reduced()] {
        let kind = cfg.kind;
        let m = Model::<f64>::new(cfg, 31).unwrap();
        let mut rng = SeededRng::new(77);
        let mut worst = 0.0f64;
        let mut suffix_moved = 0;
        for _ in 0..20 {
            let fv = Tensor::<f64>::randn([40, 64], 1.0, &mut rng);
            let len = 2 + rng.below(63);
            let mut a = vec![TokenId::START];
            a.extend((1..len).map(|_| TokenId::new(rng.below(VOCAB_SIZE) as u32).unwrap()));
            let cut = 1 + rng.below(len - 1);
            let mut b = a.clone();
            for t in &mut b[cut..] {
                *t = TokenId::new(((t.index() + 1 + rng.below(VOCAB_SIZE - 1)) % VOCAB_SIZE) as u32).unwrap();
            }
            let (ya, yb) = (m.logits(&fv, &a).unwrap(), m.logits(&fv, &b).unwrap());
            let n = cut * VOCAB_SIZE;
            let diff = ya.data()[..n].iter().zip(&yb.data()[..n]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
            suffix_moved += usize::from(ya.data()[n..] != yb.data()[n..]);
        }
        pass &= worst <= CAUSAL_TOL && suffix_moved == 20;
        details.push(format!("{kind:?}: 20 cases, max prefix change {worst:.1e}"));
    }
    outcome(pass, details.join("; "))
}

fn schedule() -> Outcome {
    let lr = |s| lr_schedule(s, 1e-3, 8000).unwrap();
    let (a, b, c) = (lr(8000), lr(4000), lr(32000));
    let left = lr(7999);
    let right = lr(8001);
    let jump = (left - a).abs().max((right - a).abs());
    // one step of the ramp is 1.25e-7; a jump at the boundary would exceed it
    let pass = a == 1e-3 && (b - 5e-4).abs() < 1e-15 && (c - 5e-4).abs() < 1e-15 && jump <= 1.25e-7 + 1e-15;
    outcome(pass, format!("lr(8000)={a:e} lr(4000)={b:e} lr(32000)={c:e} boundary step {jump:.3e}"))
}

// ---- training oracles ----

struct OverfitRun {
    first_hit: Option<u64>,
    final_nll: f64,
    matched: usize,
    metrics: Vec<u8>,
}

fn overfit_pairs() -> Vec<ClipPair> {
    (0..4).map(|i| synth_pair(1, i, &CodecConfig::default()).1).collect()
}

fn overfit_config(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        peak_lr: 3e-3,
        warmup_steps: 50,
        eval_every: u64::MAX,
        seed: 1,
        freeze_frame_encoder: true,
        ..TrainConfig::new(steps)
    }
}

fn overfit_model(kind: ModelKind) -> ModelConfig {
    let base = match kind {
        ModelKind::Vmt => ModelConfig::vmt_reduced(),
        ModelKind::Seq2seq => ModelConfig::seq2seq_reduced(),
    };
    ModelConfig { dropout: 0.0, ..base }
}

/// Trains on the 4-pair set, checking the NLL every 25 steps; with `probe`
/// off it only trains, for the determinism rerun.
fn overfit(kind: ModelKind, steps: u64, threshold: f64, pairs: &[ClipPair], probe: bool) -> Result<OverfitRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = dir.path().join("metrics.jsonl");
    let model = Model::<f32>::new(overfit_model(kind), 1).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(model, overfit_config(steps), CodecConfig::default(), pairs, &[]).map_err(|e| e.to_string())?;
    t.log_to(&log).map_err(|e| e.to_string())?;
    let mut first_hit = None;
    while t.steps_taken() < steps {
        let r = t.advance(None).map_err(|e| e.to_string())?;
        if probe && first_hit.is_none() && r.step % 25 == 0 && t.train_nll().map_err(|e| e.to_string())? < threshold {
            first_hit = Some(r.step);
        }
    }
    let (final_nll, matched) = if probe {
        let nll = t.train_nll().map_err(|e| e.to_string())?;
        let matched = pairs
            .iter()
            .filter(|p| infer::generate(&t.model, &p.clip, &GenConfig::default()).is_ok_and(|g| g[..] == p.tokens[1..]))
            .count();
        (nll, matched)
    } else {
        (f64::NAN, 0)
    };
    drop(t);
    let metrics = std::fs::read(&log).map_err(|e| e.to_string())?;
    Ok(OverfitRun {
        first_hit,
        final_nll,
        matched,
        metrics,
    })
}

fn overfit_oracle(runs: &mut Vec<(ModelKind, Vec<u8>)>) -> Outcome {
    let pairs = overfit_pairs();
    let mut pass = true;
    let mut details = Vec::new();
    for (kind, steps, threshold) in [(ModelKind::Vmt, 500, 0.1), (ModelKind::Seq2seq, 1500, 0.3)] {
        match overfit(kind, steps, threshold, &pairs, true) {
            Ok(r) => {
                let ok = r.first_hit.is_some() && r.matched == pairs.len();
                pass &= ok;
                details.push(format!(
                    "{kind:?}: NLL<{threshold} at step {} (final {:.4} after {steps}), greedy exact {}/{}",
                    r.first_hit.map_or("never".into(), |s| s.to_string()),
                    r.final_nll,
                    r.matched,
                    pairs.len()
                ));
                runs.push((kind, r.metrics));
            }
            Err(e) => {
                pass = false;
                details.push(format!("{kind:?}: {e}"));
            }
        }
    }
    outcome(pass, details.join("; "))
}

fn determinism(first: &[(ModelKind, Vec<u8>)]) -> Outcome {
    if first.len() != 2 {
        return outcome(false, "overfit runs did not complete");
    }
    let pairs = overfit_pairs();
    let mut pass = true;
    let mut details = Vec::new();
    for (kind, log) in first {
        let steps = if *kind == ModelKind::Vmt { 500 } else { 1500 };
        match overfit(*kind, steps, 0.0, &pairs, false) {
            Ok(r) => {
                let same = r.metrics == *log;
                pass &= same && !log.is_empty();
                details.push(format!("{kind:?}: {} log lines, identical {same}", log.iter().filter(|&&b| b == b'\n').count()));
            }
            Err(e) => {
                pass = false;
                details.push(format!("{kind:?}: {e}"));
            }
        }
    }
    outcome(pass, details.join("; "))
}

fn generation_contract() -> Outcome {
    let model = Model::<f32>::new(ModelConfig::vmt_reduced(), 3).unwrap();
    let codec_cfg = CodecConfig::default();
    let (mut longest, mut capped, mut worst_dur, mut bad) = (0, 0, 0.0f64, Vec::new());
    for i in 0..50u64 {
        let (_, pair, _) = synth_pair(9, i as usize, &codec_cfg);
        let cfg = if i % 2 == 0 {
            GenConfig::default()
        } else {
            GenConfig::sample(1.0, i)
        };
        match infer::generate_midi(&model, &pair.clip, &cfg, &codec_cfg) {
            Ok(g) => {
                longest = longest.max(g.tokens.len());
                capped += usize::from(!g.report.ended_naturally);
                worst_dur = worst_dur.max(g.score.duration());
                if g.tokens.len() > 1025 || g.tokens.last() != Some(&TokenId::END) {
                    bad.push(format!("generation {i}: {} tokens", g.tokens.len()));
                }
                if let Err(e) = g.score.validate() {
                    bad.push(format!("generation {i}: {e}"));
                }
            }
            Err(e) => bad.push(format!("generation {i}: {e}")),
        }
    }
    let pass = bad.is_empty() && worst_dur <= 10.0;
    let mut d = format!("50 generations, longest {longest} tokens ({capped} hit the cap), max duration {worst_dur:.3} s");
    if let Some(b) = bad.first() {
        let _ = write!(d, ", first problem: {b}");
    }
    outcome(pass, d)
}

// ---- comparative report ----

struct Row {
    kind: ModelKind,
    test_nll: f64,
    ended: usize,
    consistent: usize,
    warnings: usize,
    clean: usize,
    tokens: usize,
}

const REPORT_TRAIN: usize = 128;
const REPORT_TEST: usize = 64;
const REPORT_STEPS: u64 = 600;

fn report_row(kind: ModelKind, train: &[ClipPair], test: &[ClipPair]) -> Result<Row, String> {
    let base = match kind {
        ModelKind::Vmt => ModelConfig::vmt_reduced(),
        ModelKind::Seq2seq => ModelConfig::seq2seq_reduced(),
    };
    let model = Model::<f32>::new(base, 4).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        seed: 4,
        ..overfit_config(REPORT_STEPS)
    };
    let codec_cfg = CodecConfig::default();
    let mut t = Trainer::new(model, cfg, codec_cfg.clone(), train, test).map_err(|e| e.to_string())?;
    while t.steps_taken() < REPORT_STEPS {
        t.step().map_err(|e| e.to_string())?;
    }
    let test_nll = t.val_loss().map_err(|e| e.to_string())?.unwrap_or(f64::NAN);
    let mut row = Row {
        kind,
        test_nll,
        ended: 0,
        consistent: 0,
        warnings: 0,
        clean: 0,
        tokens: 0,
    };
    for p in test {
        let g = infer::generate_midi(&t.model, &p.clip, &GenConfig::default(), &codec_cfg).map_err(|e| e.to_string())?;
        row.ended += usize::from(g.report.ended_naturally);
        row.consistent += usize::from(g.report.length_consistent(codec_cfg.clip_len_sec));
        row.warnings += g.report.warning_total;
        row.clean += usize::from(g.report.warning_total == 0);
        row.tokens += g.tokens.len();
    }
    Ok(row)
}

fn comparative_report() -> Outcome {
    let codec_cfg = CodecConfig::default();
    let all: Vec<ClipPair> = (0..REPORT_TRAIN + REPORT_TEST).map(|i| synth_pair(21, i, &codec_cfg).1).collect();
    let (train, test) = all.split_at(REPORT_TRAIN);
    let mut rows = Vec::new();
    for kind in [ModelKind::Vmt, ModelKind::Seq2seq] {
        match report_row(kind, train, test) {
            Ok(r) => rows.push(r),
            Err(e) => return outcome(false, format!("{kind:?}: {e}")),
        }
    }
    let n = test.len() as f64;
    println!();
    println!("  Comparative report: {REPORT_TRAIN} training pairs, {REPORT_STEPS} steps each, greedy decoding on {} test clips", test.len());
    println!("  | model   | test NLL | ended with END | length-consistent | decode warnings | warning-free | mean tokens |");
    println!("  |---------|----------|----------------|-------------------|-----------------|--------------|-------------|");
    for r in &rows {
        println!(
            "  | {:<7} | {:>8.4} | {:>14} | {:>16.1}% | {:>15} | {:>12} | {:>11.1} |",
            format!("{:?}", r.kind),
            r.test_nll,
            format!("{}/{}", r.ended, test.len()),
            100.0 * r.consistent as f64 / n,
            r.warnings,
            format!("{}/{}", r.clean, test.len()),
            r.tokens as f64 / n
        );
    }
    println!();
    outcome(true, "table emitted (reported, not asserted)")
}

fn main() {
    let mut failures = Vec::new();
    println!("acceptance suite");
    run("vocabulary", secs(1), &mut failures, vocabulary);
    run("codec_round_trip", secs(10), &mut failures, codec_round_trip);
    run("smf_round_trip", secs(10), &mut failures, smf_round_trip);
    run("schedule", secs(1), &mut failures, schedule);
    run("causality", secs(60), &mut failures, causality);
    run("gradient_suite", secs(300), &mut failures, gradient_suite);
    run("shape_pipeline", secs(120), &mut failures, shape_pipeline);
    run("generation_contract", secs(120), &mut failures, generation_contract);
    let mut runs = Vec::new();
    run("overfit_oracle", secs(600), &mut failures, || overfit_oracle(&mut runs));
    run("determinism", None, &mut failures, || determinism(&runs));
    run("comparative_report", None, &mut failures, comparative_report);
    if failures.is_empty() {
        println!("all criteria passed");
    } else {
        println!("{} criteria failed: {}", failures.len(), failures.join(", "));
        std::process::exit(1);
    }
}
