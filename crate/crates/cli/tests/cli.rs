use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vmt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// A temp dir holding a synthetic dataset under `data/`.
fn workspace(train: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = vmt(
        dir.path(),
        &["dataset-synth", "-n", train, "--validation", "1", "--test", "1", "--seed", "3", "-o", "data"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn train_in(dir: &Path, fixture_name: &str) -> Output {
    fs::copy(fixture(fixture_name), dir.join("run.json")).unwrap();
    vmt(dir, &["train", "--config", "run.json"])
}

#[test]
fn synth_then_validate() {
    let dir = workspace("4");
    let o = vmt(dir.path(), &["dataset-validate", "data/manifest.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("train: 4") && out.contains("ok: 6 pairs"), "{out}");
}

#[test]
fn corrupted_clip_is_a_data_error_naming_the_file() {
    let dir = workspace("2");
    let clip = dir.path().join("data/clips/0001.vmtf");
    let bytes = fs::read(&clip).unwrap();
    fs::write(&clip, &bytes[..bytes.len() / 2]).unwrap();
    let o = vmt(dir.path(), &["dataset-validate", "data/manifest.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("0001.vmtf"), "{}", stderr(&o));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vmt(dir.path(), &["dataset-validate", "nope.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.json"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&vmt(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&vmt(dir.path(), &["generate", "--clip", "x.vmtf", "-o", "x.mid"])), 1);
    assert_eq!(code(&vmt(dir.path(), &["dataset-synth", "-n", "0", "-o", "d"])), 1);
    let o = vmt(dir.path(), &["generate", "--ckpt", "a", "--clip", "b", "--mode", "beam", "-o", "c"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&vmt(dir.path(), &["--help"])), 0);
}

#[test]
fn codec_round_trip_through_files() {
    let dir = workspace("1");
    let d = dir.path();
    let o = vmt(d, &["codec-encode", "data/midi/0000.mid", "-o", "t.tokens"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(d.join("t.tokens")).unwrap();
    assert!(text.starts_with("START\n") && text.trim_end().ends_with("END"));
    let o = vmt(d, &["codec-decode", "t.tokens", "-o", "back.mid"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("warnings: total=0"));
    let o = vmt(d, &["codec-encode", "back.mid", "-o", "again.tokens"]);
    assert_eq!(code(&o), 0);
    assert_eq!(text, fs::read_to_string(d.join("again.tokens")).unwrap());
}

#[test]
fn codec_decode_reports_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("open.tokens"), "START\nNOTE_ON 60\nTIME_SHIFT 10\nNOTE_OFF 62\nEND\n").unwrap();
    let o = vmt(d, &["codec-decode", "open.tokens", "-o", "o.mid"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("unmatched_note_on=1") && out.contains("unmatched_note_off=1"), "{out}");
    fs::write(d.join("junk.tokens"), "START\nNOTE_ON 200\n").unwrap();
    let o = vmt(d, &["codec-decode", "junk.tokens", "-o", "o.mid"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("junk.tokens"));
}

/// Format-0 SMF at 480 ticks per quarter and the default 120 bpm, with one
/// note from 0 s to `off_sec`.
fn one_note_smf(off_sec: f64) -> Vec<u8> {
    fn vlq(mut v: u32) -> Vec<u8> {
        let mut out = vec![(v & 0x7f) as u8];
        v >>= 7;
        while v > 0 {
            out.insert(0, 0x80 | (v & 0x7f) as u8);
            v >>= 7;
        }
        out
    }
    let mut track = vec![0x00, 0x90, 60, 100];
    track.extend(vlq((off_sec * 960.0) as u32));
    track.extend([0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00]);
    let mut f = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0MTrk".to_vec();
    f.extend((track.len() as u32).to_be_bytes());
    f.extend(track);
    f
}

#[test]
fn long_score_needs_a_window() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("long.mid"), one_note_smf(24.0)).unwrap();
    let o = vmt(d, &["codec-encode", "long.mid", "-o", "t.tokens"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("long.mid"), "{}", stderr(&o));
    let o = vmt(d, &["codec-encode", "long.mid", "--start", "0", "-o", "t.tokens"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = vmt(d, &["codec-decode", "t.tokens", "-o", "cut.mid"]);
    assert!(stdout(&o).contains("1 notes"), "{}", stdout(&o));
}

#[test]
fn train_generate_viz() {
    let dir = workspace("4");
    let d = dir.path();
    let o = train_in(d, "tiny_run.json");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("4 steps"));
    let metrics = fs::read_to_string(d.join("ckpt/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let gen = |out: &str, extra: &[&str]| {
        let mut args = vec!["generate", "--ckpt", "ckpt/last.vmtc", "--clip", "data/clips/0000.vmtf", "--max-len", "64", "-o", out];
        args.extend_from_slice(extra);
        vmt(d, &args)
    };
    let o = gen("a.mid", &["--report", "a.json", "--tokens", "a.tokens"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&gen("b.mid", &[])), 0);
    assert_eq!(fs::read(d.join("a.mid")).unwrap(), fs::read(d.join("b.mid")).unwrap());
    let report = fs::read_to_string(d.join("a.json")).unwrap();
    assert!(report.contains("\"token_count\""));
    let tokens = fs::read_to_string(d.join("a.tokens")).unwrap();
    assert!(tokens.trim_end().ends_with("END"));
    assert!(!d.join("b.json").exists());

    let s1 = gen("s1.mid", &["--mode", "sample", "--temp", "1.2", "--seed", "9", "--tokens", "s1.tokens"]);
    let s2 = gen("s2.mid", &["--mode", "sample", "--temp", "1.2", "--seed", "9", "--tokens", "s2.tokens"]);
    assert_eq!(code(&s1), 0);
    assert_eq!(code(&s2), 0);
    assert_eq!(fs::read(d.join("s1.tokens")).unwrap(), fs::read(d.join("s2.tokens")).unwrap());
    assert_eq!(code(&gen("z.mid", &["--mode", "sample", "--temp", "0"])), 1);

    let o = vmt(d, &["viz", "data/midi/0000.mid", "-o", "roll.svg"]);
    assert_eq!(code(&o), 0);
    let svg = fs::read_to_string(d.join("roll.svg")).unwrap();
    assert_eq!(svg.matches("<rect class=\"note\"").count(), 8);
    assert_eq!(code(&vmt(d, &["viz", "data/midi/0000.mid", "--t1", "0", "-o", "bad.svg"])), 1);
}

#[test]
fn training_is_deterministic_and_f64_checkpoints_generate() {
    let a = workspace("3");
    let b = workspace("3");
    for d in [a.path(), b.path()] {
        let o = train_in(d, "tiny_seq2seq.json");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let ma = fs::read(a.path().join("ckpt/metrics.jsonl")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("ckpt/metrics.jsonl")).unwrap());
    let o = vmt(
        a.path(),
        &["generate", "--ckpt", "ckpt/last.vmtc", "--clip", "data/clips/0002.vmtf", "--max-len", "16", "-o", "g.mid"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn bad_configs() {
    let dir = workspace("2");
    let o = train_in(dir.path(), "bad_field.json");
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    let o = vmt(dir.path(), &["train", "--config", "absent.json"]);
    assert_eq!(code(&o), 2);
    fs::copy(fixture("tiny_run.json"), dir.path().join("run.json")).unwrap();
    fs::remove_file(dir.path().join("data/manifest.json")).unwrap();
    assert_eq!(code(&vmt(dir.path(), &["train", "--config", "run.json"])), 2);
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = workspace("1");
    fs::write(dir.path().join("bad.vmtc"), b"VMTC\x01\x00\x00\x00garbage").unwrap();
    let o = vmt(dir.path(), &["generate", "--ckpt", "bad.vmtc", "--clip", "data/clips/0000.vmtf", "-o", "g.mid"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.vmtc"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = vmt(dir.path(), &["gradcheck", "--samples", "2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains(", 0 failed"));
}
