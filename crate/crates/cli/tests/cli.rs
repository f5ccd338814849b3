use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;
use transducer::decoder::{beam_search, DecodeConfig};
use transducer::lattice::Vocab;
use transducer::model::checkpoint::Checkpoint;
use transducer::model::synth::Dataset;
use transducer::model::ModelScorer;
use transducer::selfcheck::CHECKS;

fn transduce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transduce"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = transduce(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(root: &Path, name: &str, seed: u64) -> PathBuf {
    let dir = root.join(name);
    let seed = seed.to_string();
    ok(&[
        "gen-data",
        "--out",
        path(&dir),
        "--seed",
        &seed,
        "--num-utts",
        "60",
        "--dev-utts",
        "20",
        "--eval-utts",
        "20",
    ]);
    dir
}

fn train_nll(data: &Path, out: &Path, epochs: usize) -> String {
    let epochs = epochs.to_string();
    ok(&[
        "--jobs",
        "1",
        "train",
        "--data",
        path(data),
        "--out",
        path(out),
        "--epochs",
        &epochs,
        "--hidden",
        "8",
    ])
}

#[test]
fn gen_data_writes_splits_and_a_round_tripping_manifest() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    ok(&["gen-data", "--out", path(&dir)]);
    for f in [
        "train.jsonl",
        "dev.jsonl",
        "eval.jsonl",
        "manifest.json",
        "config.toml",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let text = fs::read_to_string(dir.join("manifest.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let reparsed: serde_json::Value =
        serde_json::from_str(&serde_json::to_string(&value).unwrap()).unwrap();
    assert_eq!(reparsed, value);
    assert_eq!(value["splits"]["train"]["file"], "train.jsonl");
    assert_eq!(value["splits"]["dev"]["num_utts"], 300);
    let vocab = Vocab::new(value["vocab_size"].as_u64().unwrap() as usize).unwrap();
    let train =
        Dataset::read_jsonl(fs::read(dir.join("train.jsonl")).unwrap().as_slice(), vocab).unwrap();
    assert_eq!(
        train.len() as u64,
        value["splits"]["train"]["num_utts"].as_u64().unwrap()
    );
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let a = small_data(tmp.path(), "a", 3);
    let b = small_data(tmp.path(), "b", 3);
    let c = small_data(tmp.path(), "c", 4);
    for f in ["train.jsonl", "dev.jsonl", "eval.jsonl", "manifest.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.join("train.jsonl")).unwrap(),
        fs::read(c.join("train.jsonl")).unwrap()
    );
}

#[test]
fn invalid_ranges_exit_with_usage_status() {
    let tmp = TempDir::new().unwrap();
    let out = transduce(&[
        "gen-data",
        "--out",
        path(&tmp.path().join("d")),
        "--max-labels",
        "12",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid range"));
    assert_eq!(transduce(&["gen-data"]).status.code(), Some(1));
    assert_eq!(transduce(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        transduce(&["--jobs", "0", "selfcheck"]).status.code(),
        Some(1)
    );
}

#[test]
fn config_file_is_overridden_by_flags_and_echoed() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "seed = 9\ndev_utts = 7\n[synth]\nnum_utts = 11\nnoise_level = 0.3\n",
    )
    .unwrap();
    let dir = tmp.path().join("d");
    ok(&[
        "gen-data",
        "--config",
        path(&cfg),
        "--out",
        path(&dir),
        "--dev-utts",
        "5",
    ]);
    let echoed: toml::Value = fs::read_to_string(dir.join("config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(echoed["seed"].as_integer(), Some(9));
    assert_eq!(echoed["dev_utts"].as_integer(), Some(5));
    assert_eq!(echoed["synth"]["num_utts"].as_integer(), Some(11));
    assert_eq!(echoed["synth"]["noise_level"].as_float(), Some(0.3));
    assert_eq!(
        fs::read_to_string(dir.join("dev.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    // The echoed config reproduces the run.
    let again = tmp.path().join("again");
    ok(&[
        "gen-data",
        "--config",
        path(&dir.join("config.toml")),
        "--out",
        path(&again),
    ]);
    assert_eq!(
        fs::read(dir.join("train.jsonl")).unwrap(),
        fs::read(again.join("train.jsonl")).unwrap()
    );

    fs::write(&cfg, "[synth]\nnum_utt = 11\n").unwrap();
    let out = transduce(&["gen-data", "--config", path(&cfg), "--out", path(&dir)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn nll_smoke_run_writes_checkpoint_and_metrics() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path(), "d", 1);
    let out = tmp.path().join("m");
    let start = Instant::now();
    train_nll(&data, &out, 2);
    assert!(start.elapsed() < Duration::from_secs(60));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<_> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,loss,token_error,expected_risk");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    let ckpt = Checkpoint::load(&out).unwrap();
    assert_eq!(ckpt.epoch, 2);
    assert!(out.join("config.toml").is_file());
}

#[test]
fn mwer_without_a_seed_model_is_refused() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path(), "d", 1);
    let out = transduce(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&tmp.path().join("m")),
        "--loss",
        "mwer",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MWER requires a seed model"));
}

#[test]
fn mwer_fine_tunes_from_a_seed_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path(), "d", 1);
    let seed = tmp.path().join("nll");
    train_nll(&data, &seed, 1);
    let out = tmp.path().join("mwer");
    ok(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&out),
        "--loss",
        "mwer",
        "--seed-checkpoint",
        path(&seed),
        "--epochs",
        "1",
    ]);
    let ckpt = Checkpoint::load(&out).unwrap();
    assert_eq!(
        ckpt.train_config.unwrap().loss,
        transducer::model::train::LossKind::Mwer
    );
    assert_ne!(ckpt.params, Checkpoint::load(&seed).unwrap().params);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path(), "d", 2);
    let straight = tmp.path().join("straight");
    train_nll(&data, &straight, 3);
    let first = tmp.path().join("first");
    train_nll(&data, &first, 2);
    let resumed = tmp.path().join("resumed");
    ok(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&resumed),
        "--resume",
        path(&first),
        "--epochs",
        "3",
    ]);
    for f in ["metrics.csv", "tensors.bin"] {
        assert_eq!(
            fs::read(straight.join(f)).unwrap(),
            fs::read(resumed.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn training_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path(), "d", 5);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_nll(&data, &a, 2);
    ok(&[
        "--jobs",
        "2",
        "train",
        "--data",
        path(&data),
        "--out",
        path(&b),
        "--epochs",
        "2",
        "--hidden",
        "8",
    ]);
    for f in ["metrics.csv", "tensors.bin", "manifest.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn decode_matches_the_library_and_ignores_zero_weights() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path(), "d", 6);
    let model = tmp.path().join("m");
    train_nll(&data, &model, 2);
    ok(&[
        "gen-data",
        "--out",
        path(&tmp.path().join("lmdir")),
        "--random-lm-sharpness",
        "1.0",
        "--num-utts",
        "1",
    ]);
    let lm = tmp.path().join("lmdir").join("lm.txt");

    // Single utterance.
    let one = tmp.path().join("one.jsonl");
    let first_line = fs::read_to_string(data.join("eval.jsonl"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    fs::write(&one, format!("{first_line}\n")).unwrap();
    let plain = tmp.path().join("plain");
    let stdout = ok(&[
        "decode",
        "--checkpoint",
        path(&model),
        "--data",
        path(&one),
        "--out",
        path(&plain),
        "--beam",
        "4",
    ]);
    assert!(stdout.starts_with("WER "));

    let ckpt = Checkpoint::load(&model).unwrap();
    let utt = Dataset::read_jsonl(first_line.as_bytes(), ckpt.params.vocab())
        .unwrap()
        .utterances
        .remove(0);
    let scorer = ModelScorer::new(&ckpt.params, &utt.features).unwrap();
    let config = DecodeConfig {
        beam_size: 4,
        head: ckpt.head.head,
        ..DecodeConfig::default()
    };
    let hyps = beam_search(&scorer, &config, None).unwrap();
    let csv = fs::read_to_string(plain.join("decode.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let expected: Vec<String> = hyps[0]
        .tokens
        .tokens()
        .iter()
        .map(ToString::to_string)
        .collect();
    assert_eq!(row[0], utt.id);
    assert_eq!(row[8], expected.join(" "));

    // Whole split: explicit zero weights with an LM equal the plain decode.
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&[
        "decode",
        "--checkpoint",
        path(&model),
        "--data",
        path(&data),
        "--out",
        path(&a),
    ]);
    ok(&[
        "decode",
        "--checkpoint",
        path(&model),
        "--data",
        path(&data),
        "--out",
        path(&b),
        "--lambda1",
        "0",
        "--lambda2",
        "0",
        "--lm",
        path(&lm),
    ]);
    assert_eq!(
        fs::read(a.join("decode.csv")).unwrap(),
        fs::read(b.join("decode.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("nbest.jsonl")).unwrap(),
        fs::read(b.join("nbest.jsonl")).unwrap()
    );

    let csv = fs::read_to_string(a.join("decode.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "utt_id,beam,temperature,length_norm,lambda1,lambda2,wer_numerator,wer_denominator,top1_tokens"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    for r in rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols.len(), 9);
        assert!(cols[1].parse::<usize>().is_ok() && cols[3].parse::<bool>().is_ok());
        assert!(cols[6].parse::<usize>().is_ok() && cols[7].parse::<usize>().unwrap() > 0);
    }

    let out = transduce(&[
        "decode",
        "--checkpoint",
        path(&model),
        "--data",
        path(&data),
        "--out",
        path(&a),
        "--lambda2",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_csv_plot_and_config() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path(), "d", 7);
    let model = tmp.path().join("nll");
    train_nll(&data, &model, 1);
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--checkpoint",
        path(&model),
        "--data",
        path(&data),
        "--split",
        "dev",
        "--out",
        path(&out),
        "--beams",
        "1,2",
        "--length-norm",
        "on,off",
    ]);
    let csv = fs::read_to_string(out.join("sweep_nll.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "beam,temperature,length_norm,lambda1,lambda2,S,I,D,ref_words,wer"
    );
    assert_eq!(csv.lines().count(), 5);
    let svg = fs::read_to_string(out.join("wer_vs_beam.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("stroke-dasharray"));
    let echoed: toml::Value = fs::read_to_string(out.join("config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(echoed["grid"]["beams"].as_array().unwrap().len(), 2);
}

#[test]
fn selfcheck_reports_every_check_and_catches_faults() {
    let out = transduce(&["selfcheck", "--instances", "20"]);
    assert_eq!(out.status.code(), Some(0));
    let report = String::from_utf8(out.stdout).unwrap();
    for c in CHECKS {
        assert!(report.contains(c.name), "{} missing from report", c.name);
    }
    let bad = transduce(&[
        "selfcheck",
        "--instances",
        "20",
        "--inject-fault",
        "corrupt-gradient",
    ]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL"));
}
