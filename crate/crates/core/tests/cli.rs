use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mtlg2p"));
    c.env("MTLG2P_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy_lexicon.tsv")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn prepare_train_apply_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = run(&["prepare", "--lexicon", s(&fixture()), "--out", s(&data), "--valid-count", "40", "--downsample"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&data.join("manifest.json"));
    assert_eq!(manifest["valid"]["total"], 40);
    let train = &manifest["train"];
    assert_eq!(train["positives"].as_u64().unwrap() * 2, train["total"].as_u64().unwrap());

    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model.hidden_dim": 12, "model.embed_dim": 12, "train.max_epochs": 50}"#).unwrap();
    let run_dir = tmp.path().join("run");
    let out = run(&[
        "--config", s(&cfg), "train", "--data", s(&data), "--out", s(&run_dir), "--epochs", "2",
        "--classifier-hidden1", "8", "--classifier-hidden2", "8", "--beam-width", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| WER"));
    for f in ["best.ckpt", "final.ckpt", "run_log.jsonl", "summary.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(run_dir.join("run_log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    assert_eq!(records[0]["train"]["max_epochs"], 2);
    assert_eq!(records[0]["model"]["hidden_dim"], 12);
    assert_eq!(records[3]["stop_reason"], "max_epochs");

    let words = tmp.path().join("words.txt");
    std::fs::write(&words, "Bad\nZoo\nqqq\n").unwrap();
    let dict = tmp.path().join("dict.tsv");
    let out = run(&[
        "apply", "--model", s(&run_dir.join("best.ckpt")), "--words", s(&words), "--out", s(&dict), "--emit-flags",
        "--beam-width", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&tmp.path().join("dict.tsv.skipped.json"));
    assert_eq!(report["words"], 3);
    let skipped: Vec<&str> = report["skipped"].as_array().unwrap().iter().map(|v| v["word"].as_str().unwrap()).collect();
    assert!(skipped.contains(&"qqq"));
    let text = std::fs::read_to_string(&dict).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len() + skipped.len(), 3);
    assert!(rows.iter().all(|r| r.split('\t').count() == 4));

    let eval_out = tmp.path().join("eval.json");
    let out = run(&[
        "evaluate", "--model", s(&run_dir.join("best.ckpt")), "--lexicon", s(&data.join("valid.tsv")),
        "--out", s(&eval_out), "--beam-width", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let e = json(&eval_out);
    assert_eq!(e["summary"]["entries"], 40);
    assert_eq!(e["summary"]["beam_width"], 2);
    let wer = e["summary"]["wer"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&wer));
}

#[test]
fn training_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(run(&["prepare", "--lexicon", s(&fixture()), "--out", s(&data), "--valid-count", "20"]).status.success());
    let mut logs = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("run{k}"));
        let out = run(&[
            "train", "--data", s(&data), "--out", s(&dir), "--epochs", "1", "--hidden-dim", "8", "--embed-dim", "8",
            "--classifier-hidden1", "4", "--classifier-hidden2", "4", "--beam-width", "1",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        logs.push((std::fs::read(dir.join("run_log.jsonl")).unwrap(), std::fs::read(dir.join("final.ckpt")).unwrap()));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn score_asr_reports_wer_and_aer() {
    let tmp = tempfile::tempdir().unwrap();
    let refs = tmp.path().join("ref.txt");
    let hyps = tmp.path().join("hyp.txt");
    std::fs::write(&refs, "u1\tder *Whistleblower spricht\nu2\tein *Update kommt\n").unwrap();
    std::fs::write(&hyps, "u1\tder Whistleblower spricht\nu2\tein Abdeckung kommt\n").unwrap();
    let report = tmp.path().join("asr.json");
    let out = run(&["score-asr", "--reference", s(&refs), "--hypothesis", s(&hyps), "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&report);
    assert_eq!(r["anglicisms_total"], 2);
    assert_eq!(r["anglicisms_recognized"], 1);
    assert_eq!(r["aer"].as_f64().unwrap(), 50.0);
    assert!((r["wer"].as_f64().unwrap() - 100.0 / 6.0).abs() < 1e-9);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["gradcheck"]).status.code(), Some(0));
    assert_eq!(run(&["gradcheck", "--corrupt-backward"]).status.code(), Some(3));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let out = run(&["evaluate", "--model", "/nonexistent.ckpt", "--lexicon", "/nonexistent.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn prepare_without_flags_needs_a_wordlist() {
    let tmp = tempfile::tempdir().unwrap();
    let lex = tmp.path().join("lex.tsv");
    std::fs::write(&lex, "Fan\tf E: n\nTal\tt a: l\nNase\tn a: z @\nBoot\tb o: t\n").unwrap();
    let out = run(&["prepare", "--lexicon", s(&lex), "--out", s(&tmp.path().join("a")), "--valid-count", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let wl = tmp.path().join("angl.txt");
    std::fs::write(&wl, "fan\n").unwrap();
    let dir = tmp.path().join("b");
    let out = run(&[
        "prepare", "--lexicon", s(&lex), "--wordlist", s(&wl), "--out", s(&dir), "--valid-count", "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = json(&dir.join("manifest.json"));
    assert_eq!(m["tagged"]["positives"], 1);
    assert_eq!(m["tagged"]["total"], 4);
}
