use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pama(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pama"))
        .args(args)
        .env_remove("PAMA_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pama(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[rustfmt::skip]
const SMALL: &[&str] = &[
    "--set", "embed_dim=8",
    "--set", "conv_channels=8",
    "--set", "conv_layers=1",
    "--set", "encoder_hidden=8",
    "--set", "duration_channels=8",
    "--set", "attention_dim=8",
    "--set", "position_dim=4",
    "--set", "prenet_dims=8",
    "--set", "decoder_hidden=16",
    "--set", "batch_size=2",
    "--set", "checkpoint_every=2",
    "--set", "max_decode_frames=200",
];

fn gen(dir: &Path, count: &str) {
    ok(&["gen", "--seed", "7", "--count", count, "--out", s(dir)]);
}

fn train(data: &Path, out: &Path, steps: &str) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--steps", steps];
    args.extend_from_slice(SMALL);
    pama(&args)
}

#[test]
fn help_lists_subcommands() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "train", "synth", "eval"] {
        assert!(text.contains(sub), "{text}");
    }
}

#[test]
fn gen_writes_layout_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "5");
    gen(&b, "5");
    for f in ["utts.txt", "align.txt", "mel/utt_0001.txt", "mel/utt_0005.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("utts.txt")).unwrap().lines().count(), 5);
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("corpus_seed = 7"), "{manifest}");
}

#[test]
fn gen_seed_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pama"))
        .args(["gen", "--count", "2", "--out", s(tmp.path())])
        .env("PAMA_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest = fs::read_to_string(tmp.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("corpus_seed = 11"));
}

#[test]
fn gen_rejects_empty_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pama(&["gen", "--count", "0", "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("count"), "{}", stderr(&out));
}

#[test]
fn train_names_unknown_config_key() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "4");
    let out = pama(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("run")),
        "--set",
        "learning_rat=0.1",
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
}

#[test]
fn train_resume_synth_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "12");

    let full = tmp.path().join("full");
    assert!(train(&data, &full, "4").status.success());
    let part = tmp.path().join("part");
    assert!(train(&data, &part, "2").status.success());
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&part),
        "--steps",
        "4",
        "--resume",
    ]);
    for f in ["model.ckpt", "loss.tsv"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }
    let history = fs::read_to_string(full.join("loss.tsv")).unwrap();
    assert_eq!(history.lines().count(), 5);
    assert!(history.starts_with("step\ttotal\tmel\tpc\tdur\talign"));

    let ckpt = full.join("model.ckpt");
    let text = "p1 t2 #1 p4 p5 t1 #3";
    let synth = |out: &Path| {
        ok(&[
            "synth",
            "--ckpt",
            s(&ckpt),
            "--text",
            text,
            "--mode",
            "hard",
            "--out",
            s(out),
        ])
    };
    let (s1, s2) = (tmp.path().join("s1"), tmp.path().join("s2"));
    synth(&s1);
    synth(&s2);
    for f in ["mel.txt", "attention.txt", "durations.txt"] {
        assert_eq!(fs::read(s1.join(f)).unwrap(), fs::read(s2.join(f)).unwrap(), "{f}");
    }
    let mel = fs::read_to_string(s1.join("mel.txt")).unwrap();
    assert!(mel.lines().all(|l| l.split_whitespace().count() == 8));

    let bad = pama(&[
        "synth",
        "--ckpt",
        s(&ckpt),
        "--text",
        text,
        "--factor",
        "-1",
        "--out",
        s(&s1),
    ]);
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("factor"));

    let report = tmp.path().join("eval").join("report.tsv");
    fs::create_dir_all(report.parent().unwrap()).unwrap();
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    let tsv = fs::read_to_string(&report).unwrap();
    let summary: Vec<&str> = tsv.lines().skip(2).take_while(|l| !l.is_empty()).collect();
    assert_eq!(summary.len(), 3);
    for (row, factor) in summary.iter().zip(["0.75", "1", "1.5"]) {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[0], factor);
        assert_eq!(cols.len(), 7);
    }

    let empty = pama(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--factors", ""]);
    assert!(!empty.status.success());
}

#[test]
fn eval_rejects_empty_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "1");
    let run = tmp.path().join("run");
    assert!(train(&data, &run, "1").status.success());
    let out = pama(&["eval", "--ckpt", s(&run.join("model.ckpt")), "--data", s(&data)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));
}
