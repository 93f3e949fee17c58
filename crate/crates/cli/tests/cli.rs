use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "synth.sentences=200",
    "--set",
    "cvae.epochs=2",
    "--set",
    "nmt.epochs=1",
    "--set",
    "bootstrap_resamples=50",
    "--seed",
    "7",
];

fn prmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prmt")).args(args).output().expect("spawn prmt")
}

fn ok(args: &[&str]) -> String {
    let out = prmt(args);
    assert!(
        out.status.success(),
        "prmt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&with_small(&["gen-synth", "--out-dir", p(&a)]));
    ok(&with_small(&["gen-synth", "--out-dir", p(&b)]));
    let ca = std::fs::read(a.join("corpus.jsonl")).unwrap();
    assert!(!ca.is_empty());
    assert_eq!(ca, std::fs::read(b.join("corpus.jsonl")).unwrap());
    let ma = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&ma).unwrap();
    assert_eq!(m["seeds"], serde_json::json!([7]));
    assert_eq!(m["outputs"][0]["path"], "corpus.jsonl");
    assert_eq!(m["config"]["synth"]["sentences"], 200);
}

#[test]
fn evaluate_identical_files_prints_100() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x.txt");
    std::fs::write(&f, "a red dog runs .\nthe car is blue .\n").unwrap();
    let out = ok(&["evaluate", "--hyp", p(&f), "--ref", p(&f)]);
    assert!(out.starts_with("BLEU = 100.00"), "{out}");
}

#[test]
fn exit_codes() {
    let out = prmt(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(prmt(&["evaluate", "--hyp", "x"]).status.code(), Some(1));
    assert_eq!(prmt(&["--help"]).status.code(), Some(0));
    assert_eq!(prmt(&["--version"]).status.code(), Some(0));
    let missing = prmt(&["evaluate", "--hyp", "/nonexistent/h", "--ref", "/nonexistent/r"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(prmt(&["gen-synth", "--out-dir", "/tmp/unused", "--set", "nope=1"]).status.code(), Some(2));
}

#[test]
fn staged_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let (corpus, pset, cvae, index, nmt, tr) = (d("c"), d("p"), d("v"), d("i"), d("n"), d("t"));
    ok(&with_small(&["gen-synth", "--out-dir", p(&corpus)]));
    let corpus_file = corpus.join("corpus.jsonl");
    ok(&with_small(&["build-pset", "--corpus", p(&corpus_file), "--out-dir", p(&pset)]));
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "pairs.jsonl", "grounding.json"] {
        assert!(pset.join(f).exists(), "{f}");
    }
    let pairs = pset.join("pairs.jsonl");
    ok(&with_small(&["train-cvae", "--pairs", p(&pairs), "--out-dir", p(&cvae)]));
    let ckpt = cvae.join("cvae.ckpt");
    ok(&with_small(&["build-index", "--pairs", p(&pairs), "--cvae", p(&ckpt), "--out-dir", p(&index)]));
    let idx = index.join("index.prix");

    let q = ok(&["query", "--index", p(&idx), "--phrase", "a red dog", "--k", "3"]);
    let lines: Vec<&str> = q.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("1\t"));

    let stage = [
        "--data",
        p(&pset),
        "--cvae",
        p(&ckpt),
        "--index",
        p(&idx),
    ];
    let mut train = vec!["train-nmt", "--out-dir", p(&nmt)];
    train.extend_from_slice(&stage);
    ok(&with_small(&train));
    assert!(nmt.join("nmt.ckpt").exists());
    let mut translate = vec!["translate", "--model", p(&nmt), "--out-dir", p(&tr), "--beam", "2"];
    translate.extend_from_slice(&stage);
    let out = ok(&with_small(&translate));
    assert!(out.starts_with("BLEU = "), "{out}");
    let hyps = std::fs::read_to_string(tr.join("translations.txt")).unwrap();
    let refs = std::fs::read_to_string(tr.join("references.txt")).unwrap();
    assert_eq!(hyps.lines().count(), refs.lines().count());
    let header = std::fs::read_to_string(tr.join("results.csv")).unwrap();
    assert!(header.starts_with("model,split,masked,k,bleu,ci_low,ci_high,truncated\n"));

    let boot = ok(&with_small(&[
        "bootstrap",
        "--hyp-a",
        p(&tr.join("translations.txt")),
        "--hyp-b",
        p(&tr.join("references.txt")),
        "--ref",
        p(&tr.join("references.txt")),
    ]));
    assert!(boot.contains("p = 0.0000"), "{boot}");

    let ars = d("ars");
    ok(&with_small(&["analyze-ars", "--index", p(&idx), "--data", p(&pset), "--k-max", "3", "--out-dir", p(&ars)]));
    let csv = std::fs::read_to_string(ars.join("ars.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("k,in_domain,out_domain"));
    assert_eq!(csv.lines().count(), 4);

    let cl = d("clusters");
    ok(&["analyze-clusters", "--index", p(&idx), "--top", "3", "--out-dir", p(&cl)]);
    let proj = std::fs::read_to_string(cl.join("projection.csv")).unwrap();
    assert_eq!(proj.lines().next(), Some("kind,head,x,y"));
    assert!(cl.join("manifest.json").exists());

    let mismatched = prmt(&with_small(&[
        "train-nmt", "--data", p(&pset), "--cvae", p(&ckpt), "--index", p(&corpus_file), "--out-dir", p(&d("bad")),
    ]));
    assert_eq!(mismatched.status.code(), Some(2));
}

#[test]
fn degrade_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("deg");
    ok(&with_small(&["degrade", "--out-dir", p(&out)]));
    let csv = std::fs::read_to_string(out.join("degradation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("seed,setting,model,bleu,ci_low,ci_high,p_value,masked_fraction"));
    assert_eq!(lines.count(), 2);
}
