//! End-to-end runs of the `unitrans` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unitrans_cli::Checkpoint;

const TINY: &str = "\
# small enough to train in a few seconds
corpus.train_per_lang=48
corpus.eval_sentences=12
encoder.d_model=32
encoder.dim=32
encoder.layers=1
encoder.heads=2
encoder.ffn=64
encoder.train.epochs=1
translator.n_sub=8
translator.d_model=32
translator.layers=1
translator.heads=2
translator.ffn=64
translator.train.epochs=1
ablate.n_sub=1,8
ablate.seeds=1
ablate.bypass=false
export.sentences=6
";

fn unitrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitrans"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = unitrans(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the parsed error record; stderr must be exactly one JSON line.
fn failure(args: &[&str]) -> (i32, serde_json::Value) {
    let out = unitrans(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    let code = out.status.code().unwrap();
    assert_eq!(v["exit_code"], code);
    (code, v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_code_two() {
    let (code, v) = failure(&["frobnicate"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"], "usage");
    let (code, _) = failure(&["gen-corpus"]);
    assert_eq!(code, 2);
}

#[test]
fn config_errors_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let (code, v) = failure(&["gen-corpus", "--out", s(&out), "--set", "corpus.colour=blue"]);
    assert_eq!(code, 3);
    assert!(v["message"].as_str().unwrap().contains("corpus.colour"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "translator.targets=de\n").unwrap();
    let (code, v) = failure(&["gen-corpus", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code, 3);
    assert!(v["message"].as_str().unwrap().contains("translator.targets"));
}

#[test]
fn missing_inputs_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    let out = dir.path().join("out");
    let (code, v) = failure(&["train-encoder", "--corpus", s(&nowhere), "--out", s(&out)]);
    assert_eq!((code, v["error"].as_str().unwrap()), (4, "io"));
    let (code, v) = failure(&[
        "translate",
        "--translator",
        s(&nowhere),
        "--encoder",
        s(&nowhere),
        "--input",
        s(&nowhere),
        "--target-lang",
        "es",
        "--out",
        s(&out),
    ]);
    assert_eq!((code, v["error"].as_str().unwrap()), (5, "checkpoint"));
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
    corpus: PathBuf,
    encoder: PathBuf,
    translator: PathBuf,
}

impl Pipeline {
    fn build() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("tiny.cfg");
        fs::write(&cfg, TINY).unwrap();
        let corpus = root.join("corpus");
        ok(&["gen-corpus", "--config", s(&cfg), "--out", s(&corpus)]);
        let enc_dir = root.join("enc");
        ok(&[
            "train-encoder",
            "--config",
            s(&cfg),
            "--corpus",
            s(&corpus),
            "--out",
            s(&enc_dir),
        ]);
        let tr_dir = root.join("tr");
        let encoder = enc_dir.join("encoder.ckpt");
        ok(&[
            "train-translator",
            "--config",
            s(&cfg),
            "--corpus",
            s(&corpus),
            "--encoder",
            s(&encoder),
            "--out",
            s(&tr_dir),
        ]);
        Self {
            _dir: dir,
            translator: tr_dir.join("translator.ckpt"),
            root,
            cfg,
            corpus,
            encoder,
        }
    }

    fn translate(&self, input: &Path, out: &Path) -> String {
        ok(&[
            "translate",
            "--config",
            s(&self.cfg),
            "--translator",
            s(&self.translator),
            "--encoder",
            s(&self.encoder),
            "--input",
            s(input),
            "--target-lang",
            "es",
            "--out",
            s(out),
        ]);
        fs::read_to_string(out.join("translations.tsv")).unwrap()
    }
}

#[test]
fn full_pipeline() {
    let p = Pipeline::build();

    // Effective configuration is echoed next to every output.
    let echo = fs::read_to_string(p.corpus.join("config.txt")).unwrap();
    assert!(echo.contains("corpus.train_per_lang=48\n"));
    assert!(echo.contains("translator.targets=es\n"));
    let enc_metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.root.join("enc/metrics.json")).unwrap()).unwrap();
    assert_eq!(enc_metrics["config"]["encoder.dim"], "32");
    assert!(enc_metrics["retrieval"]["retrieval_accuracy"].is_number());

    // Checkpoints decode and re-encode to the same bytes.
    for path in [&p.encoder, &p.translator] {
        let bytes = fs::read(path).unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
    let tr = Checkpoint::load(&p.translator).unwrap();
    let model = tr.to_translator().unwrap();
    let again = Checkpoint::from_translator(&model, None, &tr.experiment_config);
    assert_eq!(again.params, tr.params);

    // Translation of the same input is reproducible across process runs.
    let input = p.root.join("input.txt");
    let eval = fs::read_to_string(p.corpus.join("eval_pairs.tsv")).unwrap();
    let sources: Vec<&str> = eval
        .lines()
        .filter(|l| l.starts_with("en\t"))
        .map(|l| l.split('\t').nth(1).unwrap())
        .collect();
    fs::write(&input, sources.join("\n")).unwrap();
    let first = p.translate(&input, &p.root.join("t1"));
    let second = p.translate(&input, &p.root.join("t2"));
    assert_eq!(first, second);
    assert_eq!(first.lines().count(), sources.len());
    assert!(first.lines().all(|l| l.starts_with("es\t")));

    // Metrics JSON carries the three headline blocks.
    let ev = p.root.join("eval");
    ok(&[
        "evaluate",
        "--config",
        s(&p.cfg),
        "--translator",
        s(&p.translator),
        "--encoder",
        s(&p.encoder),
        "--pairs",
        s(&p.corpus),
        "--out",
        s(&ev),
    ]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for key in ["bleu", "similarity", "purity"] {
        assert!(m.get(key).is_some(), "metrics lacks {key}: {m}");
    }
    assert!(m["bleu"]["score"].is_number());

    // A checkpoint from a future format version is refused.
    let mut bytes = fs::read(&p.translator).unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    let future = p.root.join("future.ckpt");
    fs::write(&future, bytes).unwrap();
    let (code, v) = failure(&[
        "translate",
        "--translator",
        s(&future),
        "--encoder",
        s(&p.encoder),
        "--input",
        s(&input),
        "--target-lang",
        "es",
        "--out",
        s(&p.root.join("t3")),
    ]);
    assert_eq!(code, 5);
    assert!(v["message"].as_str().unwrap().contains("version 2"));

    // An encoder checkpoint is not a translator.
    let (code, _) = failure(&[
        "translate",
        "--translator",
        s(&p.encoder),
        "--encoder",
        s(&p.encoder),
        "--input",
        s(&input),
        "--target-lang",
        "es",
        "--out",
        s(&p.root.join("t4")),
    ]);
    assert_eq!(code, 5);

    // Ablation over {1, default} yields one row per variant.
    let ab = p.root.join("ablate");
    ok(&[
        "ablate",
        "--config",
        s(&p.cfg),
        "--corpus",
        s(&p.corpus),
        "--encoder",
        s(&p.encoder),
        "--out",
        s(&ab),
    ]);
    let csv = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("n_sub=1,"));
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);

    // Embedding export has one row per (sentence, language) and a 2-D projection.
    let ex = p.root.join("export");
    ok(&[
        "export-embeddings",
        "--config",
        s(&p.cfg),
        "--encoder",
        s(&p.encoder),
        "--corpus",
        s(&p.corpus),
        "--out",
        s(&ex),
    ]);
    let csv = fs::read_to_string(ex.join("embeddings.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("sentence,lang,pc1,pc2,e0"));
    assert_eq!(lines.count(), 6 * 3);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("corpus");
    ok(&[
        "gen-corpus",
        "--config",
        s(&cfg),
        "--seed",
        "99",
        "--set",
        "corpus.eval_sentences=3",
        "--out",
        s(&out),
    ]);
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("seed=99\n"));
    assert!(echo.contains("corpus.eval_sentences=3\n"));
}
