use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn embinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embinv"))
        .args(args)
        .output()
        .expect("spawn embinv")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

const TINY: &str = r#"
[dataset]
synthetic = { count = 48, vocab = 12, max_len = 3, seed = 3 }
tokenizer = "synthetic:12"
max_tokens = 3
eval_fraction = 0.25

[embedder]
kind = "synthetic"
dim = 8

[model]
d_model = 16
heads = 2
encoder_layers = 1
decoder_layers = 1
ff_hidden = 32
projection_len = 2

[train]
batch_size = 8
learning_rate = 0.003
max_steps = 12
eval_every = 0
seed = 5

[train.augment]
copies = 1
max_edits = 1
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn metric_lines(p: &Path) -> Vec<Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Pipeline {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn pipeline() -> Pipeline {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    let base = root.join("base");
    let corr = root.join("corr");
    let extra = format!(
        "[search]\nbase = \"{}\"\ncorrector = \"{}\"\n",
        s(&base.join("checkpoint")),
        s(&corr.join("checkpoint"))
    );
    let config = write_config(&root, &extra);
    let text = std::fs::read_to_string(&config).unwrap();
    std::fs::write(
        &config,
        text.replace("[train]\n", &format!("[train]\nbase = \"{}\"\n", s(&base.join("checkpoint")))),
    )
    .unwrap();
    ok(embinv(&["build-dataset", "-c", s(&config), "--out", s(&data)]));
    ok(embinv(&["train", "-c", s(&config), "--dataset", s(&data), "--out", s(&base), "--role", "base"]));
    ok(embinv(&["train", "-c", s(&config), "--dataset", s(&data), "--out", s(&corr), "--role", "corrector"]));
    Pipeline { _tmp: tmp, root, config }
}

#[test]
fn missing_corpus_is_a_config_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[embedder]\nkind = \"synthetic\"\ndim = 4\n").unwrap();
    let o = embinv(&["build-dataset", "-c", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset.corpus"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[search]\nbeam = 4\n").unwrap();
    let o = embinv(&["invert", "-c", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beam"), "{}", stderr(&o));
}

#[test]
fn unreadable_corpus_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = embinv(&[
        "build-dataset",
        "-c",
        s(&cfg),
        "--out",
        s(&tmp.path().join("d")),
        "--corpus",
        s(&tmp.path().join("absent.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn build_dataset_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("d");
    ok(embinv(&["build-dataset", "-c", s(&cfg), "--out", s(&out)]));
    let first = std::fs::read(out.join("dataset.jsonl")).unwrap();
    let ingest = read_json(&out.join("ingest.json"));
    assert_eq!(ingest["documents"], 48);
    assert_eq!(ingest["cache_entries"], 48);
    ok(embinv(&["build-dataset", "-c", s(&cfg), "--out", s(&out)]));
    assert_eq!(std::fs::read(out.join("dataset.jsonl")).unwrap(), first);
    assert_eq!(read_json(&out.join("ingest.json"))["cache_entries"], 48);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "build-dataset");
    assert!(manifest["code_version"].as_str().unwrap().starts_with("embinv-cli-"));
    assert_eq!(manifest["config"]["embedder"]["dim"], 8);
}

#[test]
fn training_is_seed_reproducible_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("d");
    ok(embinv(&["build-dataset", "-c", s(&cfg), "--out", s(&data)]));
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["train", "-c", s(&cfg), "--dataset", s(&data), "--role", "base", "--out"];
        let out_s = s(&out).to_string();
        args.push(&out_s);
        args.extend_from_slice(extra);
        ok(embinv(&args));
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let la = metric_lines(&a.join("metrics.jsonl"));
    let lb = metric_lines(&b.join("metrics.jsonl"));
    assert_eq!(la.len(), 12);
    assert_eq!(la[10]["loss"], lb[10]["loss"]);

    let c = run("c", &["--steps", "6"]);
    assert_eq!(read_json(&c.join("checkpoint/config.json"))["state"]["step"], 6);
    run("c", &["--steps", "12", "--resume"]);
    let lines = metric_lines(&c.join("metrics.jsonl"));
    let steps: Vec<u64> = lines.iter().map(|l| l["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, (0..12).collect::<Vec<_>>());
    assert_eq!(read_json(&c.join("checkpoint/config.json"))["state"]["step"], 12);
}

#[test]
fn end_to_end_runs() {
    let p = pipeline();
    let data = p.dir("data");
    let cfg = &p.config;
    let invert = |name: &str, extra: &[&str]| {
        let out = p.dir(name);
        let out_s = s(&out).to_string();
        let mut args = vec!["invert", "-c", s(cfg), "--dataset", s(&data), "--out", &out_s];
        args.extend_from_slice(extra);
        ok(embinv(&args));
        out
    };

    // Zero correction rounds reproduce the base model's greedy decode.
    let zero = invert("zero", &["--steps", "0"]);
    let greedy_cfg = p.root.join("greedy.toml");
    std::fs::write(
        &greedy_cfg,
        std::fs::read_to_string(cfg).unwrap().replace("[search]\n", "[search]\nmethod = \"base-greedy\"\n"),
    )
    .unwrap();
    let greedy = p.dir("greedy");
    ok(embinv(&["invert", "-c", s(&greedy_cfg), "--dataset", s(&data), "--out", s(&greedy)]));
    let rz = read_json(&zero.join("report.json"));
    let rg = read_json(&greedy.join("report.json"));
    for key in ["bleu", "token_f1", "exact", "cos", "examples"] {
        assert_eq!(rz[key], rg[key], "{key}");
    }
    let preds = |r: &Value| -> Vec<String> {
        r["records"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x["prediction"].as_str().unwrap().to_string())
            .collect()
    };
    assert_eq!(preds(&rz), preds(&rg));

    let corrected = invert("corrected", &["--steps", "3", "--beam-width", "2"]);
    let traces = std::fs::read_to_string(corrected.join("traces.jsonl")).unwrap();
    // One line per round: 12 examples × (round 0 + 3 corrections).
    assert_eq!(traces.lines().count(), 48);
    assert!(corrected.join("summary.txt").exists());

    // Initializer sweep from one config.
    let sweep_cfg = p.root.join("sweep.toml");
    std::fs::write(
        &sweep_cfg,
        std::fs::read_to_string(cfg)
            .unwrap()
            .replace("[search]\n", "[search]\ninits = [\"base\", \"random\", \"fixed:t000 t001\"]\nrounds = 2\n"),
    )
    .unwrap();
    let sweep = p.dir("sweep");
    ok(embinv(&["invert", "-c", s(&sweep_cfg), "--dataset", s(&data), "--out", s(&sweep)]));
    for i in 0..3 {
        assert!(sweep.join(format!("init-{i}/report.json")).exists());
    }

    // Defense: λ grid honored, λ=0 row equals the undefended inversion.
    let undefended = invert("undefended", &["--steps", "2"]);
    let defend = p.dir("defend");
    ok(embinv(&[
        "defend", "-c", s(cfg), "--dataset", s(&data), "--out", s(&defend), "--steps", "2", "--lambdas", "0,0.5",
    ]));
    let csv = std::fs::read_to_string(defend.join("tradeoff.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "lambda,ndcg,bleu,tf1,exact,cos");
    assert_eq!(rows.len(), 3);
    assert!(defend.join("tradeoff.svg").exists());
    let points = read_json(&defend.join("tradeoff.json"));
    let r0 = &points[0]["reconstruction"];
    let ru = read_json(&undefended.join("report.json"));
    for key in ["bleu", "token_f1", "exact", "cos"] {
        assert_eq!(r0[key], ru[key], "{key}");
    }
    assert_eq!(points[0]["ndcg_at_10"], 1.0);

    // Analyses over a stored report.
    let report = undefended.join("report.json");
    let an = p.dir("scatter");
    ok(embinv(&["analyze", "--out", s(&an), "--kind", "scatter", "--report", s(&report)]));
    assert!(an.join("cosine_vs_bleu.svg").exists());
    let freq_cfg = p.root.join("freq.toml");
    std::fs::write(
        &freq_cfg,
        format!("[analyze]\ntrain_corpus = \"{}\"\n", s(&data.join("corpus.jsonl"))),
    )
    .unwrap();
    let fq = p.dir("freq");
    ok(embinv(&["analyze", "-c", s(&freq_cfg), "--out", s(&fq), "--kind", "frequency", "--report", s(&report)]));
    assert!(fq.join("frequency.json").exists());
    let cl = p.dir("closeness");
    ok(embinv(&[
        "analyze", "-c", s(cfg), "--dataset", s(&data), "--out", s(&cl), "--kind", "hypothesis-closeness",
    ]));
    assert_eq!(read_json(&cl.join("closeness.json"))["count"], 12);
}
