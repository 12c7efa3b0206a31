use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedvocab::checkpoint::load_model;
use fedvocab::corpus::{load_corpus, Pool, PoolRatios};
use fedvocab::metrics::{evaluate_client, MetricsReport};
use fedvocab::model::{Head, Scorer};
use fedvocab::personalize::PersonalizationReport;

const TINY: &str = r#"{
  "corpus": {"synthetic": {"n_clients": 30, "shared_vocab_size": 60, "tail_size_per_client": 5,
                           "sentences_per_client": 20, "sentence_length_range": [3, 6], "private_weight": 0.15}},
  "pool_ratios": [0.5, 0.2, 0.3],
  "vocab_size": 60,
  "oracle_extra_words": 40,
  "model": {"char_dim": 3, "hidden_dim": 4, "kernel_width": 2, "lstm_layers": 1, "max_word_bytes": 12},
  "pretrain": {"epochs": 1, "lr": 0.5, "batch_size": 8},
  "fl": {"clients_per_round": 4, "global_epochs": 1, "client_lr": 0.3, "server_lr": 0.01},
  "personalization": {"lr_grid": [0.1], "sigma_grid": [0.1], "hidden_dims_grid": [[4]], "max_epochs": 2}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedvocab"));
    c.env("RUST_LOG", "warn");
    for (k, _) in std::env::vars() {
        if k.starts_with("FEDVOCAB_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str], config: &Path) -> Output {
    let out = bin().arg("--config").arg(config).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&["--seed", "4", "gen-data", "--out", p(&a)], &cfg);
    run(&["--seed", "4", "gen-data", "--out", p(&b)], &cfg);
    let read = |d: &Path| std::fs::read(d.join("corpus.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(a.join("config.json").exists());
    let c = dir.path().join("c");
    run(&["--seed", "5", "gen-data", "--out", p(&c)], &cfg);
    assert_ne!(read(&a), read(&c));
}

#[test]
fn env_overrides_reach_the_config() {
    let (dir, cfg) = setup();
    let out = dir.path().join("g");
    let status = bin()
        .env("FEDVOCAB_CORPUS__SYNTHETIC__N_CLIENTS", "12")
        .args(["--config", p(&cfg), "gen-data", "--out", p(&out)])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    let clients: std::collections::BTreeSet<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["client_id"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(clients.len(), 12);
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["corpus"]["synthetic"]["n_clients"], 12);
    assert_eq!(resolved["command"], "gen-data");
}

#[test]
fn errors_exit_nonzero() {
    let (dir, cfg) = setup();
    let bad_flag = bin().args(["gen-data", "--out", "x", "--bogus"]).output().unwrap();
    assert!(!bad_flag.status.success());
    let missing = bin()
        .args(["--config", p(&cfg), "evaluate", "--out"])
        .arg(dir.path().join("e"))
        .args(["--checkpoint", "/nonexistent/ckpt"])
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));
    let bad_ratio = bin()
        .args(["--config", p(&cfg), "--pool-ratios", "0.5,0.5", "gen-data", "--out"])
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert!(!bad_ratio.status.success());
}

#[test]
fn full_pipeline_through_the_cli() {
    let (dir, cfg) = setup();
    let d = |name: &str| dir.path().join(name);
    run(&["--seed", "1", "gen-data", "--out", p(&d("data"))], &cfg);
    let corpus = d("data").join("corpus.jsonl");
    let with_corpus = |args: &[&str]| {
        let mut all = vec!["--seed", "1", "--corpus", p(&corpus)];
        all.extend_from_slice(args);
        run(&all, &cfg)
    };
    with_corpus(&["build-vocab", "--out", p(&d("vocab"))]);
    assert!(d("vocab").join("vocab.txt").exists() && d("vocab").join("oracle_vocab.txt").exists());
    let vocab = d("vocab").join("vocab.txt");
    with_corpus(&["pretrain", "--vocab", p(&vocab), "--out", p(&d("pre"))]);
    let pre = d("pre").join("model");
    with_corpus(&["fl-train", "--checkpoint", p(&pre), "--out", p(&d("fl"))]);
    for f in ["best/manifest.json", "final/manifest.json", "round_logs.jsonl", "fl_summary.json", "config.json"] {
        assert!(d("fl").join(f).exists(), "missing {f}");
    }
    let best = d("fl").join("best");
    with_corpus(&["--jobs", "2", "personalize", "--checkpoint", p(&best), "--strategy", "as-unk", "--out", p(&d("unk"))]);
    with_corpus(&["personalize", "--checkpoint", p(&best), "--strategy", "expansion", "--out", p(&d("exp"))]);

    let report: PersonalizationReport =
        serde_json::from_str(&std::fs::read_to_string(d("exp").join("report.json")).unwrap()).unwrap();
    assert!(!report.results.is_empty());
    let first = &report.results[0].client_id;
    assert!(d("exp").join("clients").join(first).join("result.json").exists());
    assert!(d("exp").join("clients").join(first).join("oov.txt").exists());

    with_corpus(&["report", "--out", p(&d("table.csv")), p(&d("unk")), p(&d("exp"))]);
    let table = std::fs::read_to_string(d("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("as-unk,") && rows[2].starts_with("expansion,"));

    // evaluate is a thin wrapper over the library.
    with_corpus(&["evaluate", "--checkpoint", p(&best), "--out", p(&d("eval"))]);
    let written: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(d("eval").join("metrics.json")).unwrap()).unwrap();
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d("eval").join("config.json")).unwrap()).unwrap();
    let split_seed = resolved["split_seed"].as_u64().unwrap();
    let fc = load_corpus(&corpus, split_seed, PoolRatios([0.5, 0.2, 0.3])).unwrap();
    let ck = load_model::<f32>(&best).unwrap();
    let scorer = Scorer::new(&ck.params, &ck.config, &ck.vocab, Head::Closed);
    let direct = MetricsReport::from_clients(
        fc.pool(Pool::Test)
            .map(|c| evaluate_client(&c.client_id, &c.sentences, &scorer, &ck.vocab, None, &[1, 3, 5]))
            .collect(),
    );
    // serde_json parsing can be off by one ulp
    assert!((written.emr(3) - direct.emr(3)).abs() < 1e-12);
    assert!((written.kemr(3) - direct.kemr(3)).abs() < 1e-12);
    assert_eq!(written.total_tokens, direct.total_tokens);

    with_corpus(&["plot-tail", "--top-k", "50", "--out", p(&d("tail"))]);
    let q = std::fs::read_to_string(d("tail").join("tail_quantiles.csv")).unwrap();
    assert!(q.starts_with("quantile,rank,count,frequency"));

    with_corpus(&["grid-search", "--checkpoint", p(&pre), "--client-lrs", "0.1,0.3", "--server-lrs", "0.01", "--out", p(&d("grid"))]);
    let grid = std::fs::read_to_string(d("grid").join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 3);
}

#[test]
fn jobs_do_not_change_results() {
    let (dir, cfg) = setup();
    let d = |name: &str| dir.path().join(name);
    for (jobs, out) in [("1", "j1"), ("4", "j4")] {
        run(&["--seed", "2", "--jobs", jobs, "fl-train", "--out", p(&d(out))], &cfg);
    }
    let read = |o: &str| std::fs::read(d(o).join("best").join("decoder_weight.f32")).unwrap();
    assert_eq!(read("j1"), read("j4"));
}
