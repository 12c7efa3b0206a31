use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fedvocab::checkpoint::{load_model, save_adapter, save_model};
use fedvocab::corpus::{FederatedCorpus, Pool, PoolRatios, Segment, TokenizedSentence};
use fedvocab::fedsim::{best_grid_point, default_lr_grid, grid_search, preset, run_fl, FlConfig};
use fedvocab::metrics::{evaluate_client, MetricsReport};
use fedvocab::model::{Head, ModelConfig, ModelParams, Scorer};
use fedvocab::personalize::{personalize_all, PersonalizationReport, Strategy, REPORT_KS};
use fedvocab::pipeline::{build_vocabularies, prepare_corpus, save_global, with_jobs, ExperimentConfig, GlobalModel};
use fedvocab::training::pretrain;
use fedvocab::util::{derive_seed, write_atomic, write_json};
use fedvocab::vocab::{quantiles_to_csv, rank_frequency_slope, ranked_counts, word_frequency_quantiles, Vocabulary};
use fedvocab::ModelParamsF32;
use serde::Serialize;

use crate::{Command, EvalSegment, GlobalArgs, PoolArg, StrategyArg};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";

type F = f32;

fn strategy(s: StrategyArg) -> Strategy {
    match s {
        StrategyArg::AsUnk => Strategy::OovAsUnk,
        StrategyArg::Oracle => Strategy::OovOracle,
        StrategyArg::Expansion => Strategy::OovExpansion,
    }
}

/// Config file, environment overrides, then command-line flags.
fn resolve_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(path) = &g.corpus {
        cfg.corpus.path = Some(path.clone());
    }
    if let Some(s) = g.split_seed {
        cfg.split_seed = s;
    }
    if let Some(r) = &g.pool_ratios {
        cfg.pool_ratios = PoolRatios::parse(r)?.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn start_run(out: &Path, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'a str,
        #[serde(flatten)]
        config: &'a ExperimentConfig,
    }
    write_json(&out.join(CONFIG_FILE), &Resolved { command, config: cfg })?;
    Ok(())
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<FederatedCorpus> {
    Ok(prepare_corpus(cfg)?.corpus)
}

fn write_report(dir: &Path, name: &str, report: &MetricsReport) -> Result<()> {
    write_json(&dir.join(format!("{name}.json")), report)?;
    write_atomic(&dir.join(format!("{name}.csv")), report.to_csv().as_bytes())?;
    Ok(())
}

fn vocab_for(cfg: &ExperimentConfig, corpus: &FederatedCorpus, path: Option<&Path>, s: Strategy) -> Result<Vocabulary> {
    if let Some(p) = path {
        return Ok(Vocabulary::load(p)?);
    }
    let (closed, oracle) = build_vocabularies(cfg, corpus)?;
    Ok(if s == Strategy::OovOracle { oracle } else { closed })
}

fn initial_model(
    cfg: &ExperimentConfig,
    corpus: &FederatedCorpus,
    checkpoint: Option<&Path>,
    vocab: Option<&Path>,
    s: Strategy,
) -> Result<(ModelConfig, ModelParamsF32, Vocabulary, Vec<f64>)> {
    if let Some(dir) = checkpoint {
        let ck = load_model::<F>(dir)?;
        return Ok((ck.config, ck.params, ck.vocab, Vec::new()));
    }
    let vocab = vocab_for(cfg, corpus, vocab, s)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    config.validate()?;
    let mut params = ModelParams::init(&config, derive_seed(cfg.seed, "model-init", ""));
    let sentences: Vec<TokenizedSentence> = corpus.pool(Pool::Train).flat_map(|c| c.sentences.iter().cloned()).collect();
    let losses = pretrain(&mut params, &config, &vocab, &sentences, &cfg.pretrain)?;
    Ok((config, params, vocab, losses))
}

pub fn run(g: &GlobalArgs, command: &Command) -> Result<()> {
    let cfg = resolve_config(g)?;
    with_jobs(g.jobs, || dispatch(&cfg, command))?
}

fn dispatch(cfg: &ExperimentConfig, command: &Command) -> Result<()> {
    match command {
        Command::GenData { out } => {
            if cfg.corpus.path.is_some() {
                bail!("gen-data uses the synthetic generator; drop --corpus");
            }
            start_run(out, cfg, "gen-data")?;
            let prepared = prepare_corpus(cfg)?;
            write_atomic(&out.join("corpus.jsonl"), prepared.corpus.to_jsonl().as_bytes())?;
            write_json(&out.join("private_words.json"), &prepared.private_words)?;
            log::info!("wrote {} clients to {}", prepared.corpus.clients.len(), out.display());
        }
        Command::BuildVocab { out, size, oracle_extra } => {
            let mut cfg = cfg.clone();
            if let Some(n) = size {
                cfg.vocab_size = *n;
            }
            if let Some(n) = oracle_extra {
                cfg.oracle_extra_words = *n;
            }
            start_run(out, &cfg, "build-vocab")?;
            let corpus = load_corpus(&cfg)?;
            let (closed, oracle) = build_vocabularies(&cfg, &corpus)?;
            closed.save(&out.join("vocab.txt"))?;
            if cfg.oracle_extra_words > 0 {
                oracle.save(&out.join("oracle_vocab.txt"))?;
            }
            log::info!("closed vocabulary {} words, oracle {}", closed.word_count(), oracle.word_count());
        }
        Command::Pretrain { out, vocab } => {
            start_run(out, cfg, "pretrain")?;
            let corpus = load_corpus(cfg)?;
            let vocab = vocab_for(cfg, &corpus, vocab.as_deref(), Strategy::OovAsUnk)?;
            let config = ModelConfig {
                vocab_size: vocab.len(),
                ..cfg.model.clone()
            };
            config.validate()?;
            let mut params: ModelParamsF32 = ModelParams::init(&config, derive_seed(cfg.seed, "model-init", ""));
            let sentences: Vec<TokenizedSentence> = corpus.all_sentences().cloned().collect();
            let losses = pretrain(&mut params, &config, &vocab, &sentences, &cfg.pretrain)?;
            save_model(&out.join("model"), &config, &params, &vocab)?;
            write_json(&out.join("pretrain_losses.json"), &losses)?;
        }
        Command::FlTrain {
            out,
            checkpoint,
            vocab,
            strategy: s,
            preset: name,
        } => {
            let mut cfg = cfg.clone();
            if let Some(name) = name {
                let p = preset(name).with_context(|| format!("unknown preset {name:?}"))?;
                cfg.fl = FlConfig { seed: cfg.fl.seed, ..p };
            }
            start_run(out, &cfg, "fl-train")?;
            let corpus = load_corpus(&cfg)?;
            let (config, params, vocab, pretrain_losses) =
                initial_model(&cfg, &corpus, checkpoint.as_deref(), vocab.as_deref(), strategy(*s))?;
            let fl = run_fl(params, &corpus, &vocab, &config, &cfg.fl)?;
            let model = GlobalModel {
                config,
                vocab,
                params: fl.best_params.clone(),
                pretrain_losses,
                fl,
            };
            save_global(out, &model)?;
            log::info!(
                "validation EMR_3 {:.4} -> best {:.4} over {} rounds",
                model.fl.initial_val_emr,
                model.fl.best_val_emr,
                model.fl.logs.len()
            );
        }
        Command::Personalize {
            out,
            checkpoint,
            strategy: s,
            freeze_base,
            identity_adapter,
            save_models,
        } => {
            let mut cfg = cfg.clone();
            cfg.personalization.strategy = strategy(*s);
            cfg.personalization.freeze_base = *freeze_base;
            cfg.personalization.identity_adapter = *identity_adapter;
            cfg.personalization.validate()?;
            start_run(out, &cfg, "personalize")?;
            let corpus = load_corpus(&cfg)?;
            let ck = load_model::<F>(checkpoint)?;
            let clients_dir = out.join("clients");
            let sink = |result: &fedvocab::personalize::ClientResult, model: &fedvocab::personalize::PersonalizedModel<F>| {
                let dir = clients_dir.join(&result.client_id);
                write_json(&dir.join("result.json"), result)?;
                if let Some(oov) = &model.oov {
                    write_atomic(&dir.join("oov.txt"), oov.to_file_string().as_bytes())?;
                    if let Some((acfg, adapter)) = &model.adapter {
                        save_adapter(&dir.join("adapter"), acfg, adapter, oov)?;
                    }
                }
                if *save_models {
                    save_model(&dir.join("model"), &ck.config, &model.params, &ck.vocab)?;
                }
                Ok(())
            };
            let report = personalize_all(&ck.params, &ck.config, &ck.vocab, &corpus, &cfg.personalization, Some(&sink))?;
            write_json(&out.join(REPORT_FILE), &report)?;
            write_report(out, "before", &report.before)?;
            write_report(out, "after", &report.after)?;
            log::info!(
                "{}: EMR_3 {:.4} -> {:.4} over {} clients",
                report.strategy,
                report.before.emr(3),
                report.after.emr(3),
                report.results.len()
            );
        }
        Command::Evaluate {
            out,
            checkpoint,
            pool,
            segment,
        } => {
            start_run(out, cfg, "evaluate")?;
            let corpus = load_corpus(cfg)?;
            let ck = load_model::<F>(checkpoint)?;
            let report = evaluate_checkpoint(&corpus, &ck.params, &ck.config, &ck.vocab, *pool, *segment);
            write_report(out, "metrics", &report)?;
            log::info!("EMR_3 {:.4}, KEMR_3 {:.4}, OOV rate {:.4}", report.emr(3), report.kemr(3), report.oov_rate);
        }
        Command::Report { out, runs } => {
            let mut csv = String::from("strategy,clients,emr_1,emr_3,emr_5,kemr_3,oov_rate,param_count,emr_3_before,run\n");
            for run in runs {
                let path = run.join(REPORT_FILE);
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let r: PersonalizationReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let params = r.results.iter().map(|c| c.param_count).max().unwrap_or(0);
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.strategy,
                    r.results.len(),
                    r.after.emr(1),
                    r.after.emr(3),
                    r.after.emr(5),
                    r.after.kemr(3),
                    r.after.oov_rate,
                    params,
                    r.before.emr(3),
                    run.display()
                );
            }
            write_atomic(out, csv.as_bytes())?;
        }
        Command::PlotTail { out, top_k, quantiles } => {
            start_run(out, cfg, "plot-tail")?;
            let corpus = load_corpus(cfg)?;
            let rows = word_frequency_quantiles(&corpus, *top_k, quantiles)?;
            write_atomic(&out.join("tail_quantiles.csv"), quantiles_to_csv(&rows).as_bytes())?;
            let ranked = ranked_counts(corpus.all_sentences());
            let mut curve = String::from("rank,count\n");
            for (i, (_, c)) in ranked.iter().take(*top_k).enumerate() {
                let _ = writeln!(curve, "{},{c}", i + 1);
            }
            write_atomic(&out.join("rank_frequency.csv"), curve.as_bytes())?;
            let slope = rank_frequency_slope(&ranked, *top_k);
            write_json(&out.join("tail_summary.json"), &serde_json::json!({ "top_k": top_k, "log_log_slope": slope }))?;
            log::info!("log-log rank-frequency slope {slope:.3}");
        }
        Command::GridSearch {
            out,
            checkpoint,
            vocab,
            client_lrs,
            server_lrs,
        } => {
            start_run(out, cfg, "grid-search")?;
            let corpus = load_corpus(cfg)?;
            let (config, params, vocab, _) = initial_model(cfg, &corpus, checkpoint.as_deref(), vocab.as_deref(), Strategy::OovAsUnk)?;
            let (dc, ds) = default_lr_grid();
            let points = grid_search(
                &params,
                &corpus,
                &vocab,
                &config,
                &cfg.fl,
                client_lrs.as_deref().unwrap_or(&dc),
                server_lrs.as_deref().unwrap_or(&ds),
            )?;
            let mut csv = String::from("client_lr,server_lr,best_val_emr3\n");
            for p in &points {
                let _ = writeln!(csv, "{},{},{}", p.client_lr, p.server_lr, p.best_val_emr3);
            }
            write_atomic(&out.join("grid.csv"), csv.as_bytes())?;
            write_json(&out.join("grid.json"), &points)?;
            if let Some(best) = best_grid_point(&points) {
                log::info!("best client lr {} server lr {} (EMR_3 {:.4})", best.client_lr, best.server_lr, best.best_val_emr3);
            }
        }
    }
    Ok(())
}

/// Closed-head metrics of a model over one pool, the library call behind
/// `evaluate`.
pub fn evaluate_checkpoint(
    corpus: &FederatedCorpus,
    params: &ModelParamsF32,
    config: &ModelConfig,
    vocab: &Vocabulary,
    pool: PoolArg,
    segment: EvalSegment,
) -> MetricsReport {
    let pool = match pool {
        PoolArg::Train => Pool::Train,
        PoolArg::Validation => Pool::Validation,
        PoolArg::Test => Pool::Test,
    };
    let scorer = Scorer::new(params, config, vocab, Head::Closed);
    let per_client = corpus
        .pool(pool)
        .filter_map(|c| {
            let data = match segment {
                EvalSegment::All => c.sentences.clone(),
                EvalSegment::PersonalizeTest => {
                    c.segments.as_ref()?;
                    c.segment(Segment::PersonalizeTest)
                }
            };
            Some(evaluate_client(&c.client_id, &data, &scorer, vocab, None, &REPORT_KS))
        })
        .collect();
    MetricsReport::from_clients(per_client)
}
