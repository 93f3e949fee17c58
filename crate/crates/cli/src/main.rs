//! `prmt`: command-line driver for each pipeline stage and the analyses.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prmt_core::data::{gen_synthetic, load_corpus, read_jsonl, save_corpus, split_corpus, tokenize, write_jsonl, SynthConfig};
use prmt_core::grounding::{build_phrase_image_set, PatternChunker, PhraseRegionPair};
use prmt_core::harness::analysis::{corpus_phrases, out_of_domain_phrases, run_ars, run_cluster_analysis};
use prmt_core::harness::bleu::{bleu_with_ci, paired_bootstrap};
use prmt_core::harness::config::{apply_overrides, load_ini};
use prmt_core::harness::pipeline::{
    degradation_for_seed, evaluate_system, k_sweep_for_seed, make_encoder, train_system, ExperimentConfig, Prepared,
    Session, SystemSpec,
};
use prmt_core::harness::report::{write_csv, write_manifest};
use prmt_core::latent::{train_cvae, Cvae, CvaeConfig, CvaeTrainConfig};
use prmt_core::retrieval::{build_index, sha256_hex, RepKind, RetrievalIndex};
use prmt_core::translator::Translator;
use prmt_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

#[derive(Args, Debug, Clone)]
struct Common {
    /// INI configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, e.g. `--set nmt.epochs=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Runs with this single seed instead of the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum System {
    Baseline,
    Guided,
    Raw,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic grounded corpus.
    GenSynth {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Split a corpus and build the phrase-region pair set from its training split.
    BuildPset {
        /// Corpus JSONL; generated synthetically when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the latent model on a pair set.
    TrainCvae {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Encode every pair and cache its representation in a retrieval index.
    BuildIndex {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        cvae: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the top-K index entries for a phrase.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        phrase: String,
        #[arg(long)]
        k: Option<usize>,
        /// Skip entries extracted from this sentence id.
        #[arg(long)]
        exclude_source: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a translator.
    TrainNmt {
        #[command(flatten)]
        stage: StageInputs,
        #[arg(long, value_enum, default_value = "guided")]
        system: System,
        /// Train on unmasked source sentences.
        #[arg(long)]
        unmasked: bool,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Beam-decode a split with a trained translator.
    Translate {
        #[command(flatten)]
        stage: StageInputs,
        /// Output directory of `train-nmt`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Retrieval K at decoding time; defaults to the training K.
        #[arg(long)]
        k: Option<usize>,
        /// Overrides the masking the model was trained with.
        #[arg(long)]
        mask: Option<bool>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Paired bootstrap test of system B against system A.
    Bootstrap {
        #[arg(long)]
        hyp_a: PathBuf,
        #[arg(long)]
        hyp_b: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Average relevance score curves for in-domain and out-of-domain phrases.
    AnalyzeArs {
        #[arg(long)]
        index: PathBuf,
        /// Directory written by `build-pset`; in-domain phrases come from its test split.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k_max: usize,
        #[arg(long, default_value_t = 500)]
        out_domain: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Head clustering of raw features and guided representations.
    AnalyzeClusters {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 8)]
        top: usize,
        #[arg(long, default_value_t = 1000)]
        per_cluster: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Masked-source BLEU over retrieval K for both representation kinds.
    SweepK {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        ks: Vec<usize>,
        /// Train a separate model at every K.
        #[arg(long)]
        retrain: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Baseline and full system under source degradation.
    Degrade {
        /// Also evaluate both systems on unmasked sources.
        #[arg(long)]
        control: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct StageInputs {
    /// Directory written by `build-pset`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cvae: PathBuf,
    #[arg(long)]
    index: PathBuf,
}

#[derive(Parser, Debug)]
#[command(name = "prmt", version, about = "Phrase-level retrieval-augmented translation pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn config(common: &Common) -> Result<(ExperimentConfig, Vec<u64>)> {
    let base = match &common.config {
        Some(p) => load_ini(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = apply_overrides(&base, &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let seeds = cfg.seeds.clone();
    Ok((cfg, seeds))
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn load_prepared(stage: &StageInputs, seed: u64) -> Result<Prepared> {
    let cvae_bytes = fs::read(&stage.cvae)?;
    let index = RetrievalIndex::load(&stage.index)?;
    if index.checkpoint_id != sha256_hex(&cvae_bytes) {
        return Err(Error::Index(format!(
            "{} was not built from {}",
            stage.index.display(),
            stage.cvae.display()
        )));
    }
    let encoder = index.encoder()?;
    Ok(Prepared {
        seed,
        train: load_corpus(stage.data.join("train.jsonl"))?,
        valid: load_corpus(stage.data.join("valid.jsonl"))?,
        test: load_corpus(stage.data.join("test.jsonl"))?,
        pairs: read_jsonl(stage.data.join("pairs.jsonl"))?,
        cvae: Cvae::from_bytes(&cvae_bytes)?,
        cvae_log: Vec::new(),
        encoder,
        index,
    })
}

fn spec_for(system: System, masked: bool, k: usize) -> SystemSpec {
    match system {
        System::Baseline => SystemSpec::baseline(masked),
        System::Guided => SystemSpec::full(masked, RepKind::Guided, k),
        System::Raw => SystemSpec::full(masked, RepKind::Raw, k),
    }
}

/// Runs one subcommand and returns the output directory and files to
/// record in its manifest.
fn run(cmd: Command, cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Option<(PathBuf, Vec<PathBuf>)>> {
    let seed = seeds[0];
    match cmd {
        Command::GenSynth { out_dir } => {
            create(&out_dir)?;
            let corpus = gen_synthetic(&SynthConfig { seed, ..cfg.synth.clone() })?;
            let path = out_dir.join("corpus.jsonl");
            save_corpus(&corpus.pairs, &path)?;
            println!("{} sentences -> {}", corpus.pairs.len(), path.display());
            Ok(Some((out_dir, vec![path])))
        }
        Command::BuildPset { corpus, out_dir } => {
            create(&out_dir)?;
            let pairs = match corpus {
                Some(p) => load_corpus(p)?,
                None => cfg.corpus_for_seed(seed)?,
            };
            let (train, valid, test) = split_corpus(&pairs, cfg.train_frac, cfg.valid_frac);
            let provider = cfg.provider();
            let (pset, stats) = build_phrase_image_set(&train, provider.as_ref(), &PatternChunker::synthetic(), cfg.grounding)?;
            let mut outputs = Vec::new();
            for (name, split) in [("train", &train), ("valid", &valid), ("test", &test)] {
                let p = out_dir.join(format!("{name}.jsonl"));
                save_corpus(split, &p)?;
                outputs.push(p);
            }
            let p = out_dir.join("pairs.jsonl");
            write_jsonl(&p, &pset)?;
            outputs.push(p);
            let p = out_dir.join("grounding.json");
            fs::write(&p, serde_json::to_string_pretty(&stats)? + "\n")?;
            outputs.push(p);
            println!(
                "train {} / valid {} / test {}; {} phrases, {} grounded, {} skipped",
                train.len(),
                valid.len(),
                test.len(),
                stats.phrases,
                stats.grounded,
                stats.skipped
            );
            Ok(Some((out_dir, outputs)))
        }
        Command::TrainCvae { pairs, out_dir } => {
            create(&out_dir)?;
            let pairs: Vec<PhraseRegionPair> = read_jsonl(&pairs)?;
            let feat_dim = pairs
                .first()
                .map(|p| p.feat.len())
                .ok_or_else(|| Error::Domain("empty pair set".into()))?;
            let model_cfg = CvaeConfig { feat_dim, ..cfg.cvae_model.clone() };
            let res = train_cvae(&pairs, model_cfg, &CvaeTrainConfig { seed, ..cfg.cvae.clone() })?;
            let ckpt = out_dir.join("cvae.ckpt");
            res.model.save(&ckpt, seed, res.steps)?;
            let log = out_dir.join("cvae_log.csv");
            write_csv(&log, &res.log)?;
            if let Some(last) = res.log.last() {
                println!("epoch {}: recon {:.4}, kl/pair {:.4}", last.epoch, last.recon, last.kl_per_pair);
            }
            Ok(Some((out_dir, vec![ckpt, log])))
        }
        Command::BuildIndex { pairs, cvae, out_dir } => {
            create(&out_dir)?;
            let pairs: Vec<PhraseRegionPair> = read_jsonl(&pairs)?;
            let bytes = fs::read(&cvae)?;
            let model = Cvae::from_bytes(&bytes)?;
            let encoder = make_encoder(cfg, &pairs)?;
            let index = build_index(&pairs, encoder.as_ref(), &model, &sha256_hex(&bytes))?;
            let path = out_dir.join("index.prix");
            index.save(&path)?;
            println!("{} entries, encoder {}", index.len(), index.encoder_id);
            Ok(Some((out_dir, vec![path])))
        }
        Command::Query { index, phrase, k, exclude_source, out_dir } => {
            let index = RetrievalIndex::load(&index)?;
            let encoder = index.encoder()?;
            let res = index.query(encoder.as_ref(), &tokenize(&phrase), k.unwrap_or(cfg.k), exclude_source.as_deref())?;
            let rows: Vec<_> = res
                .hits
                .iter()
                .enumerate()
                .map(|(rank, h)| {
                    let e = &index.entries()[h.index];
                    json!({
                        "rank": rank + 1,
                        "score": h.score,
                        "phrase": e.phrase.join(" "),
                        "head": e.head,
                        "source_id": e.source_id,
                    })
                })
                .collect();
            for r in &rows {
                println!("{}\t{:.6}\t{}\t{}\t{}", r["rank"], r["score"].as_f64().unwrap_or(0.0), r["phrase"].as_str().unwrap_or(""), r["head"].as_str().unwrap_or(""), r["source_id"].as_str().unwrap_or(""));
            }
            match out_dir {
                Some(dir) => {
                    create(&dir)?;
                    let path = dir.join("query.jsonl");
                    write_jsonl(&path, &rows)?;
                    Ok(Some((dir, vec![path])))
                }
                None => Ok(None),
            }
        }
        Command::TrainNmt { stage, system, unmasked, k, out_dir } => {
            create(&out_dir)?;
            let prep = load_prepared(&stage, seed)?;
            let spec = spec_for(system, !unmasked, k.unwrap_or(cfg.k));
            let trained = train_system(cfg, &prep, spec)?;
            let ckpt = out_dir.join("nmt.ckpt");
            trained.model.save(&ckpt, seed, trained.steps)?;
            let log = out_dir.join("nmt_log.csv");
            write_csv(&log, &trained.log)?;
            let sys = out_dir.join("system.json");
            fs::write(&sys, serde_json::to_string_pretty(&spec)? + "\n")?;
            if let Some(last) = trained.log.last() {
                println!("{} epoch {}: train loss {:.4}", spec.name(), last.epoch, last.train_loss);
            }
            Ok(Some((out_dir, vec![ckpt, log, sys])))
        }
        Command::Translate { stage, model, split, k, mask, beam, out_dir } => {
            create(&out_dir)?;
            let prep = load_prepared(&stage, seed)?;
            let translator = Translator::load(model.join("nmt.ckpt"))?;
            let mut spec: SystemSpec = serde_json::from_str(&fs::read_to_string(model.join("system.json"))?)?;
            if let Some(k) = k {
                spec.k = k;
            }
            if let Some(m) = mask {
                spec.masked = m;
            }
            let corpus = match split.as_str() {
                "train" => &prep.train,
                "valid" => &prep.valid,
                "test" => &prep.test,
                other => return Err(Error::Config(format!("unknown split `{other}`"))),
            };
            let cfg = ExperimentConfig { beam: beam.unwrap_or(cfg.beam), ..cfg.clone() };
            let ev = evaluate_system(&cfg, &prep, &translator, corpus, &spec)?;
            let hyp = out_dir.join("translations.txt");
            let refs = out_dir.join("references.txt");
            write_lines(&hyp, &ev.hyps)?;
            write_lines(&refs, &ev.refs)?;
            let (lo, hi) = ev.report.ci.unwrap_or((ev.report.score, ev.report.score));
            let results = out_dir.join("results.csv");
            write_csv(
                &results,
                &[TranslateRow {
                    model: spec.name(),
                    split,
                    masked: spec.masked,
                    k: spec.k,
                    bleu: ev.report.score,
                    ci_low: lo,
                    ci_high: hi,
                    truncated: ev.truncated,
                }],
            )?;
            println!("BLEU = {:.2} [{:.2}, {:.2}], {} truncated", ev.report.score, lo, hi, ev.truncated);
            Ok(Some((out_dir, vec![hyp, refs, results])))
        }
        Command::Evaluate { hyp, reference, out_dir } => {
            let report = bleu_with_ci(&read_lines(&hyp)?, &read_lines(&reference)?, cfg.bootstrap_resamples, cfg.bootstrap_seed)?;
            let (lo, hi) = report.ci.unwrap_or((report.score, report.score));
            let p = report.precisions;
            println!(
                "BLEU = {:.2} {:.1}/{:.1}/{:.1}/{:.1} (BP = {:.3}, hyp_len = {}, ref_len = {}) 95% CI [{:.2}, {:.2}]",
                report.score, p[0], p[1], p[2], p[3], report.brevity_penalty, report.sys_len, report.ref_len, lo, hi
            );
            match out_dir {
                Some(dir) => {
                    create(&dir)?;
                    let path = dir.join("results.csv");
                    write_csv(&path, &[BleuRow { bleu: report.score, ci_low: lo, ci_high: hi, bp: report.brevity_penalty, sys_len: report.sys_len, ref_len: report.ref_len }])?;
                    Ok(Some((dir, vec![path])))
                }
                None => Ok(None),
            }
        }
        Command::Bootstrap { hyp_a, hyp_b, reference, out_dir } => {
            let r = paired_bootstrap(
                &read_lines(&hyp_a)?,
                &read_lines(&hyp_b)?,
                &read_lines(&reference)?,
                cfg.bootstrap_resamples.max(1),
                cfg.bootstrap_seed,
            )?;
            println!("BLEU A = {:.2}, BLEU B = {:.2}, p = {:.4} ({} resamples)", r.bleu_a, r.bleu_b, r.p_value, r.resamples);
            match out_dir {
                Some(dir) => {
                    create(&dir)?;
                    let path = dir.join("bootstrap.csv");
                    write_csv(&path, &[BootstrapRow { bleu_a: r.bleu_a, bleu_b: r.bleu_b, p_value: r.p_value, resamples: r.resamples }])?;
                    Ok(Some((dir, vec![path])))
                }
                None => Ok(None),
            }
        }
        Command::AnalyzeArs { index, data, k_max, out_domain, out_dir } => {
            create(&out_dir)?;
            let index = RetrievalIndex::load(&index)?;
            let encoder = index.encoder()?;
            let test = load_corpus(data.join("test.jsonl"))?;
            let provider = cfg.provider();
            let in_domain = corpus_phrases(&test, provider.as_ref());
            let out = out_of_domain_phrases(&cfg.synth, out_domain, seed)?;
            let rows = run_ars(&index, encoder.as_ref(), &in_domain, &out, k_max)?;
            for r in &rows {
                println!("K={:<3} in {:.4}  out {:.4}", r.k, r.in_domain, r.out_domain);
            }
            let path = out_dir.join("ars.csv");
            write_csv(&path, &rows)?;
            Ok(Some((out_dir, vec![path])))
        }
        Command::AnalyzeClusters { index, top, per_cluster, out_dir } => {
            create(&out_dir)?;
            let index = RetrievalIndex::load(&index)?;
            let rep = run_cluster_analysis(&index, top, per_cluster, seed)?;
            println!(
                "{} points in {} clusters: silhouette raw {:.4}, guided {:.4}",
                rep.sampled,
                rep.clusters.len(),
                rep.silhouette_raw,
                rep.silhouette_guided
            );
            let proj = out_dir.join("projection.csv");
            write_csv(&proj, &rep.projection)?;
            let summary = out_dir.join("clusters.json");
            let value = json!({
                "clusters": rep.clusters.iter().map(|(h, n)| json!({"head": h, "size": n})).collect::<Vec<_>>(),
                "sampled": rep.sampled,
                "silhouette_raw": rep.silhouette_raw,
                "silhouette_guided": rep.silhouette_guided,
            });
            fs::write(&summary, serde_json::to_string_pretty(&value)? + "\n")?;
            Ok(Some((out_dir, vec![proj, summary])))
        }
        Command::SweepK { ks, retrain, out_dir } => {
            create(&out_dir)?;
            if ks.contains(&0) {
                return Err(Error::Config("K must be at least 1".into()));
            }
            let mut rows = Vec::new();
            for &s in seeds {
                let mut session = Session::new(cfg, s)?;
                let seed_rows = k_sweep_for_seed(&mut session, &ks, retrain)?;
                for r in &seed_rows {
                    println!("seed {} K={:<3} {:<6} BLEU {:.2}", r.seed, r.k, r.kind, r.bleu);
                }
                rows.extend(seed_rows);
            }
            let path = out_dir.join("k_sweep.csv");
            write_csv(&path, &rows)?;
            Ok(Some((out_dir, vec![path])))
        }
        Command::Degrade { control, out_dir } => {
            create(&out_dir)?;
            let mut rows = Vec::new();
            for &s in seeds {
                let mut session = Session::new(cfg, s)?;
                let seed_rows = degradation_for_seed(&mut session, control)?;
                for r in &seed_rows {
                    println!("seed {} {:<8} {:<12} BLEU {:.2}", r.seed, r.setting, r.model, r.bleu);
                }
                rows.extend(seed_rows);
            }
            let path = out_dir.join("degradation.csv");
            write_csv(&path, &rows)?;
            Ok(Some((out_dir, vec![path])))
        }
    }
}

#[derive(Serialize)]
struct TranslateRow {
    model: String,
    split: String,
    masked: bool,
    k: usize,
    bleu: f64,
    ci_low: f64,
    ci_high: f64,
    truncated: usize,
}

#[derive(Serialize)]
struct BleuRow {
    bleu: f64,
    ci_low: f64,
    ci_high: f64,
    bp: f64,
    sys_len: usize,
    ref_len: usize,
}

#[derive(Serialize)]
struct BootstrapRow {
    bleu_a: f64,
    bleu_b: f64,
    p_value: f64,
    resamples: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let name = argv.first().cloned().unwrap_or_default();
    let result = config(&cli.common).and_then(|(cfg, seeds)| {
        let per_seed = matches!(cli.command, Command::SweepK { .. } | Command::Degrade { .. });
        let used = if per_seed { seeds.clone() } else { vec![seeds[0]] };
        let done = run(cli.command, &cfg, &seeds)?;
        if let Some((dir, outputs)) = done {
            write_manifest(&dir, &format!("prmt {}", argv.join(" ")), &used, &cfg, &outputs)?;
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("prmt {name}: error: {e}");
            ExitCode::from(2)
        }
    }
}
