//! Batch entry points wiring the pipeline: data generation, splitting,
//! supervised fine-tuning, variational training, generation, and evaluation.
//! Each command reads an optional JSON config file (unknown keys rejected),
//! applies flag overrides on top, writes only its declared outputs, and
//! records a run manifest beside the primary output.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_corpus, save_corpus, split_by_stem, SplitSpec};
use crate::decode::{overgenerate_rank, DecodeConfig};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::metrics::{evaluate_corpus, load_generations, save_generations, GenerationRecord, Similarity};
use crate::model::ArchConfig;
use crate::synth::{generate_corpus, write_taxonomy, FamilyId, SynthConfig};
use crate::trainer::{load_checkpoint, save_checkpoint, sft_initialize, variational_train, TrainConfig};

/// Structured per-run configuration; command flags override these values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::MissingArtifact(format!("{}: {e}", p.display())))?;
            let cfg: FileConfig =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            Ok(cfg)
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vardis",
    about = "Variational error-representation learning and distractor generation for math MCQs",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic MCQ corpus with a known error taxonomy.
    GenData(GenDataArgs),
    /// Split a corpus into train/val/test with no stem overlap.
    Split(SplitArgs),
    /// Supervised fine-tuning of the three models on labeled pairs.
    Sft(SftArgs),
    /// Variational training on all question-distractor pairs.
    Train(TrainArgs),
    /// Overgenerate-and-rank candidates for every MCQ in a corpus.
    Generate(GenerateArgs),
    /// Score generations against a corpus.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Comma-separated families: fraction-division,squaring,lcm
    #[arg(long, default_value = "fraction-division,squaring,lcm")]
    pub families: String,
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub rules_per_item: usize,
    /// Fraction of error labels blanked out, in [0,1].
    #[arg(long, default_value_t = 0.0)]
    pub label_drop: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Three comma-separated fractions summing to 1.
    #[arg(long, default_value = "0.72,0.16,0.12")]
    pub ratios: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output base path; defaults to the corpus path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SftArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Validation corpus for early stopping.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub lambda_start: Option<f64>,
    #[arg(long)]
    pub lambda_end: Option<f64>,
    /// Annealing horizon in optimizer steps; defaults to the run length.
    #[arg(long)]
    pub anneal_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ne: Option<usize>,
    #[arg(long)]
    pub nd: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub penalty: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub generations: PathBuf,
    /// Comma-separated K values.
    #[arg(long, default_value = "3,10")]
    pub k: String,
    /// Similarity back-end: exact | lcs_f1
    #[arg(long, default_value = "exact")]
    pub similarity: String,
    /// Report path (JSON); a .summary.csv sibling is written as well.
    #[arg(long)]
    pub out: PathBuf,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_families(s: &str) -> Result<Vec<FamilyId>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(FamilyId::parse)
        .collect()
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Argument(format!("bad ratio {t:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Argument(format!("expected three ratios, got {}", parts.len())));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_ks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::Argument(format!("bad k {t:?}: {e}")))
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Split(args) => run_split(args),
        Command::Sft(args) => run_sft(args),
        Command::Train(args) => run_train(args),
        Command::Generate(args) => run_generate(args),
        Command::Evaluate(args) => run_evaluate(args),
    }
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        families: parse_families(&args.families)?,
        n: args.n,
        rules_per_item: args.rules_per_item,
        label_drop: args.label_drop,
        seed: args.seed,
    };
    let corpus = generate_corpus(&cfg)?;
    save_corpus(&corpus, &args.out)?;
    let taxonomy_path = with_suffix(&args.out, ".taxonomy.json");
    write_taxonomy(&cfg.families, &taxonomy_path)?;

    let mut manifest =
        RunManifest::new("gen-data", Some(args.seed), serde_json::to_value(&cfg)?);
    manifest.add_output(&args.out);
    manifest.add_output(&taxonomy_path);
    manifest.write(with_suffix(&args.out, ".manifest.json"))?;
    log::info!("wrote {} MCQs to {}", corpus.len(), args.out.display());
    Ok(())
}

fn run_split(args: SplitArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let spec = SplitSpec { ratios: parse_ratios(&args.ratios)?, seed: args.seed };
    let (train, val, test) = split_by_stem(&corpus, &spec)?;
    let base = args.out.clone().unwrap_or_else(|| args.corpus.clone());
    let paths = [
        with_suffix(&base, ".train"),
        with_suffix(&base, ".val"),
        with_suffix(&base, ".test"),
    ];
    for (split, path) in [&train, &val, &test].iter().zip(&paths) {
        save_corpus(split, path)?;
    }

    let mut manifest = RunManifest::new("split", Some(args.seed), serde_json::to_value(&spec)?);
    manifest.add_input(&args.corpus)?;
    for p in &paths {
        manifest.add_output(p);
    }
    manifest.write(with_suffix(&base, ".split.manifest.json"))?;
    log::info!(
        "split {} items into {}/{}/{}",
        corpus.len(),
        train.len(),
        val.len(),
        test.len()
    );
    Ok(())
}

fn run_sft(args: SftArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(lr) = args.lr {
        cfg.train.sft.lr = lr;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.sft.epochs = epochs;
    }
    if let Some(batch) = args.batch {
        cfg.train.sft.batch = batch;
    }

    let corpus = load_corpus(&args.corpus)?;
    let val = args.val.as_ref().map(load_corpus).transpose()?;
    let (triple, stats) = sft_initialize(&cfg.arch, &corpus, val.as_ref(), &cfg.train)?;
    save_checkpoint(&triple, &args.out_ckpt)?;
    let stats_path = args.out_ckpt.join("sft_stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)? + "\n")?;

    let mut manifest = RunManifest::new(
        "sft",
        Some(cfg.train.seed),
        serde_json::json!({"arch": cfg.arch, "train": cfg.train}),
    );
    manifest.add_input(&args.corpus)?;
    if let Some(v) = &args.val {
        manifest.add_input(v)?;
    }
    manifest.add_output(&args.out_ckpt);
    manifest.write(args.out_ckpt.join("manifest.json"))?;
    log::info!(
        "sft complete: {} labeled pairs, checkpoint at {}",
        stats.labeled_pairs,
        args.out_ckpt.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(beta) = args.beta {
        cfg.train.weights.beta = beta;
    }
    if let Some(alpha) = args.alpha {
        cfg.train.weights.alpha = alpha;
    }
    if let Some(mc) = args.mc_samples {
        cfg.train.weights.mc_samples = mc;
    }
    if let Some(l0) = args.lambda_start {
        cfg.train.schedule.lambda_start = l0;
    }
    if let Some(l1) = args.lambda_end {
        cfg.train.schedule.lambda_end = l1;
    }
    if let Some(lr) = args.lr {
        cfg.train.variational.lr = lr;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.variational.epochs = epochs;
    }

    let corpus = load_corpus(&args.corpus)?;
    // Default annealing horizon: the full planned run length in steps.
    let steps_per_epoch =
        corpus.pairs().len().div_ceil(cfg.train.variational.pairs_per_batch) as u64;
    cfg.train.schedule.total_steps = args
        .anneal_steps
        .unwrap_or_else(|| (steps_per_epoch * cfg.train.variational.epochs as u64).max(1));

    let mut triple = load_checkpoint(&args.ckpt)?;
    let log = variational_train(&mut triple, &corpus, &cfg.train)?;
    save_checkpoint(&triple, &args.out_ckpt)?;
    let log_path = args.out_ckpt.join("train_log.csv");
    log.write_csv(&log_path)?;

    let mut manifest = RunManifest::new(
        "train",
        Some(cfg.train.seed),
        serde_json::json!({"train": cfg.train}),
    );
    manifest.add_input(&args.ckpt)?;
    manifest.add_input(&args.corpus)?;
    manifest.add_output(&args.out_ckpt);
    manifest.add_output(&log_path);
    manifest.write(args.out_ckpt.join("manifest.json"))?;
    log::info!(
        "variational training: {} steps over {} pairs",
        log.rows.len(),
        log.pairs_used
    );
    Ok(())
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(ne) = args.ne {
        cfg.decode.n_errors = ne;
        // groups default to one per error unless set explicitly
        cfg.decode.diversity_groups = ne;
    }
    if let Some(nd) = args.nd {
        cfg.decode.n_distractors = nd;
    }
    if let Some(k) = args.k {
        cfg.decode.top_k = k;
    }
    if let Some(groups) = args.groups {
        cfg.decode.diversity_groups = groups;
    }
    if let Some(p) = args.penalty {
        cfg.decode.diversity_penalty = p;
    }
    cfg.decode.validate()?;

    let corpus = load_corpus(&args.corpus)?;
    let triple = load_checkpoint(&args.ckpt)?;
    let records = generate_for_corpus(&triple, &corpus, &cfg.decode)?;
    save_generations(&records, &args.out)?;

    let mut manifest = RunManifest::new("generate", None, serde_json::to_value(&cfg.decode)?);
    manifest.add_input(&args.ckpt)?;
    manifest.add_input(&args.corpus)?;
    manifest.add_output(&args.out);
    manifest.write(with_suffix(&args.out, ".manifest.json"))?;
    log::info!("generated candidates for {} MCQs", records.len());
    Ok(())
}

/// Runs overgenerate-and-rank for every MCQ, in parallel across questions.
pub fn generate_for_corpus(
    triple: &crate::trainer::ModelTriple,
    corpus: &crate::data::Corpus,
    decode: &DecodeConfig,
) -> Result<Vec<GenerationRecord>> {
    use rayon::prelude::*;
    corpus
        .items
        .par_iter()
        .map(|mcq| {
            let ranked = overgenerate_rank(triple, mcq, decode)?;
            if ranked.shortfall {
                log::debug!("candidate shortfall for stem {:?}", mcq.stem);
            }
            Ok(GenerationRecord { stem: mcq.stem.clone(), candidates: ranked.items })
        })
        .collect()
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let generations = load_generations(&args.generations)?;
    let ks = parse_ks(&args.k)?;
    let similarity = Similarity::parse(&args.similarity)?;
    let report = evaluate_corpus(&corpus, &generations, &ks, similarity)?;
    report.write_json(&args.out)?;
    let csv_path = with_suffix(&args.out, ".summary.csv");
    report.write_summary_csv(&csv_path)?;

    let mut manifest = RunManifest::new(
        "evaluate",
        None,
        serde_json::json!({"k": ks, "similarity": similarity}),
    );
    manifest.add_input(&args.corpus)?;
    manifest.add_input(&args.generations)?;
    manifest.add_output(&args.out);
    manifest.add_output(&csv_path);
    manifest.write(with_suffix(&args.out, ".manifest.json"))?;
    for row in &report.summary {
        let k = row.k.map(|k| format!("@{k}")).unwrap_or_default();
        log::info!("{}{}: {:.2}%", row.metric, k, row.value_percent);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_helpers() {
        assert_eq!(parse_families("squaring,lcm").unwrap().len(), 2);
        assert!(parse_families("nope").is_err());
        assert_eq!(parse_ratios("0.7,0.2,0.1").unwrap(), [0.7, 0.2, 0.1]);
        assert!(parse_ratios("0.5,0.5").is_err());
        assert_eq!(parse_ks("3,10").unwrap(), vec![3, 10]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"train": {"sft": {"lr": 0.001, "bogus_key": 3}}}"#).unwrap();
        let err = load_config(Some(&p)).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("bogus_key"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = FileConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: FileConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.decode, cfg.decode);
        assert_eq!(back.arch, cfg.arch);
    }
}
