//! End-to-end CLI pipeline checks at miniature scale: determinism of the
//! whole chain, the documented evaluation fixture, manifest emission, and
//! error reporting for missing artifacts.

use std::path::{Path, PathBuf};

use vardis::cli::{self, Cli, Command};
use vardis::data::{load_corpus, save_corpus, Corpus, DistractorEntry, Mcq};
use vardis::decode::ScoredCandidate;
use vardis::error::Error;
use vardis::metrics::{save_generations, GenerationRecord};

fn run(cmd: Command) -> vardis::Result<()> {
    cli::run(Cli { command: cmd })
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "arch": {"layers": 1, "heads": 2, "dim": 24, "mlp_ratio": 2, "max_context": 128},
  "train": {
    "sft": {"lr": 0.003, "epochs": 2, "batch": 8},
    "variational": {"lr": 0.0002, "epochs": 1, "pairs_per_batch": 8, "max_error_len": 16},
    "weights": {"beta": 0.1, "alpha": 0.95, "mc_samples": 2}
  },
  "decode": {"n_errors": 3, "n_distractors": 3, "top_k": 3, "diversity_groups": 3,
              "max_error_len": 16, "max_distractor_len": 8}
}"#,
    )
    .unwrap();
    path
}

/// Runs gen-data → split → sft → train → generate → evaluate in `dir` and
/// returns the bytes of the generations file and the evaluation report.
fn full_chain(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    let config = tiny_config(dir);
    let corpus = dir.join("corpus.jsonl");
    run(Command::GenData(cli::GenDataArgs {
        families: "fraction-division,squaring,lcm".into(),
        n: 24,
        rules_per_item: 3,
        label_drop: 0.0,
        seed: 5,
        out: corpus.clone(),
    }))
    .unwrap();
    run(Command::Split(cli::SplitArgs {
        corpus: corpus.clone(),
        ratios: "0.7,0.15,0.15".into(),
        seed: 5,
        out: None,
    }))
    .unwrap();
    let train_file = PathBuf::from(format!("{}.train", corpus.display()));
    let test_file = PathBuf::from(format!("{}.test", corpus.display()));
    let sft_ckpt = dir.join("sft");
    run(Command::Sft(cli::SftArgs {
        corpus: train_file.clone(),
        val: None,
        out_ckpt: sft_ckpt.clone(),
        config: Some(config.clone()),
        seed: None,
        lr: None,
        epochs: None,
        batch: None,
    }))
    .unwrap();
    let var_ckpt = dir.join("var");
    run(Command::Train(cli::TrainArgs {
        ckpt: sft_ckpt,
        corpus: train_file,
        out_ckpt: var_ckpt.clone(),
        config: Some(config.clone()),
        seed: None,
        beta: Some(0.1),
        alpha: Some(0.95),
        mc_samples: Some(2),
        lambda_start: Some(1.0),
        lambda_end: Some(0.1),
        anneal_steps: None,
        lr: None,
        epochs: None,
    }))
    .unwrap();
    let gens = dir.join("gen.jsonl");
    run(Command::Generate(cli::GenerateArgs {
        ckpt: var_ckpt,
        corpus: test_file.clone(),
        out: gens.clone(),
        config: Some(config.clone()),
        ne: None,
        nd: None,
        k: None,
        groups: None,
        penalty: None,
    }))
    .unwrap();
    let report = dir.join("eval.json");
    run(Command::Evaluate(cli::EvaluateArgs {
        corpus: test_file,
        generations: gens.clone(),
        k: "3".into(),
        similarity: "exact".into(),
        out: report.clone(),
    }))
    .unwrap();
    (std::fs::read(&gens).unwrap(), std::fs::read(&report).unwrap())
}

#[test]
fn full_pipeline_is_reproducible_byte_for_byte() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (gens_a, report_a) = full_chain(dir_a.path());
    let (gens_b, report_b) = full_chain(dir_b.path());
    assert_eq!(gens_a, gens_b, "generations differ between identical runs");
    assert_eq!(report_a, report_b, "evaluation reports differ between identical runs");

    // every record carries exactly K candidates (pool is large enough here)
    let text = String::from_utf8(gens_a).unwrap();
    for line in text.lines() {
        let rec: GenerationRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.candidates.len(), 3);
    }

    // manifests exist next to the declared outputs
    assert!(dir_a.path().join("corpus.jsonl.manifest.json").exists());
    assert!(dir_a.path().join("corpus.jsonl.split.manifest.json").exists());
    assert!(dir_a.path().join("sft/manifest.json").exists());
    assert!(dir_a.path().join("var/manifest.json").exists());
    assert!(dir_a.path().join("var/train_log.csv").exists());
    assert!(dir_a.path().join("gen.jsonl.manifest.json").exists());
    assert!(dir_a.path().join("eval.json.manifest.json").exists());
    assert!(dir_a.path().join("eval.json.summary.csv").exists());

    // the training log has the documented CSV header
    let log = std::fs::read_to_string(dir_a.path().join("var/train_log.csv")).unwrap();
    assert!(log.starts_with("step,reconstruction,kl_term,q_reg,total,lambda"));
}

#[test]
fn evaluate_command_reproduces_documented_fixture() {
    // one MCQ with gold distractors {180, 15, 3}; generated top-3 {27, 3, 15}
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    let mcq = Mcq {
        stem: "What is the lowest common multiple of 12 and 15?".into(),
        key: "60".into(),
        explanation: None,
        tags: vec![],
        distractors: vec![
            DistractorEntry {
                answer: "180".into(),
                error: Some(
                    "Believes finding the product of two numbers gives their lowest common multiple"
                        .into(),
                ),
            },
            DistractorEntry {
                answer: "15".into(),
                error: Some(
                    "Believes the largest number in a set of numbers is always their lowest common multiple"
                        .into(),
                ),
            },
            DistractorEntry {
                answer: "3".into(),
                error: Some("Confuses factors and multiples".into()),
            },
        ],
    };
    save_corpus(&Corpus::new(vec![mcq.clone()], "fixture"), &corpus_path).unwrap();

    let gens_path = dir.path().join("gen.jsonl");
    let candidates = [
        ("Believes they can find the lowest common multiple by adding the numbers together", "27"),
        ("Confuses factors and multiples", "3"),
        ("When asked for the lowest common multiple, thinks they can just give any multiple", "15"),
    ];
    save_generations(
        &[GenerationRecord {
            stem: mcq.stem.clone(),
            candidates: candidates
                .iter()
                .enumerate()
                .map(|(i, (e, d))| ScoredCandidate {
                    error: e.to_string(),
                    distractor: d.to_string(),
                    error_score: -0.1 * i as f64,
                    distractor_score: -0.1 * i as f64,
                })
                .collect(),
        }],
        &gens_path,
    )
    .unwrap();

    let report_path = dir.path().join("eval.json");
    run(Command::Evaluate(cli::EvaluateArgs {
        corpus: corpus_path,
        generations: gens_path,
        k: "3,10".into(),
        similarity: "exact".into(),
        out: report_path.clone(),
    }))
    .unwrap();

    let csv =
        std::fs::read_to_string(dir.path().join("eval.json.summary.csv")).unwrap();
    assert!(csv.contains("exact,3,0.00"), "csv:\n{csv}");
    assert!(csv.contains("partial,3,100.00"), "csv:\n{csv}");
    assert!(csv.contains("prop,3,66.67"), "csv:\n{csv}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let q = &report["per_question"][0]["alignment"][0];
    assert_eq!(q["exact"], 0.0);
    assert_eq!(q["partial"], 1.0);
    assert!((q["proportional"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn missing_artifacts_are_reported_with_path() {
    let err = run(Command::Split(cli::SplitArgs {
        corpus: PathBuf::from("/definitely/not/here.jsonl"),
        ratios: "0.7,0.2,0.1".into(),
        seed: 0,
        out: None,
    }))
    .unwrap_err();
    match err {
        Error::MissingArtifact(msg) => assert!(msg.contains("/definitely/not/here.jsonl")),
        other => panic!("expected missing-artifact error, got {other:?}"),
    }
}

#[test]
fn commands_do_not_mutate_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("c.jsonl");
    run(Command::GenData(cli::GenDataArgs {
        families: "squaring".into(),
        n: 6,
        rules_per_item: 3,
        label_drop: 0.0,
        seed: 2,
        out: corpus_path.clone(),
    }))
    .unwrap();
    let before = std::fs::read(&corpus_path).unwrap();
    run(Command::Split(cli::SplitArgs {
        corpus: corpus_path.clone(),
        ratios: "0.5,0.25,0.25".into(),
        seed: 2,
        out: None,
    }))
    .unwrap();
    assert_eq!(std::fs::read(&corpus_path).unwrap(), before);
    // split outputs partition the corpus
    let n: usize = ["train", "val", "test"]
        .iter()
        .map(|s| {
            load_corpus(format!("{}.{s}", corpus_path.display()))
                .unwrap()
                .len()
        })
        .sum();
    assert_eq!(n, 6);
}
