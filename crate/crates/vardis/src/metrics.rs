//! Distractor alignment metrics at K and error similarity/diversity metrics
//! with pluggable text-similarity back-ends (normalized exact match and an
//! LCS-F1 recomputation over word tokens).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{normalize_text, Corpus};
use crate::decode::ScoredCandidate;
use crate::error::{Error, Result};

/// Text-similarity back-end h(a, b) ∈ [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// 1 iff the two texts are equal after trim/collapse/lowercase.
    ExactNorm,
    /// Longest-common-subsequence F1 over word tokens.
    LcsF1,
}

impl Similarity {
    pub fn apply(&self, a: &str, b: &str) -> f64 {
        match self {
            Similarity::ExactNorm => {
                if normalize_text(a) == normalize_text(b) {
                    1.0
                } else {
                    0.0
                }
            }
            Similarity::LcsF1 => lcs_f1(a, b),
        }
    }

    pub fn parse(name: &str) -> Result<Similarity> {
        match name {
            "exact" | "exact_norm" => Ok(Similarity::ExactNorm),
            "lcs_f1" => Ok(Similarity::LcsF1),
            other => Err(Error::Argument(format!(
                "unknown similarity back-end {other:?} (expected exact or lcs_f1)"
            ))),
        }
    }
}

/// Splits into lowercase word tokens with punctuation detached as separate
/// tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                current.extend(c.to_lowercase());
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L-style F1 over word tokens: 2·LCS / (|a| + |b|).
pub fn lcs_f1(a: &str, b: &str) -> f64 {
    let ta = word_tokens(a);
    let tb = word_tokens(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&ta, &tb) as f64;
    2.0 * lcs / (ta.len() + tb.len()) as f64
}

/// Alignment of the top-k generated distractors with the gold set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub k: usize,
    /// 1 iff every gold distractor appears among the top-k generated.
    pub exact: f64,
    /// 1 iff at least one gold distractor appears among the top-k generated.
    pub partial: f64,
    /// Fraction of gold distractors appearing among the top-k generated.
    pub proportional: f64,
}

/// Computes exact/partial/proportional match at k. `generated` is the ranked
/// candidate list (already deduplicated); matching is normalized string
/// equality.
pub fn alignment(gold: &[String], generated: &[String], k: usize) -> Result<AlignmentResult> {
    if k == 0 {
        return Err(Error::Argument("alignment: k must be positive".into()));
    }
    if gold.is_empty() {
        return Err(Error::Argument("alignment: gold distractor set is empty".into()));
    }
    let gold_set: std::collections::BTreeSet<String> =
        gold.iter().map(|s| normalize_text(s)).collect();
    let top_k: std::collections::BTreeSet<String> =
        generated.iter().take(k).map(|s| normalize_text(s)).collect();
    let inter = gold_set.intersection(&top_k).count();
    Ok(AlignmentResult {
        k,
        exact: if inter == gold_set.len() { 1.0 } else { 0.0 },
        partial: if inter > 0 { 1.0 } else { 0.0 },
        proportional: inter as f64 / gold_set.len() as f64,
    })
}

/// Recall-style similarity: Σ_{e∈E} max_{ê∈Ê} h(e, ê) / |E|.
pub fn sim_recall(gold: &[String], generated: &[String], h: Similarity) -> Result<f64> {
    if gold.is_empty() || generated.is_empty() {
        return Err(Error::Argument("sim_recall: both error sets must be nonempty".into()));
    }
    let total: f64 = gold
        .iter()
        .map(|e| generated.iter().map(|g| h.apply(e, g)).fold(0.0, f64::max))
        .sum();
    Ok(total / gold.len() as f64)
}

/// Precision-style similarity: Σ_{ê∈Ê} max_{e∈E} h(ê, e) / |Ê|.
pub fn sim_precision(gold: &[String], generated: &[String], h: Similarity) -> Result<f64> {
    if gold.is_empty() || generated.is_empty() {
        return Err(Error::Argument("sim_precision: both error sets must be nonempty".into()));
    }
    let total: f64 = generated
        .iter()
        .map(|g| gold.iter().map(|e| h.apply(g, e)).fold(0.0, f64::max))
        .sum();
    Ok(total / generated.len() as f64)
}

/// Complement of the homogenization score:
/// 1 − Σ_{i≠j} h(e_i, e_j) / |E|² (diagonal counted in the denominator
/// only, so n identical texts score 1/n).
pub fn diversity(errors: &[String], h: Similarity) -> Result<f64> {
    let n = errors.len();
    if n < 2 {
        return Err(Error::Argument("diversity: need at least two errors".into()));
    }
    let mut total = 0.0;
    for (i, a) in errors.iter().enumerate() {
        for (j, b) in errors.iter().enumerate() {
            if i != j {
                total += h.apply(a, b);
            }
        }
    }
    Ok(1.0 - total / (n * n) as f64)
}

/// One generation record, as produced by the `generate` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub stem: String,
    pub candidates: Vec<ScoredCandidate>,
}

/// Per-question metric values.
#[derive(Debug, Clone, Serialize)]
pub struct QuestionReport {
    pub stem: String,
    pub alignment: Vec<AlignmentResult>,
    pub sim_recall: Option<f64>,
    pub sim_precision: Option<f64>,
    pub sim_f1: Option<f64>,
    pub diversity_generated: Option<f64>,
    pub diversity_gold: Option<f64>,
}

/// Corpus-level means. Alignment values are percentages.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub k: Option<usize>,
    pub value_percent: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub questions: usize,
    pub similarity: Similarity,
    pub per_question: Vec<QuestionReport>,
    pub summary: Vec<SummaryRow>,
}

/// How many generated errors enter the similarity/diversity metrics.
const ERRORS_FOR_SIMILARITY: usize = 3;

/// Evaluates a generation run against a corpus: alignment at each k plus
/// error similarity and diversity, averaged over MCQs.
pub fn evaluate_corpus(
    corpus: &Corpus,
    generations: &[GenerationRecord],
    ks: &[usize],
    h: Similarity,
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Argument("evaluate_corpus: no k values given".into()));
    }
    let mut by_stem: BTreeMap<String, &GenerationRecord> = BTreeMap::new();
    for g in generations {
        by_stem.insert(normalize_text(&g.stem), g);
    }

    let mut per_question = Vec::with_capacity(corpus.len());
    for mcq in &corpus.items {
        let record = by_stem.get(&normalize_text(&mcq.stem)).ok_or_else(|| {
            Error::Report(format!("no generation record for stem {:?}", mcq.stem))
        })?;
        let gold_distractors: Vec<String> =
            mcq.distractors.iter().map(|d| d.answer.clone()).collect();
        let generated_distractors: Vec<String> =
            record.candidates.iter().map(|c| c.distractor.clone()).collect();

        let mut align = Vec::new();
        for &k in ks {
            align.push(alignment(&gold_distractors, &generated_distractors, k)?);
        }

        // distinct generated errors in rank order, capped for the paper-style
        // "best three errors" comparison
        let mut gen_errors: Vec<String> = Vec::new();
        for c in &record.candidates {
            if !gen_errors.iter().any(|e| normalize_text(e) == normalize_text(&c.error)) {
                gen_errors.push(c.error.clone());
            }
            if gen_errors.len() == ERRORS_FOR_SIMILARITY {
                break;
            }
        }
        let gold_errors: Vec<String> =
            mcq.distractors.iter().filter_map(|d| d.error.clone()).collect();

        let (sr, sp, sf) = if !gold_errors.is_empty() && !gen_errors.is_empty() {
            let r = sim_recall(&gold_errors, &gen_errors, h)?;
            let p = sim_precision(&gold_errors, &gen_errors, h)?;
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (Some(r), Some(p), Some(f))
        } else {
            (None, None, None)
        };
        let div_gen =
            if gen_errors.len() >= 2 { Some(diversity(&gen_errors, h)?) } else { None };
        let div_gold =
            if gold_errors.len() >= 2 { Some(diversity(&gold_errors, h)?) } else { None };

        per_question.push(QuestionReport {
            stem: mcq.stem.clone(),
            alignment: align,
            sim_recall: sr,
            sim_precision: sp,
            sim_f1: sf,
            diversity_generated: div_gen,
            diversity_gold: div_gold,
        });
    }

    let mut summary = Vec::new();
    for (ki, &k) in ks.iter().enumerate() {
        for (name, get) in [
            ("exact", (|a: &AlignmentResult| a.exact) as fn(&AlignmentResult) -> f64),
            ("partial", |a| a.partial),
            ("prop", |a| a.proportional),
        ] {
            let mean = per_question.iter().map(|q| get(&q.alignment[ki])).sum::<f64>()
                / per_question.len().max(1) as f64;
            summary.push(SummaryRow {
                metric: name.into(),
                k: Some(k),
                value_percent: 100.0 * mean,
            });
        }
    }
    for (name, get) in [
        ("sim_recall", (|q: &QuestionReport| q.sim_recall) as fn(&QuestionReport) -> Option<f64>),
        ("sim_precision", |q| q.sim_precision),
        ("sim_f1", |q| q.sim_f1),
        ("diversity_generated", |q| q.diversity_generated),
        ("diversity_gold", |q| q.diversity_gold),
    ] {
        let values: Vec<f64> = per_question.iter().filter_map(get).collect();
        if !values.is_empty() {
            summary.push(SummaryRow {
                metric: name.into(),
                k: None,
                value_percent: 100.0 * values.iter().sum::<f64>() / values.len() as f64,
            });
        }
    }

    Ok(EvalReport { questions: per_question.len(), similarity: h, per_question, summary })
}

impl EvalReport {
    pub fn summary_value(&self, metric: &str, k: Option<usize>) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.metric == metric && r.k == k)
            .map(|r| r.value_percent)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "metric,k,value_percent")?;
        for r in &self.summary {
            let k = r.k.map(|k| k.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{:.2}", r.metric, k, r.value_percent)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Reads generation records from a JSON Lines file.
pub fn load_generations(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_generations(records: &[GenerationRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
