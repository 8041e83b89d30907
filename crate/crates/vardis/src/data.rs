//! MCQ data model: records, corpus IO (JSON Lines), stem-disjoint splitting,
//! and the three prompt renderings consumed by the models.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One distractor option together with its (optional) error explanation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistractorEntry {
    pub answer: String,
    pub error: Option<String>,
}

/// A multiple-choice question: stem, key, optional worked solution,
/// topic/concept tags, and its distractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mcq {
    pub stem: String,
    pub key: String,
    pub explanation: Option<String>,
    pub tags: Vec<String>,
    pub distractors: Vec<DistractorEntry>,
}

impl Mcq {
    /// Checks the record invariants, naming the offending field on failure.
    pub fn validate(&self) -> Result<()> {
        if self.stem.trim().is_empty() {
            return Err(Error::Validation("stem: must be nonempty".into()));
        }
        if self.key.trim().is_empty() {
            return Err(Error::Validation("key: must be nonempty".into()));
        }
        if self.distractors.is_empty() {
            return Err(Error::Validation(
                "distractors: at least one distractor required".into(),
            ));
        }
        let key_norm = normalize_text(&self.key);
        for (i, d) in self.distractors.iter().enumerate() {
            if d.answer.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "distractors[{i}].answer: must be nonempty"
                )));
            }
            if normalize_text(&d.answer) == key_norm {
                return Err(Error::Validation(format!(
                    "distractors[{i}].answer: equals the key after normalization"
                )));
            }
            if let Some(e) = &d.error {
                if e.trim().is_empty() {
                    return Err(Error::Validation(format!(
                        "distractors[{i}].error: present but empty"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of (question, distractor) pairs carrying an error label.
    pub fn labeled_pairs(&self) -> usize {
        self.distractors.iter().filter(|d| d.error.is_some()).count()
    }
}

/// An in-memory collection of MCQs plus a provenance label (file path or
/// generator tag). The provenance is not part of the wire format.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<Mcq>,
    pub provenance: String,
}

impl Corpus {
    pub fn new(items: Vec<Mcq>, provenance: impl Into<String>) -> Self {
        Corpus { items, provenance: provenance.into() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Flattens to (question index, distractor index) pairs.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (qi, mcq) in self.items.iter().enumerate() {
            for di in 0..mcq.distractors.len() {
                out.push((qi, di));
            }
        }
        out
    }

    /// Pairs that carry an error label.
    pub fn labeled_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs()
            .into_iter()
            .filter(|&(qi, di)| self.items[qi].distractors[di].error.is_some())
            .collect()
    }
}

/// Loads a corpus from a UTF-8 JSON Lines file, one MCQ per line.
/// Blank lines are not allowed; parse failures report the line number.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            return Err(Error::Parse { line: lineno, msg: "empty line".into() });
        }
        let mcq: Mcq = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        mcq.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {lineno}: {msg}")),
            other => other,
        })?;
        items.push(mcq);
    }
    Ok(Corpus::new(items, path.display().to_string()))
}

/// Writes a corpus in the JSON Lines wire format.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for mcq in &corpus.items {
        serde_json::to_writer(&mut w, mcq)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Train/val/test split ratios plus the shuffle seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { ratios: [0.72, 0.16, 0.12], seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for r in self.ratios {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Validation(format!(
                    "ratios: each must lie in (0,1), got {r}"
                )));
            }
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("ratios: must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Lowercases and collapses internal whitespace; used for stem grouping and
/// for distractor/key string matching throughout the pipeline.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Partitions a corpus into train/val/test so that identical stems (after
/// normalization) always land in the same split. Deterministic given the
/// seed: stem groups are sorted, shuffled with a seeded generator, then each
/// group is assigned to the split with the largest remaining deficit.
pub fn split_by_stem(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus, Corpus)> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::Argument("split_by_stem: corpus is empty".into()));
    }

    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (i, mcq) in corpus.items.iter().enumerate() {
        let key = normalize_text(&mcq.stem);
        match index.get(&key) {
            Some(&g) => groups[g].1.push(i),
            None => {
                index.insert(key.clone(), groups.len());
                groups.push((key, vec![i]));
            }
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    groups.shuffle(&mut rng);

    let total = corpus.len() as f64;
    let targets = [spec.ratios[0] * total, spec.ratios[1] * total, spec.ratios[2] * total];
    let mut counts = [0usize; 3];
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (_, members) in &groups {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for s in 0..3 {
            let deficit = targets[s] - counts[s] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = s;
            }
        }
        counts[best] += members.len();
        assignment[best].extend(members.iter().copied());
    }

    for (name, split) in ["train", "val", "test"].iter().zip(&assignment) {
        if split.is_empty() && corpus.len() >= 3 {
            log::warn!("split_by_stem: {name} split is empty for ratios {:?}", spec.ratios);
        }
    }

    let build = |mut idxs: Vec<usize>, tag: &str| {
        idxs.sort_unstable();
        Corpus::new(
            idxs.iter().map(|&i| corpus.items[i].clone()).collect(),
            format!("{}:{tag}", corpus.provenance),
        )
    };
    let mut it = assignment.into_iter();
    Ok((
        build(it.next().unwrap(), "train"),
        build(it.next().unwrap(), "val"),
        build(it.next().unwrap(), "test"),
    ))
}

/// Which of the three conditional models a prompt is rendered for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptRole {
    /// p(e|s): stem in, error out.
    Prior,
    /// p(d|s,e): stem and error in, distractor out.
    Decoder,
    /// q(e|s,d): stem and distractor in, error out.
    Posterior,
}

fn field_or_na(opt: Option<&str>) -> &str {
    match opt {
        Some(s) if !s.trim().is_empty() => s,
        _ => "N/A",
    }
}

/// Renders the conditioning prompt for one model role. The completion target
/// (error or distractor) is never included: the text ends at the template's
/// final colon.
pub fn render_prompt(
    mcq: &Mcq,
    role: PromptRole,
    error: Option<&str>,
    distractor: Option<&str>,
) -> Result<String> {
    let mut out = render_shared_header(mcq);
    match role {
        PromptRole::Prior => {
            out.push_str("A possible error made by a student is:");
        }
        PromptRole::Decoder => {
            let error = error.ok_or_else(|| {
                Error::Argument("render_prompt: decoder role requires an error text".into())
            })?;
            out.push_str(&format!("The error made by the student is: {error}\n"));
            out.push_str("The incorrect answer given by the student is:");
        }
        PromptRole::Posterior => {
            let distractor = distractor.ok_or_else(|| {
                Error::Argument("render_prompt: posterior role requires a distractor text".into())
            })?;
            out.push_str(&format!("The incorrect answer given by the student is: {distractor}\n"));
            out.push_str("The error made by the student is:");
        }
    }
    Ok(out)
}

/// The shared header of all three templates, ending with a trailing newline.
/// Kept separate so the training path can splice soft error tokens between
/// the decoder template's prefix and suffix at token level.
pub fn render_shared_header(mcq: &Mcq) -> String {
    let topic = field_or_na(mcq.tags.first().map(|s| s.as_str()));
    let concept = field_or_na(mcq.tags.get(1).map(|s| s.as_str()));
    let solution = field_or_na(mcq.explanation.as_deref());
    format!(
        "A teacher assigns the following math question to a class of middle school students.\n\
         The question is: {}\n\
         The question topic is: {}\n\
         The question concept is: {}\n\
         The solution is: {}\n\
         The correct answer is: {}\n",
        mcq.stem, topic, concept, solution, mcq.key
    )
}

/// The decoder template split at the error slot: `(prefix, suffix)` such that
/// `prefix + error + "\n" + suffix` equals the full decoder rendering.
pub fn decoder_prompt_parts(mcq: &Mcq) -> (String, String) {
    let mut prefix = render_shared_header(mcq);
    prefix.push_str("The error made by the student is:");
    let suffix = "The incorrect answer given by the student is:".to_string();
    (prefix, suffix)
}
