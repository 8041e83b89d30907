//! Beam search, diverse beam search with a Hamming diversity penalty, and
//! the two-stage overgenerate-and-rank procedure that produces the top-K
//! (error, distractor) candidates for an MCQ.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_text, render_prompt, Mcq, PromptRole};
use crate::error::{Error, Result};
use crate::math::log_softmax;
use crate::model::{DecodeState, MixedInput, Model, Segment};
use crate::trainer::ModelTriple;

/// A decoded sequence with its length-normalized score (sum of token
/// log-probabilities divided by token count).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSeq {
    pub ids: Vec<u32>,
    pub score: f64,
    pub group: Option<usize>,
}

/// Overgenerate-and-rank settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Errors drawn from the prior with diverse beam search.
    pub n_errors: usize,
    /// Distractors drawn from the decoder per error with beam search.
    pub n_distractors: usize,
    /// Candidates kept after ranking the pooled set.
    pub top_k: usize,
    /// Diverse-beam group count; must divide `n_errors`.
    pub diversity_groups: usize,
    /// Hamming diversity penalty subtracted during group-wise selection.
    pub diversity_penalty: f64,
    pub max_error_len: usize,
    pub max_distractor_len: usize,
    /// Rank the pool by error_score + distractor_score instead of the
    /// distractor score alone.
    pub joint_rank: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            n_errors: 10,
            n_distractors: 10,
            top_k: 10,
            diversity_groups: 10,
            diversity_penalty: 0.5,
            max_error_len: 48,
            max_distractor_len: 16,
            joint_rank: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_errors == 0 || self.n_distractors == 0 || self.top_k == 0 {
            return Err(Error::Config("decode sizes must be positive".into()));
        }
        if self.n_errors * self.n_distractors < self.top_k {
            return Err(Error::Config(format!(
                "top_k {} exceeds the candidate pool {}x{}",
                self.top_k, self.n_errors, self.n_distractors
            )));
        }
        if self.diversity_groups == 0 || self.n_errors % self.diversity_groups != 0 {
            return Err(Error::Config(format!(
                "diversity_groups {} must divide the error beam width {}",
                self.diversity_groups, self.n_errors
            )));
        }
        if self.diversity_penalty < 0.0 {
            return Err(Error::Config("diversity_penalty must be nonnegative".into()));
        }
        if self.max_error_len == 0 || self.max_distractor_len == 0 {
            return Err(Error::Config("max generation lengths must be positive".into()));
        }
        Ok(())
    }
}

/// One ranked (error, distractor) candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub error: String,
    pub distractor: String,
    pub error_score: f64,
    pub distractor_score: f64,
}

/// Ranked candidates plus a flag marking a pool smaller than the requested K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub items: Vec<ScoredCandidate>,
    pub shortfall: bool,
}

struct Beam {
    ids: Vec<u32>,
    logp: f64,
    state: DecodeState,
    logits: Array1<f64>,
}

struct GroupSearch {
    alive: Vec<Beam>,
    done: Vec<(Vec<u32>, f64)>,
    width: usize,
}

fn normalized(logp: f64, len: usize) -> f64 {
    logp / len.max(1) as f64
}

fn seq_cmp(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> std::cmp::Ordering {
    let sa = normalized(a.1, a.0.len());
    let sb = normalized(b.1, b.0.len());
    sb.total_cmp(&sa).then_with(|| a.0.cmp(&b.0))
}

/// Group-wise beam step. `counts` carries how often each token was selected
/// at this position by earlier groups; the penalty only biases selection,
/// stored scores stay true log-probabilities.
fn advance_group(
    model: &Model,
    search: &mut GroupSearch,
    counts: &std::collections::HashMap<u32, usize>,
    penalty: f64,
    max_len: usize,
) -> Result<Vec<u32>> {
    if search.alive.is_empty() {
        return Ok(Vec::new());
    }
    // candidate list: (adjusted selection score, true logp, parent, token)
    let mut candidates: Vec<(f64, f64, usize, u32)> = Vec::new();
    for (bi, beam) in search.alive.iter().enumerate() {
        let logp_tok = log_softmax(beam.logits.view());
        for (tok, lp) in logp_tok.iter().enumerate() {
            let true_logp = beam.logp + lp;
            let adj = true_logp
                - penalty * counts.get(&(tok as u32)).copied().unwrap_or(0) as f64;
            candidates.push((adj, true_logp, bi, tok as u32));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| {
                let mut ka = search.alive[a.2].ids.clone();
                ka.push(a.3);
                let mut kb = search.alive[b.2].ids.clone();
                kb.push(b.3);
                ka.cmp(&kb)
            })
    });
    candidates.truncate(search.width);

    let mut chosen_tokens = Vec::with_capacity(candidates.len());
    let mut next_alive = Vec::new();
    for (_, true_logp, parent, tok) in candidates {
        chosen_tokens.push(tok);
        let parent_beam = &search.alive[parent];
        let mut ids = parent_beam.ids.clone();
        ids.push(tok);
        if tok == model.vocab.eos {
            search.done.push((ids, true_logp));
        } else if ids.len() >= max_len {
            search.done.push((ids, true_logp));
        } else {
            let mut state = parent_beam.state.clone();
            let logits = model.step(&mut state, &Segment::Hard(tok))?;
            next_alive.push(Beam { ids, logp: true_logp, state, logits });
        }
    }
    search.alive = next_alive;
    Ok(chosen_tokens)
}

fn finish_group(mut search: GroupSearch) -> Vec<(Vec<u32>, f64)> {
    for beam in search.alive {
        search.done.push((beam.ids, beam.logp));
    }
    search.done.sort_by(seq_cmp);
    search.done.truncate(search.width);
    search.done
}

fn beam_core(
    model: &Model,
    prompt: &MixedInput,
    groups: usize,
    width: usize,
    penalty: f64,
    max_len: usize,
) -> Result<Vec<ScoredSeq>> {
    if width == 0 || groups == 0 {
        return Err(Error::Argument("beam width and group count must be positive".into()));
    }
    if width % groups != 0 {
        return Err(Error::Argument(format!(
            "group count {groups} must divide beam width {width}"
        )));
    }
    let group_width = width / groups;
    let (root_state, root_logits) = model.prefill(prompt)?;
    let mut searches: Vec<GroupSearch> = (0..groups)
        .map(|_| GroupSearch {
            alive: vec![Beam {
                ids: Vec::new(),
                logp: 0.0,
                state: root_state.clone(),
                logits: root_logits.clone(),
            }],
            done: Vec::new(),
            width: group_width,
        })
        .collect();

    for _t in 0..max_len {
        let mut counts: std::collections::HashMap<u32, usize> = Default::default();
        for search in searches.iter_mut() {
            let chosen = advance_group(model, search, &counts, penalty, max_len)?;
            for tok in chosen {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if searches.iter().all(|s| s.alive.is_empty()) {
            break;
        }
    }

    let mut out: Vec<ScoredSeq> = Vec::new();
    for (g, search) in searches.into_iter().enumerate() {
        for (ids, logp) in finish_group(search) {
            let score = normalized(logp, ids.len());
            out.push(ScoredSeq { ids, score, group: if groups > 1 { Some(g) } else { None } });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids)));
    Ok(out)
}

/// Standard beam search. Deterministic; results sorted by descending
/// length-normalized score with lexicographic tie-breaks.
pub fn beam_search(
    model: &Model,
    prompt: &MixedInput,
    width: usize,
    max_len: usize,
) -> Result<Vec<ScoredSeq>> {
    beam_core(model, prompt, 1, width, 0.0, max_len)
}

/// Diverse beam search: groups run in sequence at each time step, and later
/// groups' selection scores are penalized by `penalty` times the number of
/// times a token was already chosen at this position by earlier groups.
pub fn diverse_beam_search(
    model: &Model,
    prompt: &MixedInput,
    groups: usize,
    width: usize,
    penalty: f64,
    max_len: usize,
) -> Result<Vec<ScoredSeq>> {
    beam_core(model, prompt, groups, width, penalty, max_len)
}

/// Overgenerate-and-rank: N_e errors from the prior via diverse beam search,
/// N_d distractors per error from the decoder via beam search, then the
/// pooled candidates are deduplicated on the normalized distractor text and
/// the top-K survive.
pub fn overgenerate_rank(
    models: &ModelTriple,
    mcq: &Mcq,
    config: &DecodeConfig,
) -> Result<RankedCandidates> {
    config.validate()?;
    let prior_prompt_text = render_prompt(mcq, PromptRole::Prior, None, None)?;
    let prior_prompt = models.prior.encode_prompt(&prior_prompt_text)?;
    let errors = diverse_beam_search(
        &models.prior,
        &prior_prompt,
        config.diversity_groups,
        config.n_errors,
        config.diversity_penalty,
        config.max_error_len,
    )?;

    let mut pool: Vec<ScoredCandidate> = Vec::new();
    for err_seq in errors.iter().take(config.n_errors) {
        let error_text = models.prior.vocab.decode(&err_seq.ids)?;
        let dec_prompt_text = render_prompt(mcq, PromptRole::Decoder, Some(&error_text), None)?;
        let dec_prompt = models.decoder.encode_prompt(&dec_prompt_text)?;
        let distractors = beam_search(
            &models.decoder,
            &dec_prompt,
            config.n_distractors,
            config.max_distractor_len,
        )?;
        for dis_seq in distractors.iter().take(config.n_distractors) {
            let distractor_text = models.decoder.vocab.decode(&dis_seq.ids)?;
            pool.push(ScoredCandidate {
                error: error_text.clone(),
                distractor: distractor_text,
                error_score: err_seq.score,
                distractor_score: dis_seq.score,
            });
        }
    }

    // dedup on normalized distractor text, keeping the best-scoring entry
    let mut best: std::collections::HashMap<String, ScoredCandidate> = Default::default();
    for cand in pool {
        let key = normalize_text(&cand.distractor);
        match best.get(&key) {
            Some(prev) if candidate_rank(prev, config) >= candidate_rank(&cand, config) => {}
            _ => {
                best.insert(key, cand);
            }
        }
    }
    let mut items: Vec<ScoredCandidate> = best.into_values().collect();
    items.sort_by(|a, b| {
        rank_key(b, config)
            .total_cmp(&rank_key(a, config))
            .then_with(|| b.error_score.total_cmp(&a.error_score))
            .then_with(|| a.distractor.cmp(&b.distractor))
            .then_with(|| a.error.cmp(&b.error))
    });
    let shortfall = items.len() < config.top_k;
    items.truncate(config.top_k);
    Ok(RankedCandidates { items, shortfall })
}

fn rank_key(c: &ScoredCandidate, config: &DecodeConfig) -> f64 {
    if config.joint_rank {
        c.distractor_score + c.error_score
    } else {
        c.distractor_score
    }
}

/// Tuple used when deciding which duplicate of a distractor to keep.
fn candidate_rank(c: &ScoredCandidate, config: &DecodeConfig) -> (f64, f64) {
    (rank_key(c, config), c.error_score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use crate::vocab::VocabSpec;

    fn small_vocab() -> VocabSpec {
        VocabSpec::from_tokens(["aa", "bb", "cc"])
    }

    fn random_model(seed: u64) -> Model {
        let arch = ArchConfig { layers: 1, heads: 2, dim: 8, mlp_ratio: 2, max_context: 16 };
        Model::new(arch, small_vocab(), seed).unwrap()
    }

    fn rigged_model(bias: &[(usize, f64)], fill: f64) -> Model {
        let mut m = random_model(0);
        let n = m.params().len();
        for i in 0..n {
            m.params_mut()[i] = 0.0;
        }
        m.tensor_mut("l0.ln1.g").fill(1.0);
        m.tensor_mut("l0.ln2.g").fill(1.0);
        m.tensor_mut("lnf.g").fill(1.0);
        m.tensor_mut("head.b").fill(fill);
        for &(id, b) in bias {
            m.tensor_mut("head.b")[id] = b;
        }
        m
    }

    fn bos(m: &Model) -> MixedInput {
        MixedInput::from_ids(&[m.vocab.bos])
    }

    /// All leaves of the truncated generation tree with their true scores.
    fn exhaustive(model: &Model, prompt: &MixedInput, max_len: usize) -> Vec<ScoredSeq> {
        let mut leaves = Vec::new();
        let v = model.vocab_size() as u32;
        let mut stack: Vec<(Vec<u32>, f64)> = vec![(vec![], 0.0)];
        while let Some((seq, lp)) = stack.pop() {
            let mut input = prompt.clone();
            input.extend_hard(&seq);
            let z = model.next_logits(&input).unwrap();
            let logp = log_softmax(z.view());
            for id in 0..v {
                let nlp = lp + logp[id as usize];
                let mut ns = seq.clone();
                ns.push(id);
                if id == model.vocab.eos || ns.len() >= max_len {
                    leaves.push(ScoredSeq {
                        score: normalized(nlp, ns.len()),
                        ids: ns,
                        group: None,
                    });
                } else {
                    stack.push((ns, nlp));
                }
            }
        }
        leaves.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids)));
        leaves
    }

    #[test]
    fn one_step_argmax() {
        let m = rigged_model(&[(4, 3.0)], 0.0);
        let out = beam_search(&m, &bos(&m), 1, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].ids, vec![4]);
    }

    #[test]
    fn beam_with_full_width_equals_exhaustive_enumeration() {
        for seed in [1, 2, 3] {
            let m = random_model(seed);
            let prompt = bos(&m);
            let max_len = 2;
            let oracle = exhaustive(&m, &prompt, max_len);
            let got = beam_search(&m, &prompt, oracle.len(), max_len).unwrap();
            assert_eq!(got.len(), oracle.len());
            for (g, o) in got.iter().zip(oracle.iter()) {
                assert_eq!(g.ids, o.ids, "seed {seed}");
                assert!((g.score - o.score).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn beam_top1_matches_exhaustive_when_width_at_least_vocab() {
        for seed in [4, 5, 6, 7] {
            let m = random_model(seed);
            let prompt = bos(&m);
            let oracle = exhaustive(&m, &prompt, 3);
            let got = beam_search(&m, &prompt, m.vocab_size(), 3).unwrap();
            assert_eq!(got[0].ids, oracle[0].ids, "seed {seed}");
        }
    }

    #[test]
    fn beam_results_are_sorted_and_unique() {
        let m = random_model(8);
        let out = beam_search(&m, &bos(&m), 5, 4).unwrap();
        assert!(out.len() <= 5);
        for w in out.windows(2) {
            assert!(w[0].score >= w[1].score);
            assert_ne!(w[0].ids, w[1].ids);
        }
    }

    #[test]
    fn diverse_single_group_is_beam_search() {
        let m = random_model(9);
        let a = beam_search(&m, &bos(&m), 4, 3).unwrap();
        let b = diverse_beam_search(&m, &bos(&m), 1, 4, 0.7, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diverse_zero_penalty_groups_reduce_to_beam_search() {
        let m = random_model(10);
        let per_group = beam_search(&m, &bos(&m), 2, 3).unwrap();
        let got = diverse_beam_search(&m, &bos(&m), 2, 4, 0.0, 3).unwrap();
        for g in 0..2 {
            let group: Vec<_> = got.iter().filter(|s| s.group == Some(g)).collect();
            assert_eq!(group.len(), per_group.len());
            for (a, b) in group.iter().zip(per_group.iter()) {
                assert_eq!(a.ids, b.ids);
                assert!((a.score - b.score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dominant_penalty_forces_distinct_group_openers() {
        // two near-equal first tokens; a large penalty must push group 1
        // off group 0's opener
        let m = rigged_model(&[(3, 2.0), (4, 1.99)], -8.0);
        let out = diverse_beam_search(&m, &bos(&m), 2, 2, 50.0, 2).unwrap();
        let g0: Vec<_> = out.iter().filter(|s| s.group == Some(0)).collect();
        let g1: Vec<_> = out.iter().filter(|s| s.group == Some(1)).collect();
        assert_eq!(g0[0].ids[0], 3);
        assert_eq!(g1[0].ids[0], 4);

        // and without the penalty both groups open identically
        let same = diverse_beam_search(&m, &bos(&m), 2, 2, 0.0, 2).unwrap();
        let s0: Vec<_> = same.iter().filter(|s| s.group == Some(0)).collect();
        let s1: Vec<_> = same.iter().filter(|s| s.group == Some(1)).collect();
        assert_eq!(s0[0].ids[0], s1[0].ids[0]);
    }

    fn fixture_mcq() -> Mcq {
        Mcq {
            stem: "aa bb".into(),
            key: "cc".into(),
            explanation: None,
            tags: vec![],
            distractors: vec![crate::data::DistractorEntry {
                answer: "bb".into(),
                error: Some("aa".into()),
            }],
        }
    }

    fn fixture_triple(seed: u64) -> ModelTriple {
        // vocab covering the rendered templates
        let mcq = fixture_mcq();
        let mut words: std::collections::BTreeSet<String> = Default::default();
        for text in [
            render_prompt(&mcq, PromptRole::Prior, None, None).unwrap(),
            render_prompt(&mcq, PromptRole::Decoder, Some("aa"), None).unwrap(),
            render_prompt(&mcq, PromptRole::Posterior, None, Some("bb")).unwrap(),
        ] {
            for w in text.split_whitespace() {
                words.insert(w.to_string());
            }
        }
        let vocab = VocabSpec::from_tokens(words);
        let arch = ArchConfig { layers: 1, heads: 2, dim: 8, mlp_ratio: 2, max_context: 96 };
        let prior = Model::new(arch.clone(), vocab.clone(), seed).unwrap();
        let decoder = Model::new(arch.clone(), vocab.clone(), seed + 1).unwrap();
        let posterior = Model::new(arch, vocab, seed + 2).unwrap();
        ModelTriple::new(prior, decoder, posterior)
    }

    #[test]
    fn overgenerate_degenerate_pool_is_decoder_top_k() {
        let triple = fixture_triple(11);
        let mcq = fixture_mcq();
        let config = DecodeConfig {
            n_errors: 1,
            n_distractors: 3,
            top_k: 3,
            diversity_groups: 1,
            diversity_penalty: 0.0,
            max_error_len: 3,
            max_distractor_len: 3,
            joint_rank: false,
        };
        let ranked = overgenerate_rank(&triple, &mcq, &config).unwrap();

        // reproduce by hand: single best error, then its decoder beams
        let prior_prompt = triple
            .prior
            .encode_prompt(&render_prompt(&mcq, PromptRole::Prior, None, None).unwrap())
            .unwrap();
        let err = &beam_search(&triple.prior, &prior_prompt, 1, 3).unwrap()[0];
        let err_text = triple.prior.vocab.decode(&err.ids).unwrap();
        let dec_prompt = triple
            .decoder
            .encode_prompt(&render_prompt(&mcq, PromptRole::Decoder, Some(&err_text), None).unwrap())
            .unwrap();
        let beams = beam_search(&triple.decoder, &dec_prompt, 3, 3).unwrap();

        // the ranked items are the decoder's beams (deduped on text) in order
        let mut expect: Vec<(String, f64)> = Vec::new();
        for b in &beams {
            let text = triple.decoder.vocab.decode(&b.ids).unwrap();
            if !expect.iter().any(|(t, _)| normalize_text(t) == normalize_text(&text)) {
                expect.push((text, b.score));
            }
        }
        assert_eq!(ranked.items.len(), expect.len().min(3));
        for (item, (text, score)) in ranked.items.iter().zip(expect.iter()) {
            assert_eq!(&item.distractor, text);
            assert!((item.distractor_score - score).abs() < 1e-12);
            assert_eq!(item.error, err_text);
        }
    }

    #[test]
    fn duplicate_distractors_collapse_keeping_best_score() {
        let triple = fixture_triple(12);
        let mcq = fixture_mcq();
        let config = DecodeConfig {
            n_errors: 2,
            n_distractors: 2,
            top_k: 4,
            diversity_groups: 2,
            diversity_penalty: 0.4,
            max_error_len: 2,
            max_distractor_len: 2,
            joint_rank: false,
        };
        let ranked = overgenerate_rank(&triple, &mcq, &config).unwrap();
        let mut seen = std::collections::HashSet::new();
        for item in &ranked.items {
            assert!(seen.insert(normalize_text(&item.distractor)), "duplicate distractor text");
        }
        assert!(ranked.items.len() <= 4);
        if ranked.items.len() < 4 {
            assert!(ranked.shortfall);
        }
        for w in ranked.items.windows(2) {
            assert!(w[0].distractor_score >= w[1].distractor_score);
        }
    }

    #[test]
    fn overgenerate_is_deterministic() {
        let triple = fixture_triple(13);
        let mcq = fixture_mcq();
        let config = DecodeConfig {
            n_errors: 2,
            n_distractors: 2,
            top_k: 2,
            diversity_groups: 2,
            diversity_penalty: 0.5,
            max_error_len: 3,
            max_distractor_len: 3,
            joint_rank: false,
        };
        let a = overgenerate_rank(&triple, &mcq, &config).unwrap();
        let b = overgenerate_rank(&triple, &mcq, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = DecodeConfig::default();
        c.top_k = 101;
        assert!(c.validate().is_err());
        let mut c = DecodeConfig::default();
        c.diversity_groups = 3; // does not divide 10
        assert!(c.validate().is_err());
    }
}
