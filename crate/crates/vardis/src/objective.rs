//! The variational training objective: Monte Carlo ELBO, token-level Q
//! regularization against the frozen SFT posterior, and the combined loss.
//! An exact-enumeration ELBO over the truncated error space serves as the
//! test oracle for the Monte Carlo estimator.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{decoder_prompt_parts, render_prompt, Mcq, PromptRole};
use crate::error::{Error, Result};
use crate::math::{kl_divergence, logsumexp, softmax};
use crate::model::{MixedInput, Model};
use crate::softtoken::{sample_error, soft_distribution, SampledError};
use crate::trainer::{ModelTriple, TripleGrads};

/// Weights of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// KL weight inside the ELBO.
    pub beta: f64,
    /// Weight of the Q regularizer relative to the ELBO.
    pub alpha: f64,
    /// Monte Carlo samples per question-distractor pair.
    pub mc_samples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 0.1, alpha: 0.95, mc_samples: 4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-pair loss terms. `total = -(reconstruction - kl_term) + alpha * q_reg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_term: f64,
    pub q_reg: f64,
    pub total: f64,
}

/// The final objective to minimize: negative ELBO plus the weighted
/// regularizer.
pub fn total_loss(elbo: f64, reg: f64, weights: &LossWeights) -> f64 {
    -elbo + weights.alpha * reg
}

/// Result of the Monte Carlo ELBO estimate for one pair.
#[derive(Debug)]
pub struct ElboEstimate {
    pub estimate: f64,
    pub reconstruction: f64,
    pub kl_term: f64,
    pub samples: Vec<SampledError>,
}

pub fn posterior_prompt(model: &Model, mcq: &Mcq, distractor: &str) -> Result<MixedInput> {
    let text = render_prompt(mcq, PromptRole::Posterior, None, Some(distractor))?;
    model.encode_prompt(&text)
}

pub fn prior_prompt(model: &Model, mcq: &Mcq) -> Result<MixedInput> {
    let text = render_prompt(mcq, PromptRole::Prior, None, None)?;
    model.encode_prompt(&text)
}

/// Decoder input with the error slot filled by hard token ids.
pub fn decoder_input_hard(model: &Model, mcq: &Mcq, error_body: &[u32]) -> Result<MixedInput> {
    let (prefix, suffix) = decoder_prompt_parts(mcq);
    let mut input = model.encode_prompt(&prefix)?;
    input.extend_hard(error_body);
    input.extend_hard(&model.vocab.encode(&suffix)?);
    Ok(input)
}

/// Decoder input with the error slot filled by soft embedding vectors.
/// Returns the input and the index of the first soft position.
pub fn decoder_input_soft(
    model: &Model,
    mcq: &Mcq,
    soft_embeds: &[Array1<f64>],
) -> Result<(MixedInput, usize)> {
    let (prefix, suffix) = decoder_prompt_parts(mcq);
    let mut input = model.encode_prompt(&prefix)?;
    let soft_start = input.len();
    for v in soft_embeds {
        input.push_soft(v.clone());
    }
    input.extend_hard(&model.vocab.encode(&suffix)?);
    Ok((input, soft_start))
}

/// Monte Carlo estimate of the ELBO for one (stem, distractor) pair: the
/// mean over samples ê ~ q of
/// `log p_dec(d|s,ê) - β(log q(ê|s,d) - log p_prior(ê|s))`,
/// where the decoder consumes the sample's soft embeddings in place of the
/// error tokens and the prior and posterior score the sampled hard ids.
pub fn elbo_mc<R: Rng>(
    models: &ModelTriple,
    mcq: &Mcq,
    distractor: &str,
    weights: &LossWeights,
    lambda: f64,
    max_err_len: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    weights.validate()?;
    let q_prompt = posterior_prompt(&models.posterior, mcq, distractor)?;
    let mut samples = Vec::with_capacity(weights.mc_samples);
    for _ in 0..weights.mc_samples {
        samples.push(sample_error(&models.posterior, &q_prompt, lambda, max_err_len, rng)?);
    }
    let bd = pair_objective(models, mcq, distractor, weights, lambda, &samples, None)?;
    Ok(ElboEstimate {
        estimate: bd.reconstruction - bd.kl_term,
        reconstruction: bd.reconstruction,
        kl_term: bd.kl_term,
        samples,
    })
}

/// Token-level Q regularization for one sample:
/// Σ_k KL(q_init(·|s,d,ê_<k) ‖ q_live(·|s,d,ê_<k)) over the sampled prefix.
pub fn q_regularizer(
    posterior: &Model,
    frozen_init: &Model,
    mcq: &Mcq,
    distractor: &str,
    sample: &SampledError,
) -> Result<f64> {
    if posterior.vocab != frozen_init.vocab {
        return Err(Error::Vocab("posterior and frozen copy use different vocabularies".into()));
    }
    let prompt = posterior_prompt(posterior, mcq, distractor)?;
    let mut input = prompt.clone();
    input.extend_hard(&sample.token_ids);
    let live = posterior.forward(&input)?;
    let init = frozen_init.forward(&input)?;
    let mut total = 0.0;
    for k in 0..sample.token_ids.len() {
        let row = prompt.len() - 1 + k;
        let p_init = softmax(init.logits.row(row));
        let p_live = softmax(live.logits.row(row));
        total += kl_divergence(p_init.view(), p_live.view());
    }
    Ok(total)
}

/// Shared value/gradient route for the combined per-pair objective over a
/// fixed set of samples. With `grads` present, parameter gradients of
/// `breakdown.total` are accumulated for all three trainable models,
/// including the paths through the soft embeddings into the posterior.
pub fn pair_objective(
    models: &ModelTriple,
    mcq: &Mcq,
    distractor: &str,
    weights: &LossWeights,
    lambda: f64,
    samples: &[SampledError],
    mut grads: Option<&mut TripleGrads>,
) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::Argument("pair_objective: need at least one sample".into()));
    }
    let m = samples.len() as f64;
    let inv_m = 1.0 / m;
    let beta = weights.beta;
    let alpha = weights.alpha;

    let q_prompt = posterior_prompt(&models.posterior, mcq, distractor)?;
    let p_prompt = prior_prompt(&models.prior, mcq)?;
    let dis_target = models.decoder.encode_target(distractor)?;
    let wte_q = models.posterior.embedding_table();

    let mut recon_sum = 0.0;
    let mut logq_sum = 0.0;
    let mut logprior_sum = 0.0;
    let mut reg_sum = 0.0;

    for sample in samples {
        let ids = &sample.token_ids;
        let n = ids.len();
        let body_len = sample.body_len();

        // Posterior teacher-forced pass over prompt ⧺ ids; position k's
        // logits condition on the sampled hard prefix ê_<k.
        let mut q_input = q_prompt.clone();
        q_input.extend_hard(ids);
        let q_trace = models.posterior.forward(&q_input)?;
        let init_trace = models.posterior_init.forward(&q_input)?;

        // per-position plain and tempered distributions
        let mut plain = Vec::with_capacity(n);
        let mut tempered = Vec::with_capacity(n);
        for k in 0..n {
            let row = q_trace.logits.row(q_prompt.len() - 1 + k);
            plain.push(softmax(row));
            let noised = &row.to_owned() + &sample.noise[k];
            tempered.push(soft_distribution(noised.view(), lambda)?);
        }

        let logq: f64 = (0..n).map(|k| plain[k][ids[k] as usize].ln()).sum();
        logq_sum += logq;

        let mut p_inits = Vec::with_capacity(n);
        for k in 0..n {
            let row = q_prompt.len() - 1 + k;
            let p_init = softmax(init_trace.logits.row(row));
            reg_sum += kl_divergence(p_init.view(), plain[k].view());
            p_inits.push(p_init);
        }

        // Decoder pass with the soft error embeddings spliced in.
        let soft_embeds: Vec<Array1<f64>> =
            (0..body_len).map(|k| tempered[k].dot(&wte_q)).collect();
        let (dec_input, soft_start) = decoder_input_soft(&models.decoder, mcq, &soft_embeds)?;
        let dec_trace = models.decoder.score_trace(&dec_input, &dis_target)?;
        let recon = Model::logprob_from_trace(&dec_trace, dec_input.len(), &dis_target);
        recon_sum += recon;

        // Prior scores the hard ids.
        let mut prior_input = p_prompt.clone();
        prior_input.extend_hard(ids);
        let prior_trace = models.prior.forward(&prior_input)?;
        let logprior = Model::logprob_from_trace(&prior_trace, p_prompt.len(), ids);
        logprior_sum += logprior;

        if let Some(g) = grads.as_deref_mut() {
            // decoder: total carries -(1/M)·recon
            let mut d_dec = Array2::zeros(dec_trace.logits.raw_dim());
            for (j, &id) in dis_target.iter().enumerate() {
                let row_idx = dec_input.len() - 1 + j;
                let p = softmax(dec_trace.logits.row(row_idx));
                let mut drow = d_dec.row_mut(row_idx);
                drow.assign(&p.mapv(|v| v * inv_m));
                drow[id as usize] -= inv_m;
            }
            let soft_grads = models.decoder.backward(&dec_trace, &d_dec, &mut g.decoder);

            // prior: total carries -(β/M)·logprior
            let coef = beta * inv_m;
            let mut d_pri = Array2::zeros(prior_trace.logits.raw_dim());
            for (k, &id) in ids.iter().enumerate() {
                let row_idx = p_prompt.len() - 1 + k;
                let p = softmax(prior_trace.logits.row(row_idx));
                let mut drow = d_pri.row_mut(row_idx);
                drow.assign(&p.mapv(|v| v * coef));
                drow[id as usize] -= coef;
            }
            models.prior.backward(&prior_trace, &d_pri, &mut g.prior);

            // posterior: +(β/M)·logq, +(α/M)·KL, and the soft path
            let mut d_post = Array2::zeros(q_trace.logits.raw_dim());
            for k in 0..n {
                let row_idx = q_prompt.len() - 1 + k;
                let id = ids[k] as usize;
                {
                    let mut drow = d_post.row_mut(row_idx);
                    // +(β/M) d logq/dz = (β/M)(onehot - plain)
                    drow.scaled_add(-beta * inv_m, &plain[k]);
                    drow[id] += beta * inv_m;
                    // +(α/M) d KL(p_init ‖ p_live)/dz = (α/M)(p_live - p_init)
                    drow.scaled_add(alpha * inv_m, &plain[k]);
                    drow.scaled_add(-alpha * inv_m, &p_inits[k]);
                }
                if k < body_len {
                    if let Some(ds) = soft_grads[soft_start + k].as_ref() {
                        // chain through soft embedding and tempered softmax
                        let dp = wte_q.dot(ds);
                        let s = &tempered[k];
                        let dot: f64 = s.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
                        {
                            let mut drow = d_post.row_mut(row_idx);
                            for j in 0..dp.len() {
                                drow[j] += s[j] * (dp[j] - dot) / lambda;
                            }
                        }
                        // direct dependence of the soft embedding on wte
                        let mut wg = g.posterior.view2_mut("wte");
                        for j in 0..s.len() {
                            if s[j] != 0.0 {
                                let mut wrow = wg.row_mut(j);
                                wrow.scaled_add(s[j], ds);
                            }
                        }
                    }
                }
            }
            models.posterior.backward(&q_trace, &d_post, &mut g.posterior);
        }
    }

    let reconstruction = recon_sum * inv_m;
    let kl_term = beta * (logq_sum - logprior_sum) * inv_m;
    let q_reg = reg_sum * inv_m;
    let elbo = reconstruction - kl_term;
    Ok(LossBreakdown { reconstruction, kl_term, q_reg, total: total_loss(elbo, q_reg, weights) })
}

/// Every sequence a truncated ancestral sampler can produce: EOS-terminated
/// sequences of up to `max_len` tokens plus unterminated sequences of exactly
/// `max_len` non-EOS tokens. These outcomes partition the sample space, so
/// their model probabilities sum to one.
pub fn enumerate_error_space(vocab_size: usize, eos: u32, max_len: usize) -> Result<Vec<Vec<u32>>> {
    if max_len == 0 {
        return Err(Error::Argument("max_len must be at least 1".into()));
    }
    let content = (vocab_size - 1) as f64;
    let mut count = content.powi(max_len as i32);
    for l in 0..max_len {
        count += content.powi(l as i32);
    }
    if !(count <= 1e5) {
        return Err(Error::EnumerationGuard(format!(
            "error space has {count:.0} sequences (limit 100000)"
        )));
    }

    let mut out = Vec::new();
    let mut stack: Vec<Vec<u32>> = vec![vec![]];
    while let Some(seq) = stack.pop() {
        for id in 0..vocab_size as u32 {
            let mut next = seq.clone();
            next.push(id);
            if id == eos || next.len() == max_len {
                out.push(next);
            } else {
                stack.push(next);
            }
        }
    }
    Ok(out)
}

/// Exact ELBO over the truncated error space, hard tokens throughout:
/// Σ_e q(e|s,d) · [log p_dec(d|s,e) − β(log q(e|s,d) − log p_prior(e|s))].
pub fn exact_elbo(
    models: &ModelTriple,
    mcq: &Mcq,
    distractor: &str,
    beta: f64,
    max_len: usize,
) -> Result<f64> {
    let space =
        enumerate_error_space(models.posterior.vocab_size(), models.posterior.vocab.eos, max_len)?;
    let q_prompt = posterior_prompt(&models.posterior, mcq, distractor)?;
    let p_prompt = prior_prompt(&models.prior, mcq)?;
    let dis_target = models.decoder.encode_target(distractor)?;
    let eos = models.posterior.vocab.eos;

    let mut elbo = 0.0;
    for seq in &space {
        let logq = models.posterior.continuation_logprob(&q_prompt, seq)?;
        let logprior = models.prior.continuation_logprob(&p_prompt, seq)?;
        let body: &[u32] =
            if *seq.last().unwrap() == eos { &seq[..seq.len() - 1] } else { &seq[..] };
        let dec_input = decoder_input_hard(&models.decoder, mcq, body)?;
        let recon = models.decoder.sequence_logprob(&dec_input, &dis_target)?;
        elbo += logq.exp() * (recon - beta * (logq - logprior));
    }
    Ok(elbo)
}

/// The log of the latent-error marginal Σ_e p_prior(e|s) · p_dec(d|s,e) over
/// the same truncated enumeration (the quantity the ELBO lower-bounds at
/// β = 1).
pub fn log_marginal(
    models: &ModelTriple,
    mcq: &Mcq,
    distractor: &str,
    max_len: usize,
) -> Result<f64> {
    let space =
        enumerate_error_space(models.posterior.vocab_size(), models.posterior.vocab.eos, max_len)?;
    let p_prompt = prior_prompt(&models.prior, mcq)?;
    let dis_target = models.decoder.encode_target(distractor)?;
    let eos = models.posterior.vocab.eos;

    let mut terms = Vec::with_capacity(space.len());
    for seq in &space {
        let logprior = models.prior.continuation_logprob(&p_prompt, seq)?;
        let body: &[u32] =
            if *seq.last().unwrap() == eos { &seq[..seq.len() - 1] } else { &seq[..] };
        let dec_input = decoder_input_hard(&models.decoder, mcq, body)?;
        let recon = models.decoder.sequence_logprob(&dec_input, &dis_target)?;
        terms.push(logprior + recon);
    }
    Ok(logsumexp(Array1::from_vec(terms).view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DistractorEntry;
    use crate::model::ArchConfig;
    use crate::trainer::ModelTriple;
    use crate::vocab::VocabSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_mcq() -> Mcq {
        Mcq {
            stem: "aa bb".into(),
            key: "cc".into(),
            explanation: None,
            tags: vec![],
            distractors: vec![DistractorEntry { answer: "bb".into(), error: Some("aa".into()) }],
        }
    }

    pub(crate) fn fixture_vocab(mcq: &Mcq) -> VocabSpec {
        let mut words: std::collections::BTreeSet<String> = Default::default();
        let mut add = |text: &str| {
            for w in text.split_whitespace() {
                words.insert(w.to_string());
            }
        };
        add(&render_prompt(mcq, PromptRole::Prior, None, None).unwrap());
        for d in &mcq.distractors {
            add(&render_prompt(mcq, PromptRole::Posterior, None, Some(&d.answer)).unwrap());
            if let Some(e) = &d.error {
                add(&render_prompt(mcq, PromptRole::Decoder, Some(e), None).unwrap());
                add(e);
            }
            add(&d.answer);
        }
        VocabSpec::from_tokens(words)
    }

    fn tiny_triple(seed: u64) -> ModelTriple {
        let arch = ArchConfig { layers: 1, heads: 2, dim: 12, mlp_ratio: 2, max_context: 64 };
        let vocab = fixture_vocab(&tiny_mcq());
        let prior = Model::new(arch.clone(), vocab.clone(), seed).unwrap();
        let decoder = Model::new(arch.clone(), vocab.clone(), seed + 1).unwrap();
        let posterior = Model::new(arch, vocab, seed + 2).unwrap();
        ModelTriple::new(prior, decoder, posterior)
    }

    fn rig_constant(model: &mut Model, bias: &[(usize, f64)], fill: f64) {
        let n = model.params().len();
        for i in 0..n {
            model.params_mut()[i] = 0.0;
        }
        for l in 0..model.arch.layers {
            model.tensor_mut(&format!("l{l}.ln1.g")).fill(1.0);
            model.tensor_mut(&format!("l{l}.ln2.g")).fill(1.0);
        }
        model.tensor_mut("lnf.g").fill(1.0);
        model.tensor_mut("head.b").fill(fill);
        for &(id, b) in bias {
            model.tensor_mut("head.b")[id] = b;
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert!((total_loss(-2.0, 0.0, &w) - 2.0).abs() < 1e-12);
        assert!((total_loss(0.0, 1.0, &w) - 0.95).abs() < 1e-12);
        assert!((total_loss(-1.5, 0.2, &w) - 1.69).abs() < 1e-12);
    }

    #[test]
    fn q_regularizer_zero_when_identical() {
        let triple = tiny_triple(3);
        let mcq = tiny_mcq();
        let prompt = posterior_prompt(&triple.posterior, &mcq, "bb").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_error(&triple.posterior, &prompt, 1.0, 4, &mut rng).unwrap();
        let reg =
            q_regularizer(&triple.posterior, &triple.posterior_init, &mcq, "bb", &s).unwrap();
        assert_eq!(reg, 0.0);
    }

    #[test]
    fn q_regularizer_closed_form_two_point() {
        let mut triple = tiny_triple(4);
        let ln_half = 0.5f64.ln();
        rig_constant(&mut triple.posterior_init, &[(3, ln_half), (4, ln_half)], -1e9);
        rig_constant(&mut triple.posterior, &[(3, 0.9f64.ln()), (4, 0.1f64.ln())], -1e9);
        let mcq = tiny_mcq();
        let prompt = posterior_prompt(&triple.posterior_init, &mcq, "bb").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // exactly one sampled position
        let s = sample_error(&triple.posterior_init, &prompt, 1.0, 1, &mut rng).unwrap();
        assert_eq!(s.token_ids.len(), 1);
        let reg =
            q_regularizer(&triple.posterior, &triple.posterior_init, &mcq, "bb", &s).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((reg - expected).abs() < 1e-6, "reg {reg} vs {expected}");
        assert!((reg - 0.51083).abs() < 1e-5);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(2..6);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = softmax(Array1::from_vec(a).view());
            let q = softmax(Array1::from_vec(b).view());
            assert!(kl_divergence(p.view(), q.view()) >= -1e-12);
        }
    }

    #[test]
    fn q_regularizer_ignores_prior_and_decoder_params() {
        let mut triple = tiny_triple(5);
        let mcq = tiny_mcq();
        let prompt = posterior_prompt(&triple.posterior, &mcq, "bb").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_error(&triple.posterior, &prompt, 0.7, 3, &mut rng).unwrap();
        let before =
            q_regularizer(&triple.posterior, &triple.posterior_init, &mcq, "bb", &s).unwrap();
        for p in triple.prior.params_mut() {
            *p += 0.3;
        }
        for p in triple.decoder.params_mut() {
            *p -= 0.2;
        }
        let after =
            q_regularizer(&triple.posterior, &triple.posterior_init, &mcq, "bb", &s).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn enumeration_space_counts_and_guard() {
        // |V| = 4: EOS plus 3 other ids, lengths ≤ 2:
        // terminated 1 + 3, truncated 9.
        let space = enumerate_error_space(4, 1, 2).unwrap();
        assert_eq!(space.len(), 13);
        assert!(enumerate_error_space(60, 1, 4).is_err());
    }

    #[test]
    fn enumerated_posterior_mass_is_normalized() {
        let triple = tiny_triple(6);
        let mcq = tiny_mcq();
        let q_prompt = posterior_prompt(&triple.posterior, &mcq, "bb").unwrap();
        let space =
            enumerate_error_space(triple.posterior.vocab_size(), triple.posterior.vocab.eos, 2)
                .unwrap();
        let mut mass = 0.0;
        for seq in &space {
            mass += triple.posterior.continuation_logprob(&q_prompt, seq).unwrap().exp();
        }
        assert!((mass - 1.0).abs() < 1e-9, "mass {mass}");
    }

    #[test]
    fn exact_elbo_zero_kl_when_posterior_equals_prior() {
        // Constant-logit models give identical distributions regardless of
        // the differing prompts, so the KL term vanishes exactly.
        let mut triple = tiny_triple(8);
        let bias = [(3, 0.4), (4, -0.3), (5, 0.1)];
        rig_constant(&mut triple.prior, &bias, -0.2);
        rig_constant(&mut triple.posterior, &bias, -0.2);
        let mcq = tiny_mcq();
        let with_kl = exact_elbo(&triple, &mcq, "bb", 1.0, 1).unwrap();
        let without_kl = exact_elbo(&triple, &mcq, "bb", 0.0, 1).unwrap();
        assert!((with_kl - without_kl).abs() < 1e-9);
    }

    #[test]
    fn exact_elbo_degenerate_posterior_singleton() {
        // All posterior mass on the empty error [EOS].
        let mut triple = tiny_triple(9);
        let eos = triple.posterior.vocab.eos as usize;
        rig_constant(&mut triple.posterior, &[(eos, 1e4)], 0.0);
        let mcq = tiny_mcq();
        let beta = 0.1;
        let got = exact_elbo(&triple, &mcq, "bb", beta, 1).unwrap();

        let seq = vec![triple.posterior.vocab.eos];
        let logprior = triple
            .prior
            .continuation_logprob(&prior_prompt(&triple.prior, &mcq).unwrap(), &seq)
            .unwrap();
        let dec_input = decoder_input_hard(&triple.decoder, &mcq, &[]).unwrap();
        let recon = triple
            .decoder
            .sequence_logprob(&dec_input, &triple.decoder.encode_target("bb").unwrap())
            .unwrap();
        // log q(e*) = log 1 = 0
        let expected = recon - beta * (0.0 - logprior);
        assert!((got - expected).abs() < 1e-6, "got {got} expected {expected}");
    }

    #[test]
    fn exact_elbo_bounded_by_log_marginal_at_beta_one() {
        for seed in 0..5 {
            let triple = tiny_triple(100 + seed);
            let mcq = tiny_mcq();
            let elbo = exact_elbo(&triple, &mcq, "bb", 1.0, 1).unwrap();
            let marginal = log_marginal(&triple, &mcq, "bb", 1).unwrap();
            assert!(
                elbo <= marginal + 1e-8,
                "seed {seed}: elbo {elbo} exceeds marginal {marginal}"
            );
        }
    }

    #[test]
    fn elbo_mc_degenerate_posterior_has_zero_variance() {
        let mut triple = tiny_triple(10);
        let eos = triple.posterior.vocab.eos as usize;
        rig_constant(&mut triple.posterior, &[(eos, 1e4)], 0.0);
        let mcq = tiny_mcq();
        let w = LossWeights { beta: 0.1, alpha: 0.95, mc_samples: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est = elbo_mc(&triple, &mcq, "bb", &w, 0.05, 4, &mut rng).unwrap();

        let seq = vec![triple.posterior.vocab.eos];
        let logprior = triple
            .prior
            .continuation_logprob(&prior_prompt(&triple.prior, &mcq).unwrap(), &seq)
            .unwrap();
        let dec_input = decoder_input_hard(&triple.decoder, &mcq, &[]).unwrap();
        let recon = triple
            .decoder
            .sequence_logprob(&dec_input, &triple.decoder.encode_target("bb").unwrap())
            .unwrap();
        let expected = recon + w.beta * logprior;
        assert!((est.estimate - expected).abs() < 1e-6);
        for s in &est.samples {
            assert_eq!(s.token_ids, seq);
        }
    }

    #[test]
    fn elbo_mc_beta_zero_is_pure_reconstruction() {
        let triple = tiny_triple(12);
        let mcq = tiny_mcq();
        let w = LossWeights { beta: 0.0, alpha: 0.95, mc_samples: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let est = elbo_mc(&triple, &mcq, "bb", &w, 0.5, 3, &mut rng).unwrap();
        assert_eq!(est.kl_term, 0.0);
        assert!((est.estimate - est.reconstruction).abs() < 1e-12);
    }

    #[test]
    fn elbo_mc_mean_converges_to_exact_elbo() {
        // Smoke version of the oracle consistency check; the acceptance suite
        // runs the full 50-triple, 10k-draw variant.
        let triple = tiny_triple(14);
        let mcq = tiny_mcq();
        let beta = 0.1;
        let exact = exact_elbo(&triple, &mcq, "bb", beta, 2).unwrap();
        let w = LossWeights { beta, alpha: 0.95, mc_samples: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 2000;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let est = elbo_mc(&triple, &mcq, "bb", &w, 0.01, 2, &mut rng).unwrap();
            values.push(est.estimate);
        }
        let mean: f64 = values.iter().sum::<f64>() / n as f64;
        let var: f64 =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() <= 4.0 * se, "mean {mean} exact {exact} se {se}");
    }

    #[test]
    fn breakdown_total_identity() {
        let triple = tiny_triple(16);
        let mcq = tiny_mcq();
        let w = LossWeights::default();
        let q_prompt = posterior_prompt(&triple.posterior, &mcq, "bb").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<_> = (0..3)
            .map(|_| sample_error(&triple.posterior, &q_prompt, 0.4, 3, &mut rng).unwrap())
            .collect();
        let bd = pair_objective(&triple, &mcq, "bb", &w, 0.4, &samples, None).unwrap();
        let identity = -(bd.reconstruction - bd.kl_term) + w.alpha * bd.q_reg;
        assert!((bd.total - identity).abs() < 1e-6);
    }
}
