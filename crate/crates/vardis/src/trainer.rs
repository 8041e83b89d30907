//! Two-phase training: supervised fine-tuning of the three conditional
//! models on labeled pairs, then variational training on all pairs with the
//! Monte Carlo ELBO and Q regularization. Includes the AdamW optimizer,
//! global-norm gradient clipping, checkpointing, and the per-step training
//! log.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{render_prompt, Corpus, Mcq, PromptRole};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Grads, Model};
use crate::objective::{pair_objective, LossBreakdown, LossWeights};
use crate::softtoken::{sample_error, temperature_at, AnnealSchedule};
use crate::vocab::VocabSpec;

const TRIPLE_FORMAT: u32 = 1;

/// The three trainable models plus the frozen snapshot of the posterior
/// taken right after supervised fine-tuning.
#[derive(Debug, Clone)]
pub struct ModelTriple {
    pub prior: Model,
    pub decoder: Model,
    pub posterior: Model,
    pub posterior_init: Model,
    /// Completed variational update steps (drives the annealing schedule).
    pub var_steps: u64,
}

impl ModelTriple {
    pub fn new(prior: Model, decoder: Model, posterior: Model) -> Self {
        let posterior_init = posterior.clone_frozen();
        ModelTriple { prior, decoder, posterior, posterior_init, var_steps: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.prior.vocab;
        for (name, m) in
            [("decoder", &self.decoder), ("posterior", &self.posterior), ("posterior_init", &self.posterior_init)]
        {
            if &m.vocab != v {
                return Err(Error::Validation(format!("{name} does not share the prior's vocab")));
            }
        }
        if !self.posterior_init.frozen {
            return Err(Error::Validation("posterior_init must be frozen".into()));
        }
        Ok(())
    }
}

/// Gradient buffers for the three trainable models.
pub struct TripleGrads {
    pub prior: Grads,
    pub decoder: Grads,
    pub posterior: Grads,
}

impl TripleGrads {
    pub fn zeros(models: &ModelTriple) -> Self {
        TripleGrads {
            prior: models.prior.new_grads(),
            decoder: models.decoder.new_grads(),
            posterior: models.posterior.new_grads(),
        }
    }

    pub fn add_assign(&mut self, other: &TripleGrads) {
        self.prior.add_assign(&other.prior);
        self.decoder.add_assign(&other.decoder);
        self.posterior.add_assign(&other.posterior);
    }

    pub fn scale(&mut self, s: f64) {
        self.prior.scale(s);
        self.decoder.scale(s);
        self.posterior.scale(s);
    }

    pub fn global_norm(&self) -> f64 {
        (self.prior.l2_norm_sq() + self.decoder.l2_norm_sq() + self.posterior.l2_norm_sq()).sqrt()
    }

    /// Scales all gradients so the global norm does not exceed `max_norm`;
    /// returns (pre-clip, post-clip) norms.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> (f64, f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
            (norm, max_norm)
        } else {
            (norm, norm)
        }
    }
}

/// Supervised fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub early_stop: bool,
    pub patience: usize,
    pub grad_clip_norm: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { lr: 2e-5, epochs: 5, batch: 32, early_stop: true, patience: 1, grad_clip_norm: 1.0 }
    }
}

/// Variational-phase settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarConfig {
    pub lr: f64,
    pub epochs: usize,
    pub pairs_per_batch: usize,
    pub grad_clip_norm: f64,
    pub max_error_len: usize,
}

impl Default for VarConfig {
    fn default() -> Self {
        VarConfig { lr: 5e-6, epochs: 1, pairs_per_batch: 16, grad_clip_norm: 1.0, max_error_len: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sft: SftConfig,
    pub variational: VarConfig,
    pub weights: LossWeights,
    pub schedule: AnnealSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sft: SftConfig::default(),
            variational: VarConfig::default(),
            weights: LossWeights::default(),
            schedule: AnnealSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sft.lr", self.sft.lr), ("variational.lr", self.variational.lr)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative finite number")));
            }
        }
        if self.sft.batch == 0 || self.variational.pairs_per_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.sft.epochs == 0 {
            return Err(Error::Config("sft.epochs must be positive".into()));
        }
        if self.variational.max_error_len == 0 {
            return Err(Error::Config("max_error_len must be positive".into()));
        }
        self.weights.validate()?;
        self.schedule.validate()?;
        Ok(())
    }
}

/// Decoupled-weight-decay Adam. Decay applies to 2-D weight matrices only.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(model: &Model, lr: f64) -> Self {
        let layout = model.layout();
        let n = layout.total_len();
        let mut decay = vec![false; n];
        for name in layout.names() {
            if layout.decays(name) {
                for i in layout.range(name) {
                    decay[i] = true;
                }
            }
        }
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut upd = mhat / (vhat.sqrt() + self.eps);
            if self.decay[i] {
                upd += self.weight_decay * params[i];
            }
            params[i] -= self.lr * upd;
        }
    }
}

/// One supervised example: encoded prompt and completion ids.
#[derive(Debug, Clone)]
struct SftExample {
    prompt: Vec<u32>,
    target: Vec<u32>,
}

fn render_sft_pair(mcq: &Mcq, di: usize, role: PromptRole) -> Result<Option<(String, String)>> {
    let d = &mcq.distractors[di];
    let Some(err) = d.error.as_deref() else { return Ok(None) };
    let out = match role {
        PromptRole::Prior => (render_prompt(mcq, role, None, None)?, err.to_string()),
        PromptRole::Decoder => (render_prompt(mcq, role, Some(err), None)?, d.answer.clone()),
        PromptRole::Posterior => {
            (render_prompt(mcq, role, None, Some(&d.answer))?, err.to_string())
        }
    };
    Ok(Some(out))
}

fn build_sft_examples(vocab: &VocabSpec, corpus: &Corpus, role: PromptRole) -> Result<Vec<SftExample>> {
    let mut out = Vec::new();
    for mcq in &corpus.items {
        for di in 0..mcq.distractors.len() {
            if let Some((prompt_text, target_text)) = render_sft_pair(mcq, di, role)? {
                let mut prompt = vec![vocab.bos];
                prompt.extend(vocab.encode(&prompt_text)?);
                let mut target = vocab.encode(&target_text)?;
                target.push(vocab.eos);
                out.push(SftExample { prompt, target });
            }
        }
    }
    Ok(out)
}

/// Vocabulary over every prompt rendering and completion text in the corpus.
pub fn derive_vocab(corpus: &Corpus) -> Result<VocabSpec> {
    let mut texts = Vec::new();
    for mcq in &corpus.items {
        texts.push(render_prompt(mcq, PromptRole::Prior, None, None)?);
        for d in &mcq.distractors {
            texts.push(render_prompt(mcq, PromptRole::Posterior, None, Some(&d.answer))?);
            if let Some(e) = &d.error {
                texts.push(render_prompt(mcq, PromptRole::Decoder, Some(e), None)?);
                texts.push(e.clone());
            }
            texts.push(d.answer.clone());
        }
    }
    Ok(VocabSpec::build(texts))
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn chunk_ranges(len: usize, chunks: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = chunks.max(1).min(len.max(1));
    let base = len / chunks;
    let extra = len % chunks;
    let mut out = Vec::new();
    let mut start = 0;
    for c in 0..chunks {
        let size = base + usize::from(c < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Token-mean cross-entropy over a slice of examples (no gradients).
fn eval_ce(model: &Model, examples: &[SftExample]) -> Result<f64> {
    let chunks = chunk_ranges(examples.len(), rayon::current_num_threads());
    let partials: Vec<Result<(f64, usize)>> = chunks
        .into_par_iter()
        .map(|range| {
            let mut nll = 0.0;
            let mut tokens = 0;
            for ex in &examples[range] {
                let prompt = crate::model::MixedInput::from_ids(&ex.prompt);
                nll -= model.sequence_logprob(&prompt, &ex.target)?;
                tokens += ex.target.len();
            }
            Ok((nll, tokens))
        })
        .collect();
    let mut nll = 0.0;
    let mut tokens = 0;
    for p in partials {
        let (n, t) = p?;
        nll += n;
        tokens += t;
    }
    if tokens == 0 {
        return Err(Error::Argument("no evaluation tokens".into()));
    }
    Ok(nll / tokens as f64)
}

fn sft_batch_grads(
    model: &Model,
    examples: &[SftExample],
    batch: &[usize],
    grads: &mut Grads,
) -> Result<(f64, usize)> {
    let chunks = chunk_ranges(batch.len(), rayon::current_num_threads());
    let partials: Vec<Result<(f64, usize, Grads)>> = chunks
        .into_par_iter()
        .map(|range| {
            let mut g = model.new_grads();
            let mut nll = 0.0;
            let mut tokens = 0;
            for &idx in &batch[range] {
                let ex = &examples[idx];
                let prompt = crate::model::MixedInput::from_ids(&ex.prompt);
                let trace = model.score_trace(&prompt, &ex.target)?;
                nll -= Model::logprob_from_trace(&trace, ex.prompt.len(), &ex.target);
                tokens += ex.target.len();
                let mut dlogits = ndarray::Array2::zeros(trace.logits.raw_dim());
                for (j, &id) in ex.target.iter().enumerate() {
                    let row_idx = ex.prompt.len() - 1 + j;
                    let p = crate::math::softmax(trace.logits.row(row_idx));
                    let mut drow = dlogits.row_mut(row_idx);
                    drow.assign(&p);
                    drow[id as usize] -= 1.0;
                }
                model.backward(&trace, &dlogits, &mut g);
            }
            Ok((nll, tokens, g))
        })
        .collect();
    let mut nll = 0.0;
    let mut tokens = 0;
    for p in partials {
        let (n, t, g) = p?;
        nll += n;
        tokens += t;
        grads.add_assign(&g);
    }
    Ok((nll, tokens))
}

/// Per-model SFT statistics.
#[derive(Debug, Clone, Serialize)]
pub struct SftModelStats {
    pub examples: usize,
    pub epochs_run: usize,
    pub train_ce: Vec<f64>,
    pub val_ce: Vec<f64>,
    pub selected_val_ce: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SftStats {
    pub labeled_pairs: usize,
    pub prior: SftModelStats,
    pub decoder: SftModelStats,
    pub posterior: SftModelStats,
}

/// Trains one model with next-token cross entropy on the completion only.
fn train_sft_model(
    model: &mut Model,
    examples: &[SftExample],
    val: Option<&[SftExample]>,
    cfg: &SftConfig,
    seed: u64,
) -> Result<SftModelStats> {
    if !model.frozen {
        // training handle; frozen copies never reach here
    }
    let mut opt = AdamW::new(model, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut stats = SftModelStats {
        examples: examples.len(),
        epochs_run: 0,
        train_ce: Vec::new(),
        val_ce: Vec::new(),
        selected_val_ce: None,
    };
    let mut best: Option<(f64, Vec<f64>, u64)> = None;
    let mut bad_epochs = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch) {
            let mut grads = model.new_grads();
            let (nll, tokens) = sft_batch_grads(model, examples, batch, &mut grads)?;
            epoch_nll += nll;
            epoch_tokens += tokens;
            grads.scale(1.0 / tokens.max(1) as f64);
            let norm = grads.l2_norm_sq().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric("non-finite gradient during SFT".into()));
            }
            if norm > cfg.grad_clip_norm {
                grads.scale(cfg.grad_clip_norm / norm);
            }
            opt.step(model.params_mut(), &grads.data);
            model.train_steps += 1;
        }
        stats.train_ce.push(epoch_nll / epoch_tokens.max(1) as f64);
        stats.epochs_run = epoch + 1;

        if let Some(val_examples) = val {
            let ce = eval_ce(model, val_examples)?;
            stats.val_ce.push(ce);
            let improved = best.as_ref().map_or(true, |(b, _, _)| ce < *b);
            if improved {
                best = Some((ce, model.params().to_vec(), model.train_steps));
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if cfg.early_stop && bad_epochs > cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((ce, params, steps)) = best {
        model.params_mut().copy_from_slice(&params);
        model.train_steps = steps;
        stats.selected_val_ce = Some(ce);
    }
    Ok(stats)
}

/// Supervised fine-tuning initialization: builds the vocabulary from the
/// corpus, trains prior/decoder/posterior on the labeled pairs in their
/// respective prompt formats, and freezes the posterior snapshot.
pub fn sft_initialize(
    arch: &ArchConfig,
    corpus: &Corpus,
    val: Option<&Corpus>,
    config: &TrainConfig,
) -> Result<(ModelTriple, SftStats)> {
    config.validate()?;
    let labeled = corpus.labeled_pairs().len();
    if labeled == 0 {
        return Err(Error::Config("sft_initialize: corpus has no labeled pairs".into()));
    }
    let vocab = derive_vocab(corpus)?;

    let mut prior = Model::new(arch.clone(), vocab.clone(), mix_seed(config.seed, 1, 0))?;
    let mut decoder = Model::new(arch.clone(), vocab.clone(), mix_seed(config.seed, 2, 0))?;
    let mut posterior = Model::new(arch.clone(), vocab, mix_seed(config.seed, 3, 0))?;

    let roles = [PromptRole::Prior, PromptRole::Decoder, PromptRole::Posterior];
    let mut stats = Vec::new();
    for (model, role) in [&mut prior, &mut decoder, &mut posterior].into_iter().zip(roles) {
        let examples = build_sft_examples(&model.vocab, corpus, role)?;
        let val_examples = match val {
            Some(vc) => Some(build_sft_examples(&model.vocab, vc, role)?),
            None => None,
        };
        let val_slice = val_examples.as_deref().filter(|v| !v.is_empty());
        let s = train_sft_model(model, &examples, val_slice, &config.sft, mix_seed(config.seed, 4, role as u64))?;
        stats.push(s);
    }
    let mut it = stats.into_iter();
    let stats = SftStats {
        labeled_pairs: labeled,
        prior: it.next().unwrap(),
        decoder: it.next().unwrap(),
        posterior: it.next().unwrap(),
    };
    let triple = ModelTriple::new(prior, decoder, posterior);
    triple.validate()?;
    Ok((triple, stats))
}

/// One row of the variational training log.
#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub reconstruction: f64,
    pub kl_term: f64,
    pub q_reg: f64,
    pub total: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub pairs_used: usize,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::io::Write as _;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,reconstruction,kl_term,q_reg,total,lambda")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.step, r.reconstruction, r.kl_term, r.q_reg, r.total, r.lambda
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Variational training over all question-distractor pairs (labels ignored).
/// Each step draws Monte Carlo error samples per pair at the annealed
/// temperature, accumulates gradients of the combined objective, clips the
/// global norm, and applies one joint AdamW update.
pub fn variational_train(
    models: &mut ModelTriple,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    models.validate()?;
    let pairs = corpus.pairs();
    if pairs.is_empty() {
        return Err(Error::Config("variational_train: corpus has no pairs".into()));
    }
    let vcfg = &config.variational;
    let mut opt_prior = AdamW::new(&models.prior, vcfg.lr);
    let mut opt_decoder = AdamW::new(&models.decoder, vcfg.lr);
    let mut opt_posterior = AdamW::new(&models.posterior, vcfg.lr);
    let mut log = TrainLog { rows: Vec::new(), pairs_used: 0 };

    for epoch in 0..vcfg.epochs {
        let mut order: Vec<(usize, usize)> = pairs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 5, epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(vcfg.pairs_per_batch) {
            let lambda = temperature_at(&config.schedule, models.var_steps);
            let step = models.var_steps;
            let chunks = chunk_ranges(batch.len(), rayon::current_num_threads());
            let shared: &ModelTriple = models;
            let partials: Vec<Result<(TripleGrads, Vec<LossBreakdown>)>> = chunks
                .into_par_iter()
                .map(|range| {
                    let mut g = TripleGrads::zeros(shared);
                    let mut bds = Vec::new();
                    for (slot, &(qi, di)) in batch[range.clone()].iter().enumerate() {
                        let mcq = &corpus.items[qi];
                        let distractor = &mcq.distractors[di].answer;
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                            config.seed,
                            step.wrapping_add(11),
                            (range.start + slot) as u64,
                        ));
                        let q_prompt =
                            crate::objective::posterior_prompt(&shared.posterior, mcq, distractor)?;
                        let samples: Result<Vec<_>> = (0..config.weights.mc_samples)
                            .map(|_| {
                                sample_error(
                                    &shared.posterior,
                                    &q_prompt,
                                    lambda,
                                    vcfg.max_error_len,
                                    &mut rng,
                                )
                            })
                            .collect();
                        let bd = pair_objective(
                            shared,
                            mcq,
                            distractor,
                            &config.weights,
                            lambda,
                            &samples?,
                            Some(&mut g),
                        )?;
                        bds.push(bd);
                    }
                    Ok((g, bds))
                })
                .collect();

            let mut grads = TripleGrads::zeros(models);
            let mut bds = Vec::new();
            for p in partials {
                let (g, b) = p?;
                grads.add_assign(&g);
                bds.extend(b);
            }
            let n = bds.len() as f64;
            let row = LogRow {
                step,
                reconstruction: bds.iter().map(|b| b.reconstruction).sum::<f64>() / n,
                kl_term: bds.iter().map(|b| b.kl_term).sum::<f64>() / n,
                q_reg: bds.iter().map(|b| b.q_reg).sum::<f64>() / n,
                total: bds.iter().map(|b| b.total).sum::<f64>() / n,
                lambda,
            };
            if !row.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step}; parameters left at the last good state"
                )));
            }
            grads.scale(1.0 / n);
            let (pre, _post) = grads.clip_global_norm(vcfg.grad_clip_norm);
            if !pre.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at step {step}; parameters left at the last good state"
                )));
            }
            opt_prior.step(models.prior.params_mut(), &grads.prior.data);
            opt_decoder.step(models.decoder.params_mut(), &grads.decoder.data);
            opt_posterior.step(models.posterior.params_mut(), &grads.posterior.data);
            models.var_steps += 1;
            log.rows.push(row);
            log.pairs_used += bds.len();
        }
    }
    Ok(log)
}

#[derive(Serialize, Deserialize)]
struct TripleMeta {
    format_version: u32,
    var_steps: u64,
}

/// Saves all four model handles plus the variational step counter.
pub fn save_checkpoint(models: &ModelTriple, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    models.prior.save(dir.join("prior"))?;
    models.decoder.save(dir.join("decoder"))?;
    models.posterior.save(dir.join("posterior"))?;
    models.posterior_init.save(dir.join("posterior_init"))?;
    let meta = TripleMeta { format_version: TRIPLE_FORMAT, var_steps: models.var_steps };
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(dir.join("triple.json"), text + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelTriple> {
    let dir = dir.as_ref();
    let meta_path = dir.join("triple.json");
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", meta_path.display())))?;
    let meta: TripleMeta = serde_json::from_str(&text)?;
    if meta.format_version != TRIPLE_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {TRIPLE_FORMAT})",
            meta.format_version
        )));
    }
    let triple = ModelTriple {
        prior: Model::load(dir.join("prior"))?,
        decoder: Model::load(dir.join("decoder"))?,
        posterior: Model::load(dir.join("posterior"))?,
        posterior_init: Model::load(dir.join("posterior_init"))?,
        var_steps: meta.var_steps,
    };
    triple.validate()?;
    Ok(triple)
}
