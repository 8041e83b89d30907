//! Shared helpers for integration tests: tiny model builders and the
//! central-finite-difference gradient oracle. The oracle only ever calls
//! value functions, never the analytic backward path it is checking.

#![allow(dead_code)]

use vardis::data::{render_prompt, DistractorEntry, Mcq, PromptRole};
use vardis::model::{ArchConfig, Model};
use vardis::trainer::ModelTriple;
use vardis::vocab::VocabSpec;

pub const FD_EPS: f64 = 1e-5;

/// A minimal MCQ whose fields stay inside a tiny word vocabulary.
pub fn micro_mcq() -> Mcq {
    Mcq {
        stem: "aa bb".into(),
        key: "cc".into(),
        explanation: None,
        tags: vec![],
        distractors: vec![DistractorEntry { answer: "bb".into(), error: Some("aa".into()) }],
    }
}

/// Word-only vocabulary covering every template rendering of the MCQ, so the
/// enumerable error space stays small (no character-fallback alphabet).
pub fn micro_vocab(mcq: &Mcq) -> VocabSpec {
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

/// Three independently initialized micro models sharing one vocabulary.
pub fn micro_triple(seed: u64, dim: usize, layers: usize) -> ModelTriple {
    let arch = ArchConfig { layers, heads: 2, dim, mlp_ratio: 2, max_context: 80 };
    let vocab = micro_vocab(&micro_mcq());
    let prior = Model::new(arch.clone(), vocab.clone(), seed).unwrap();
    let decoder = Model::new(arch.clone(), vocab.clone(), seed + 1).unwrap();
    let posterior = Model::new(arch, vocab, seed + 2).unwrap();
    ModelTriple::new(prior, decoder, posterior)
}

pub fn tiny_vocab(words: &str) -> VocabSpec {
    VocabSpec::build([words])
}

pub fn tiny_model(seed: u64, dim: usize, layers: usize, vocab: VocabSpec) -> Model {
    let arch = ArchConfig { layers, heads: 2, dim, mlp_ratio: 2, max_context: 48 };
    Model::new(arch, vocab, seed).unwrap()
}

/// Central finite difference of `f` with respect to parameter `idx` of the
/// given model, leaving the model unchanged afterwards.
pub fn fd_grad_param<F: FnMut(&Model) -> f64>(model: &mut Model, idx: usize, mut f: F) -> f64 {
    let orig = model.params()[idx];
    model.params_mut()[idx] = orig + FD_EPS;
    let up = f(model);
    model.params_mut()[idx] = orig - FD_EPS;
    let down = f(model);
    model.params_mut()[idx] = orig;
    (up - down) / (2.0 * FD_EPS)
}

/// Relative error between an analytic and a finite-difference gradient, with
/// an absolute floor so that exact zeros compare clean.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-8);
    (analytic - fd).abs() / denom
}

/// Samples up to `per_tensor` parameter indices from every named tensor,
/// deterministically spread across each tensor's extent.
pub fn sampled_param_indices(model: &Model, per_tensor: usize) -> Vec<(String, usize)> {
    let layout = model.layout();
    let mut out = Vec::new();
    for name in layout.names() {
        let range = layout.range(name);
        let len = range.len();
        let take = per_tensor.min(len);
        for i in 0..take {
            let offset = if take == 1 { 0 } else { i * (len - 1) / (take - 1) };
            out.push((name.to_string(), range.start + offset));
        }
    }
    out
}
