//! Differentiable sampling of discrete error tokens from the posterior:
//! temperature-scaled soft distributions, soft embeddings, and the
//! exponential annealing schedule.
//!
//! Hard token ids are drawn from the posterior's plain next-token
//! distribution via the Gumbel-max trick; the recorded soft distribution is
//! the tempered softmax of the same noised logits, so it concentrates on the
//! drawn id as the temperature anneals toward zero. This keeps the sampled
//! ids exact ancestral samples while the soft embeddings interpolate from
//! smooth mixtures to the drawn token's embedding row.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::softmax;
use crate::model::{MixedInput, Model, Segment};

/// Exponential temperature annealing schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub total_steps: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { lambda_start: 1.0, lambda_end: 0.1, total_steps: 1 }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_start > 0.0 && self.lambda_end > 0.0) {
            return Err(Error::Config("annealing temperatures must be positive".into()));
        }
        if self.lambda_end > self.lambda_start {
            return Err(Error::Config("lambda_end must not exceed lambda_start".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("anneal_steps must be positive".into()));
        }
        Ok(())
    }
}

/// λ(step) = start · (end/start)^(min(step, T)/T). Monotone non-increasing,
/// clamped at `lambda_end` beyond the schedule horizon.
pub fn temperature_at(schedule: &AnnealSchedule, step: u64) -> f64 {
    let t = step.min(schedule.total_steps) as f64 / schedule.total_steps as f64;
    schedule.lambda_start * (schedule.lambda_end / schedule.lambda_start).powf(t)
}

/// Tempered softmax p = softmax(z / λ).
pub fn soft_distribution(z: ArrayView1<f64>, lambda: f64) -> Result<Array1<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {lambda}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("soft_distribution: non-finite logits".into()));
    }
    let scaled = z.mapv(|v| v / lambda);
    Ok(softmax(scaled.view()))
}

/// Convex combination of embedding rows: Σ_j p_j · v_j.
pub fn soft_embedding(p: ArrayView1<f64>, embeddings: ArrayView2<f64>) -> Result<Array1<f64>> {
    if p.len() != embeddings.nrows() {
        return Err(Error::Shape(format!(
            "probability vector has {} entries, embedding table has {} rows",
            p.len(),
            embeddings.nrows()
        )));
    }
    Ok(p.dot(&embeddings))
}

/// A differentiable sample of an error-token sequence from the posterior.
#[derive(Debug, Clone)]
pub struct SampledError {
    /// Sampled hard ids; ends with EOS unless truncated at max length.
    pub token_ids: Vec<u32>,
    /// Per-position tempered soft distributions over the vocabulary.
    pub soft_dists: Vec<Array1<f64>>,
    /// Per-position soft embeddings Σ_j p_{k,j} v_j.
    pub soft_embeds: Vec<Array1<f64>>,
    /// Per-position log of the soft distribution at the sampled id.
    pub logq_per_pos: Vec<f64>,
    /// Per-position Gumbel noise, kept so the loss path can rebuild the soft
    /// distributions from a teacher-forced forward pass.
    pub noise: Vec<Array1<f64>>,
    /// True when the sample hit max length without emitting EOS.
    pub truncated: bool,
}

impl SampledError {
    /// The error tokens that enter a decoder prompt: everything before the
    /// terminating EOS (the full sequence when truncated).
    pub fn body_len(&self) -> usize {
        if self.truncated {
            self.token_ids.len()
        } else {
            self.token_ids.len() - 1
        }
    }
}

fn gumbel<R: Rng>(rng: &mut R, n: usize) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    }))
}

/// Autoregressively samples an error-token sequence from the posterior over
/// the given prompt. Sampling conditions on the hard prefix; soft
/// distributions and embeddings are recorded for the downstream consumer.
pub fn sample_error<R: Rng>(
    posterior: &Model,
    prompt: &MixedInput,
    lambda: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<SampledError> {
    if max_len == 0 {
        return Err(Error::Argument("sample_error: max_len must be at least 1".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {lambda}")));
    }
    let vocab_len = posterior.vocab_size();
    let emb = posterior.embedding_table();
    let (mut state, mut logits) = posterior.prefill(prompt)?;

    let mut out = SampledError {
        token_ids: Vec::new(),
        soft_dists: Vec::new(),
        soft_embeds: Vec::new(),
        logq_per_pos: Vec::new(),
        noise: Vec::new(),
        truncated: false,
    };
    loop {
        let g = gumbel(rng, vocab_len);
        let noised = &logits + &g;
        let id = noised
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i as u32)
            .expect("nonempty vocab");
        let p = soft_distribution(noised.view(), lambda)?;
        out.soft_embeds.push(soft_embedding(p.view(), emb)?);
        out.logq_per_pos.push(p[id as usize].ln());
        out.soft_dists.push(p);
        out.noise.push(g);
        out.token_ids.push(id);

        if id == posterior.vocab.eos {
            break;
        }
        if out.token_ids.len() >= max_len {
            out.truncated = true;
            break;
        }
        logits = posterior.step(&mut state, &Segment::Hard(id))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, Model};
    use crate::vocab::VocabSpec;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = AnnealSchedule { lambda_start: 1.0, lambda_end: 0.1, total_steps: 100 };
        assert!((temperature_at(&s, 0) - 1.0).abs() < 1e-12);
        assert!((temperature_at(&s, 100) - 0.1).abs() < 1e-12);
        let mid = temperature_at(&s, 50);
        assert!((mid - 10f64.powf(-0.5)).abs() < 1e-12);
        assert!((mid - 0.31623).abs() < 1e-5);
        // clamps past the horizon
        assert!((temperature_at(&s, 10_000) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn soft_distribution_symmetry_and_closed_form() {
        let p = soft_distribution(array![0.0, 0.0, 0.0].view(), 0.7).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p1 = soft_distribution(array![2.0, 0.0].view(), 1.0).unwrap();
        assert!((p1[0] - 0.88080).abs() < 1e-5);
        assert!((p1[1] - 0.11920).abs() < 1e-5);
        let p05 = soft_distribution(array![2.0, 0.0].view(), 0.5).unwrap();
        assert!((p05[0] - 0.98201).abs() < 1e-5);
        assert!((p05[1] - 0.01799).abs() < 1e-5);
        assert!(p05[0] > p1[0], "lower temperature must sharpen the argmax");
    }

    #[test]
    fn soft_distribution_rejects_non_finite() {
        assert!(soft_distribution(array![f64::NAN, 0.0].view(), 1.0).is_err());
        assert!(soft_distribution(array![1.0, 0.0].view(), 0.0).is_err());
    }

    #[test]
    fn soft_embedding_identity_midpoint_and_oracle() {
        let emb = array![[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0], [0.5, 0.25, 0.125, 0.0]];
        let one_hot = array![0.0, 1.0, 0.0];
        let row = soft_embedding(one_hot.view(), emb.view()).unwrap();
        assert_eq!(row, array![5.0, 6.0, 7.0, 8.0]);

        let half = array![0.5, 0.5, 0.0];
        let mid = soft_embedding(half.view(), emb.view()).unwrap();
        assert_eq!(mid, array![3.0, 4.0, 5.0, 6.0]);

        let p = array![0.2, 0.3, 0.5];
        let got = soft_embedding(p.view(), emb.view()).unwrap();
        for d in 0..4 {
            let direct: f64 = (0..3).map(|j| p[j] * emb[(j, d)]).sum();
            assert!((got[d] - direct).abs() < 1e-10);
        }

        let bad = array![1.0, 0.0];
        assert!(soft_embedding(bad.view(), emb.view()).is_err());
    }

    fn rigged_model(bias: &[(usize, f64)], fill: f64) -> Model {
        // Constant logits irrespective of input: all weights zero, head bias
        // carries the target logits.
        let vocab = VocabSpec::build(["aa bb cc"]);
        let arch = ArchConfig { layers: 1, heads: 2, dim: 8, mlp_ratio: 2, max_context: 16 };
        let mut m = Model::new(arch, vocab, 0).unwrap();
        let n = m.params().len();
        for i in 0..n {
            m.params_mut()[i] = 0.0;
        }
        // keep layernorm gains at one so the forward pass stays well-defined
        for name in ["l0.ln1.g", "l0.ln2.g", "lnf.g"] {
            m.tensor_mut(name).fill(1.0);
        }
        m.tensor_mut("head.b").fill(fill);
        for &(id, b) in bias {
            m.tensor_mut("head.b")[id] = b;
        }
        m
    }

    #[test]
    fn degenerate_distribution_is_deterministic_and_one_hot() {
        let m = rigged_model(&[(4, 1e4)], 0.0);
        let prompt = MixedInput::from_ids(&[m.vocab.bos]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_error(&m, &prompt, 0.5, 4, &mut rng).unwrap();
        assert!(s.token_ids.iter().all(|&id| id == 4));
        for p in &s.soft_dists {
            assert!((p[4] - 1.0).abs() < 1e-6);
            for (j, v) in p.iter().enumerate() {
                if j != 4 {
                    assert!(*v < 1e-6);
                }
            }
        }
        assert!(s.truncated);
        assert_eq!(s.body_len(), 4);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let m = rigged_model(&[(3, 1.0), (4, 0.5)], -2.0);
        let prompt = MixedInput::from_ids(&[m.vocab.bos]);
        let a = sample_error(&m, &prompt, 0.8, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_error(&m, &prompt, 0.8, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.token_ids, b.token_ids);
        assert_eq!(a.logq_per_pos, b.logq_per_pos);
        assert_eq!(a.soft_dists.len(), b.soft_dists.len());
        for (x, y) in a.soft_dists.iter().zip(b.soft_dists.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn sampled_error_internal_consistency() {
        let m = rigged_model(&[(3, 0.7), (5, 0.9)], -1.0);
        let prompt = MixedInput::from_ids(&[m.vocab.bos]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let s = sample_error(&m, &prompt, 0.6, 5, &mut rng).unwrap();
            let n = s.token_ids.len();
            assert_eq!(s.soft_dists.len(), n);
            assert_eq!(s.soft_embeds.len(), n);
            assert_eq!(s.logq_per_pos.len(), n);
            for (k, p) in s.soft_dists.iter().enumerate() {
                assert!((p.sum() - 1.0).abs() < 1e-6);
                assert!(p.iter().all(|&v| v >= 0.0));
                let expect = p[s.token_ids[k] as usize].ln();
                assert!((s.logq_per_pos[k] - expect).abs() < 1e-6);
            }
            if !s.truncated {
                assert_eq!(*s.token_ids.last().unwrap(), m.vocab.eos);
            }
        }
    }

    #[test]
    fn single_position_frequencies_match_target_distribution() {
        // Two-outcome first position with p = (0.7, 0.3); ids are exact
        // ancestral samples from the plain softmax regardless of λ.
        let p0: f64 = 0.7;
        let p1: f64 = 0.3;
        let m = rigged_model(&[(3, p0.ln()), (4, p1.ln())], -1e9);
        let prompt = MixedInput::from_ids(&[m.vocab.bos]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 50_000;
        let mut count3 = 0usize;
        for _ in 0..draws {
            let s = sample_error(&m, &prompt, 0.25, 1, &mut rng).unwrap();
            if s.token_ids[0] == 3 {
                count3 += 1;
            } else {
                assert_eq!(s.token_ids[0], 4);
            }
        }
        let freq = count3 as f64 / draws as f64;
        assert!((freq - p0).abs() <= 0.01, "freq {freq} vs {p0}");
    }

    #[test]
    fn hard_ids_match_ancestral_enumeration_on_tiny_vocab() {
        // Exhaustive check that sampled sequences follow the posterior's
        // ancestral distribution (length ≤ 2 outcomes enumerated exactly).
        let vocab = VocabSpec::build(["aa"]);
        let arch = ArchConfig { layers: 1, heads: 2, dim: 8, mlp_ratio: 2, max_context: 8 };
        let m = Model::new(arch, vocab, 21).unwrap();
        let prompt = MixedInput::from_ids(&[m.vocab.bos]);
        let max_len = 2;

        // enumerate exact outcome probabilities
        let mut exact: std::collections::HashMap<Vec<u32>, f64> = Default::default();
        let v = m.vocab_size() as u32;
        let mut stack: Vec<(Vec<u32>, f64)> = vec![(vec![], 0.0)];
        while let Some((seq, lp)) = stack.pop() {
            let mut input = prompt.clone();
            input.extend_hard(&seq);
            let z = m.next_logits(&input).unwrap();
            let logp = crate::math::log_softmax(z.view());
            for id in 0..v {
                let nlp = lp + logp[id as usize];
                let mut ns = seq.clone();
                ns.push(id);
                if id == m.vocab.eos || ns.len() >= max_len {
                    exact.insert(ns, nlp.exp());
                } else {
                    stack.push((ns, nlp));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 30_000;
        let mut counts: std::collections::HashMap<Vec<u32>, usize> = Default::default();
        for _ in 0..draws {
            let s = sample_error(&m, &prompt, 0.35, max_len, &mut rng).unwrap();
            *counts.entry(s.token_ids).or_default() += 1;
        }
        for (seq, p) in &exact {
            let f = *counts.get(seq).unwrap_or(&0) as f64 / draws as f64;
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            assert!(
                (f - p).abs() <= 4.0 * sigma + 0.002,
                "seq {seq:?}: freq {f} vs exact {p}"
            );
        }
    }

    proptest! {
        #[test]
        fn sharpening_is_monotone(logits in proptest::collection::vec(-3.0f64..3.0, 2..6)) {
            let z = Array1::from_vec(logits);
            let arg = z
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            let mut last = 0.0;
            for lambda in [2.0, 1.0, 0.5, 0.25, 0.1] {
                let p = soft_distribution(z.view(), lambda).unwrap();
                prop_assert!(p[arg] + 1e-12 >= last);
                last = p[arg];
            }
        }

        #[test]
        fn soft_rows_sum_to_one(logits in proptest::collection::vec(-20.0f64..20.0, 2..8),
                                lambda in 0.05f64..3.0) {
            let z = Array1::from_vec(logits);
            let p = soft_distribution(z.view(), lambda).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }
}
