//! The conditional autoregressive sequence model: a small decoder-only
//! transformer (pre-LN, learned positions, GELU MLP) with an explicit
//! backward pass and a KV-cached incremental decoding path.
//!
//! All parameters live in one flat `f64` buffer addressed through a named
//! layout, which keeps the optimizer, gradient clipping, checkpointing, and
//! finite-difference tests trivial. Inputs are mixed sequences of hard token
//! ids and soft embedding vectors; the backward pass returns gradients for
//! the soft positions so callers can chain through them.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use ndarray::linalg::general_mat_mul;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_softmax;
use crate::vocab::VocabSpec;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const PARAMS_MAGIC: &[u8; 8] = b"VARDISP1";
const CHECKPOINT_FORMAT: u32 = 1;

/// Architecture descriptor for the reference model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub max_context: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { layers: 2, heads: 4, dim: 128, mlp_ratio: 4, max_context: 256 }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("architecture dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_context < 2 {
            return Err(Error::Config("max_context must be at least 2".into()));
        }
        Ok(())
    }

    fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// Named tensor layout over a flat parameter buffer.
#[derive(Debug)]
pub struct TensorLayout {
    entries: Vec<(String, usize, Vec<usize>)>,
    index: HashMap<String, usize>,
    total: usize,
}

impl TensorLayout {
    fn build(arch: &ArchConfig, vocab_size: usize) -> Self {
        let d = arch.dim;
        let f = arch.mlp_dim();
        let v = vocab_size;
        let mut entries: Vec<(String, usize, Vec<usize>)> = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>, total: &mut usize| {
            let len: usize = shape.iter().product();
            entries.push((name, *total, shape));
            *total += len;
        };
        push("wte".into(), vec![v, d], &mut total);
        push("wpe".into(), vec![arch.max_context, d], &mut total);
        for l in 0..arch.layers {
            push(format!("l{l}.ln1.g"), vec![d], &mut total);
            push(format!("l{l}.ln1.b"), vec![d], &mut total);
            for p in ["wq", "wk", "wv", "wo"] {
                push(format!("l{l}.{p}"), vec![d, d], &mut total);
            }
            for p in ["bq", "bk", "bv", "bo"] {
                push(format!("l{l}.{p}"), vec![d], &mut total);
            }
            push(format!("l{l}.ln2.g"), vec![d], &mut total);
            push(format!("l{l}.ln2.b"), vec![d], &mut total);
            push(format!("l{l}.w1"), vec![d, f], &mut total);
            push(format!("l{l}.b1"), vec![f], &mut total);
            push(format!("l{l}.w2"), vec![f, d], &mut total);
            push(format!("l{l}.b2"), vec![d], &mut total);
        }
        push("lnf.g".into(), vec![d], &mut total);
        push("lnf.b".into(), vec![d], &mut total);
        push("head.w".into(), vec![d, v], &mut total);
        push("head.b".into(), vec![v], &mut total);

        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _, _))| (n.clone(), i))
            .collect();
        TensorLayout { entries, index, total }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    fn slot(&self, name: &str) -> (usize, &[usize]) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor {name:?}"));
        let (_, off, shape) = &self.entries[i];
        (*off, shape)
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let (off, shape) = self.slot(name);
        off..off + shape.iter().product::<usize>()
    }

    /// True for tensors that receive weight decay (2-D weights; no biases,
    /// no layernorm parameters, no positional table).
    pub fn decays(&self, name: &str) -> bool {
        let (_, shape) = self.slot(name);
        shape.len() == 2 && name != "wpe"
    }
}

/// Flat gradient buffer matching a model's tensor layout.
#[derive(Debug, Clone)]
pub struct Grads {
    layout: Arc<TensorLayout>,
    pub data: Vec<f64>,
}

impl Grads {
    pub fn zeros(layout: Arc<TensorLayout>) -> Self {
        let n = layout.total_len();
        Grads { layout, data: vec![0.0; n] }
    }

    pub fn view2_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        let (off, shape) = self.layout.slot(name);
        assert_eq!(shape.len(), 2);
        let (r, c) = (shape[0], shape[1]);
        ArrayViewMut2::from_shape((r, c), &mut self.data[off..off + r * c]).unwrap()
    }

    pub fn view1_mut(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        let (off, shape) = self.layout.slot(name);
        assert_eq!(shape.len(), 1);
        ArrayViewMut1::from_shape(shape[0], &mut self.data[off..off + shape[0]]).unwrap()
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        &self.data[self.layout.range(name)]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.data.iter_mut() {
            *g *= s;
        }
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum()
    }
}

/// One element of a mixed input sequence: a hard token id or a soft
/// embedding-space vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Hard(u32),
    Soft(Array1<f64>),
}

/// A mixed prefix fed to the model. Always begins with BOS.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixedInput(pub Vec<Segment>);

impl MixedInput {
    pub fn from_ids(ids: &[u32]) -> Self {
        MixedInput(ids.iter().map(|&i| Segment::Hard(i)).collect())
    }

    pub fn push_hard(&mut self, id: u32) {
        self.0.push(Segment::Hard(id));
    }

    pub fn push_soft(&mut self, v: Array1<f64>) {
        self.0.push(Segment::Soft(v));
    }

    pub fn extend_hard(&mut self, ids: &[u32]) {
        self.0.extend(ids.iter().map(|&i| Segment::Hard(i)));
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn concat(&self, other: &MixedInput) -> MixedInput {
        let mut v = self.0.clone();
        v.extend(other.0.iter().cloned());
        MixedInput(v)
    }
}

struct LayerTrace {
    xhat1: Array2<f64>,
    istd1: Vec<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>,
    z: Array2<f64>,
    xhat2: Array2<f64>,
    istd2: Vec<f64>,
    u: Array2<f64>,
    h: Array2<f64>,
}

/// Cached activations from a full forward pass, consumed by `backward`.
pub struct FwdTrace {
    items: Vec<Segment>,
    layers: Vec<LayerTrace>,
    fhat: Array2<f64>,
    istdf: Vec<f64>,
    fnorm: Array2<f64>,
    pub logits: Array2<f64>,
}

impl FwdTrace {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Incremental decoding state: per-layer key/value caches.
#[derive(Clone)]
pub struct DecodeState {
    pos: usize,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.pos
    }
}

/// One trainable conditional sequence model.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub vocab: VocabSpec,
    pub frozen: bool,
    pub train_steps: u64,
    layout: Arc<TensorLayout>,
    data: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; u1 kept away from 0.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Model {
    /// Creates a model with normally initialized weights (std 0.02), zero
    /// biases, and unit layernorm gains.
    pub fn new(arch: ArchConfig, vocab: VocabSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        vocab.validate()?;
        let layout = Arc::new(TensorLayout::build(&arch, vocab.len()));
        let mut data = vec![0.0; layout.total_len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = layout.names().map(str::to_string).collect();
        for name in names {
            let range = layout.range(&name);
            let (_, shape) = layout.slot(&name);
            if shape.len() == 2 {
                for x in &mut data[range] {
                    *x = normal(&mut rng, INIT_STD);
                }
            } else if name.ends_with(".g") || name == "lnf.g" {
                for x in &mut data[range] {
                    *x = 1.0;
                }
            }
            // biases and layernorm shifts stay zero
        }
        Ok(Model { arch, vocab, frozen: false, train_steps: 0, layout, data })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn layout(&self) -> Arc<TensorLayout> {
        Arc::clone(&self.layout)
    }

    pub fn new_grads(&self) -> Grads {
        Grads::zeros(Arc::clone(&self.layout))
    }

    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn view2(&self, name: &str) -> ArrayView2<'_, f64> {
        let (off, shape) = self.layout.slot(name);
        assert_eq!(shape.len(), 2);
        ArrayView2::from_shape((shape[0], shape[1]), &self.data[off..off + shape[0] * shape[1]])
            .unwrap()
    }

    pub fn view1(&self, name: &str) -> ArrayView1<'_, f64> {
        let (off, shape) = self.layout.slot(name);
        assert_eq!(shape.len(), 1);
        ArrayView1::from_shape(shape[0], &self.data[off..off + shape[0]]).unwrap()
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.layout.range(name);
        &mut self.data[range]
    }

    /// The token embedding table, |V| × dim.
    pub fn embedding_table(&self) -> ArrayView2<'_, f64> {
        self.view2("wte")
    }

    /// Deep copy excluded from any further gradient updates.
    pub fn clone_frozen(&self) -> Model {
        let mut m = self.clone();
        m.frozen = true;
        m
    }

    fn check_input(&self, input: &MixedInput) -> Result<()> {
        let t = input.len();
        if t == 0 {
            return Err(Error::Argument("input prefix must be nonempty".into()));
        }
        if t > self.arch.max_context {
            return Err(Error::ContextLength { len: t, max: self.arch.max_context });
        }
        match &input.0[0] {
            Segment::Hard(id) if *id == self.vocab.bos => {}
            _ => return Err(Error::Argument("input prefix must begin with BOS".into())),
        }
        for seg in &input.0 {
            match seg {
                Segment::Hard(id) => {
                    if *id as usize >= self.vocab.len() {
                        return Err(Error::Vocab(format!("token id {id} out of range")));
                    }
                }
                Segment::Soft(v) => {
                    if v.len() != self.arch.dim {
                        return Err(Error::Shape(format!(
                            "soft segment has dim {}, model dim {}",
                            v.len(),
                            self.arch.dim
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Numeric("soft segment contains non-finite values".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn embed_rows(&self, items: &[Segment], start_pos: usize) -> Array2<f64> {
        let d = self.arch.dim;
        let wte = self.view2("wte");
        let wpe = self.view2("wpe");
        let mut x = Array2::zeros((items.len(), d));
        for (t, seg) in items.iter().enumerate() {
            let mut row = x.row_mut(t);
            match seg {
                Segment::Hard(id) => row.assign(&wte.row(*id as usize)),
                Segment::Soft(v) => row.assign(v),
            }
            row += &wpe.row(start_pos + t);
        }
        x
    }

    /// Full forward pass over a mixed prefix, caching activations.
    pub fn forward(&self, input: &MixedInput) -> Result<FwdTrace> {
        self.check_input(input)?;
        let t = input.len();
        let d = self.arch.dim;
        let heads = self.arch.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = self.embed_rows(&input.0, 0);
        let mut layers = Vec::with_capacity(self.arch.layers);
        for l in 0..self.arch.layers {
            let (xn1, xhat1, istd1) =
                layernorm_fwd(&x, self.view1(&format!("l{l}.ln1.g")), self.view1(&format!("l{l}.ln1.b")));
            let q = affine(&xn1, self.view2(&format!("l{l}.wq")), self.view1(&format!("l{l}.bq")));
            let k = affine(&xn1, self.view2(&format!("l{l}.wk")), self.view1(&format!("l{l}.bk")));
            let v = affine(&xn1, self.view2(&format!("l{l}.wv")), self.view1(&format!("l{l}.bv")));

            let mut z = Array2::zeros((t, d));
            let mut att = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                let a = causal_softmax(&scores);
                let zh = a.dot(&vh);
                z.slice_mut(cols).assign(&zh);
                att.push(a);
            }
            let attn_out = affine(&z, self.view2(&format!("l{l}.wo")), self.view1(&format!("l{l}.bo")));
            x += &attn_out;

            let (xn2, xhat2, istd2) =
                layernorm_fwd(&x, self.view1(&format!("l{l}.ln2.g")), self.view1(&format!("l{l}.ln2.b")));
            let u = affine(&xn2, self.view2(&format!("l{l}.w1")), self.view1(&format!("l{l}.b1")));
            let h_act = u.mapv(gelu);
            let mlp_out = affine(&h_act, self.view2(&format!("l{l}.w2")), self.view1(&format!("l{l}.b2")));
            x += &mlp_out;

            layers.push(LayerTrace {
                xhat1,
                istd1,
                q,
                k,
                v,
                att,
                z,
                xhat2,
                istd2,
                u,
                h: h_act,
            });
        }
        let (fnorm, fhat, istdf) = layernorm_fwd(&x, self.view1("lnf.g"), self.view1("lnf.b"));
        let logits = affine(&fnorm, self.view2("head.w"), self.view1("head.b"));
        Ok(FwdTrace { items: input.0.clone(), layers, fhat, istdf, fnorm, logits })
    }

    /// Logits after the full prefix (the next-token distribution's logits).
    pub fn next_logits(&self, input: &MixedInput) -> Result<Array1<f64>> {
        let trace = self.forward(input)?;
        Ok(trace.logits.row(trace.len() - 1).to_owned())
    }

    /// Backward pass. `dlogits` is the gradient of a scalar objective with
    /// respect to every logit row of `trace`. Parameter gradients are
    /// accumulated into `grads`; the return value carries the gradient with
    /// respect to each soft input segment (None for hard positions).
    pub fn backward(
        &self,
        trace: &FwdTrace,
        dlogits: &Array2<f64>,
        grads: &mut Grads,
    ) -> Vec<Option<Array1<f64>>> {
        let t = trace.items.len();
        let d = self.arch.dim;
        let heads = self.arch.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        assert_eq!(dlogits.shape(), trace.logits.shape());

        // head
        general_mat_mul(1.0, &trace.fnorm.t(), dlogits, 1.0, &mut grads.view2_mut("head.w"));
        {
            let mut bh = grads.view1_mut("head.b");
            for row in dlogits.rows() {
                bh += &row;
            }
        }
        let dfnorm = dlogits.dot(&self.view2("head.w").t());
        let mut dx = layernorm_bwd(
            &dfnorm,
            &trace.fhat,
            &trace.istdf,
            self.view1("lnf.g"),
            grads,
            "lnf.g",
            "lnf.b",
        );

        for l in (0..self.arch.layers).rev() {
            let tr = &trace.layers[l];
            // MLP block
            let xn2 = layernorm_reapply(
                &tr.xhat2,
                self.view1(&format!("l{l}.ln2.g")),
                self.view1(&format!("l{l}.ln2.b")),
            );
            let dmlp = &dx; // gradient at mlp_out (residual passthrough keeps dx as well)
            general_mat_mul(1.0, &tr.h.t(), dmlp, 1.0, &mut grads.view2_mut(&format!("l{l}.w2")));
            {
                let mut b2 = grads.view1_mut(&format!("l{l}.b2"));
                for row in dmlp.rows() {
                    b2 += &row;
                }
            }
            let dh_act = dmlp.dot(&self.view2(&format!("l{l}.w2")).t());
            let du = &dh_act * &tr.u.mapv(gelu_grad);
            general_mat_mul(1.0, &xn2.t(), &du, 1.0, &mut grads.view2_mut(&format!("l{l}.w1")));
            {
                let mut b1 = grads.view1_mut(&format!("l{l}.b1"));
                for row in du.rows() {
                    b1 += &row;
                }
            }
            let dxn2 = du.dot(&self.view2(&format!("l{l}.w1")).t());
            let dx_ln2 = layernorm_bwd(
                &dxn2,
                &tr.xhat2,
                &tr.istd2,
                self.view1(&format!("l{l}.ln2.g")),
                grads,
                &format!("l{l}.ln2.g"),
                &format!("l{l}.ln2.b"),
            );
            dx += &dx_ln2;

            // attention block
            let dattn = &dx; // gradient at attn_out
            general_mat_mul(1.0, &tr.z.t(), dattn, 1.0, &mut grads.view2_mut(&format!("l{l}.wo")));
            {
                let mut bo = grads.view1_mut(&format!("l{l}.bo"));
                for row in dattn.rows() {
                    bo += &row;
                }
            }
            let dz = dattn.dot(&self.view2(&format!("l{l}.wo")).t());

            let mut dq = Array2::zeros((t, d));
            let mut dk = Array2::zeros((t, d));
            let mut dv = Array2::zeros((t, d));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let a = &tr.att[h];
                let dzh = dz.slice(cols);
                let vh = tr.v.slice(cols);
                let qh = tr.q.slice(cols);
                let kh = tr.k.slice(cols);

                let da = dzh.dot(&vh.t());
                dv.slice_mut(cols).assign(&a.t().dot(&dzh));
                // softmax backward, row-wise; masked entries have a == 0
                let mut ds = Array2::zeros((t, t));
                for i in 0..t {
                    let arow = a.row(i);
                    let darow = da.row(i);
                    let dot: f64 = arow.iter().zip(darow.iter()).map(|(x, y)| x * y).sum();
                    let mut dsrow = ds.row_mut(i);
                    for j in 0..=i {
                        dsrow[j] = arow[j] * (darow[j] - dot);
                    }
                }
                let mut dqh = ds.dot(&kh);
                dqh *= scale;
                dq.slice_mut(cols).assign(&dqh);
                let mut dkh = ds.t().dot(&qh);
                dkh *= scale;
                dk.slice_mut(cols).assign(&dkh);
            }

            let xn1 = layernorm_reapply(
                &tr.xhat1,
                self.view1(&format!("l{l}.ln1.g")),
                self.view1(&format!("l{l}.ln1.b")),
            );
            let mut dxn1 = Array2::zeros((t, d));
            for (w, b, dmat) in [
                ("wq", "bq", &dq),
                ("wk", "bk", &dk),
                ("wv", "bv", &dv),
            ] {
                general_mat_mul(1.0, &xn1.t(), dmat, 1.0, &mut grads.view2_mut(&format!("l{l}.{w}")));
                {
                    let mut bv_ = grads.view1_mut(&format!("l{l}.{b}"));
                    for row in dmat.rows() {
                        bv_ += &row;
                    }
                }
                dxn1 += &dmat.dot(&self.view2(&format!("l{l}.{w}")).t());
            }
            let dx_ln1 = layernorm_bwd(
                &dxn1,
                &tr.xhat1,
                &tr.istd1,
                self.view1(&format!("l{l}.ln1.g")),
                grads,
                &format!("l{l}.ln1.g"),
                &format!("l{l}.ln1.b"),
            );
            dx += &dx_ln1;
        }

        // embeddings
        let mut soft_grads: Vec<Option<Array1<f64>>> = vec![None; t];
        {
            let mut wte = grads.view2_mut("wte");
            for (pos, seg) in trace.items.iter().enumerate() {
                if let Segment::Hard(id) = seg {
                    let mut row = wte.row_mut(*id as usize);
                    row += &dx.row(pos);
                }
            }
        }
        {
            let mut wpe = grads.view2_mut("wpe");
            for pos in 0..t {
                let mut row = wpe.row_mut(pos);
                row += &dx.row(pos);
            }
        }
        for (pos, seg) in trace.items.iter().enumerate() {
            if matches!(seg, Segment::Soft(_)) {
                soft_grads[pos] = Some(dx.row(pos).to_owned());
            }
        }
        soft_grads
    }

    /// Log-probability of `target` (which must end with EOS) given `prompt`,
    /// summed over target positions.
    pub fn sequence_logprob(&self, prompt: &MixedInput, target: &[u32]) -> Result<f64> {
        let trace = self.score_trace(prompt, target)?;
        Ok(Self::logprob_from_trace(&trace, prompt.len(), target))
    }

    /// Forward trace over prompt ⧺ target, for scoring or scoring-with-grads.
    pub fn score_trace(&self, prompt: &MixedInput, target: &[u32]) -> Result<FwdTrace> {
        if target.is_empty() {
            return Err(Error::Argument("target must be nonempty".into()));
        }
        if *target.last().unwrap() != self.vocab.eos {
            return Err(Error::Argument("target must end with EOS".into()));
        }
        self.vocab.check_ids(target)?;
        let mut input = prompt.clone();
        input.extend_hard(target);
        self.forward(&input)
    }

    /// Sum of per-position gold log-probabilities from an existing trace.
    pub fn logprob_from_trace(trace: &FwdTrace, prompt_len: usize, target: &[u32]) -> f64 {
        let mut total = 0.0;
        for (j, &id) in target.iter().enumerate() {
            let row = trace.logits.row(prompt_len - 1 + j);
            total += log_softmax(row)[id as usize];
        }
        total
    }

    /// Log-probability of a continuation exactly as sampled: no terminator
    /// requirement, so truncated sequences are scored without an EOS factor.
    pub fn continuation_logprob(&self, prompt: &MixedInput, ids: &[u32]) -> Result<f64> {
        if ids.is_empty() {
            return Err(Error::Argument("continuation must be nonempty".into()));
        }
        self.vocab.check_ids(ids)?;
        let mut input = prompt.clone();
        input.extend_hard(ids);
        let trace = self.forward(&input)?;
        Ok(Self::logprob_from_trace(&trace, prompt.len(), ids))
    }

    /// BOS followed by the tokenized prompt text.
    pub fn encode_prompt(&self, text: &str) -> Result<MixedInput> {
        let mut p = MixedInput::from_ids(&[self.vocab.bos]);
        p.extend_hard(&self.vocab.encode(text)?);
        Ok(p)
    }

    /// Tokenized completion text terminated by EOS.
    pub fn encode_target(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.vocab.encode(text)?;
        ids.push(self.vocab.eos);
        Ok(ids)
    }

    /// Starts incremental decoding after a full prefix; returns the state and
    /// the next-token logits.
    pub fn prefill(&self, input: &MixedInput) -> Result<(DecodeState, Array1<f64>)> {
        let trace = self.forward(input)?;
        let k = trace.layers.iter().map(|l| l.k.clone()).collect();
        let v = trace.layers.iter().map(|l| l.v.clone()).collect();
        let logits = trace.logits.row(trace.len() - 1).to_owned();
        Ok((DecodeState { pos: input.len(), k, v }, logits))
    }

    /// Extends the decode state by one item and returns the new logits.
    pub fn step(&self, state: &mut DecodeState, item: &Segment) -> Result<Array1<f64>> {
        let d = self.arch.dim;
        let heads = self.arch.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = state.pos;
        if pos >= self.arch.max_context {
            return Err(Error::ContextLength { len: pos + 1, max: self.arch.max_context });
        }
        match item {
            Segment::Hard(id) => {
                if *id as usize >= self.vocab.len() {
                    return Err(Error::Vocab(format!("token id {id} out of range")));
                }
            }
            Segment::Soft(v) => {
                if v.len() != d {
                    return Err(Error::Shape(format!("soft segment has dim {}, model dim {d}", v.len())));
                }
            }
        }

        let mut x: Array1<f64> = match item {
            Segment::Hard(id) => self.view2("wte").row(*id as usize).to_owned(),
            Segment::Soft(v) => v.clone(),
        };
        x += &self.view2("wpe").row(pos);

        for l in 0..self.arch.layers {
            let xn1 = layernorm_row(
                x.view(),
                self.view1(&format!("l{l}.ln1.g")),
                self.view1(&format!("l{l}.ln1.b")),
            );
            let q = xn1.dot(&self.view2(&format!("l{l}.wq"))) + self.view1(&format!("l{l}.bq"));
            let k = xn1.dot(&self.view2(&format!("l{l}.wk"))) + self.view1(&format!("l{l}.bk"));
            let v = xn1.dot(&self.view2(&format!("l{l}.wv"))) + self.view1(&format!("l{l}.bv"));
            state.k[l].push_row(k.view()).expect("kv cache push");
            state.v[l].push_row(v.view()).expect("kv cache push");

            let n = pos + 1;
            let mut z = Array1::zeros(d);
            for h in 0..heads {
                let col = s![..n, h * dh..(h + 1) * dh];
                let kh = state.k[l].slice(col);
                let vh = state.v[l].slice(col);
                let qh = q.slice(s![h * dh..(h + 1) * dh]);
                let mut scores = kh.dot(&qh);
                scores *= scale;
                let a = crate::math::softmax(scores.view());
                let zh = a.dot(&vh);
                z.slice_mut(s![h * dh..(h + 1) * dh]).assign(&zh);
            }
            let attn = z.dot(&self.view2(&format!("l{l}.wo"))) + self.view1(&format!("l{l}.bo"));
            x += &attn;

            let xn2 = layernorm_row(
                x.view(),
                self.view1(&format!("l{l}.ln2.g")),
                self.view1(&format!("l{l}.ln2.b")),
            );
            let u = xn2.dot(&self.view2(&format!("l{l}.w1"))) + self.view1(&format!("l{l}.b1"));
            let h_act = u.mapv(gelu);
            let mlp = h_act.dot(&self.view2(&format!("l{l}.w2"))) + self.view1(&format!("l{l}.b2"));
            x += &mlp;
        }
        let fin = layernorm_row(x.view(), self.view1("lnf.g"), self.view1("lnf.b"));
        let logits = fin.dot(&self.view2("head.w")) + self.view1("head.b");
        state.pos += 1;
        Ok(logits)
    }

    // ---- checkpoint IO ----

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let meta = ModelMeta {
            format_version: CHECKPOINT_FORMAT,
            arch: self.arch.clone(),
            vocab: self.vocab.clone(),
            train_steps: self.train_steps,
            frozen: self.frozen,
        };
        let mut mf = std::fs::File::create(dir.join("meta.json"))?;
        serde_json::to_writer_pretty(&mut mf, &meta)?;
        mf.write_all(b"\n")?;

        let mut pf = std::io::BufWriter::new(std::fs::File::create(dir.join("params.bin"))?);
        pf.write_all(PARAMS_MAGIC)?;
        pf.write_all(&(self.data.len() as u64).to_le_bytes())?;
        for x in &self.data {
            pf.write_all(&x.to_le_bytes())?;
        }
        pf.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Model> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let mf = std::fs::File::open(&meta_path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", meta_path.display())))?;
        let meta: ModelMeta = serde_json::from_reader(mf)?;
        if meta.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                meta.format_version
            )));
        }
        meta.arch.validate()?;
        meta.vocab.validate()?;
        let layout = Arc::new(TensorLayout::build(&meta.arch, meta.vocab.len()));

        let mut pf = std::io::BufReader::new(std::fs::File::open(dir.join("params.bin"))?);
        let mut magic = [0u8; 8];
        pf.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Checkpoint("bad parameter archive magic".into()));
        }
        let mut lenb = [0u8; 8];
        pf.read_exact(&mut lenb)?;
        let n = u64::from_le_bytes(lenb) as usize;
        if n != layout.total_len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {n} does not match architecture ({} expected)",
                layout.total_len()
            )));
        }
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for x in &mut data {
            pf.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        Ok(Model {
            arch: meta.arch,
            vocab: meta.vocab,
            frozen: meta.frozen,
            train_steps: meta.train_steps,
            layout,
            data,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    format_version: u32,
    arch: ArchConfig,
    vocab: VocabSpec,
    train_steps: u64,
    frozen: bool,
}

// ---- shared kernels ----

fn affine(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn layernorm_fwd(
    x: &Array2<f64>,
    g: ArrayView1<f64>,
    b: ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let (t, d) = (x.nrows(), x.ncols());
    let mut xhat = Array2::zeros((t, d));
    let mut y = Array2::zeros((t, d));
    let mut istd = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        istd.push(inv);
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            xhat[(i, j)] = xh;
            y[(i, j)] = g[j] * xh + b[j];
        }
    }
    (y, xhat, istd)
}

/// Rebuilds the normalized output from a cached `xhat` (used in backward to
/// avoid caching both xhat and the post-scale output).
fn layernorm_reapply(xhat: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for j in 0..row.len() {
            row[j] = g[j] * row[j] + b[j];
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn layernorm_bwd(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    istd: &[f64],
    g: ArrayView1<f64>,
    grads: &mut Grads,
    g_name: &str,
    b_name: &str,
) -> Array2<f64> {
    let (t, d) = (dy.nrows(), dy.ncols());
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let dyr = dy.row(i);
        let xhr = xhat.row(i);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhr[j];
            dg[j] += dyr[j] * xhr[j];
            db[j] += dyr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[(i, j)] = istd[i] * (dxh - mean_dxhat - xhr[j] * mean_dxhat_xhat);
        }
    }
    {
        let mut gview = grads.view1_mut(g_name);
        for j in 0..d {
            gview[j] += dg[j];
        }
    }
    {
        let mut bview = grads.view1_mut(b_name);
        for j in 0..d {
            bview[j] += db[j];
        }
    }
    dx
}

/// Row-wise softmax over the causal (lower-triangular) part; masked entries
/// are exactly zero.
fn causal_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let t = scores.nrows();
    let mut a = Array2::zeros((t, t));
    for i in 0..t {
        let row = scores.row(i);
        let mut m = f64::NEG_INFINITY;
        for j in 0..=i {
            m = m.max(row[j]);
        }
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (row[j] - m).exp();
            a[(i, j)] = e;
            sum += e;
        }
        for j in 0..=i {
            a[(i, j)] /= sum;
        }
    }
    a
}

fn layernorm_row(x: ArrayView1<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let d = x.len();
    let mean = x.sum() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    Array1::from_iter((0..d).map(|j| g[j] * (x[j] - mean) * inv + b[j]))
}
