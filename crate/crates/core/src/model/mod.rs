//! Toy-scale encoder-decoder summarizers.
//!
//! Two architectures share one parameter store and one interface:
//!
//! * **baseline**: a single encoder over the tagged, concatenated input and
//!   a single decoder stack with a tied language-model head;
//! * **multihead**: each aspect sequence is encoded separately by the shared
//!   encoder; each aspect runs the shared lower decoder layers followed by
//!   its own top decoder layers, cross-attending only its own encoding. The
//!   per-aspect vocabulary distributions are mixed with weights
//!   `softmax(<y_k, w_gate>)`, where `y_k` is aspect `k`'s final hidden state.

pub mod autograd;
pub mod checkpoint;
pub mod gradcheck;
pub mod tensor;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aspect::{Aspect, NUM_ASPECTS};
use crate::bundle::AspectBundle;
use crate::tokenizer::{TokenId, BOS};
use autograd::{Tape, Var};
use tensor::{positional_table, softmax_f64, Layout, Mat, Scalar};

/// Number of top decoder layers owned by each aspect.
pub const ASPECT_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Baseline,
    Multihead,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Baseline => "baseline",
            Architecture::Multihead => "multihead",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Architecture::Baseline),
            "multihead" => Ok(Architecture::Multihead),
            other => Err(format!("unknown architecture `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_enc_layers: usize,
    /// Total decoder depth; in multihead mode the top [`ASPECT_LAYERS`] are per aspect.
    pub n_dec_layers: usize,
    pub n_heads: usize,
    /// Per-aspect source limit (the baseline stream gets `NUM_ASPECTS` times this).
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, vocab_size: usize) -> Self {
        Self {
            architecture,
            vocab_size,
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 4,
            n_heads: 4,
            max_src_len: 256,
            max_tgt_len: 300,
        }
    }

    /// Small double-precision-friendly shape used for gradient checks.
    pub fn tiny(architecture: Architecture, vocab_size: usize) -> Self {
        Self {
            architecture,
            vocab_size,
            d_model: 8,
            n_enc_layers: 1,
            n_dec_layers: 3,
            n_heads: 2,
            max_src_len: 32,
            max_tgt_len: 16,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.architecture == Architecture::Multihead && self.n_dec_layers < ASPECT_LAYERS {
            return bad("multihead mode needs at least two decoder layers");
        }
        if self.n_dec_layers == 0 {
            return bad("at least one decoder layer is required");
        }
        if self.max_src_len < 2 || self.max_tgt_len < 1 {
            return bad("length limits too small");
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS {
            return bad("vocabulary must contain content tokens");
        }
        Ok(())
    }

    fn positions(&self) -> usize {
        (self.max_src_len * NUM_ASPECTS).max(self.max_tgt_len + 1)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input bundle has no text for any aspect")]
    EmptyBundle,
    #[error("{what} length {len} exceeds the limit of {limit}")]
    TooLong {
        what: &'static str,
        len: usize,
        limit: usize,
    },
    #[error("decoder prefix must start with BOS")]
    MissingBos,
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("aspect label {0} has no matching aspect")]
    UnknownAspectLabel(usize),
    #[error("target must be non-empty")]
    EmptyTarget,
    #[error("this operation requires the {0} architecture")]
    Unsupported(Architecture),
    #[error("gate override must have {expected} weights summing to 1")]
    BadGate { expected: usize },
    #[error("parameter tensor mismatch: {0}")]
    Params(String),
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Mat<T>>,
}

impl<T: Scalar> ModelParams<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn add(&mut self, name: String, m: Mat<T>) -> usize {
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross_attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct AspectTop {
    layers: Vec<DecLayer>,
    ln_out: Norm,
}

#[derive(Debug, Clone)]
enum Heads {
    Single {
        decoder: Vec<DecLayer>,
        ln_out: Norm,
    },
    Mixture {
        lower: Vec<DecLayer>,
        tops: Vec<AspectTop>,
        gate: usize,
    },
}

#[derive(Debug, Clone)]
struct ParamLayout {
    embed: usize,
    encoder: Vec<EncLayer>,
    enc_ln: Norm,
    heads: Heads,
}

struct Builder<'a, T> {
    params: ModelParams<T>,
    rng: &'a mut ChaCha8Rng,
    d: usize,
}

impl<T: Scalar> Builder<'_, T> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols)
            .map(|_| T::of(dist.sample(&mut *self.rng)))
            .collect();
        self.params.add(name, Mat::from_vec(rows, cols, data))
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> usize {
        self.params.add(name, Mat::filled(rows, cols, T::of(v)))
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, gain: f64) -> Linear {
        Linear {
            w: self.normal(format!("{name}.w"), inp, out, gain / (inp as f64).sqrt()),
            b: self.constant(format!("{name}.b"), 1, out, 0.0),
        }
    }

    fn norm(&mut self, name: &str) -> Norm {
        Norm {
            gain: self.constant(format!("{name}.gain"), 1, self.d, 1.0),
            bias: self.constant(format!("{name}.bias"), 1, self.d, 0.0),
        }
    }

    fn attn(&mut self, name: &str) -> Attn {
        let d = self.d;
        Attn {
            q: self.linear(&format!("{name}.q"), d, d, 1.0),
            k: self.linear(&format!("{name}.k"), d, d, 1.0),
            v: self.linear(&format!("{name}.v"), d, d, 1.0),
            o: self.linear(&format!("{name}.o"), d, d, 0.5),
        }
    }

    fn ffn(&mut self, name: &str) -> Ffn {
        let d = self.d;
        Ffn {
            up: self.linear(&format!("{name}.up"), d, 4 * d, 1.0),
            down: self.linear(&format!("{name}.down"), 4 * d, d, 0.5),
        }
    }

    fn enc_layer(&mut self, name: &str) -> EncLayer {
        EncLayer {
            ln_attn: self.norm(&format!("{name}.ln_attn")),
            attn: self.attn(&format!("{name}.attn")),
            ln_ffn: self.norm(&format!("{name}.ln_ffn")),
            ffn: self.ffn(&format!("{name}.ffn")),
        }
    }

    fn dec_layer(&mut self, name: &str) -> DecLayer {
        DecLayer {
            ln_self: self.norm(&format!("{name}.ln_self")),
            self_attn: self.attn(&format!("{name}.self_attn")),
            ln_cross: self.norm(&format!("{name}.ln_cross")),
            cross_attn: self.attn(&format!("{name}.cross_attn")),
            ln_ffn: self.norm(&format!("{name}.ln_ffn")),
            ffn: self.ffn(&format!("{name}.ffn")),
        }
    }
}

fn build_layout<T: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> (ModelParams<T>, ParamLayout) {
    let d = config.d_model;
    let mut b = Builder {
        params: ModelParams::new(),
        rng,
        d,
    };
    let embed = b.normal("embed".into(), config.vocab_size, d, 1.0 / (d as f64).sqrt());
    let encoder = (0..config.n_enc_layers)
        .map(|i| b.enc_layer(&format!("enc.{i}")))
        .collect();
    let enc_ln = b.norm("enc.ln_out");
    let heads = match config.architecture {
        Architecture::Baseline => Heads::Single {
            decoder: (0..config.n_dec_layers)
                .map(|i| b.dec_layer(&format!("dec.{i}")))
                .collect(),
            ln_out: b.norm("dec.ln_out"),
        },
        Architecture::Multihead => {
            let n_lower = config.n_dec_layers - ASPECT_LAYERS;
            let lower = (0..n_lower)
                .map(|i| b.dec_layer(&format!("dec.{i}")))
                .collect();
            let tops = Aspect::ALL
                .iter()
                .map(|a| AspectTop {
                    layers: (n_lower..config.n_dec_layers)
                        .map(|i| b.dec_layer(&format!("{}.dec.{i}", a.name())))
                        .collect(),
                    ln_out: b.norm(&format!("{}.ln_out", a.name())),
                })
                .collect();
            let gate = b.normal("gate".into(), d, 1, 0.02);
            Heads::Mixture { lower, tops, gate }
        }
    };
    (
        b.params,
        ParamLayout {
            embed,
            encoder,
            enc_ln,
            heads,
        },
    )
}

/// Encoder outputs: one memory per aspect (multihead) or a single one (baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct Encodings<T> {
    pub memories: Vec<Mat<T>>,
}

/// Everything one decoder step exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    /// Final hidden state per aspect (empty for the baseline).
    pub aspect_states: Vec<Vec<f64>>,
    /// Vocabulary distribution per aspect head (empty for the baseline).
    pub aspect_probs: Vec<Vec<f64>>,
    /// `<y_k, w_gate>` per aspect (empty for the baseline).
    pub gate_logits: Vec<f64>,
    /// Mixture weights (empty for the baseline).
    pub gate: Vec<f64>,
    /// Output distribution.
    pub probs: Vec<f64>,
}

/// `sum_k gate[k] * probs[k]`.
pub fn mix_distributions(probs: &[Vec<f64>], gate: &[f64]) -> Vec<f64> {
    assert_eq!(probs.len(), gate.len());
    let v = probs.first().map_or(0, Vec::len);
    let mut out = vec![0.0; v];
    for (p, &z) in probs.iter().zip(gate) {
        for (o, &x) in out.iter_mut().zip(p) {
            *o += z * x;
        }
    }
    out
}

/// A training or scoring example as token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedExample {
    pub bundle: AspectBundle,
    /// Target tokens, ending with EOS; BOS is implied.
    pub target: Vec<TokenId>,
    /// Aspect label per target token (multihead supervision).
    pub labels: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub nll: f64,
    pub aux: f64,
    pub token_nll: Vec<f64>,
}

/// A summarizer of either architecture.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ModelParams<T>,
    layout: ParamLayout,
    positions: Mat<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_layout(&config, &mut rng);
        let positions = positional_table(config.positions(), config.d_model);
        Ok(Self {
            config,
            params,
            layout,
            positions,
        })
    }

    /// Rebuilds a model around existing parameter tensors.
    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self, ModelError> {
        let template: Model<T> = Model::new(config, 0)?;
        if template.params.names != params.names {
            return Err(ModelError::Params("tensor names differ from the config layout".into()));
        }
        for (i, (a, b)) in template.params.tensors.iter().zip(&params.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(ModelError::Params(format!(
                    "{}: expected {:?}, found {:?}",
                    params.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self {
            params,
            ..template
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            positions: self.positions.cast(),
        }
    }

    /// Index of the gate vector, if this is a multihead model.
    pub fn gate_param(&self) -> Option<usize> {
        match &self.layout.heads {
            Heads::Mixture { gate, .. } => Some(*gate),
            Heads::Single { .. } => None,
        }
    }

    /// Parameter indices owned by each aspect's top layers (multihead only).
    pub fn aspect_param_groups(&self) -> Vec<Vec<usize>> {
        match &self.layout.heads {
            Heads::Single { .. } => Vec::new(),
            Heads::Mixture { tops, .. } => tops
                .iter()
                .map(|a| {
                    let mut ids = Vec::new();
                    for l in &a.layers {
                        ids.extend(dec_layer_params(l));
                    }
                    ids.extend([a.ln_out.gain, a.ln_out.bias]);
                    ids
                })
                .collect(),
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(ModelError::TokenOutOfRange(t)),
            None => Ok(()),
        }
    }

    fn source_sequences(&self, bundle: &AspectBundle) -> Result<Vec<Vec<TokenId>>, ModelError> {
        if bundle.is_empty() {
            return Err(ModelError::EmptyBundle);
        }
        let seqs: Vec<Vec<TokenId>> = match self.config.architecture {
            Architecture::Multihead => Aspect::ALL
                .iter()
                .map(|&a| bundle.sequence(a).to_vec())
                .collect(),
            Architecture::Baseline => {
                vec![bundle.single_stream(self.config.max_src_len * NUM_ASPECTS)]
            }
        };
        let limit = match self.config.architecture {
            Architecture::Multihead => self.config.max_src_len,
            Architecture::Baseline => self.config.max_src_len * NUM_ASPECTS,
        };
        for s in &seqs {
            if s.len() > limit {
                return Err(ModelError::TooLong {
                    what: "source",
                    len: s.len(),
                    limit,
                });
            }
            self.check_tokens(s)?;
        }
        Ok(seqs)
    }

    fn embed(&self, t: &mut Tape<'_, T>, tokens: &[TokenId]) -> Var {
        let table = t.param(self.layout.embed);
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let x = t.gather(table, &ids);
        let x = t.scale(x, T::of((self.config.d_model as f64).sqrt()));
        let mut pe = Mat::zeros(tokens.len(), self.config.d_model);
        pe.data
            .copy_from_slice(&self.positions.data[..tokens.len() * self.config.d_model]);
        let pe = t.constant(pe);
        t.add(x, pe)
    }

    fn linear(&self, t: &mut Tape<'_, T>, x: Var, l: Linear) -> Var {
        let w = t.param(l.w);
        let b = t.param(l.b);
        let y = t.matmul(x, Layout::Normal, w, Layout::Normal);
        t.add_row(y, b)
    }

    fn norm(&self, t: &mut Tape<'_, T>, x: Var, n: Norm) -> Var {
        let g = t.param(n.gain);
        let b = t.param(n.bias);
        t.layer_norm(x, g, b)
    }

    fn attend(&self, t: &mut Tape<'_, T>, a: Attn, x: Var, mem: Var, causal: bool) -> Var {
        let q = self.linear(t, x, a.q);
        let k = self.linear(t, mem, a.k);
        let v = self.linear(t, mem, a.v);
        let h = t.attention(q, k, v, self.config.n_heads, causal);
        self.linear(t, h, a.o)
    }

    fn feed_forward(&self, t: &mut Tape<'_, T>, f: Ffn, x: Var) -> Var {
        let h = self.linear(t, x, f.up);
        let h = t.gelu(h);
        self.linear(t, h, f.down)
    }

    fn encode_on(&self, t: &mut Tape<'_, T>, tokens: &[TokenId]) -> Var {
        let mut x = self.embed(t, tokens);
        for l in &self.layout.encoder {
            let h = self.norm(t, x, l.ln_attn);
            let a = self.attend(t, l.attn, h, h, false);
            x = t.add(x, a);
            let h = self.norm(t, x, l.ln_ffn);
            let f = self.feed_forward(t, l.ffn, h);
            x = t.add(x, f);
        }
        self.norm(t, x, self.layout.enc_ln)
    }

    fn dec_layer(&self, t: &mut Tape<'_, T>, l: &DecLayer, mut x: Var, mem: Var) -> Var {
        let h = self.norm(t, x, l.ln_self);
        let a = self.attend(t, l.self_attn, h, h, true);
        x = t.add(x, a);
        let h = self.norm(t, x, l.ln_cross);
        let c = self.attend(t, l.cross_attn, h, mem, false);
        x = t.add(x, c);
        let h = self.norm(t, x, l.ln_ffn);
        let f = self.feed_forward(t, l.ffn, h);
        t.add(x, f)
    }

    /// Final hidden states `[prefix_len, d]`: one per aspect (multihead) or one.
    fn decoder_states(&self, t: &mut Tape<'_, T>, prefix: &[TokenId], memories: &[Var]) -> Vec<Var> {
        let x0 = self.embed(t, prefix);
        match &self.layout.heads {
            Heads::Single { decoder, ln_out } => {
                let mut x = x0;
                for l in decoder {
                    x = self.dec_layer(t, l, x, memories[0]);
                }
                vec![self.norm(t, x, *ln_out)]
            }
            Heads::Mixture { lower, tops, .. } => tops
                .iter()
                .zip(memories)
                .map(|(top, &mem)| {
                    let mut x = x0;
                    for l in lower.iter().chain(&top.layers) {
                        x = self.dec_layer(t, l, x, mem);
                    }
                    self.norm(t, x, top.ln_out)
                })
                .collect(),
        }
    }

    /// Encodes each source sequence on its own tape.
    pub fn encode(&self, bundle: &AspectBundle) -> Result<Encodings<T>, ModelError> {
        let seqs = self.source_sequences(bundle)?;
        let memories = seqs
            .iter()
            .map(|s| {
                let mut t = Tape::new(&self.params.tensors);
                let v = self.encode_on(&mut t, s);
                t.value(v).clone()
            })
            .collect();
        Ok(Encodings { memories })
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<(), ModelError> {
        if prefix.first() != Some(&BOS) {
            return Err(ModelError::MissingBos);
        }
        if prefix.len() > self.config.max_tgt_len {
            return Err(ModelError::TooLong {
                what: "decoder prefix",
                len: prefix.len(),
                limit: self.config.max_tgt_len,
            });
        }
        self.check_tokens(prefix)
    }

    pub fn decode_step(&self, prefix: &[TokenId], enc: &Encodings<T>) -> Result<StepOutput, ModelError> {
        self.decode_step_with_gate(prefix, enc, None)
    }

    /// One decoder step; `gate_override` replaces the mixture weights.
    pub fn decode_step_with_gate(
        &self,
        prefix: &[TokenId],
        enc: &Encodings<T>,
        gate_override: Option<&[f64]>,
    ) -> Result<StepOutput, ModelError> {
        self.check_prefix(prefix)?;
        let mut t = Tape::new(&self.params.tensors);
        let memories: Vec<Var> = enc.memories.iter().map(|m| t.constant(m.clone())).collect();
        let states = self.decoder_states(&mut t, prefix, &memories);
        let last = prefix.len() - 1;
        let table = t.param(self.layout.embed);

        let mut aspect_states = Vec::new();
        let mut aspect_probs = Vec::new();
        let mut logits_out = Vec::new();
        for &h in &states {
            let y = t.gather(h, &[last]);
            let logits = t.matmul(y, Layout::Normal, table, Layout::Transposed);
            let logits: Vec<f64> = t.value(logits).data.iter().map(|x| x.f64()).collect();
            aspect_probs.push(softmax_f64(&logits));
            aspect_states.push(t.value(y).data.iter().map(|x| x.f64()).collect::<Vec<f64>>());
            logits_out.push(y);
        }
        match self.gate_param() {
            None => Ok(StepOutput {
                aspect_states: Vec::new(),
                probs: aspect_probs.pop().expect("one head"),
                aspect_probs: Vec::new(),
                gate_logits: Vec::new(),
                gate: Vec::new(),
            }),
            Some(gate) => {
                let w = t.param(gate);
                let gate_logits: Vec<f64> = logits_out
                    .iter()
                    .map(|&y| {
                        let g = t.matmul(y, Layout::Normal, w, Layout::Normal);
                        t.value(g).data[0].f64()
                    })
                    .collect();
                let z = match gate_override {
                    Some(z) => {
                        let ok = z.len() == NUM_ASPECTS
                            && z.iter().all(|&x| x >= 0.0)
                            && (z.iter().sum::<f64>() - 1.0).abs() < 1e-9;
                        if !ok {
                            return Err(ModelError::BadGate {
                                expected: NUM_ASPECTS,
                            });
                        }
                        z.to_vec()
                    }
                    None => softmax_f64(&gate_logits),
                };
                let probs = mix_distributions(&aspect_probs, &z);
                Ok(StepOutput {
                    aspect_states,
                    aspect_probs,
                    gate_logits,
                    gate: z,
                    probs,
                })
            }
        }
    }

    fn check_example(&self, ex: &TokenizedExample) -> Result<(), ModelError> {
        if ex.target.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        if ex.target.len() > self.config.max_tgt_len {
            return Err(ModelError::TooLong {
                what: "target",
                len: ex.target.len(),
                limit: self.config.max_tgt_len,
            });
        }
        self.check_tokens(&ex.target)?;
        if let Some(&l) = ex.labels.iter().flatten().find(|&&l| l >= NUM_ASPECTS) {
            return Err(ModelError::UnknownAspectLabel(l));
        }
        Ok(())
    }

    /// Builds the full teacher-forced loss graph; returns the loss node and
    /// the per-token log-likelihood column.
    fn loss_graph(
        &self,
        t: &mut Tape<'_, T>,
        ex: &TokenizedExample,
        lambda: f64,
    ) -> Result<(Var, Var, Var, Var), ModelError> {
        self.check_example(ex)?;
        let seqs = self.source_sequences(&ex.bundle)?;
        let memories: Vec<Var> = seqs.iter().map(|s| self.encode_on(t, s)).collect();
        let n = ex.target.len();
        let mut prefix = Vec::with_capacity(n);
        prefix.push(BOS);
        prefix.extend_from_slice(&ex.target[..n - 1]);
        let states = self.decoder_states(t, &prefix, &memories);
        let table = t.param(self.layout.embed);
        let targets: Vec<usize> = ex.target.iter().map(|&x| x as usize).collect();
        let inv_n = T::of(1.0 / n as f64);

        let picked: Vec<Var> = states
            .iter()
            .map(|&h| {
                let logits = t.matmul(h, Layout::Normal, table, Layout::Transposed);
                let lp = t.log_softmax_rows(logits);
                t.pick_cols(lp, &targets)
            })
            .collect();

        match self.gate_param() {
            None => {
                let token_ll = picked[0];
                let nll = t.sum_scaled(token_ll, -inv_n);
                let zero = t.constant(Mat::zeros(1, 1));
                Ok((nll, nll, zero, token_ll))
            }
            Some(gate) => {
                let w = t.param(gate);
                let logits: Vec<Var> = states
                    .iter()
                    .map(|&h| t.matmul(h, Layout::Normal, w, Layout::Normal))
                    .collect();
                let gate_logits = t.concat_cols(&logits);
                let log_z = t.log_softmax_rows(gate_logits);
                let per_aspect = t.concat_cols(&picked);
                let joint = t.add(log_z, per_aspect);
                let token_ll = t.log_sum_exp_rows(joint);
                let nll = t.sum_scaled(token_ll, -inv_n);
                let labelled: Vec<(usize, usize)> = ex
                    .labels
                    .iter()
                    .enumerate()
                    .filter_map(|(i, l)| l.map(|l| (i, l)))
                    .collect();
                let aux = if labelled.is_empty() || lambda == 0.0 {
                    t.constant(Mat::zeros(1, 1))
                } else {
                    t.select_sum(log_z, &labelled, T::of(-1.0 / labelled.len() as f64))
                };
                let weighted = t.scale(aux, T::of(lambda));
                let loss = t.add(nll, weighted);
                Ok((loss, nll, aux, token_ll))
            }
        }
    }

    /// Mean teacher-forced NLL over target tokens, plus `lambda` times the mean
    /// cross-entropy of the mixture weights against the tagged aspect labels.
    pub fn forward_loss(&self, ex: &TokenizedExample, lambda: f64) -> Result<LossOutput, ModelError> {
        let mut t = Tape::new(&self.params.tensors);
        let (loss, nll, aux, ll) = self.loss_graph(&mut t, ex, lambda)?;
        Ok(LossOutput {
            loss: t.scalar(loss).f64(),
            nll: t.scalar(nll).f64(),
            aux: t.scalar(aux).f64(),
            token_nll: t.value(ll).data.iter().map(|x| -x.f64()).collect(),
        })
    }

    /// Loss and its gradient with respect to every parameter tensor.
    pub fn loss_and_grad(
        &self,
        ex: &TokenizedExample,
        lambda: f64,
    ) -> Result<(LossOutput, Vec<Mat<T>>), ModelError> {
        let mut t = Tape::new(&self.params.tensors);
        let (loss, nll, aux, ll) = self.loss_graph(&mut t, ex, lambda)?;
        let out = LossOutput {
            loss: t.scalar(loss).f64(),
            nll: t.scalar(nll).f64(),
            aux: t.scalar(aux).f64(),
            token_nll: t.value(ll).data.iter().map(|x| -x.f64()).collect(),
        };
        let grads = t
            .backward(loss)
            .into_iter()
            .zip(&self.params.tensors)
            .map(|(g, p)| g.unwrap_or_else(|| Mat::zeros(p.rows, p.cols)))
            .collect();
        Ok((out, grads))
    }
}

fn dec_layer_params(l: &DecLayer) -> Vec<usize> {
    let attn = |a: &Attn| [a.q, a.k, a.v, a.o].into_iter().flat_map(|x| [x.w, x.b]);
    let norm = |n: &Norm| [n.gain, n.bias];
    let mut ids = Vec::new();
    ids.extend(norm(&l.ln_self));
    ids.extend(attn(&l.self_attn));
    ids.extend(norm(&l.ln_cross));
    ids.extend(attn(&l.cross_attn));
    ids.extend(norm(&l.ln_ffn));
    ids.extend([l.ffn.up.w, l.ffn.up.b, l.ffn.down.w, l.ffn.down.b]);
    ids
}
