//! Small post-norm transformer encoder with per-layer key/value prompts, a
//! binary classification head on the first (`[CLS]`) position and a
//! masked-token head for self-supervised pretraining.

mod attention;
mod prompts;

pub use attention::{attention_with_prompts, multi_head_attention, AttentionOutput, LayerPrompt};
pub use prompts::{PromptSet, KEY_NAME as PROMPT_KEY, VALUE_NAME as PROMPT_VALUE};

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Metadata};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};
pub(crate) use attention::linear;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;

/// Initialization scale of weights, embeddings and prompts.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            other => Err(Error::config("activation", format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gelu => "gelu",
            Self::Relu => "relu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            vocab_size: 512,
            max_len: 48,
            activation: Activation::Gelu,
            dropout: 0.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config("heads", "d_model must be divisible by heads"));
        }
        if self.d_ff == 0 {
            return Err(Error::config("d_ff", "must be positive"));
        }
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size", "must leave room for 4 special tokens"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::config("norm_eps", "must be positive"));
        }
        Ok(())
    }

    /// Every parameter of the model in registration order, with its shape.
    /// Linear weights are stored `[in, out]`.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![v, d]),
            ("embeddings.position".to_string(), vec![self.max_len, d]),
            ("embeddings.norm.gain".to_string(), vec![d]),
            ("embeddings.norm.bias".to_string(), vec![d]),
        ];
        for i in 0..self.layers {
            let l = |s: &str| format!("layer.{i}.{s}");
            for p in ["q", "k", "v", "o"] {
                out.push((l(&format!("attn.w{p}")), vec![d, d]));
                out.push((l(&format!("attn.b{p}")), vec![d]));
            }
            out.push((l("attn_norm.gain"), vec![d]));
            out.push((l("attn_norm.bias"), vec![d]));
            out.push((l("ffn.w1"), vec![d, f]));
            out.push((l("ffn.b1"), vec![f]));
            out.push((l("ffn.w2"), vec![f, d]));
            out.push((l("ffn.b2"), vec![d]));
            out.push((l("ffn_norm.gain"), vec![d]));
            out.push((l("ffn_norm.bias"), vec![d]));
        }
        // masked-token head: transform + norm, decoder tied to the token embedding
        out.push(("mlm.transform.weight".to_string(), vec![d, d]));
        out.push(("mlm.transform.bias".to_string(), vec![d]));
        out.push(("mlm.norm.gain".to_string(), vec![d]));
        out.push(("mlm.norm.bias".to_string(), vec![d]));
        out.push(("mlm.bias".to_string(), vec![v]));
        out.push(("classifier.weight".to_string(), vec![d, 1]));
        out.push(("classifier.bias".to_string(), vec![1]));
        out
    }

    pub fn to_metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.insert("layers".into(), self.layers.to_string());
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("d_ff".into(), self.d_ff.to_string());
        m.insert("vocab_size".into(), self.vocab_size.to_string());
        m.insert("max_len".into(), self.max_len.to_string());
        m.insert("activation".into(), self.activation.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("norm_eps".into(), self.norm_eps.to_string());
        m
    }

    pub fn from_metadata(m: &Metadata) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &Metadata, k: &str) -> Result<T> {
            m.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is malformed")))
        }
        let c = Self {
            layers: get(m, "layers")?,
            d_model: get(m, "d_model")?,
            heads: get(m, "heads")?,
            d_ff: get(m, "d_ff")?,
            vocab_size: get(m, "vocab_size")?,
            max_len: get(m, "max_len")?,
            activation: m
                .get("activation")
                .ok_or_else(|| Error::Checkpoint("metadata lacks `activation`".into()))?
                .parse()?,
            dropout: get(m, "dropout")?,
            norm_eps: get(m, "norm_eps")?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// True for parameters of the pretrained language model (everything except
/// the task head).
pub fn is_backbone(name: &str) -> bool {
    !name.starts_with("classifier.")
}

/// Token ids of a padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    /// `false` exactly on padding positions.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    /// Original token at each masked position (pretraining only).
    pub mlm_targets: Option<Vec<Option<u32>>>,
}

impl TokenBatch {
    /// Pads sequences to the longest one with `[PAD]`.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD_ID, seq - s.len()));
            mask.extend(std::iter::repeat_n(false, seq - s.len()));
        }
        Self {
            ids,
            mask,
            batch: seqs.len(),
            seq,
            mlm_targets: None,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.seq > config.max_len {
            return Err(Error::SequenceTooLong {
                len: self.seq,
                max: config.max_len,
            });
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: config.vocab_size,
            });
        }
        Ok(())
    }
}

/// Runs the embeddings and every encoder block; returns `h_L` as `[B, s, d]`.
/// Layer `i` injects `prompts[i]` when prompts are given.
pub fn encode_on<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &Bound,
    batch: &TokenBatch,
    prompts: Option<&[LayerPrompt]>,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    encode_traced(tape, config, bound, batch, prompts, dropout_rng, None)
}

/// `encode_on` that also pushes each layer's `[B, H, s, pl + s]` attention
/// weights into `trace`.
fn encode_traced<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &Bound,
    batch: &TokenBatch,
    prompts: Option<&[LayerPrompt]>,
    mut dropout_rng: Option<&mut dyn RngCore>,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    batch.validate(config)?;
    if let Some(p) = prompts {
        if p.len() != config.layers {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: vec![p.len()],
                right: vec![config.layers],
            });
        }
    }
    let (b, s, d) = (batch.batch, batch.seq, config.d_model);
    if b == 0 || s == 0 {
        return Err(Error::EmptyTensor { op: "encode" });
    }
    let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let tok = tape.gather_rows(bound.get("embeddings.token")?, &ids)?;
    let pos = tape.gather_rows(bound.get("embeddings.position")?, &positions)?;
    let x = tape.add(tok, pos)?;
    let x = tape.reshape(x, &[b, s, d])?;
    let mut h = tape.layer_norm(
        x,
        bound.get("embeddings.norm.gain")?,
        bound.get("embeddings.norm.bias")?,
        config.norm_eps,
    )?;
    let mut drop = |tape: &mut Tape<T>, x: Var| match dropout_rng.as_deref_mut() {
        Some(rng) if config.dropout > 0.0 => tape.dropout(x, config.dropout, rng),
        _ => x,
    };
    h = drop(tape, h);
    for i in 0..config.layers {
        let p = |name: &str| bound.get(&format!("layer.{i}.{name}"));
        let attn = attention_with_prompts(tape, config, bound, i, h, prompts.map(|p| &p[i]), &batch.mask)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(attn.weights);
        }
        let a = drop(tape, attn.output);
        let r = tape.add(h, a)?;
        let h1 = tape.layer_norm(r, p("attn_norm.gain")?, p("attn_norm.bias")?, config.norm_eps)?;
        let f = linear(tape, h1, p("ffn.w1")?, p("ffn.b1")?)?;
        let f = match config.activation {
            Activation::Gelu => tape.gelu(f),
            Activation::Relu => tape.relu(f),
        };
        let f = linear(tape, f, p("ffn.w2")?, p("ffn.b2")?)?;
        let f = drop(tape, f);
        let r = tape.add(h1, f)?;
        h = tape.layer_norm(r, p("ffn_norm.gain")?, p("ffn_norm.bias")?, config.norm_eps)?;
    }
    Ok(h)
}

/// The `[CLS]` (first-position) rows of `hidden` as `[B, d]`.
pub fn cls_rows_on<T: Real>(tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
    let s = tape.shape(hidden).to_vec();
    let (b, len, d) = (s[0], s[1], s[2]);
    let flat = tape.reshape(hidden, &[b * len, d])?;
    let cls_rows: Vec<usize> = (0..b).map(|i| i * len).collect();
    tape.gather_rows(flat, &cls_rows)
}

/// Classifier logits `[B]` from the `[CLS]` (first) position of `hidden`.
pub fn classifier_logits_on<T: Real>(tape: &mut Tape<T>, bound: &Bound, hidden: Var) -> Result<Var> {
    let b = tape.shape(hidden)[0];
    let cls = cls_rows_on(tape, hidden)?;
    let logits = linear(
        tape,
        cls,
        bound.get("classifier.weight")?,
        bound.get("classifier.bias")?,
    )?;
    tape.reshape(logits, &[b])
}

/// Mean cross-entropy of the masked-token head over the masked positions.
pub fn mlm_loss_on<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &Bound,
    batch: &TokenBatch,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let targets = batch.mlm_targets.as_ref().ok_or(Error::NoMaskedPositions)?;
    let (rows, labels): (Vec<usize>, Vec<usize>) = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t as usize)))
        .unzip();
    if rows.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let hidden = encode_on(tape, config, bound, batch, None, dropout_rng)?;
    let flat = tape.reshape(hidden, &[batch.batch * batch.seq, config.d_model])?;
    let picked = tape.gather_rows(flat, &rows)?;
    let t = linear(
        tape,
        picked,
        bound.get("mlm.transform.weight")?,
        bound.get("mlm.transform.bias")?,
    )?;
    let t = tape.gelu(t);
    let t = tape.layer_norm(
        t,
        bound.get("mlm.norm.gain")?,
        bound.get("mlm.norm.bias")?,
        config.norm_eps,
    )?;
    let logits = tape.matmul_nt(t, bound.get("embeddings.token")?)?;
    let logits = tape.add_bias(logits, bound.get("mlm.bias")?)?;
    tape.cross_entropy(logits, &labels)
}

/// Binds a prompt set's `[L, pl, d]` key/value tensors and slices them per layer.
pub fn layer_prompts_on<T: Real>(tape: &mut Tape<T>, key: Var, value: Var) -> Result<Vec<LayerPrompt>> {
    let s = tape.shape(key).to_vec();
    if s.len() != 3 || tape.shape(value) != s.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "prompts",
            left: s,
            right: tape.shape(value).to_vec(),
        });
    }
    let (layers, pl, d) = (s[0], s[1], s[2]);
    (0..layers)
        .map(|i| {
            let k = tape.narrow(key, i, 1)?;
            let k = tape.reshape(k, &[pl, d])?;
            let v = tape.narrow(value, i, 1)?;
            let v = tape.reshape(v, &[pl, d])?;
            Ok(LayerPrompt { key: k, value: v })
        })
        .collect()
}

/// The encoder's parameters together with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParamStore,
}

impl EncoderModel {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone_digest(&self) -> String {
        self.params.digest_where(is_backbone)
    }

    /// Fresh classifier head: weight ~ Normal(0, 0.02), bias 0.
    pub fn reset_classifier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        let trainable = self
            .params
            .get("classifier.weight")
            .map(Tensor::is_trainable)
            .unwrap_or(true);
        let mut w = Tensor::randn(&[d, 1], INIT_STD, &mut rng);
        let mut b = Tensor::zeros(&[1]);
        w.set_trainable(trainable);
        b.set_trainable(trainable);
        self.params.insert("classifier.weight", w);
        self.params.insert("classifier.bias", b);
    }

    fn prompt_bind<T: Real>(tape: &mut Tape<T>, prompts: Option<&PromptSet>) -> Result<Option<Vec<LayerPrompt>>> {
        prompts
            .map(|p| {
                let k = tape.param(&p.key, false);
                let v = tape.param(&p.value, false);
                layer_prompts_on(tape, k, v)
            })
            .transpose()
    }

    /// `h_L` for a batch, optionally with prompts injected.
    pub fn encode(&self, batch: &TokenBatch, prompts: Option<&PromptSet>) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let lp = Self::prompt_bind(&mut tape, prompts)?;
        let h = encode_on(&mut tape, &self.config, &bound, batch, lp.as_deref(), None)?;
        Ok(tape.to_tensor(h))
    }

    pub fn logits(&self, batch: &TokenBatch, prompts: Option<&PromptSet>) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let lp = Self::prompt_bind(&mut tape, prompts)?;
        let h = encode_on(&mut tape, &self.config, &bound, batch, lp.as_deref(), None)?;
        let logits = classifier_logits_on(&mut tape, &bound, h)?;
        Ok(tape.value(logits).to_vec())
    }

    /// Attention weights of every layer, each `[B, H, s, pl + s]` with the
    /// prompt columns first.
    pub fn attention_maps(&self, batch: &TokenBatch, prompts: Option<&PromptSet>) -> Result<Vec<Tensor>> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let lp = Self::prompt_bind(&mut tape, prompts)?;
        let mut trace = Vec::new();
        encode_traced(
            &mut tape,
            &self.config,
            &bound,
            batch,
            lp.as_deref(),
            None,
            Some(&mut trace),
        )?;
        Ok(trace.into_iter().map(|w| tape.to_tensor(w)).collect())
    }

    /// Positive-class probabilities `σ(logit)`.
    pub fn classify(&self, batch: &TokenBatch, prompts: Option<&PromptSet>) -> Result<Vec<f64>> {
        Ok(self
            .logits(batch, prompts)?
            .into_iter()
            .map(|l| sigmoid(l as f64))
            .collect())
    }

    pub fn mlm_loss(&self, batch: &TokenBatch) -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let bound = self.params.bind(&mut tape, false);
        let loss = mlm_loss_on(&mut tape, &self.config, &bound, batch, None)?;
        Ok(tape.scalar(loss))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.config.to_metadata(), &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, params) = checkpoint::load(path)?;
        Self::from_parts(ModelConfig::from_metadata(&meta)?, params)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
