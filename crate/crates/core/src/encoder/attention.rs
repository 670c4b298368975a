use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::{Real, Tape, Var};

use super::ModelConfig;

/// Key and value prompt tokens for one layer, each `[pl, d_model]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerPrompt {
    pub key: Var,
    pub value: Var,
}

/// Intermediate results of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[B, s, d]` after the output projection.
    pub output: Var,
    /// `[B, s, d]` attention-weighted values, before the output projection.
    pub mixture: Var,
    /// `[B, H, s, pl + s]`; prompt columns come first.
    pub weights: Var,
}

pub(crate) fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// `[B, s, d] -> [B, H, s, d/H]`
fn split_heads<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, len, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, len, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[pl, d] -> [B, H, pl, d/H]`
fn prompt_heads<T: Real>(tape: &mut Tape<T>, p: Var, heads: usize, batch: usize) -> Result<Var> {
    let s = tape.shape(p).to_vec();
    let (pl, d) = (s[0], s[1]);
    let r = tape.reshape(p, &[pl, heads, d / heads])?;
    let r = tape.permute(r, &[1, 0, 2])?;
    Ok(tape.broadcast(r, batch))
}

/// Scaled dot-product attention over `[prompt; token]` keys and values.
///
/// `q`, `k`, `v` are projected `[B, s, d]` activations. Queries come only
/// from the real tokens, so the output keeps length `s`; the prompt columns
/// are always attendable while padded token columns (`mask[b*s + j] ==
/// false`) get zero weight.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
    prompt: Option<&LayerPrompt>,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let shape = tape.shape(q).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if d % heads != 0 {
        return Err(Error::config("heads", format!("d_model {d} not divisible by {heads}")));
    }
    let qh = split_heads(tape, q, heads)?;
    let mut kh = split_heads(tape, k, heads)?;
    let mut vh = split_heads(tape, v, heads)?;
    let mut pl = 0;
    if let Some(p) = prompt {
        for pv in [p.key, p.value] {
            let ps = tape.shape(pv);
            if ps.len() != 2 || ps[1] != d {
                return Err(Error::ShapeMismatch {
                    op: "prompt",
                    left: ps.to_vec(),
                    right: vec![d],
                });
            }
        }
        if tape.shape(p.key) != tape.shape(p.value) {
            return Err(Error::ShapeMismatch {
                op: "prompt",
                left: tape.shape(p.key).to_vec(),
                right: tape.shape(p.value).to_vec(),
            });
        }
        pl = tape.shape(p.key)[0];
        let pk = prompt_heads(tape, p.key, heads, b)?;
        let pv = prompt_heads(tape, p.value, heads, b)?;
        kh = tape.concat(pk, kh, 2)?;
        vh = tape.concat(pv, vh, 2)?;
    }
    let t = pl + s;
    let mut keep = Vec::with_capacity(b * t);
    for item in 0..b {
        keep.extend(std::iter::repeat_n(true, pl));
        keep.extend_from_slice(&mask[item * s..(item + 1) * s]);
    }
    let scores = tape.matmul_nt(qh, kh)?;
    let scores = tape.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    let weights = tape.masked_softmax(scores, &keep)?;
    let ctx = tape.bmm(weights, vh)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, s, d])?;
    Ok((ctx, weights))
}

/// Self-attention of layer `layer` with optional key/value prompt injection:
/// `q, k, v = W_Q h, W_K h, W_V h`, then attention of `q` over
/// `[p_K; k]` and `[p_V; v]`.
pub fn attention_with_prompts<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &Bound,
    layer: usize,
    h: Var,
    prompt: Option<&LayerPrompt>,
    mask: &[bool],
) -> Result<AttentionOutput> {
    let p = |name: &str| bound.get(&format!("layer.{layer}.attn.{name}"));
    let q = linear(tape, h, p("wq")?, p("bq")?)?;
    let k = linear(tape, h, p("wk")?, p("bk")?)?;
    let v = linear(tape, h, p("wv")?, p("bv")?)?;
    let (mixture, weights) = multi_head_attention(tape, config.heads, q, k, v, prompt, mask)?;
    let output = linear(tape, mixture, p("wo")?, p("bo")?)?;
    Ok(AttentionOutput {
        output,
        mixture,
        weights,
    })
}
