//! Autoregressive answer decoder.
//!
//! The decoder consumes the fused visual tokens, the instruction tokens, and
//! the answer produced so far, all projected into a shared width. One causal
//! self-attention block with a feed-forward tail turns that prefix into
//! next-token logits; training scores the answer with its mean token
//! cross-entropy and inference decodes greedily until the end marker.

use std::fmt;

use crate::encoders::{Binding, ModelConfig, ModelParams, ParamGroup};
use crate::synth::END_TOKEN;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

/// Additive mask value for disallowed attention positions.
const MASK_NEG: f64 = -1e30;

/// Decoder geometry.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    /// Hidden width of the decoder block.
    pub d_dec: usize,
    /// Token vocabulary capacity (embedding and logit rows).
    pub vocab: usize,
    /// Hard cap on generated answer length.
    pub max_len: usize,
}

/// Errors raised by decoding.
#[derive(Debug)]
pub enum DecoderError {
    /// Decoding needs at least one instruction token.
    EmptyInstruction,
    /// Underlying tensor-shape failure.
    Tensor(TensorError),
}

impl fmt::Display for DecoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderError::EmptyInstruction => {
                write!(f, "decoder needs at least one instruction token")
            }
            DecoderError::Tensor(err) => write!(f, "tensor error: {err}"),
        }
    }
}

impl std::error::Error for DecoderError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DecoderError::Tensor(err) => Some(err),
            _ => None,
        }
    }
}

impl From<TensorError> for DecoderError {
    fn from(err: TensorError) -> Self {
        DecoderError::Tensor(err)
    }
}

/// Lower-triangular additive mask: zero where a position may attend, a large
/// negative number elsewhere.
fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![MASK_NEG; len * len];
    for i in 0..len {
        for j in 0..=i {
            data[i * len + j] = 0.0;
        }
    }
    Tensor::new(vec![len, len], data).expect("mask shape is consistent")
}

/// Next-token logits for every answer position.
///
/// The decoder prefix is the projected fused tokens, then the embedded
/// instruction, then the embedded answer so far. With `m` fused tokens, `i`
/// instruction tokens, and `a` answer tokens, the returned tensor is
/// `[a + 1, vocab]`: row `j` holds the logits for answer token `j`, read at
/// the prefix position that precedes it.
pub fn decode_logits(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    fused: NodeId,
    instruction: &[usize],
    answer_prefix: &[usize],
) -> Result<NodeId, DecoderError> {
    if instruction.is_empty() {
        return Err(DecoderError::EmptyInstruction);
    }
    let dec = ParamGroup::Decoder;
    let embed = bind.get(dec, "embed");

    let vis = tape.affine(fused, bind.get(dec, "vis.w"), bind.get(dec, "vis.b"))?;
    let instr = tape.embed_rows(embed, instruction)?;
    let mut prefix = tape.concat_rows(vis, instr)?;
    if !answer_prefix.is_empty() {
        let ans = tape.embed_rows(embed, answer_prefix)?;
        prefix = tape.concat_rows(prefix, ans)?;
    }
    let m = tape.value(fused).rows();
    let total = m + instruction.len() + answer_prefix.len();

    let q = tape.affine(prefix, bind.get(dec, "attn.wq"), bind.get(dec, "attn.bq"))?;
    let k = tape.affine(prefix, bind.get(dec, "attn.wk"), bind.get(dec, "attn.bk"))?;
    let v = tape.affine(prefix, bind.get(dec, "attn.wv"), bind.get(dec, "attn.bv"))?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.scale(raw, 1.0 / (cfg.dec.d_dec as f64).sqrt());
    let mask = tape.leaf(causal_mask(total));
    let masked = tape.add(scaled, mask)?;
    let attn = tape.softmax_rows(masked)?;
    let ctx = tape.matmul(attn, v)?;
    let proj = tape.affine(ctx, bind.get(dec, "attn.wo"), bind.get(dec, "attn.bo"))?;
    let res1 = tape.add(prefix, proj)?;

    let ff = tape.affine(res1, bind.get(dec, "ff1.w"), bind.get(dec, "ff1.b"))?;
    let ff = tape.tanh(ff);
    let ff = tape.affine(ff, bind.get(dec, "ff2.w"), bind.get(dec, "ff2.b"))?;
    let res2 = tape.add(res1, ff)?;

    let predicting = tape.slice_rows(
        res2,
        m + instruction.len() - 1,
        answer_prefix.len() + 1,
    )?;
    Ok(tape.affine(predicting, bind.get(dec, "out.w"), bind.get(dec, "out.b"))?)
}

/// Mean per-token negative log-likelihood of `answer` followed by the end
/// marker, as a scalar node.
pub fn nll(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    fused: NodeId,
    instruction: &[usize],
    answer: &[usize],
) -> Result<NodeId, DecoderError> {
    let logits = decode_logits(tape, bind, cfg, fused, instruction, answer)?;
    let mut targets = answer.to_vec();
    targets.push(END_TOKEN);
    let total = tape.cross_entropy_sum(logits, &targets)?;
    Ok(tape.scale(total, 1.0 / targets.len() as f64))
}

/// Greedy decoding: repeatedly pick the highest-logit token (lowest id on
/// ties) until the end marker or the length cap. The end marker itself is
/// not part of the returned answer.
pub fn generate_greedy(
    params: &ModelParams,
    cfg: &ModelConfig,
    fused: &Tensor,
    instruction: &[usize],
) -> Result<Vec<usize>, DecoderError> {
    let mut answer: Vec<usize> = Vec::new();
    for _ in 0..cfg.dec.max_len {
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, &[]);
        let f = tape.leaf(fused.clone());
        let logits = decode_logits(&mut tape, &bind, cfg, f, instruction, &answer)?;
        let values = tape.value(logits);
        let v = values.shape()[1];
        let last = &values.data()[(values.rows() - 1) * v..];
        let mut best = 0usize;
        for (id, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = id;
            }
        }
        if best == END_TOKEN {
            break;
        }
        answer.push(best);
    }
    Ok(answer)
}
