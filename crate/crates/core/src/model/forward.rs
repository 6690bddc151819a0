//! Encoder, teacher-forced decoder and free-running decode.

use crate::numerics::{kernels::argmax, RngStream, Var};
use crate::synthdata::vocab::BOS;
use crate::{Real, Tape, Tensor, TokenId};

use super::layout::{Attention, FeedForward, Norm, Weights};
use super::{ModelConfig, ModelError};

/// Output of a free-running decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted tokens, end token excluded.
    pub tokens: Vec<TokenId>,
    /// Next-token logits at every step, including the one that produced the end token.
    pub step_logits: Vec<Vec<Real>>,
}

/// Dropout settings threaded through one forward pass.
struct Noise<'a> {
    p: f64,
    rng: &'a mut RngStream,
    training: bool,
}

impl Noise<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        Ok(tape.dropout(x, self.p, self.rng, self.training)?)
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<Vec<usize>, ModelError> {
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) < cfg.vocab_size {
                Ok(t as usize)
            } else {
                Err(ModelError::Vocabulary { token: t, vocab: cfg.vocab_size })
            }
        })
        .collect()
}

fn positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for (p, row) in data.chunks_mut(d).enumerate() {
        for i in 0..d / 2 {
            let angle = p as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches data")
}

fn embed(tape: &mut Tape, w: &Weights<Var>, cfg: &ModelConfig, ids: &[usize]) -> Result<Var, ModelError> {
    let tok = tape.embedding(w.token_embedding, ids)?;
    let pos = tape.constant(positions(ids.len(), cfg.d_model));
    Ok(tape.add(tok, pos)?)
}

fn norm(tape: &mut Tape, n: &Norm<Var>, x: Var) -> Result<Var, ModelError> {
    Ok(tape.layer_norm(x, n.gamma, n.beta)?)
}

/// `x + dropout(attn(norm(x), context))`; `context == None` means self-attention.
fn attend(
    tape: &mut Tape,
    a: &Attention<Var>,
    heads: usize,
    x: Var,
    context: Option<Var>,
    causal: bool,
    noise: &mut Noise<'_>,
) -> Result<Var, ModelError> {
    let h = norm(tape, &a.norm, x)?;
    let src = context.unwrap_or(h);
    let q = tape.matmul(h, a.query)?;
    let k = tape.matmul(src, a.key)?;
    let v = tape.matmul(src, a.value)?;
    let o = tape.attention(q, k, v, heads, causal)?;
    let o = tape.matmul(o, a.output)?;
    let o = noise.apply(tape, o)?;
    Ok(tape.add(x, o)?)
}

fn feed_forward(tape: &mut Tape, f: &FeedForward<Var>, x: Var, noise: &mut Noise<'_>) -> Result<Var, ModelError> {
    let h = norm(tape, &f.norm, x)?;
    let h = tape.matmul(h, f.w_in)?;
    let h = tape.add_bias(h, f.b_in)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, f.w_out)?;
    let h = tape.add_bias(h, f.b_out)?;
    let h = noise.apply(tape, h)?;
    Ok(tape.add(x, h)?)
}

/// Encodes question text fused with the image into a `len(text) × d_model` memory.
pub fn encode(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    text: &[TokenId],
    image: &[Real],
    rng: &mut RngStream,
    training: bool,
) -> Result<Var, ModelError> {
    if text.is_empty() {
        return Err(ModelError::Input("empty text".into()));
    }
    if image.len() != cfg.image_cells * cfg.image_feature_dim {
        return Err(ModelError::Input(format!(
            "image has {} values, expected {}×{}",
            image.len(),
            cfg.image_cells,
            cfg.image_feature_dim
        )));
    }
    let ids = check_tokens(cfg, text)?;
    let mut noise = Noise { p: cfg.dropout_p, rng, training };

    let mut x = embed(tape, w, cfg, &ids)?;
    x = noise.apply(tape, x)?;
    for layer in &w.encoder {
        x = attend(tape, &layer.self_attn, cfg.n_heads, x, None, false, &mut noise)?;
        x = feed_forward(tape, &layer.ffn, x, &mut noise)?;
    }

    let cells = tape.constant(Tensor::new(vec![cfg.image_cells, cfg.image_feature_dim], image.to_vec())?);
    let img = tape.matmul(cells, w.image_proj)?;
    let img = tape.add_bias(img, w.image_bias)?;
    let img = tape.add(img, w.image_cells)?;
    let img = noise.apply(tape, img)?;
    x = attend(tape, &w.fusion, cfg.n_heads, x, Some(img), false, &mut noise)?;
    let memory = tape.concat_rows(x, img)?;
    norm(tape, &w.encoder_norm, memory)
}

fn decoder_logits(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    memory: Var,
    inputs: &[usize],
    noise: &mut Noise<'_>,
) -> Result<Var, ModelError> {
    let mut y = embed(tape, w, cfg, inputs)?;
    y = noise.apply(tape, y)?;
    for layer in &w.decoder {
        y = attend(tape, &layer.self_attn, cfg.n_heads, y, None, true, noise)?;
        y = attend(tape, &layer.cross_attn, cfg.n_heads, y, Some(memory), false, noise)?;
        y = feed_forward(tape, &layer.ffn, y, noise)?;
    }
    let y = norm(tape, &w.decoder_norm, y)?;
    let logits = tape.matmul(y, w.head)?;
    Ok(tape.add_bias(logits, w.head_bias)?)
}

/// Logits (`len(target) × V`) for every target position given the gold prefix before it.
pub fn teacher_forced_logits(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    memory: Var,
    target: &[TokenId],
    rng: &mut RngStream,
    training: bool,
) -> Result<Var, ModelError> {
    if target.is_empty() {
        return Err(ModelError::Input("empty target".into()));
    }
    let limit = cfg.max_rationale_len.max(cfg.max_answer_len);
    if target.len() > limit {
        return Err(ModelError::Input(format!("target of {} tokens exceeds {limit}", target.len())));
    }
    let ids = check_tokens(cfg, target)?;
    let mut inputs = Vec::with_capacity(ids.len());
    inputs.push(BOS as usize);
    inputs.extend_from_slice(&ids[..ids.len() - 1]);
    let mut noise = Noise { p: cfg.dropout_p, rng, training };
    decoder_logits(tape, w, cfg, memory, &inputs, &mut noise)
}

/// Free-running argmax decode, recording each step's logits.
///
/// With `noise == Some(rng)` dropout stays on in the decoder (Monte-Carlo
/// decoding); otherwise the decode is deterministic. Scratch nodes are
/// dropped from the tape after every step.
pub fn decode(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    memory: Var,
    max_len: usize,
    end_token: TokenId,
    noise: Option<&mut RngStream>,
) -> Result<Decoded, ModelError> {
    let mut spare = RngStream::new(0, 0);
    let training = noise.is_some();
    let rng = noise.unwrap_or(&mut spare);
    let mut noise = Noise { p: cfg.dropout_p, rng, training };
    let mut inputs = vec![BOS as usize];
    let mut out = Decoded { tokens: Vec::new(), step_logits: Vec::new() };
    for _ in 0..max_len {
        let mark = tape.len();
        let logits = decoder_logits(tape, w, cfg, memory, &inputs, &mut noise)?;
        let last = tape.value(logits).row(inputs.len() - 1).to_vec();
        tape.truncate(mark);
        let next = argmax(&last);
        out.step_logits.push(last);
        if next as TokenId == end_token {
            break;
        }
        out.tokens.push(next as TokenId);
        inputs.push(next);
    }
    Ok(out)
}

/// Deterministic greedy decode (dropout off); stops at `end_token` or `max_len` tokens.
pub fn greedy_decode(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    memory: Var,
    max_len: usize,
    end_token: TokenId,
) -> Result<Vec<TokenId>, ModelError> {
    Ok(decode(tape, w, cfg, memory, max_len, end_token, None)?.tokens)
}
