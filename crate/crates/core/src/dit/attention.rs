//! Full multi-head attention over the concatenated token sequence.

use super::tokens::TokenSequence;
use crate::error::{Error, Result};
use crate::numeric::{Array, Tape, Var};

/// Query, key and value projections (`[width, width]`, acting on row tokens).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub w_q: Array,
    pub w_k: Array,
    pub w_v: Array,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    /// Per-head key dimension.
    pub fn head_dim(&self) -> usize {
        self.w_q.cols() / self.heads
    }

    fn validate(&self) -> Result<()> {
        let w = self.w_q.rows();
        for m in [&self.w_q, &self.w_k, &self.w_v] {
            if m.shape() != self.w_q.shape() || m.rows() != w {
                return Err(Error::Shape {
                    op: "attention_block",
                    lhs: self.w_q.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        if self.heads == 0 || !self.w_q.cols().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "projection width {} not divisible by {} heads",
                self.w_q.cols(),
                self.heads
            )));
        }
        Ok(())
    }
}

/// softmax(QKᵀ/√d)V per head, heads concatenated along columns. Returns the
/// output node and the attention-probability node of each head.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let width = tape.value(q).cols();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
    }
    let d = width / heads;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * d, (h + 1) * d);
        let qh = if heads == 1 { q } else { tape.slice_cols(q, s, e)? };
        let kh = if heads == 1 { k } else { tape.slice_cols(k, s, e)? };
        let vh = if heads == 1 { v } else { tape.slice_cols(v, s, e)? };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt_d);
        let p = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, probs))
}

/// Attention output and per-head probability matrices.
pub fn mm_attention_with_weights(z: &TokenSequence, block: &AttentionBlock) -> Result<(TokenSequence, Vec<Array>)> {
    block.validate()?;
    if z.tokens.cols() != block.width() {
        return Err(Error::Shape {
            op: "mm_attention",
            lhs: z.tokens.shape().to_vec(),
            rhs: block.w_q.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(z.tokens.clone());
    let (wq, wk, wv) = (
        tape.constant(block.w_q.clone()),
        tape.constant(block.w_k.clone()),
        tape.constant(block.w_v.clone()),
    );
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let (out, probs) = attend(&mut tape, q, k, v, block.heads)?;
    let weights = probs.iter().map(|p| tape.value(*p).clone()).collect();
    Ok((z.with_tokens(tape.value(out).clone())?, weights))
}

pub fn mm_attention(z: &TokenSequence, block: &AttentionBlock) -> Result<TokenSequence> {
    Ok(mm_attention_with_weights(z, block)?.0)
}
