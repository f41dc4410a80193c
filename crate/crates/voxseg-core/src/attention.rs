//! Scaled dot-product multi-head attention, assembled from tape primitives
//! so every projection is differentiable without a bespoke backward rule.
//!
//! Queries come from one token set and keys/values from another
//! (cross-attention); self-attention is the special case of passing the same
//! id twice. Tokens are `[N, d_model]` matrices; there is no positional
//! encoding, so outputs are equivariant under token permutations.

use alloc::format;
use alloc::vec::Vec;

use crate::tape::{Tape, TapeError, TapeResult, ValueId};
use crate::tensor::Real;

/// Projection weights, `[d_model, d_model]` each. Per-head blocks are the
/// column slices `i*d_k..(i+1)*d_k`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: ValueId,
    pub w_k: ValueId,
    pub w_v: ValueId,
    pub w_o: ValueId,
}

/// Attention output plus the per-head row-stochastic weight matrices, which
/// invariants and diagnostics inspect.
pub struct AttentionOutput {
    pub output: ValueId,
    pub head_weights: Vec<ValueId>,
}

pub fn multihead_attention<E: Real>(
    tape: &mut Tape<E>,
    queries: ValueId,
    keys_values: ValueId,
    heads: usize,
    weights: AttentionWeights,
) -> TapeResult<ValueId> {
    Ok(multihead_attention_detailed(tape, queries, keys_values, heads, weights)?.output)
}

pub fn multihead_attention_detailed<E: Real>(
    tape: &mut Tape<E>,
    queries: ValueId,
    keys_values: ValueId,
    heads: usize,
    weights: AttentionWeights,
) -> TapeResult<AttentionOutput> {
    let q_shape = tape.value(queries).shape().to_vec();
    let kv_shape = tape.value(keys_values).shape().to_vec();
    if q_shape.len() != 2 || kv_shape.len() != 2 || q_shape[1] != kv_shape[1] {
        return Err(TapeError::ShapeMismatch(format!(
            "attention: queries {:?} vs keys/values {:?}",
            q_shape, kv_shape
        )));
    }
    let d_model = q_shape[1];
    if heads == 0 || d_model % heads != 0 {
        return Err(TapeError::IndivisibleHeads { d_model, heads });
    }
    for (name, id) in [
        ("w_q", weights.w_q),
        ("w_k", weights.w_k),
        ("w_v", weights.w_v),
        ("w_o", weights.w_o),
    ] {
        if tape.value(id).shape() != [d_model, d_model] {
            return Err(TapeError::ShapeMismatch(format!(
                "attention: {name} has shape {:?}, expected [{d_model}, {d_model}]",
                tape.value(id).shape()
            )));
        }
    }
    let d_k = d_model / heads;
    let scale = E::from_f64(1.0 / libm::sqrt(d_k as f64));

    let q_all = tape.matmul(queries, weights.w_q)?;
    let k_all = tape.matmul(keys_values, weights.w_k)?;
    let v_all = tape.matmul(keys_values, weights.w_v)?;

    let mut head_outputs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(q_all, h * d_k, d_k)?;
        let k = tape.slice_cols(k_all, h * d_k, d_k)?;
        let v = tape.slice_cols(v_all, h * d_k, d_k)?;
        let k_t = tape.transpose2d(k)?;
        let scores = tape.matmul(q, k_t)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.row_softmax(scaled)?;
        let mixed = tape.matmul(attn, v)?;
        head_outputs.push(mixed);
        head_weights.push(attn);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let output = tape.matmul(concat, weights.w_o)?;
    Ok(AttentionOutput {
        output,
        head_weights,
    })
}
