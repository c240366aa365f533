//! Transformer building blocks recorded on the autodiff tape.
//!
//! All functions look weights up by name prefix in a [`Bound`] store:
//! `{prefix}.w` / `{prefix}.b` for linears, `{prefix}.g` / `{prefix}.b`
//! for layer norms, and the conventional `ln1/qkv/proj/ln2/fc1/fc2`
//! sub-prefixes inside an encoder block.

use crate::numerics::tape::{Tape, VarId};
use crate::params::Bound;
use crate::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// x @ w + b with w: [in, out].
pub fn linear<S: Scalar>(tape: &mut Tape<S>, p: &Bound, prefix: &str, x: VarId) -> VarId {
    let y = tape.matmul(x, p.p(&format!("{prefix}.w")));
    tape.add_row_bias(y, p.p(&format!("{prefix}.b")))
}

pub fn layer_norm<S: Scalar>(tape: &mut Tape<S>, p: &Bound, prefix: &str, x: VarId) -> VarId {
    tape.layer_norm(
        x,
        p.p(&format!("{prefix}.g")),
        p.p(&format!("{prefix}.b")),
        S::from_f64(LN_EPS),
    )
}

/// Multi-head self-attention over x: [N, d].
///
/// `bias`, when given, is an [N, N] additive logit bias shared by all
/// heads. Returns [N, d] after the output projection. Setting
/// `record_attention` stashes each head's post-softmax weights.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    prefix: &str,
    x: VarId,
    heads: usize,
    bias: Option<VarId>,
    mut record_attention: Option<&mut Vec<crate::Tensor<S>>>,
) -> VarId {
    let d = tape.value(x).cols();
    assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let qkv = linear(tape, p, &format!("{prefix}.qkv"), x);
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * dh, (h + 1) * dh);
        let k = tape.slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
        let v = tape.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
        let logits = tape.matmul_nt(q, k);
        let logits = tape.scale(logits, scale);
        let logits = match bias {
            Some(b) => tape.add(logits, b),
            None => logits,
        };
        let weights = tape.softmax_lastdim(logits);
        if let Some(rec) = record_attention.as_deref_mut() {
            rec.push(tape.value(weights).clone());
        }
        outs.push(tape.matmul(weights, v));
    }
    let merged = tape.concat_cols(&outs);
    linear(tape, p, &format!("{prefix}.proj"), merged)
}

/// Two-layer GELU feed-forward.
pub fn feed_forward<S: Scalar>(tape: &mut Tape<S>, p: &Bound, prefix: &str, x: VarId) -> VarId {
    let h = linear(tape, p, &format!("{prefix}.fc1"), x);
    let h = tape.gelu(h);
    linear(tape, p, &format!("{prefix}.fc2"), h)
}

/// Pre-norm encoder block:
/// `x + attn(ln1(x))` then `+ ffn(ln2(.))`.
pub fn encoder_block<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    prefix: &str,
    x: VarId,
    heads: usize,
) -> VarId {
    encoder_block_recorded(tape, p, prefix, x, heads, None)
}

pub fn encoder_block_recorded<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    prefix: &str,
    x: VarId,
    heads: usize,
    record_attention: Option<&mut Vec<crate::Tensor<S>>>,
) -> VarId {
    let normed = layer_norm(tape, p, &format!("{prefix}.ln1"), x);
    let att = attention(tape, p, prefix, normed, heads, None, record_attention);
    let x = tape.add(x, att);
    let normed = layer_norm(tape, p, &format!("{prefix}.ln2"), x);
    let ff = feed_forward(tape, p, prefix, normed);
    tape.add(x, ff)
}
