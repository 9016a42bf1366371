//! Building blocks shared by the mapping network and the toy language model.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Attention, ParameterSet, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Registers `{prefix}.w` (`[d_in x d_out]`) and `{prefix}.b`.
pub(crate) fn init_affine(
    ps: &mut ParameterSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = 1.0 / (d_in as f64).sqrt();
    ps.insert(
        format!("{prefix}.w"),
        Tensor::randn(&[d_in, d_out], std, rng),
        false,
    )?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]), false)
}

pub(crate) fn init_norm(ps: &mut ParameterSet, prefix: &str, d: usize) -> Result<()> {
    ps.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0), false)?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[d]), false)
}

/// Pre-norm transformer block: attention + FFN, each with its own layer norm.
pub(crate) fn init_block(
    ps: &mut ParameterSet,
    prefix: &str,
    d: usize,
    ffn_ratio: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_norm(ps, &format!("{prefix}.ln1"), d)?;
    for proj in ["q", "k", "v", "o"] {
        init_affine(ps, &format!("{prefix}.attn.{proj}"), d, d, rng)?;
    }
    init_norm(ps, &format!("{prefix}.ln2"), d)?;
    init_affine(ps, &format!("{prefix}.ffn.up"), d, d * ffn_ratio, rng)?;
    init_affine(ps, &format!("{prefix}.ffn.down"), d * ffn_ratio, d, rng)
}

/// Element count of one block created by [`init_block`].
pub(crate) fn block_param_count(d: usize, ffn_ratio: usize) -> usize {
    let attention = 4 * (d * d + d);
    let ffn = (d * ffn_ratio * d + ffn_ratio * d) + (ffn_ratio * d * d + d);
    let norms = 4 * d;
    attention + ffn + norms
}

pub(crate) fn affine(tape: &mut Tape, ps: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(ps, &format!("{prefix}.w"))?;
    let b = tape.param(ps, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

pub(crate) fn norm(tape: &mut Tape, ps: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(ps, &format!("{prefix}.g"))?;
    let b = tape.param(ps, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

pub(crate) fn block(
    tape: &mut Tape,
    ps: &ParameterSet,
    prefix: &str,
    x: Var,
    attn: &Attention,
) -> Result<Var> {
    let h = norm(tape, ps, &format!("{prefix}.ln1"), x)?;
    let q = affine(tape, ps, &format!("{prefix}.attn.q"), h)?;
    let k = affine(tape, ps, &format!("{prefix}.attn.k"), h)?;
    let v = affine(tape, ps, &format!("{prefix}.attn.v"), h)?;
    let a = tape.attention(q, k, v, attn)?;
    let a = affine(tape, ps, &format!("{prefix}.attn.o"), a)?;
    let x = tape.add(x, a)?;

    let h = norm(tape, ps, &format!("{prefix}.ln2"), x)?;
    let h = affine(tape, ps, &format!("{prefix}.ffn.up"), h)?;
    let h = tape.gelu(h);
    let h = affine(tape, ps, &format!("{prefix}.ffn.down"), h)?;
    tape.add(x, h)
}
