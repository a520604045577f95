//! Attention fusion of the three interaction pathways.
//!
//! Each block (low-rank, high-rank, implicit) is projected to query, key and
//! value. A block's query attends to the other two blocks' keys
//! (cross-attention) and to its own (self-attention); the per-block sums are
//! fused, concatenated with the original block outputs and projected back to
//! the layer width.

use serde::{Deserialize, Serialize};

use crate::error::{DlfError, Result};
use crate::rli::DenseParams;
use crate::tensor::{ParamId, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Naf,
    ConcatLinear,
    Mlp,
    GatePool,
    AttnPool,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] =
        [FusionMode::Naf, FusionMode::ConcatLinear, FusionMode::Mlp, FusionMode::GatePool, FusionMode::AttnPool];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Naf => "naf",
            FusionMode::ConcatLinear => "concat_linear",
            FusionMode::Mlp => "mlp",
            FusionMode::GatePool => "gate_pool",
            FusionMode::AttnPool => "attn_pool",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = DlfError;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DlfError::config(format!("unknown fusion mode {s:?}")))
    }
}

/// Per-round parameters: one QKV map and one cross-aggregation map per block,
/// in block order low, high, implicit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionRound {
    pub qkv: [DenseParams; 3],
    pub cross: [DenseParams; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NafParams {
    pub rounds: Vec<AttentionRound>,
    /// `W_F` (d x 3d), `b_F`.
    pub fuse: DenseParams,
    /// `W_Z` (d x 4d), `b_Z`.
    pub project: DenseParams,
    /// `false` gives attention pooling: cross-attention only.
    pub self_attention: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FusionParams {
    Naf(NafParams),
    ConcatLinear(DenseParams),
    Mlp { hidden: DenseParams, out: DenseParams },
    GatePool([ParamId; 3]),
}

/// Splits `z W^T + b` (`[.., 3d]`) into query, key and value.
pub fn qkv<T: Scalar>(tape: &mut Tape<'_, T>, z: Var, weight: Var, bias: Var) -> Result<(Var, Var, Var)> {
    let d = *tape.shape(z).last().ok_or_else(|| DlfError::shape("qkv of a scalar"))?;
    if tape.shape(weight) != [3 * d, d] {
        return Err(DlfError::shape(format!("qkv weight {:?} must be [{}, {d}]", tape.shape(weight), 3 * d)));
    }
    let all = tape.linear(z, weight, Some(bias))?;
    Ok((tape.slice_last(all, 0, d)?, tape.slice_last(all, d, d)?, tape.slice_last(all, 2 * d, d)?))
}

/// Scaled dot-product attention over the field axis. Returns the readout and
/// the row-stochastic weight matrix.
pub fn attention<T: Scalar>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().ok_or_else(|| DlfError::shape("attention of a scalar"))?;
    let scores = tape.batch_matmul(q, k, false, true, T::of(1.0 / (d as f64).sqrt()))?;
    let weights = tape.softmax(scores)?;
    Ok((tape.batch_matmul(weights, v, false, false, T::one())?, weights))
}

pub fn self_attention<T: Scalar>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
    Ok(attention(tape, q, k, v)?.0)
}

/// `relu([attend(q_m, x); attend(q_m, y)] W^T + b)`.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q_m: Var,
    x: (Var, Var),
    y: (Var, Var),
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let (from_x, _) = attention(tape, q_m, x.0, x.1)?;
    let (from_y, _) = attention(tape, q_m, y.0, y.1)?;
    let both = tape.concat(&[from_x, from_y])?;
    let h = tape.linear(both, weight, Some(bias))?;
    Ok(tape.relu(h))
}

fn dense<T: Scalar>(tape: &mut Tape<'_, T>, p: DenseParams) -> (Var, Var) {
    (tape.param(p.weight), tape.param(p.bias))
}

/// One attention round over blocks in canonical order. Returns the
/// per-block aggregate `cross + self` (or `cross` alone).
fn attention_round<T: Scalar>(
    tape: &mut Tape<'_, T>,
    blocks: [Var; 3],
    round: &AttentionRound,
    with_self: bool,
) -> Result<[Var; 3]> {
    let mut proj = Vec::with_capacity(3);
    for (m, &z) in blocks.iter().enumerate() {
        let (w, b) = dense(tape, round.qkv[m]);
        proj.push(qkv(tape, z, w, b)?);
    }
    let mut out = [blocks[0]; 3];
    for m in 0..3 {
        let (x, y) = match m {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (w, b) = dense(tape, round.cross[m]);
        let (q, k, v) = proj[m];
        let cross = cross_attention(tape, q, (proj[x].1, proj[x].2), (proj[y].1, proj[y].2), w, b)?;
        out[m] = if with_self {
            let own = self_attention(tape, q, k, v)?;
            tape.add(cross, own)?
        } else {
            cross
        };
    }
    Ok(out)
}

/// Fuses `[Z_L, Z_C, Z_D]` (each `[B, N, d]`) into one `[B, N, d]` state.
pub fn naf_fuse<T: Scalar>(tape: &mut Tape<'_, T>, blocks: [Var; 3], params: &NafParams) -> Result<Var> {
    let shape = tape.shape(blocks[0]).to_vec();
    if blocks.iter().any(|&b| tape.shape(b) != shape.as_slice()) {
        return Err(DlfError::shape("fusion inputs must share one shape"));
    }
    if params.rounds.is_empty() {
        return Err(DlfError::config("attention needs at least one round"));
    }
    let mut current = blocks;
    for round in &params.rounds {
        current = attention_round(tape, current, round, params.self_attention)?;
    }
    let joined = tape.concat(&current)?;
    let (wf, bf) = dense(tape, params.fuse);
    let att = tape.linear(joined, wf, Some(bf))?;
    let att = tape.relu(att);
    let cat = tape.concat(&[blocks[0], blocks[1], blocks[2], att])?;
    let (wz, bz) = dense(tape, params.project);
    tape.linear(cat, wz, Some(bz))
}

/// Fuses the three blocks with the configured strategy.
pub fn fuse<T: Scalar>(tape: &mut Tape<'_, T>, blocks: [Var; 3], params: &FusionParams) -> Result<Var> {
    match params {
        FusionParams::Naf(p) => naf_fuse(tape, blocks, p),
        &FusionParams::ConcatLinear(p) => {
            let cat = tape.concat(&blocks)?;
            let (w, b) = dense(tape, p);
            tape.linear(cat, w, Some(b))
        }
        &FusionParams::Mlp { hidden, out } => {
            let cat = tape.concat(&blocks)?;
            let (w1, b1) = dense(tape, hidden);
            let h = tape.linear(cat, w1, Some(b1))?;
            let h = tape.relu(h);
            let (w2, b2) = dense(tape, out);
            tape.linear(h, w2, Some(b2))
        }
        FusionParams::GatePool(gates) => {
            let mut total: Option<Var> = None;
            for (&z, &g) in blocks.iter().zip(gates) {
                let logits = tape.param(g);
                let weight = tape.sigmoid(logits);
                let term = tape.mul(z, weight)?;
                total = Some(match total {
                    Some(t) => tape.add(t, term)?,
                    None => term,
                });
            }
            Ok(total.expect("three blocks"))
        }
    }
}
