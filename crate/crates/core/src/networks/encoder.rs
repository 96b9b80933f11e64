//! Context encoder: temporal attention over each agent's invariant history,
//! one round of agent-agent attention, optional lane cross-attention.

use trajdiff_tensor::{Bound, Init, ParamSpec, Tape, Var};

use super::config::ArchConfig;
use super::layers::{block, block_specs, layer_norm, linear, linear_specs, norm_specs, BlockDims, Dropout};
use crate::error::{Error, Result};

fn dims(a: &ArchConfig, cross: bool) -> BlockDims {
    BlockDims {
        d: a.d_model,
        heads: a.heads,
        ffn: a.d_model * a.ffn_mult,
        cross,
    }
}

pub fn encoder_specs(a: &ArchConfig) -> Vec<ParamSpec> {
    let mut v = linear_specs("encoder.in", 2, a.d_model, true);
    v.push(ParamSpec::new("encoder.pos", &[a.t_p, a.d_model], Init::Uniform { fan_in: a.d_model }));
    for l in 0..a.encoder_layers {
        v.extend(block_specs(&format!("encoder.temporal.{l}"), dims(a, false)));
    }
    v.extend(norm_specs("encoder.pool_ln", a.d_model));
    v.extend(block_specs("encoder.social", dims(a, false)));
    if let Some(f) = a.lane_dim {
        v.extend(linear_specs("encoder.lane_in", f, a.d_model, true));
        v.extend(block_specs("encoder.lane", dims(a, true)));
    }
    v.extend(norm_specs("encoder.out_ln", a.d_model));
    v.extend(linear_specs("encoder.out", a.d_model, a.d_c, true));
    v
}

/// `hist` is `[S, N, T_p, 2]`, `lanes` is `[S, L, lane_dim]`; returns `[S, N, d_c]`.
pub fn encode(
    t: &mut Tape,
    p: &Bound,
    a: &ArchConfig,
    hist: Var,
    lanes: Option<Var>,
    drop: &mut Dropout,
) -> Result<Var> {
    let sh = t.shape(hist).to_vec();
    if sh.len() != 4 || sh[2] != a.t_p || sh[3] != 2 {
        return Err(Error::Invalid(format!(
            "encoder expects histories [S, N, {}, 2], got {sh:?}",
            a.t_p
        )));
    }
    let (s, n) = (sh[0], sh[1]);
    let x = t.reshape(hist, vec![s * n, a.t_p, 2])?;
    let mut h = linear(t, p, "encoder.in", x, true)?;
    h = t.add(h, p.get("encoder.pos")?)?;
    for l in 0..a.encoder_layers {
        h = block(t, p, &format!("encoder.temporal.{l}"), h, None, dims(a, false), drop)?;
    }
    let h = layer_norm(t, p, "encoder.pool_ln", h)?;
    let pooled = t.mean_tokens(h)?;
    let mut h = t.reshape(pooled, vec![s, n, a.d_model])?;
    h = block(t, p, "encoder.social", h, None, dims(a, false), drop)?;
    if let (Some(f), Some(lanes)) = (a.lane_dim, lanes) {
        let lsh = t.shape(lanes).to_vec();
        if lsh.len() != 3 || lsh[0] != s || lsh[2] != f {
            return Err(Error::Invalid(format!("lane features must be [{s}, L, {f}], got {lsh:?}")));
        }
        let le = linear(t, p, "encoder.lane_in", lanes, true)?;
        h = block(t, p, "encoder.lane", h, Some(le), dims(a, true), drop)?;
    }
    let h = layer_norm(t, p, "encoder.out_ln", h)?;
    linear(t, p, "encoder.out", h, true)
}
