//! Candidate scorer: each candidate is embedded to width `T_f`, joined with
//! the agent context, passed through bias-free multi-head self-attention
//! across candidates, a residual MLP and a down-projection to one score.

use trajdiff_tensor::{Bound, Init, ParamSpec, Tape, Var};

use super::config::ArchConfig;
use super::layers::{attention, attention_specs, linear, linear_specs, AttnDims, Dropout};
use crate::error::{Error, Result};

fn attn_dims(a: &ArchConfig) -> AttnDims {
    AttnDims {
        d_query: a.t_f + a.d_c,
        d_kv: a.t_f + a.d_c,
        heads: a.scorer_heads,
        d_head: a.scorer_d_head,
        d_out: a.scorer_d,
        bias: false,
    }
}

pub fn scorer_specs(a: &ArchConfig) -> Vec<ParamSpec> {
    let mut v = linear_specs("scorer.embed", 2 * a.t_f, a.t_f, true);
    v.extend(attention_specs("scorer.attn", attn_dims(a)));
    v.extend(linear_specs("scorer.mlp1", a.scorer_d, a.scorer_mlp, true));
    v.extend(linear_specs("scorer.mlp2", a.scorer_mlp, a.scorer_d, true));
    v.push(ParamSpec::new("scorer.down", &[a.scorer_d, 1], Init::Uniform { fan_in: a.scorer_d }));
    v
}

/// `cands` is `[B, M, 2·T_f]` (flattened agent-frame positions), `ctx` is
/// `[B, d_c]`; returns raw scores `[B, M]`.
pub fn score(t: &mut Tape, p: &Bound, a: &ArchConfig, cands: Var, ctx: Var, drop: &mut Dropout) -> Result<Var> {
    let sh = t.shape(cands).to_vec();
    let csh = t.shape(ctx).to_vec();
    if sh.len() != 3 || sh[1] == 0 || sh[2] != 2 * a.t_f || csh != [sh[0], a.d_c] {
        return Err(Error::Invalid(format!(
            "scorer expects candidates [B, M, {}] and context [B, {}], got {sh:?} and {csh:?}",
            2 * a.t_f,
            a.d_c
        )));
    }
    let (b, m) = (sh[0], sh[1]);
    let emb = linear(t, p, "scorer.embed", cands, true)?;
    let c = t.expand_tokens(ctx, m)?;
    let s = t.concat_last(&[emb, c])?;
    let att = attention(t, p, "scorer.attn", s, s, attn_dims(a))?;
    let h = linear(t, p, "scorer.mlp1", att, true)?;
    let h = t.gelu(h)?;
    let h = drop.apply(t, h)?;
    let h = linear(t, p, "scorer.mlp2", h, true)?;
    let h = t.add(att, h)?;
    let out = t.matmul(h, p.get("scorer.down")?, false)?;
    Ok(t.reshape(out, vec![b, m])?)
}
