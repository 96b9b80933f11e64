//! Transformer noise predictor over the `T_f` displacement tokens,
//! conditioned on the step embedding and the agent context by concatenation.

use trajdiff_tensor::{Bound, Init, ParamSpec, Tape, Var};

use super::config::ArchConfig;
use super::layers::{block, block_specs, layer_norm, linear, linear_specs, norm_specs, step_features, BlockDims, Dropout};
use crate::error::{Error, Result};

fn dims(a: &ArchConfig) -> BlockDims {
    BlockDims {
        d: a.d_model,
        heads: a.heads,
        ffn: a.d_model * a.ffn_mult,
        cross: false,
    }
}

pub fn denoiser_specs(a: &ArchConfig) -> Vec<ParamSpec> {
    let mut v = linear_specs("denoiser.step", a.d_model, a.d_model, true);
    v.extend(linear_specs("denoiser.in", 2 + a.d_model + a.d_c, a.d_model, true));
    v.push(ParamSpec::new("denoiser.pos", &[a.t_f, a.d_model], Init::Uniform { fan_in: a.d_model }));
    for l in 0..a.denoiser_layers {
        v.extend(block_specs(&format!("denoiser.layer.{l}"), dims(a)));
    }
    v.extend(norm_specs("denoiser.out_ln", a.d_model));
    v.extend(linear_specs("denoiser.out", a.d_model, 2, true));
    v
}

/// `y` is `[B, T_f, 2]`, `ctx` is `[B, d_c]`, one step per batch row; returns ε̂ shaped like `y`.
pub fn denoise(
    t: &mut Tape,
    p: &Bound,
    a: &ArchConfig,
    y: Var,
    steps: &[usize],
    ctx: Var,
    drop: &mut Dropout,
) -> Result<Var> {
    let ysh = t.shape(y).to_vec();
    let csh = t.shape(ctx).to_vec();
    let b = steps.len();
    if ysh != [b, a.t_f, 2] || csh != [b, a.d_c] {
        return Err(Error::Invalid(format!(
            "denoiser expects y [{b}, {}, 2] and context [{b}, {}], got {ysh:?} and {csh:?}",
            a.t_f, a.d_c
        )));
    }
    let feats = t.constant(step_features(steps, a.d_model));
    let e = linear(t, p, "denoiser.step", feats, true)?;
    let e = t.expand_tokens(e, a.t_f)?;
    let c = t.expand_tokens(ctx, a.t_f)?;
    let tok = t.concat_last(&[y, e, c])?;
    let mut h = linear(t, p, "denoiser.in", tok, true)?;
    h = t.add(h, p.get("denoiser.pos")?)?;
    for l in 0..a.denoiser_layers {
        h = block(t, p, &format!("denoiser.layer.{l}"), h, None, dims(a), drop)?;
    }
    let h = layer_norm(t, p, "denoiser.out_ln", h)?;
    linear(t, p, "denoiser.out", h, true)
}
