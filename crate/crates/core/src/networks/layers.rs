//! Parameterized building blocks shared by the three networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajdiff_tensor::{Array, Bound, Init, ParamSpec, Tape, Var};

use crate::error::Result;

/// Source of dropout masks. Disabled in evaluation mode.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        if rate <= 0.0 {
            return Dropout::off();
        }
        Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn apply(&mut self, t: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = 1.0 / (1.0 - self.rate);
        let shape = t.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        Ok(t.dropout(x, &Array::new(shape, mask)?)?)
    }
}

pub fn linear_specs(name: &str, d_in: usize, d_out: usize, bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(format!("{name}.w"), &[d_in, d_out], Init::Uniform { fan_in: d_in })];
    if bias {
        v.push(ParamSpec::new(format!("{name}.b"), &[d_out], Init::Zeros));
    }
    v
}

pub fn linear(t: &mut Tape, p: &Bound, name: &str, x: Var, bias: bool) -> Result<Var> {
    let h = t.matmul(x, p.get(&format!("{name}.w"))?, false)?;
    if bias {
        Ok(t.add(h, p.get(&format!("{name}.b"))?)?)
    } else {
        Ok(h)
    }
}

pub fn norm_specs(name: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{name}.g"), &[d], Init::Ones),
        ParamSpec::new(format!("{name}.b"), &[d], Init::Zeros),
    ]
}

pub fn layer_norm(t: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = t.layer_norm_last(x)?;
    let h = t.mul(h, p.get(&format!("{name}.g"))?)?;
    Ok(t.add(h, p.get(&format!("{name}.b"))?)?)
}

/// Multi-head attention widths.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub d_query: usize,
    pub d_kv: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_out: usize,
    pub bias: bool,
}

pub fn attention_specs(name: &str, dims: AttnDims) -> Vec<ParamSpec> {
    let inner = dims.heads * dims.d_head;
    let mut v = linear_specs(&format!("{name}.q"), dims.d_query, inner, dims.bias);
    v.extend(linear_specs(&format!("{name}.k"), dims.d_kv, inner, dims.bias));
    v.extend(linear_specs(&format!("{name}.v"), dims.d_kv, inner, dims.bias));
    v.extend(linear_specs(&format!("{name}.o"), inner, dims.d_out, dims.bias));
    v
}

/// `query` is `[B, T, d_query]`, `kv` is `[B, L, d_kv]`; returns `[B, T, d_out]`.
pub fn attention(t: &mut Tape, p: &Bound, name: &str, query: Var, kv: Var, dims: AttnDims) -> Result<Var> {
    let q = linear(t, p, &format!("{name}.q"), query, dims.bias)?;
    let k = linear(t, p, &format!("{name}.k"), kv, dims.bias)?;
    let v = linear(t, p, &format!("{name}.v"), kv, dims.bias)?;
    let scale = 1.0 / (dims.d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(dims.heads);
    for i in 0..dims.heads {
        let qi = t.slice_last(q, i * dims.d_head, dims.d_head)?;
        let ki = t.slice_last(k, i * dims.d_head, dims.d_head)?;
        let vi = t.slice_last(v, i * dims.d_head, dims.d_head)?;
        let logits = t.matmul(qi, ki, true)?;
        let logits = t.scale(logits, scale)?;
        let weights = t.softmax_last(logits)?;
        heads.push(t.matmul(weights, vi, false)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { t.concat_last(&heads)? };
    linear(t, p, &format!("{name}.o"), cat, dims.bias)
}

/// Pre-norm transformer block widths.
#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub cross: bool,
}

impl BlockDims {
    fn attn(&self) -> AttnDims {
        AttnDims {
            d_query: self.d,
            d_kv: self.d,
            heads: self.heads,
            d_head: self.d / self.heads,
            d_out: self.d,
            bias: true,
        }
    }
}

pub fn block_specs(name: &str, dims: BlockDims) -> Vec<ParamSpec> {
    let mut v = norm_specs(&format!("{name}.ln1"), dims.d);
    if dims.cross {
        v.extend(norm_specs(&format!("{name}.ln_kv"), dims.d));
    }
    v.extend(attention_specs(&format!("{name}.attn"), dims.attn()));
    v.extend(norm_specs(&format!("{name}.ln2"), dims.d));
    v.extend(linear_specs(&format!("{name}.ff1"), dims.d, dims.ffn, true));
    v.extend(linear_specs(&format!("{name}.ff2"), dims.ffn, dims.d, true));
    v
}

/// `x + attn(ln(x), ln(ctx))` followed by `x + ffn(ln(x))`; self-attention
/// when `ctx` is `None`.
pub fn block(
    t: &mut Tape,
    p: &Bound,
    name: &str,
    x: Var,
    ctx: Option<Var>,
    dims: BlockDims,
    drop: &mut Dropout,
) -> Result<Var> {
    let h = layer_norm(t, p, &format!("{name}.ln1"), x)?;
    let kv = match ctx {
        Some(c) => layer_norm(t, p, &format!("{name}.ln_kv"), c)?,
        None => h,
    };
    let a = attention(t, p, &format!("{name}.attn"), h, kv, dims.attn())?;
    let a = drop.apply(t, a)?;
    let x = t.add(x, a)?;
    let h = layer_norm(t, p, &format!("{name}.ln2"), x)?;
    let h = linear(t, p, &format!("{name}.ff1"), h, true)?;
    let h = t.gelu(h)?;
    let h = linear(t, p, &format!("{name}.ff2"), h, true)?;
    let h = drop.apply(t, h)?;
    Ok(t.add(x, h)?)
}

/// Sinusoidal features of integer steps, `[steps.len(), width]`.
pub fn step_features(steps: &[usize], width: usize) -> Array {
    let half = width / 2;
    let mut data = Vec::with_capacity(steps.len() * width);
    for &s in steps {
        for k in 0..width {
            let i = k % half.max(1);
            let freq = 1.0 / 10000f64.powf(i as f64 / half.max(1) as f64);
            let arg = s as f64 * freq;
            data.push(if k < half { arg.sin() } else { arg.cos() });
        }
    }
    Array::new(vec![steps.len(), width], data).expect("positive widths")
}
