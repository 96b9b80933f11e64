//! Recording tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly, stores its output on the tape and, when
//! the tape records gradients, remembers its operands. [`Tape::backward`]
//! walks the records in reverse creation order, which is always a valid
//! reverse topological order because operands must exist before use.

use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::kernels::{gelu, gelu_grad, gemm, softmax_rows};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layer-norm stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ConcatLast { parts: Vec<Var> },
    SliceLast { a: Var, start: usize },
    ConcatFirst { parts: Vec<Var> },
    ExpandTokens { a: Var, tokens: usize },
    Reshape { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, rstd: Vec<f64> },
    Gelu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    MeanTokens { a: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Array, probs: Vec<f64> },
    Dropout { a: Var, mask: Array },
    GatherRows { a: Var, rows: Vec<usize> },
}

struct Node {
    value: Array,
    op: Op,
}

/// Ordered record of primitive applications.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    /// A tape that records operands for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape for forward evaluation only; operands are not retained.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(name, &data)?;
        Ok(self.push(Array::from_parts(shape, data), op))
    }

    /// Records an input or constant. Gradients flow to it but it is not a parameter.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a named trainable parameter.
    pub fn param(&mut self, name: &str, value: &Array) -> Var {
        self.push(value.clone(), Op::Param(name.to_string()))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. A two-dimensional `b` (`[k, n]`, or `[n, k]` when
    /// `trans_b`) is shared across all leading axes of `a`; otherwise `b` must
    /// have the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(TensorError::shape(
                "matmul",
                format!("operands need at least 2 axes, got {ash:?} and {bsh:?}"),
            ));
        }
        let m = ash[ash.len() - 2];
        let k = ash[ash.len() - 1];
        let (bk, n) = if trans_b {
            (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
        } else {
            (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
        };
        if bk != k {
            return Err(TensorError::shape(
                "matmul",
                format!("lhs {ash:?} and rhs {bsh:?} (trans_b={trans_b}) disagree on the contracted axis"),
            ));
        }
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = n;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        if bsh.len() == 2 {
            let rows = av.len() / k;
            gemm(rows, k, n, (av, k, 1), (bv, b_strides.0, b_strides.1), &mut out, 0.0);
        } else {
            if ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
                return Err(TensorError::shape(
                    "matmul",
                    format!("batched operands {ash:?} and {bsh:?} have different leading axes"),
                ));
            }
            let batch = av.len() / (m * k);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    (&av[i * m * k..], k, 1),
                    (&bv[i * k * n..], b_strides.0, b_strides.1),
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        self.push_checked("matmul", out_shape, out, Op::MatMul { a, b, trans_b })
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if is_suffix(bsh, ash) {
            Ok(())
        } else {
            Err(TensorError::shape(
                op,
                format!("rhs shape {bsh:?} must equal a trailing part of lhs shape {ash:?}"),
            ))
        }
    }

    fn zip_broadcast(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bl = bv.len();
        let out: Vec<f64> = av
            .data()
            .chunks_exact(bl)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        let shape = av.shape().to_vec();
        self.push_checked(name, shape, out, op)
    }

    /// Elementwise sum; `b` may be a trailing-axes broadcast of `a` (e.g. a bias).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|v| v * c).collect();
        let shape = av.shape().to_vec();
        self.push_checked("scale", shape, out, Op::Scale { a, c })
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat_last", "no operands"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.shape(p);
            if sh[..sh.len() - 1] != lead[..] {
                return Err(TensorError::shape(
                    "concat_last",
                    format!("operand shape {sh:?} does not match leading axes {lead:?}"),
                ));
            }
            widths.push(sh[sh.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push_checked("concat_last", shape, out, Op::ConcatLast { parts: parts.to_vec() })
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        let w = sh[sh.len() - 1];
        if len == 0 || start + len > w {
            return Err(TensorError::shape(
                "slice_last",
                format!("range {start}..{} outside last axis of {sh:?}", start + len),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks_exact(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = sh;
        *shape.last_mut().unwrap() = len;
        self.push_checked("slice_last", shape, out, Op::SliceLast { a, start })
    }

    /// Concatenates along the first axis; trailing axes must agree.
    pub fn concat_first(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat_first", "no operands"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let sh = self.shape(p);
            if sh[1..] != tail[..] {
                return Err(TensorError::shape(
                    "concat_first",
                    format!("operand shape {sh:?} does not match trailing axes {tail:?}"),
                ));
            }
            lead += sh[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push_checked("concat_first", shape, out, Op::ConcatFirst { parts: parts.to_vec() })
    }

    /// Repeats `[.., d]` into `[.., tokens, d]`.
    pub fn expand_tokens(&mut self, a: Var, tokens: usize) -> Result<Var> {
        if tokens == 0 {
            return Err(TensorError::shape("expand_tokens", "token count must be positive"));
        }
        let sh = self.shape(a).to_vec();
        let d = sh[sh.len() - 1];
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks_exact(d)
            .flat_map(|row| std::iter::repeat_n(row, tokens).flatten().copied())
            .collect();
        let mut shape = sh[..sh.len() - 1].to_vec();
        shape.push(tokens);
        shape.push(d);
        self.push_checked("expand_tokens", shape, out, Op::ExpandTokens { a, tokens })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        let mut out = vec![0.0; av.len()];
        softmax_rows(av.data(), w, &mut out);
        let shape = av.shape().to_vec();
        self.push_checked("softmax_last", shape, out, Op::Softmax { a })
    }

    /// Normalizes each row of the last axis to zero mean and unit (biased)
    /// variance, with [`LAYER_NORM_EPS`] added to the variance.
    pub fn layer_norm_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        let mut out = vec![0.0; av.len()];
        let mut rstd = Vec::with_capacity(av.len() / w);
        for (row, dst) in av.data().chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * r;
            }
            rstd.push(r);
        }
        let shape = av.shape().to_vec();
        let rstd = if self.recording { rstd } else { Vec::new() };
        self.push_checked("layer_norm_last", shape, out, Op::LayerNorm { a, rstd })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|&v| gelu(v)).collect();
        let shape = av.shape().to_vec();
        self.push_checked("gelu", shape, out, Op::Gelu { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_checked("sum", vec![1], vec![s], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push_checked("mean", vec![1], vec![s], Op::Mean { a })
    }

    /// Mean over the second-to-last axis: `[.., t, d]` to `[.., d]`.
    pub fn mean_tokens(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() < 2 {
            return Err(TensorError::shape("mean_tokens", format!("need at least 2 axes, got {sh:?}")));
        }
        let (t, d) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let inv = 1.0 / t as f64;
        let mut out = Vec::with_capacity(self.value(a).len() / t);
        for block in self.value(a).data().chunks_exact(t * d) {
            let mut acc = vec![0.0; d];
            for row in block.chunks_exact(d) {
                acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            out.extend(acc.into_iter().map(|s| s * inv));
        }
        let mut shape = sh[..sh.len() - 2].to_vec();
        shape.push(d);
        self.push_checked("mean_tokens", shape, out, Op::MeanTokens { a })
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                "mse",
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        self.push_checked("mse", vec![1], vec![s], Op::Mse { a, b })
    }

    /// Mean over rows of `-Σ targets·log softmax(logits)` along the last axis.
    /// `targets` is a constant with the shape of `logits`.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &Array) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(TensorError::shape(
                "cross_entropy_soft",
                format!("logits {:?} and targets {:?} differ", lv.shape(), targets.shape()),
            ));
        }
        let w = lv.last_dim();
        let rows = lv.len() / w;
        let mut probs = vec![0.0; lv.len()];
        softmax_rows(lv.data(), w, &mut probs);
        let mut total = 0.0;
        for (row, trow) in lv.data().chunks_exact(w).zip(targets.data().chunks_exact(w)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += trow.iter().zip(row).map(|(t, z)| -t * (z - lse)).sum::<f64>();
        }
        let loss = total / rows as f64;
        let probs = if self.recording { probs } else { Vec::new() };
        self.push_checked(
            "cross_entropy_soft",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.clone(),
                probs,
            },
        )
    }

    /// Multiplies by a caller-supplied dropout mask (already scaled by
    /// `1/(1-rate)` on kept entries).
    pub fn dropout(&mut self, a: Var, mask: &Array) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != mask.shape() {
            return Err(TensorError::shape(
                "dropout",
                format!("input {:?} and mask {:?} differ", av.shape(), mask.shape()),
            ));
        }
        let out = av.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let shape = av.shape().to_vec();
        self.push_checked("dropout", shape, out, Op::Dropout { a, mask: mask.clone() })
    }

    /// Selects rows along the first axis; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= sh[0]) {
            return Err(TensorError::shape(
                "gather_rows",
                format!("indices {rows:?} invalid for operand {sh:?}"),
            ));
        }
        let w: usize = sh[1..].iter().product();
        let data = self.value(a).data();
        let out: Vec<f64> = rows.iter().flat_map(|&r| data[r * w..(r + 1) * w].iter().copied()).collect();
        let mut shape = sh;
        shape[0] = rows.len();
        self.push_checked("gather_rows", shape, out, Op::GatherRows { a, rows: rows.to_vec() })
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Grads> {
        if !self.recording {
            return Err(TensorError::NotRecording);
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            let (before, _) = grads.split_at_mut(i);
            let mut acc = Acc {
                grads: before,
                nodes: &self.nodes,
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMul { a, b, trans_b } => acc.matmul(*a, *b, *trans_b, &g),
                Op::Add { a, b } => {
                    acc.add_into(*a, &g);
                    acc.reduce_into(*b, &g, 1.0);
                }
                Op::Sub { a, b } => {
                    acc.add_into(*a, &g);
                    acc.reduce_into(*b, &g, -1.0);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let bl = bv.len();
                    let da: Vec<f64> = g.iter().enumerate().map(|(j, gv)| gv * bv[j % bl]).collect();
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                    acc.add_into(*a, &da);
                    acc.reduce_into(*b, &prod, 1.0);
                }
                Op::Scale { a, c } => {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    acc.add_into(*a, &d);
                }
                Op::ConcatLast { parts } => {
                    let total = node.value.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.last_dim();
                        let slot = acc.slot(p);
                        for (dst, row) in slot.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            dst.iter_mut().zip(&row[offset..offset + w]).for_each(|(d, v)| *d += v);
                        }
                        offset += w;
                    }
                }
                Op::SliceLast { a, start } => {
                    let w = self.nodes[a.0].value.last_dim();
                    let len = node.value.last_dim();
                    let slot = acc.slot(*a);
                    for (dst, row) in slot.chunks_exact_mut(w).zip(g.chunks_exact(len)) {
                        dst[*start..start + len].iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                Op::ConcatFirst { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let l = self.nodes[p.0].value.len();
                        acc.add_into(p, &g[offset..offset + l]);
                        offset += l;
                    }
                }
                Op::ExpandTokens { a, tokens } => {
                    let d = node.value.last_dim();
                    let slot = acc.slot(*a);
                    for (dst, block) in slot.chunks_exact_mut(d).zip(g.chunks_exact(d * tokens)) {
                        for row in block.chunks_exact(d) {
                            dst.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                    }
                }
                Op::Reshape { a } => acc.add_into(*a, &g),
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let w = node.value.last_dim();
                    let slot = acc.slot(*a);
                    for ((dst, yr), gr) in slot.chunks_exact_mut(w).zip(y.chunks_exact(w)).zip(g.chunks_exact(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, y), g) in dst.iter_mut().zip(yr).zip(gr) {
                            *d += y * (g - dot);
                        }
                    }
                }
                Op::LayerNorm { a, rstd } => {
                    let xhat = node.value.data();
                    let w = node.value.last_dim();
                    let inv_w = 1.0 / w as f64;
                    let slot = acc.slot(*a);
                    for (((dst, xr), gr), r) in slot
                        .chunks_exact_mut(w)
                        .zip(xhat.chunks_exact(w))
                        .zip(g.chunks_exact(w))
                        .zip(rstd)
                    {
                        let mg = gr.iter().sum::<f64>() * inv_w;
                        let mgx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() * inv_w;
                        for ((d, x), g) in dst.iter_mut().zip(xr).zip(gr) {
                            *d += r * (g - mg - x * mgx);
                        }
                    }
                }
                Op::Gelu { a } => {
                    let x = self.nodes[a.0].value.data();
                    let d: Vec<f64> = g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                    acc.add_into(*a, &d);
                }
                Op::Sum { a } => {
                    let slot = acc.slot(*a);
                    slot.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mean { a } => {
                    let slot = acc.slot(*a);
                    let v = g[0] / slot.len() as f64;
                    slot.iter_mut().for_each(|d| *d += v);
                }
                Op::MeanTokens { a } => {
                    let sh = self.nodes[a.0].value.shape();
                    let (t, d) = (sh[sh.len() - 2], sh[sh.len() - 1]);
                    let inv = 1.0 / t as f64;
                    let slot = acc.slot(*a);
                    for (block, gr) in slot.chunks_exact_mut(t * d).zip(g.chunks_exact(d)) {
                        for row in block.chunks_exact_mut(d) {
                            row.iter_mut().zip(gr).for_each(|(s, v)| *s += v * inv);
                        }
                    }
                }
                Op::Mse { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let c = 2.0 * g[0] / av.len() as f64;
                    let d: Vec<f64> = av.iter().zip(bv).map(|(x, y)| c * (x - y)).collect();
                    acc.add_into(*a, &d);
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    acc.add_into(*b, &neg);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let w = self.nodes[logits.0].value.last_dim();
                    let rows = probs.len() / w;
                    let c = g[0] / rows as f64;
                    let slot = acc.slot(*logits);
                    for ((dst, pr), tr) in slot
                        .chunks_exact_mut(w)
                        .zip(probs.chunks_exact(w))
                        .zip(targets.data().chunks_exact(w))
                    {
                        let tsum: f64 = tr.iter().sum();
                        for ((d, p), t) in dst.iter_mut().zip(pr).zip(tr) {
                            *d += c * (p * tsum - t);
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    let d: Vec<f64> = g.iter().zip(mask.data()).map(|(g, m)| g * m).collect();
                    acc.add_into(*a, &d);
                }
                Op::GatherRows { a, rows } => {
                    let w = g.len() / rows.len();
                    let slot = acc.slot(*a);
                    for (&r, gr) in rows.iter().zip(g.chunks_exact(w)) {
                        slot[r * w..(r + 1) * w].iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), Var(i))),
                _ => None,
            })
            .collect();
        Ok(Grads { grads, shapes, params })
    }
}

/// Gradient accumulation into operands that precede the node being processed.
struct Acc<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl Acc<'_> {
    fn slot(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn add_into(&mut self, v: Var, g: &[f64]) {
        let slot = self.slot(v);
        slot.iter_mut().zip(g).for_each(|(d, x)| *d += x);
    }

    /// Sums `g` over the broadcast (leading) axes of `v` and accumulates `sign·sum`.
    fn reduce_into(&mut self, v: Var, g: &[f64], sign: f64) {
        let slot = self.slot(v);
        let l = slot.len();
        for chunk in g.chunks_exact(l) {
            slot.iter_mut().zip(chunk).for_each(|(d, x)| *d += sign * x);
        }
    }

    fn matmul(&mut self, a: Var, b: Var, trans_b: bool, g: &[f64]) {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let (ash, bsh) = (av.shape(), bv.shape());
        let k = ash[ash.len() - 1];
        let m = ash[ash.len() - 2];
        let n = if trans_b { bsh[bsh.len() - 2] } else { bsh[bsh.len() - 1] };
        let (ad, bd) = (av.data(), bv.data());
        if bsh.len() == 2 {
            let rows = ad.len() / k;
            // dA = dC · Bᵀ (or dC · B when B is stored transposed)
            let b_for_da = if trans_b { (bd, k, 1) } else { (bd, 1, n) };
            gemm(rows, n, k, (g, n, 1), b_for_da, self.slot(a), 1.0);
            if trans_b {
                // dB[n×k] = dCᵀ · A
                gemm(n, rows, k, (g, 1, n), (ad, k, 1), self.slot(b), 1.0);
            } else {
                // dB[k×n] = Aᵀ · dC
                gemm(k, rows, n, (ad, 1, k), (g, n, 1), self.slot(b), 1.0);
            }
        } else {
            let batch = ad.len() / (m * k);
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let b_for_da = if trans_b { (bi, k, 1) } else { (bi, 1, n) };
                gemm(m, n, k, (gi, n, 1), b_for_da, &mut self.slot(a)[i * m * k..(i + 1) * m * k], 1.0);
                let db = &mut self.slot(b)[i * k * n..(i + 1) * k * n];
                if trans_b {
                    gemm(n, m, k, (gi, 1, n), (ai, k, 1), db, 1.0);
                } else {
                    gemm(k, m, n, (ai, 1, k), (gi, n, 1), db, 1.0);
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Grads {
    /// Gradient with respect to any recorded leaf; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Array {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Array::from_parts(shape, g.clone()),
            None => Array::zeros(&shape),
        }
    }

    /// Gradients keyed by parameter name; repeated bindings of a name are summed.
    pub fn params(&self) -> BTreeMap<String, Array> {
        let mut out: BTreeMap<String, Array> = BTreeMap::new();
        for (name, var) in &self.params {
            let g = self.wrt(*var);
            match out.get_mut(name) {
                Some(existing) => {
                    existing
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b);
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
