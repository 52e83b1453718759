// Transformer building blocks shared by the student and the teacher.

use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamSet};
use crate::tensor::{Element, Graph, Tensor, Var};

pub fn linear<T: Element>(g: &mut Graph<T>, bp: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bp.get(&format!("{prefix}.weight"))?;
    let b = bp.get(&format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

pub fn layernorm<T: Element>(g: &mut Graph<T>, bp: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bp.get(&format!("{prefix}.weight"))?;
    let b = bp.get(&format!("{prefix}.bias"))?;
    g.layernorm(x, w, b)
}

/// Multi-head self-attention over the rows of `x`. Returns the projected
/// output and the attention probabilities `[heads, n, n]`.
pub fn attention<T: Element>(
    g: &mut Graph<T>,
    bp: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let width = g.value(x).shape()[1];
    let q = linear(g, bp, &format!("{prefix}.q"), x)?;
    let k = linear(g, bp, &format!("{prefix}.k"), x)?;
    let v = linear(g, bp, &format!("{prefix}.v"), x)?;
    let q = g.split_heads(q, heads)?;
    let k = g.split_heads(k, heads)?;
    let v = g.split_heads(v, heads)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / ((width / heads) as f64).sqrt())?;
    let probs = g.softmax(scores)?;
    let ctx = g.matmul(probs, v)?;
    let ctx = g.merge_heads(ctx)?;
    let out = linear(g, bp, &format!("{prefix}.proj"), ctx)?;
    Ok((out, probs))
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub fn block<T: Element>(
    g: &mut Graph<T>,
    bp: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let h = layernorm(g, bp, &format!("{prefix}.norm1"), x)?;
    let (a, probs) = attention(g, bp, &format!("{prefix}.attn"), h, heads)?;
    let x = g.add(x, a)?;
    let h = layernorm(g, bp, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, bp, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, bp, &format!("{prefix}.mlp.fc2"), h)?;
    Ok((g.add(x, h)?, probs))
}

pub fn init_block<T: Element>(
    init: &mut Initializer,
    p: &mut ParamSet<T>,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
) {
    init.norm(p, &format!("{prefix}.norm1"), dim);
    for name in ["q", "k", "v", "proj"] {
        init.linear(p, &format!("{prefix}.attn.{name}"), dim, dim);
    }
    init.norm(p, &format!("{prefix}.norm2"), dim);
    init.linear(p, &format!("{prefix}.mlp.fc1"), dim, dim * mlp_ratio);
    init.linear(p, &format!("{prefix}.mlp.fc2"), dim * mlp_ratio, dim);
}

/// Scalar count of one block.
pub fn block_param_count(dim: usize, mlp_ratio: usize) -> usize {
    let hidden = dim * mlp_ratio;
    2 * 2 * dim + 4 * (dim * dim + dim) + (dim * hidden + hidden) + (hidden * dim + dim)
}

/// Fixed 2-D sine/cosine position table `[rows * cols, dim]`: the first half
/// of the channels encodes the row, the second half the column.
pub fn sincos_2d<T: Element>(dim: usize, rows: usize, cols: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2-D sin-cos position embedding needs a width divisible by 4, got {dim}"
        )));
    }
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                out.extend(freqs.iter().map(|f| T::of((pos * f).sin())));
                out.extend(freqs.iter().map(|f| T::of((pos * f).cos())));
            }
        }
    }
    Tensor::new(vec![rows * cols, dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_count_matches_init() {
        let mut p = ParamSet::<f32>::new();
        init_block(&mut Initializer::new(0), &mut p, "b", 16, 4);
        assert_eq!(p.numel(), block_param_count(16, 4));
    }

    #[test]
    fn sincos_rows_are_distinct_and_bounded() {
        let t: Tensor<f64> = sincos_2d(16, 4, 4).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        for a in 0..16 {
            for b in a + 1..16 {
                assert_ne!(t.row(a), t.row(b));
            }
        }
        // position (0, 0): sin terms 0, cos terms 1
        assert_eq!(&t.row(0)[..4], &[0.0; 4]);
        assert_eq!(&t.row(0)[4..8], &[1.0; 4]);
    }
}
