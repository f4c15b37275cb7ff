use crate::error::Result;
use crate::numerics::{Graph, NodeId, ParamTree, Tensor};
use crate::rng::KeyedRng;

use super::config::LAYER_NORM_EPS;

pub(crate) const INIT_STD: f64 = 0.02;

/// Collects parameter shapes and initial values in declaration order.
pub(crate) struct Init<'a> {
    pub tree: ParamTree,
    pub rng: &'a mut KeyedRng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: String, shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.trunc_normal(INIT_STD)).collect();
        self.tree.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn fill(&mut self, name: String, shape: &[usize], v: f64) -> Result<()> {
        self.tree.insert(name, Tensor::filled(shape, v))
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
        self.normal(format!("{prefix}.w"), &[fan_in, fan_out])?;
        if bias {
            self.fill(format!("{prefix}.b"), &[fan_out], 0.0)?;
        }
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.fill(format!("{prefix}.g"), &[dim], 1.0)?;
        self.fill(format!("{prefix}.b"), &[dim], 0.0)
    }

    pub fn block(&mut self, prefix: &str, dim: usize, mlp_ratio: usize) -> Result<()> {
        let hidden = dim * mlp_ratio;
        self.norm(&format!("{prefix}.ln1"), dim)?;
        self.linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim, false)?;
        self.linear(&format!("{prefix}.attn.proj"), dim, dim, true)?;
        self.norm(&format!("{prefix}.ln2"), dim)?;
        self.linear(&format!("{prefix}.mlp.fc1"), dim, hidden, true)?;
        self.linear(&format!("{prefix}.mlp.fc2"), hidden, dim, true)
    }
}

pub(crate) fn linear(
    g: &mut Graph,
    p: &ParamTree,
    prefix: &str,
    x: NodeId,
    bias: bool,
) -> Result<NodeId> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let y = g.matmul(x, w)?;
    if bias {
        let b = g.param(p, &format!("{prefix}.b"))?;
        g.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub(crate) fn layer_norm(g: &mut Graph, p: &ParamTree, prefix: &str, x: NodeId) -> Result<NodeId> {
    let n = g.layer_norm(x, LAYER_NORM_EPS);
    let gain = g.param(p, &format!("{prefix}.g"))?;
    let bias = g.param(p, &format!("{prefix}.b"))?;
    let y = g.mul_row(n, gain)?;
    g.add_row(y, bias)
}

fn attention(
    g: &mut Graph,
    p: &ParamTree,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let dim = g.value(x).cols();
    let hd = dim / heads;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), x, false)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * hd, (h + 1) * hd)?;
        let k = g.slice_cols(qkv, dim + h * hd, dim + (h + 1) * hd)?;
        let v = g.slice_cols(qkv, 2 * dim + h * hd, 2 * dim + (h + 1) * hd)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        outs.push(g.matmul(a, v)?);
    }
    let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, p, &format!("{prefix}.proj"), o, true)
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub(crate) fn block(
    g: &mut Graph,
    p: &ParamTree,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = attention(g, p, &format!("{prefix}.attn"), h, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h, true)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h, true)?;
    g.add(x, h)
}
