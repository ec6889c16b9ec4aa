//! The Conformer trunk shared by both predictors.
//!
//! Each block: half-step feed-forward, rotary self-attention, a depthwise
//! convolution module with a gated linear unit, another half-step
//! feed-forward, then layer normalization. Every sub-module is pre-norm with
//! a residual connection.

use super::{Init, ModelConfig};
use crate::autograd::{AttentionSpec, Graph, NodeId};
use crate::error::Result;
use crate::scalar::Scalar;

pub(crate) fn trunk_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.model_dim;
    let f = cfg.ff_dim;
    let lin = |fan_in: usize| Init::Std(1.0 / (fan_in as f64).sqrt());
    let mut v = Vec::new();
    let mut push = |name: String, r, c, init| v.push((name, r, c, init));
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        for ff in ["ff1", "ff2"] {
            push(format!("{p}.{ff}.norm.gamma"), 1, d, Init::Ones);
            push(format!("{p}.{ff}.norm.beta"), 1, d, Init::Zeros);
            push(format!("{p}.{ff}.w1"), d, f, lin(d));
            push(format!("{p}.{ff}.b1"), 1, f, Init::Zeros);
            push(format!("{p}.{ff}.w2"), f, d, lin(f));
            push(format!("{p}.{ff}.b2"), 1, d, Init::Zeros);
        }
        push(format!("{p}.attn.norm.gamma"), 1, d, Init::Ones);
        push(format!("{p}.attn.norm.beta"), 1, d, Init::Zeros);
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("{p}.attn.{w}"), d, d, lin(d));
        }
        push(format!("{p}.attn.bo"), 1, d, Init::Zeros);
        push(format!("{p}.conv.norm.gamma"), 1, d, Init::Ones);
        push(format!("{p}.conv.norm.beta"), 1, d, Init::Zeros);
        push(format!("{p}.conv.pw1"), d, 2 * d, lin(d));
        push(format!("{p}.conv.pw1_b"), 1, 2 * d, Init::Zeros);
        push(format!("{p}.conv.dw"), cfg.conv_kernel_size, d, lin(cfg.conv_kernel_size));
        push(format!("{p}.conv.dw_b"), 1, d, Init::Zeros);
        push(format!("{p}.conv.pw2"), d, d, lin(d));
        push(format!("{p}.conv.pw2_b"), 1, d, Init::Zeros);
        push(format!("{p}.norm.gamma"), 1, d, Init::Ones);
        push(format!("{p}.norm.beta"), 1, d, Init::Zeros);
    }
    v
}

/// Heads start at zero so a fresh model predicts the uniform distribution.
pub(crate) fn head_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let mut v = Vec::new();
    for q in 0..cfg.levels {
        v.push((format!("head.{q}.weight"), cfg.model_dim, cfg.codebook_size, Init::Zeros));
        v.push((format!("head.{q}.bias"), 1, cfg.codebook_size, Init::Zeros));
    }
    v
}

fn norm<S: Scalar>(g: &mut Graph<S>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta))
}

fn feed_forward<S: Scalar>(g: &mut Graph<S>, x: NodeId, p: &str) -> Result<NodeId> {
    let h = norm(g, x, &format!("{p}.norm"))?;
    let (w1, b1) = (g.param(&format!("{p}.w1"))?, g.param(&format!("{p}.b1"))?);
    let h = g.linear(h, w1, b1);
    let h = g.silu(h);
    let (w2, b2) = (g.param(&format!("{p}.w2"))?, g.param(&format!("{p}.b2"))?);
    Ok(g.linear(h, w2, b2))
}

/// Runs the trunk over `x` (rows = segments × `seg_len`).
pub(crate) fn trunk<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    mut x: NodeId,
    seg_len: usize,
    causal: bool,
) -> Result<NodeId> {
    let half = S::of(0.5);
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");

        let h = feed_forward(g, x, &format!("{p}.ff1"))?;
        let h = g.scale(h, half);
        x = g.add(x, h);

        let h = norm(g, x, &format!("{p}.attn.norm"))?;
        let wq = g.param(&format!("{p}.attn.wq"))?;
        let wk = g.param(&format!("{p}.attn.wk"))?;
        let wv = g.param(&format!("{p}.attn.wv"))?;
        let (q, k, v) = (g.matmul(h, wq), g.matmul(h, wk), g.matmul(h, wv));
        let spec = AttentionSpec { heads: cfg.num_heads, seg_len, causal, rotary_base: cfg.rotary_base };
        let a = g.attention(q, k, v, spec)?;
        let (wo, bo) = (g.param(&format!("{p}.attn.wo"))?, g.param(&format!("{p}.attn.bo"))?);
        let a = g.linear(a, wo, bo);
        x = g.add(x, a);

        let h = norm(g, x, &format!("{p}.conv.norm"))?;
        let (pw1, pw1_b) = (g.param(&format!("{p}.conv.pw1"))?, g.param(&format!("{p}.conv.pw1_b"))?);
        let h = g.linear(h, pw1, pw1_b);
        let h = g.glu(h);
        let (dw, dw_b) = (g.param(&format!("{p}.conv.dw"))?, g.param(&format!("{p}.conv.dw_b"))?);
        let h = g.depthwise_conv(h, dw, dw_b, seg_len, causal)?;
        let h = g.silu(h);
        let (pw2, pw2_b) = (g.param(&format!("{p}.conv.pw2"))?, g.param(&format!("{p}.conv.pw2_b"))?);
        let h = g.linear(h, pw2, pw2_b);
        x = g.add(x, h);

        let h = feed_forward(g, x, &format!("{p}.ff2"))?;
        let h = g.scale(h, half);
        x = g.add(x, h);

        x = norm(g, x, &format!("{p}.norm"))?;
    }
    Ok(x)
}

/// All Q heads side by side: a (rows, Q·C) node.
pub(crate) fn heads<S: Scalar>(g: &mut Graph<S>, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
    let mut outs = Vec::with_capacity(cfg.levels);
    for q in 0..cfg.levels {
        let w = g.param(&format!("head.{q}.weight"))?;
        let b = g.param(&format!("head.{q}.bias"))?;
        outs.push(g.linear(x, w, b));
    }
    Ok(if outs.len() == 1 { outs[0] } else { g.concat_cols(outs) })
}
