//! Building blocks: linear layers, layer norm, MLPs, multi-head attention and
//! pre-norm transformer layers.
//!
//! Output projections of residual branches are registered under names ending in
//! `res_out.w` / `res_out.b`, so [`zero_residual_outputs`] can turn every
//! residual block into an exact identity.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::params::{Init, ParamId, ParamStore};

pub const RESIDUAL_OUT: &str = "res_out";

/// Graph plus the parameter values to read from.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub g: &'a Graph,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore) -> Self {
        Self { g, store }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

/// Zeroes every residual-branch output projection in `store`.
pub fn zero_residual_outputs(store: &mut ParamStore) {
    store.zero_matching(&["res_out.w", "res_out.b"]);
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_gain(init, name, fan_in, fan_out, 1.0)
    }

    pub fn with_gain<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let w = init.weight(format!("{name}.w"), fan_in, fan_out, gain);
        let b = Some(init.zeros(format!("{name}.b"), 1, fan_out));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn no_bias<R: Rng>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = init.weight(format!("{name}.w"), fan_in, fan_out, 1.0);
        Self {
            w,
            b: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.filled(format!("{name}.gamma"), 1, dim, 1.0),
            beta: init.zeros(format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: Var) -> Var {
        let n = ctx.g.layer_norm_rows(x);
        let s = ctx.g.mul_row(n, ctx.p(self.gamma));
        ctx.g.add_row(s, ctx.p(self.beta))
    }
}

/// Two-layer feed-forward network with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(init, &format!("{name}.hidden"), dim_in, hidden),
            out: Linear::new(init, &format!("{name}.{RESIDUAL_OUT}"), hidden, dim_out),
        }
    }

    /// Same shape, but the output layer is a plain (non-residual) projection.
    pub fn plain<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(init, &format!("{name}.hidden"), dim_in, hidden),
            out: Linear::new(init, &format!("{name}.out"), hidden, dim_out),
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: Var) -> Var {
        let h = ctx.g.gelu(self.hidden.forward(ctx, x));
        self.out.forward(ctx, h)
    }
}

/// Stack of linear layers, each followed by GELU (point-wise MLP of set abstraction).
#[derive(Debug, Clone)]
pub struct PointMlp {
    pub layers: Vec<Linear>,
}

impl PointMlp {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim_in: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = dim_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(init, &format!("{name}.{i}"), d, w));
            d = w;
        }
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn forward(&self, ctx: Ctx<'_>, mut x: Var) -> Var {
        for l in &self.layers {
            x = ctx.g.gelu(l.forward(ctx, x));
        }
        x
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide the attention dim");
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), kv_dim, dim),
            v: Linear::new(init, &format!("{name}.v"), kv_dim, dim),
            out: Linear::new(init, &format!("{name}.{RESIDUAL_OUT}"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, query: Var, memory: Var) -> Var {
        let g = ctx.g;
        let q = self.q.forward(ctx, query);
        let k = self.k.forward(ctx, memory);
        let v = self.v.forward(ctx, memory);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let outs: Vec<Var> = (0..self.heads)
            .map(|h| {
                let (a, b) = (h * hd, (h + 1) * hd);
                let qh = g.slice_cols(q, a, b);
                let kh = g.slice_cols(k, a, b);
                let vh = g.slice_cols(v, a, b);
                let logits = g.scale(g.matmul_t(qh, kh), scale);
                g.matmul(g.softmax_rows(logits), vh)
            })
            .collect();
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(ctx, cat)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: Mlp,
}

impl EncoderLayer {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, heads: usize, ff: usize) -> Self {
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, dim, heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            ff: Mlp::new(init, &format!("{name}.ff"), dim, ff, dim),
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: Var) -> Var {
        let g = ctx.g;
        let h = self.norm1.forward(ctx, x);
        let x = g.add(x, self.attn.forward(ctx, h, h));
        let h = self.norm2.forward(ctx, x);
        g.add(x, self.ff.forward(ctx, h))
    }
}

/// Pre-norm transformer decoder layer: self-attention, cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: Mlp,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        dim: usize,
        memory_dim: usize,
        heads: usize,
        ff: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), dim, dim, heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            cross_attn: MultiHeadAttention::new(
                init,
                &format!("{name}.cross_attn"),
                dim,
                memory_dim,
                heads,
            ),
            norm3: LayerNorm::new(init, &format!("{name}.norm3"), dim),
            ff: Mlp::new(init, &format!("{name}.ff"), dim, ff, dim),
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, x: Var, memory: Var) -> Var {
        let g = ctx.g;
        let h = self.norm1.forward(ctx, x);
        let x = g.add(x, self.self_attn.forward(ctx, h, h));
        let h = self.norm2.forward(ctx, x);
        let x = g.add(x, self.cross_attn.forward(ctx, h, memory));
        let h = self.norm3.forward(ctx, x);
        g.add(x, self.ff.forward(ctx, h))
    }
}

/// Fixed sinusoidal positional encoding, `len × dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_residual_layer_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = EncoderLayer::new(&mut Init { store: &mut store, rng: &mut rng }, "enc", 8, 2, 16);
        zero_residual_outputs(&mut store);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = Mat::from_shape_fn((5, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 1.0);
        let xv = g.constant(x.clone());
        let y = layer.forward(ctx, xv);
        assert_eq!(*g.value(y), x);
    }

    #[test]
    fn attention_without_positions_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = EncoderLayer::new(&mut Init { store: &mut store, rng: &mut rng }, "enc", 8, 4, 16);
        let x = Mat::from_shape_fn((4, 8), |(i, j)| ((i * 13 + j * 7) as f64).sin());
        let perm = [2usize, 0, 3, 1];
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let y = layer.forward(ctx, g.constant(x.clone()));
        let xp = x.select(ndarray::Axis(0), &perm);
        let yp = layer.forward(ctx, g.constant(xp));
        let expected = g.value(y).select(ndarray::Axis(0), &perm);
        for (a, b) in g.value(yp).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_encoding_first_row() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }
}
