//! Ternary intention-aware attention: one global salience over scene points,
//! driven by the aggregated motion, fused with gaze features into the
//! trajectory stream.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, DecoderLayer, EncoderLayer, Linear, Mlp};
use crate::params::Init;
use crate::scene_encoder::SceneVars;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Last,
    Mean,
    Max,
    Conv,
    Transformer,
}

impl Aggregator {
    pub const ALL: [Aggregator; 5] = [
        Aggregator::Last,
        Aggregator::Mean,
        Aggregator::Max,
        Aggregator::Conv,
        Aggregator::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Last => "last",
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::Conv => "conv",
            Aggregator::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown aggregator '{s}'")))
    }
}

const CONV_LAYERS: usize = 3;

/// Temporal aggregation with whatever weights the strategy needs.
#[derive(Debug, Clone)]
pub enum AggregatorModule {
    Last,
    Mean,
    Max,
    /// Kernel-3, stride-2, zero-padded 1D convolutions, then a mean.
    Conv(Vec<Linear>),
    Transformer { query: crate::params::ParamId, layer: Box<DecoderLayer> },
}

impl AggregatorModule {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        kind: Aggregator,
        dim: usize,
        heads: usize,
        ff: usize,
    ) -> Self {
        match kind {
            Aggregator::Last => AggregatorModule::Last,
            Aggregator::Mean => AggregatorModule::Mean,
            Aggregator::Max => AggregatorModule::Max,
            Aggregator::Conv => AggregatorModule::Conv(
                (0..CONV_LAYERS)
                    .map(|l| Linear::new(init, &format!("{name}.conv{l}"), 3 * dim, dim))
                    .collect(),
            ),
            Aggregator::Transformer => AggregatorModule::Transformer {
                query: init.normal(format!("{name}.query"), 1, dim, 1.0),
                layer: Box::new(DecoderLayer::new(init, &format!("{name}.decoder"), dim, dim, heads, ff)),
            },
        }
    }

    /// `seq` is `L × c`; returns `1 × c`.
    pub fn forward(&self, ctx: Ctx<'_>, seq: Var) -> Var {
        let g = ctx.g;
        let (len, dim) = g.shape(seq);
        match self {
            AggregatorModule::Last => g.slice_rows(seq, len - 1, len),
            AggregatorModule::Mean => g.mean_rows(seq),
            AggregatorModule::Max => g.max_rows(seq),
            AggregatorModule::Conv(layers) => {
                let mut x = seq;
                for layer in layers {
                    let (l, _) = g.shape(x);
                    let pad = g.zeros(1, dim);
                    let padded = g.concat_rows(&[pad, x, pad]);
                    let out_len = (l - 1) / 2 + 1;
                    let idx: Vec<usize> = (0..out_len).flat_map(|j| [2 * j, 2 * j + 1, 2 * j + 2]).collect();
                    let windows = g.reshape(g.gather_rows(padded, &idx), out_len, 3 * dim);
                    x = g.gelu(layer.forward(ctx, windows));
                }
                g.mean_rows(x)
            }
            AggregatorModule::Transformer { query, layer } => layer.forward(ctx, ctx.p(*query), seq),
        }
    }
}

/// One TIA block. Attention width equals the motion width `c_m`.
#[derive(Debug, Clone)]
pub struct TiaBlock {
    encoder: EncoderLayer,
    aggregator: AggregatorModule,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub global: Linear,
    mlp: Mlp,
    dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TiaStep {
    pub output: Var,
    /// 1×n global salience.
    pub salience: Var,
}

impl TiaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        dim: usize,
        scene_dim: usize,
        heads: usize,
        ff: usize,
        hidden: usize,
        aggregator: Aggregator,
    ) -> Self {
        Self {
            encoder: EncoderLayer::new(init, &format!("{name}.encoder"), dim, heads, ff),
            aggregator: AggregatorModule::new(init, &format!("{name}.aggregate"), aggregator, dim, heads, ff),
            query: Linear::new(init, &format!("{name}.query"), dim, dim),
            key: Linear::new(init, &format!("{name}.key"), scene_dim, dim),
            value: Linear::new(init, &format!("{name}.value"), scene_dim, dim),
            global: Linear::new(init, &format!("{name}.global"), scene_dim, dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), 3 * dim, hidden, dim),
            dim,
        }
    }

    /// Softmax over all scene points of one query against per-point keys.
    /// Returns `(s_g 1×n, V n×c_m)`.
    pub fn global_salience(&self, ctx: Ctx<'_>, f_gm: Var, per_point: Var) -> (Var, Var) {
        let g = ctx.g;
        let q = self.query.forward(ctx, f_gm);
        let k = self.key.forward(ctx, per_point);
        let v = self.value.forward(ctx, per_point);
        let logits = g.scale(g.matmul_t(q, k), 1.0 / (self.dim as f64).sqrt());
        (g.softmax_rows(logits), v)
    }

    /// Projected global embedding plus the salience-weighted value rows,
    /// replicated to `rows` frames.
    pub fn fuse_global(&self, ctx: Ctx<'_>, global: Var, s_g: Var, v: Var, rows: usize) -> Var {
        let g = ctx.g;
        let row = g.add(self.global.forward(ctx, global), g.matmul(s_g, v));
        g.broadcast_row(row, rows)
    }

    pub fn forward(&self, ctx: Ctx<'_>, f_in: Var, scene: SceneVars, f_gaze: Var) -> TiaStep {
        let g = ctx.g;
        let (rows, _) = g.shape(f_in);
        let encoded = self.encoder.forward(ctx, f_in);
        let f_gm = self.aggregator.forward(ctx, encoded);
        let (s_g, v) = self.global_salience(ctx, f_gm, scene.per_point);
        let f_sm = self.fuse_global(ctx, scene.global, s_g, v, rows);
        let fused = self.mlp.forward(ctx, g.concat_cols(&[f_in, f_sm, f_gaze]));
        TiaStep {
            output: g.add(f_in, fused),
            salience: s_g,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, Mat};
    use crate::nn::zero_residual_outputs;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(kind: Aggregator, seed: u64) -> (TiaBlock, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = TiaBlock::new(&mut Init { store: &mut store, rng: &mut rng }, "tia", 16, 12, 4, 32, 32, kind);
        (b, store)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn aggregator_names_round_trip() {
        for a in Aggregator::ALL {
            assert_eq!(a.to_string().parse::<Aggregator>().unwrap(), a);
        }
        assert_eq!("LAST".parse::<Aggregator>().unwrap(), Aggregator::Last);
        assert!(matches!("median".parse::<Aggregator>(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fixed_aggregators() {
        let store = ParamStore::new();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let seq = g.constant(Mat::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let last = AggregatorModule::Last.forward(ctx, seq);
        assert_eq!(g.value(last).row(0).to_vec(), vec![5.0, 6.0]);
        let pair = g.constant(Mat::from_shape_vec((2, 2), vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let max = AggregatorModule::Max.forward(ctx, pair);
        assert_eq!(g.value(max).row(0).to_vec(), vec![3.0, 5.0]);
        let constant = g.constant(Mat::from_elem((4, 2), 0.7));
        let mean = AggregatorModule::Mean.forward(ctx, constant);
        for v in g.value(mean).iter() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn learned_aggregators_reduce_to_one_row() {
        for kind in [Aggregator::Conv, Aggregator::Transformer] {
            for len in [1, 2, 5, 16] {
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let m = AggregatorModule::new(&mut Init { store: &mut store, rng: &mut rng }, "agg", kind, 8, 2, 16);
                let g = Graph::new();
                let x = g.constant(random(&mut rng, len, 8));
                let out = m.forward(Ctx::new(&g, &store), x);
                assert_eq!(g.shape(out), (1, 8));
            }
        }
    }

    #[test]
    fn uniform_features_give_uniform_salience() {
        let (b, store) = block(Aggregator::Last, 2);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f_gm = g.constant(random(&mut rng, 1, 16));
        let row = random(&mut rng, 1, 12);
        let per_point = g.constant(Mat::from_shape_fn((7, 12), |(_, c)| row[[0, c]]));
        let (s, _) = b.global_salience(ctx, f_gm, per_point);
        for w in g.value(s).iter() {
            assert!((w - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_set_logits() {
        // Query projection picks the first feature, key projection the first
        // point feature; scaling by sqrt(c) cancels the attention scale.
        let (b, mut store) = block(Aggregator::Last, 4);
        let c = 16.0f64;
        *store.get_mut(b.query.w) = Mat::from_shape_fn((16, 16), |(i, j)| if i == 0 && j == 0 { 1.0 } else { 0.0 });
        *store.get_mut(b.query.b.unwrap()) = Mat::zeros((1, 16));
        *store.get_mut(b.key.w) = Mat::from_shape_fn((12, 16), |(i, j)| if i == 0 && j == 0 { c.sqrt() } else { 0.0 });
        *store.get_mut(b.key.b.unwrap()) = Mat::zeros((1, 16));
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let mut f = Mat::zeros((1, 16));
        f[[0, 0]] = 1.0;
        let mut pts = Mat::zeros((2, 12));
        pts[[1, 0]] = 3f64.ln();
        let (s, _) = b.global_salience(ctx, g.constant(f), g.constant(pts));
        let s = g.value(s);
        assert!((s[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((s[[0, 1]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn fuse_global_definitions() {
        let (b, store) = block(Aggregator::Last, 5);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let global = g.constant(random(&mut rng, 1, 12));
        let v = random(&mut rng, 3, 16);
        let vv = g.constant(v.clone());
        let projected = g.value(b.global.forward(ctx, global)).clone();

        let one_hot = g.constant(Mat::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap());
        let out = g.value(b.fuse_global(ctx, global, one_hot, vv, 4)).clone();
        for r in 0..4 {
            for c in 0..16 {
                assert!((out[[r, c]] - projected[[0, c]] - v[[1, c]]).abs() < 1e-12);
            }
        }
        let uniform = g.constant(Mat::from_elem((1, 3), 1.0 / 3.0));
        let out = g.value(b.fuse_global(ctx, global, uniform, vv, 2)).clone();
        for c in 0..16 {
            let mean = (v[[0, c]] + v[[1, c]] + v[[2, c]]) / 3.0;
            assert!((out[[0, c]] - projected[[0, c]] - mean).abs() < 1e-12);
            assert_eq!(out[[0, c]], out[[1, c]]);
        }
    }

    #[test]
    fn zero_residual_is_identity() {
        for kind in Aggregator::ALL {
            let (b, mut store) = block(kind, 7);
            zero_residual_outputs(&mut store);
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let f_in = random(&mut rng, 6, 16);
            let scene = SceneVars {
                per_point: g.constant(random(&mut rng, 9, 12)),
                global: g.constant(random(&mut rng, 1, 12)),
            };
            let gaze = g.constant(random(&mut rng, 6, 16));
            let step = b.forward(ctx, g.constant(f_in.clone()), scene, gaze);
            assert_eq!(*g.value(step.output), f_in);
            let s = g.value(step.salience);
            assert!((s.sum() - 1.0).abs() < 1e-12);
        }
    }
}
