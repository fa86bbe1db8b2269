//! Sequence discriminator conditioned on the scene, and least-squares GAN losses.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Ctx, DecoderLayer, Linear};
use crate::params::{Init, ParamStore};
use crate::types::JOINT_COORDS;

#[derive(Debug, Clone)]
pub struct Discriminator {
    lift: Linear,
    memory: Linear,
    layers: Vec<DecoderLayer>,
    head: Linear,
    dim: usize,
    scene_dim: usize,
}

impl Discriminator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        dim: usize,
        scene_dim: usize,
        layers: usize,
        heads: usize,
        ff: usize,
    ) -> Self {
        Self {
            lift: Linear::new(init, &format!("{name}.lift"), JOINT_COORDS, dim),
            memory: Linear::new(init, &format!("{name}.memory"), scene_dim, dim),
            layers: (0..layers)
                .map(|l| DecoderLayer::new(init, &format!("{name}.layer{l}"), dim, dim, heads, ff))
                .collect(),
            head: Linear::new(init, &format!("{name}.head"), dim, 1),
            dim,
            scene_dim,
        }
    }

    /// `joints` F×69, `scene_global` 1×c_s; returns a 1×1 realism logit.
    pub fn forward(&self, ctx: Ctx<'_>, joints: Var, scene_global: Var) -> Var {
        let g = ctx.g;
        let (frames, _) = g.shape(joints);
        let mut x = g.add(
            self.lift.forward(ctx, joints),
            g.constant(positional_encoding(frames, self.dim)),
        );
        let memory = self.memory.forward(ctx, scene_global);
        for layer in &self.layers {
            x = layer.forward(ctx, x, memory);
        }
        self.head.forward(ctx, g.mean_rows(x))
    }

    pub fn scene_dim(&self) -> usize {
        self.scene_dim
    }
}

/// Scores one joint sequence outside of training.
pub fn discriminate(disc: &Discriminator, store: &ParamStore, joints: &Mat, scene_global: &[f64]) -> Result<f64> {
    if joints.ncols() != JOINT_COORDS || joints.nrows() == 0 {
        return Err(Error::invalid(format!(
            "discriminator expects F×{JOINT_COORDS} joints, got {:?}",
            joints.dim()
        )));
    }
    if scene_global.len() != disc.scene_dim {
        return Err(Error::invalid("scene embedding width does not match the discriminator"));
    }
    if joints.iter().chain(scene_global).any(|v| !v.is_finite()) {
        return Err(Error::invalid("discriminator inputs must be finite"));
    }
    let g = Graph::new();
    let s = g.constant(Mat::from_shape_vec((1, scene_global.len()), scene_global.to_vec()).expect("row"));
    let score = disc.forward(Ctx::new(&g, store), g.constant(joints.clone()), s);
    let v = g.scalar(score);
    Ok(v)
}

/// Least-squares GAN: `(d_loss, g_loss)` with
/// `d = ½[(real − 1)² + fake²]`, `g = ½(fake − 1)²`.
pub fn adversarial_losses(real: f64, fake: f64) -> (f64, f64) {
    (0.5 * ((real - 1.0).powi(2) + fake.powi(2)), 0.5 * (fake - 1.0).powi(2))
}

/// Graph form of the discriminator loss.
pub fn discriminator_loss(g: &Graph, real: Var, fake: Var) -> Var {
    let one = g.constant(Mat::ones((1, 1)));
    g.scale(g.add(g.square(g.sub(real, one)), g.square(fake)), 0.5)
}

/// Graph form of the generator loss.
pub fn generator_loss(g: &Graph, fake: Var) -> Var {
    let one = g.constant(Mat::ones((1, 1)));
    g.scale(g.square(g.sub(fake, one)), 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc(seed: u64) -> (Discriminator, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Discriminator::new(&mut Init { store: &mut store, rng: &mut rng }, "disc", 16, 12, 3, 4, 32);
        (d, store)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn loss_plug_ins() {
        assert_eq!(adversarial_losses(1.0, 0.0), (0.0, 0.5));
        assert_eq!(adversarial_losses(0.0, 1.0), (1.0, 0.0));
        assert_eq!(adversarial_losses(0.5, 0.5), (0.25, 0.125));
    }

    #[test]
    fn graph_losses_match_scalar_form() {
        let g = Graph::new();
        let (r, f) = (0.3, -1.7);
        let rv = g.constant(Mat::from_elem((1, 1), r));
        let fv = g.constant(Mat::from_elem((1, 1), f));
        let (d, gl) = adversarial_losses(r, f);
        assert!((g.scalar(discriminator_loss(&g, rv, fv)) - d).abs() < 1e-15);
        assert!((g.scalar(generator_loss(&g, fv)) - gl).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn losses_nonnegative(real in -10.0f64..10.0, fake in -10.0f64..10.0) {
            let (d, g) = adversarial_losses(real, fake);
            prop_assert!(d >= 0.0 && g >= 0.0);
        }
    }

    #[test]
    fn zero_weights_score_zero() {
        let (d, mut store) = disc(1);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = discriminate(&d, &store, &random(&mut rng, 8, 69), &[0.5; 12]).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut differing = 0;
        for seed in 0..20 {
            let (d, store) = disc(100 + seed);
            let j = random(&mut rng, 2, 69);
            let scene: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = discriminate(&d, &store, &j, &scene).unwrap();
            assert_eq!(a, discriminate(&d, &store, &j, &scene).unwrap());
            let mut swapped = j.clone();
            swapped.row_mut(0).assign(&j.row(1));
            swapped.row_mut(1).assign(&j.row(0));
            if discriminate(&d, &store, &swapped, &scene).unwrap() != a {
                differing += 1;
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let (d, store) = disc(4);
        assert!(discriminate(&d, &store, &Mat::zeros((3, 68)), &[0.0; 12]).is_err());
        assert!(discriminate(&d, &store, &Mat::zeros((3, 69)), &[0.0; 11]).is_err());
    }
}
