//! Conditional DDPM core: noise schedule, forward process, ε-prediction
//! network and loss, ancestral sampling with classifier-free guidance, and
//! the pretraining loop that stands in for a public backbone.

mod net;
mod pretrain;
mod sampler;
mod schedule;

pub use net::{predict_noise, DenoiserNet, NetVars, HIDDEN, INPUT_DIM, TIME_DIM};
pub use pretrain::{pretrain, PretrainConfig, Pretrained};
pub use sampler::{ddpm_sample, guided, sample_images, SamplerConfig};
pub use schedule::{forward_noise, make_schedule, noise_with_alpha_bar, NoiseSchedule, ScheduleParams};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::datagen::PIXELS;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Maps `[0,1]` pixels to the `[-1,1]` diffusion range.
pub fn to_signed(pixels: &[f32]) -> Vec<f32> {
    pixels.iter().map(|&p| p * 2.0 - 1.0).collect()
}

/// Clips to `[-1,1]` and maps back to `[0,1]`.
pub fn to_unit(z: &[f32]) -> Vec<f32> {
    z.iter().map(|&x| (x.clamp(-1.0, 1.0) + 1.0) * 0.5).collect()
}

/// A batch of noised training examples, row-major `[B, 256]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionBatch {
    pub z_y: Vec<f32>,
    pub t: Vec<usize>,
    pub eps: Vec<f32>,
    pub z_t: Vec<f32>,
}

impl DiffusionBatch {
    /// Draws one timestep and one noise vector per image, in image order.
    pub fn draw(images: &[&[f32]], schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Self> {
        let mut batch = Self {
            z_y: Vec::with_capacity(images.len() * PIXELS),
            t: Vec::with_capacity(images.len()),
            eps: Vec::with_capacity(images.len() * PIXELS),
            z_t: Vec::with_capacity(images.len() * PIXELS),
        };
        for im in images {
            if im.len() != PIXELS {
                return Err(Error::Shape {
                    op: "diffusion_batch",
                    detail: format!("image of {} pixels", im.len()),
                });
            }
            let t = rng.random_range(0..schedule.steps());
            let eps: Vec<f32> = (0..PIXELS).map(|_| rng.sample(StandardNormal)).collect();
            let z_y = to_signed(im);
            batch.z_t.extend(forward_noise(&z_y, t, &eps, schedule)?);
            batch.z_y.extend(z_y);
            batch.eps.extend(eps);
            batch.t.push(t);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn batch_constants(g: &mut Graph, batch: &DiffusionBatch) -> Result<(Var, Var)> {
    let b = batch.len();
    let z_t = g.constant(vec![b, PIXELS], batch.z_t.clone())?;
    let eps = g.constant(vec![b, PIXELS], batch.eps.clone())?;
    Ok((z_t, eps))
}

/// Mean over coordinates of `(eps − ε̂)²`.
pub fn diffusion_loss(
    g: &mut Graph,
    net: &DenoiserNet,
    vars: &NetVars,
    batch: &DiffusionBatch,
    v: Var,
) -> Result<Var> {
    let (z_t, eps) = batch_constants(g, batch)?;
    let eps_hat = net.forward(g, vars, z_t, &batch.t, v)?;
    g.mse(eps_hat, eps)
}

/// MSE between `eps` and the guided prediction `ε̂(v) + w·(ε̂(v) − ε̂(v_neg))`,
/// i.e. `(1+w)·ε̂(v) − w·ε̂(v_neg)`.
pub fn neg_prompt_train_loss(
    g: &mut Graph,
    net: &DenoiserNet,
    vars: &NetVars,
    batch: &DiffusionBatch,
    v: Var,
    v_neg: Var,
    w: f32,
) -> Result<Var> {
    let (z_t, eps) = batch_constants(g, batch)?;
    let cond = net.forward(g, vars, z_t, &batch.t, v)?;
    let neg = net.forward(g, vars, z_t, &batch.t, v_neg)?;
    let guided = guided_on_graph(g, cond, neg, w)?;
    g.mse(guided, eps)
}

/// `cond + w·(cond − reference)` on the graph. Exact when `w = 0` or the branches coincide.
pub fn guided_on_graph(g: &mut Graph, cond: Var, reference: Var, w: f32) -> Result<Var> {
    let neg_ref = g.scale(reference, -1.0)?;
    let diff = g.add(cond, neg_ref)?;
    let push = g.scale(diff, w)?;
    g.add(cond, push)
}
