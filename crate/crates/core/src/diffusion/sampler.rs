use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{to_unit, DenoiserNet, NoiseSchedule};
use crate::datagen::PIXELS;
use crate::error::Result;
use crate::rng::{derive_index, stream, Rng};
use crate::textenc::{EmbeddingTable, UNCOND};

/// Ancestral sampling settings. Sampling always runs all `T` steps of the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Guidance scale `w`; `0` samples from the reference branch alone.
    pub guidance_scale: f32,
    /// Replaces the unconditional reference branch when set.
    #[serde(default)]
    pub negative_prompt: Option<String>,
    pub seed: u64,
    /// Clip the implied clean image to `[-1,1]` before each posterior step.
    #[serde(default = "default_clip")]
    pub clip_denoised: bool,
}

fn default_clip() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 3.0,
            negative_prompt: None,
            seed: 0,
            clip_denoised: true,
        }
    }
}

/// `reference + w·(cond − reference)`; returns `reference` untouched when `w = 0`.
pub fn guided(cond: &[f32], reference: &[f32], w: f32) -> Vec<f32> {
    cond.iter()
        .zip(reference)
        .map(|(&c, &r)| r + w * (c - r))
        .collect()
}

/// Draws `n` images for `prompt`. Sample `i` uses its own noise stream derived
/// from `cfg.seed` and `i`, so results do not depend on `n`.
pub fn sample_images(
    net: &DenoiserNet,
    table: &EmbeddingTable,
    prompt: &str,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<Vec<f32>>> {
    let w = cfg.guidance_scale;
    let v_cond = table.encode_value(prompt)?;
    let v_ref = table.encode_value(cfg.negative_prompt.as_deref().unwrap_or(UNCOND))?;
    let tile = |v: &[f32]| -> Vec<f32> { (0..n).flat_map(|_| v.iter().copied()).collect() };
    let (cond_batch, ref_batch) = (tile(&v_cond), tile(&v_ref));

    let mut rngs: Vec<Rng> = (0..n).map(|i| stream(derive_index(cfg.seed, i as u64))).collect();
    let mut z: Vec<f32> = rngs
        .iter_mut()
        .flat_map(|r| (0..PIXELS).map(|_| r.sample::<f32, _>(StandardNormal)).collect::<Vec<_>>())
        .collect();

    let (alpha, alpha_bar, beta) = (schedule.alpha(), schedule.alpha_bar(), schedule.beta());
    for t in (0..schedule.steps()).rev() {
        let ts = vec![t; n];
        let eps_ref = net.predict(&z, &ts, &ref_batch)?;
        let eps = if w == 0.0 {
            eps_ref
        } else {
            let eps_cond = net.predict(&z, &ts, &cond_batch)?;
            guided(&eps_cond, &eps_ref, w)
        };
        let ab_prev = if t > 0 { alpha_bar[t - 1] } else { 1.0 };
        let sigma = if t > 0 {
            (beta[t] * (1.0 - ab_prev) / (1.0 - alpha_bar[t])).sqrt()
        } else {
            0.0
        };
        // Posterior mean written in terms of the implied clean image x̂0.
        let c_x0 = beta[t] * ab_prev.sqrt() / (1.0 - alpha_bar[t]);
        let c_z = (1.0 - ab_prev) * alpha[t].sqrt() / (1.0 - alpha_bar[t]);
        let (sa, sn) = (alpha_bar[t].sqrt(), (1.0 - alpha_bar[t]).sqrt());
        for (i, r) in rngs.iter_mut().enumerate() {
            for k in i * PIXELS..(i + 1) * PIXELS {
                let zk = z[k] as f64;
                let mut x0 = (zk - sn * eps[k] as f64) / sa;
                if cfg.clip_denoised {
                    x0 = x0.clamp(-1.0, 1.0);
                }
                let mean = c_x0 * x0 + c_z * zk;
                let noise = if t > 0 { r.sample::<f64, _>(StandardNormal) } else { 0.0 };
                z[k] = (mean + sigma * noise) as f32;
            }
        }
    }
    Ok(z.chunks_exact(PIXELS).map(to_unit).collect())
}

/// One image in `[0,1]`.
pub fn ddpm_sample(
    net: &DenoiserNet,
    table: &EmbeddingTable,
    prompt: &str,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<f32>> {
    Ok(sample_images(net, table, prompt, schedule, cfg, 1)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleParams;
    use crate::textenc::Vocabulary;

    fn parts() -> (DenoiserNet, EmbeddingTable, NoiseSchedule) {
        let mut table = EmbeddingTable::init(Vocabulary::toy(), 5);
        table.matrix_mut().data_mut().iter_mut().for_each(|x| *x *= 30.0);
        let sched = NoiseSchedule::from_params(&ScheduleParams {
            steps: 20,
            ..ScheduleParams::default()
        })
        .unwrap();
        (DenoiserNet::init(2), table, sched)
    }

    #[test]
    fn guidance_identity_at_zero_scale() {
        let c = [0.3f32, -1.2, 4.0];
        let r = [1.1f32, 0.0, -2.5];
        assert_eq!(guided(&c, &r, 0.0), r);
    }

    #[test]
    fn zero_scale_ignores_the_prompt() {
        let (net, table, s) = parts();
        let cfg = SamplerConfig {
            guidance_scale: 0.0,
            negative_prompt: None,
            seed: 4,
            clip_denoised: true,
        };
        let a = ddpm_sample(&net, &table, "circle", &s, &cfg).unwrap();
        let b = ddpm_sample(&net, &table, "square frame", &s, &cfg).unwrap();
        assert_eq!(a, b);
        let uncond = ddpm_sample(&net, &table, UNCOND, &s, &cfg).unwrap();
        assert_eq!(a, uncond);
    }

    #[test]
    fn same_seed_same_image_and_batch_independence() {
        let (net, table, s) = parts();
        let cfg = SamplerConfig {
            guidance_scale: 3.0,
            negative_prompt: Some("frame".into()),
            seed: 9,
            clip_denoised: true,
        };
        let a = ddpm_sample(&net, &table, "circle", &s, &cfg).unwrap();
        assert_eq!(a, ddpm_sample(&net, &table, "circle", &s, &cfg).unwrap());
        let batch = sample_images(&net, &table, "circle", &s, &cfg, 3).unwrap();
        assert_eq!(batch[0], a);
        assert_ne!(batch[1], a);
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
