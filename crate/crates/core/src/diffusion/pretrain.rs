use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{diffusion_loss, DenoiserNet, DiffusionBatch, NoiseSchedule, ScheduleParams};
use crate::autodiff::{adamw_step, AdamWConfig, AdamWState, Graph};
use crate::datagen::{combinations, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::textenc::{encode_batch, EmbeddingTable, Vocabulary, UNCOND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Probability of replacing a prompt with `<uncond>`.
    pub uncond_prob: f64,
    pub schedule: ScheduleParams,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_size: 2000,
            steps: 15000,
            batch_size: 64,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            uncond_prob: 0.1,
            schedule: ScheduleParams::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::InvalidConfig(format!(
                "pretraining batch {} / dropout {}",
                self.batch_size, self.uncond_prob
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub net: DenoiserNet,
    pub table: EmbeddingTable,
    pub losses: Vec<f32>,
    /// Number of examples whose prompt was replaced by `<uncond>`.
    pub uncond_uses: usize,
}

fn check_coverage(corpus: &[LabeledImage]) -> Result<()> {
    for (c, a) in combinations() {
        let found = corpus.iter().any(|im| {
            im.base == c && im.attributes.len() == a.iter().count() && a.is_none_or(|a| im.has_attribute(a))
        });
        if !found {
            return Err(Error::MissingCombination(format!("{c} + {}", a.unwrap_or("nothing"))));
        }
    }
    Ok(())
}

/// Trains the denoiser and the embedding table jointly from scratch.
pub fn pretrain(corpus: &[LabeledImage], cfg: &PretrainConfig) -> Result<Pretrained> {
    cfg.validate()?;
    check_coverage(corpus)?;
    let schedule = NoiseSchedule::from_params(&cfg.schedule)?;
    let mut net = DenoiserNet::init(derive_seed(cfg.seed, "pretrain-net"));
    let mut table = EmbeddingTable::init(Vocabulary::toy(), derive_seed(cfg.seed, "pretrain-table"));
    let mut rng = stream(derive_seed(cfg.seed, "pretrain-steps"));

    let mut states: Vec<AdamWState> = net
        .tensors()
        .into_iter()
        .chain([table.matrix()])
        .map(|t| AdamWState::new(t.numel(), &cfg.optimizer))
        .collect();

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut uncond_uses = 0;
    for _ in 0..cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut prompts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let im = &corpus[rng.random_range(0..corpus.len())];
            let drop = rng.random::<f64>() < cfg.uncond_prob;
            uncond_uses += drop as usize;
            images.push(im.pixels.as_slice());
            prompts.push(if drop { UNCOND } else { im.prompt.as_str() });
        }
        let batch = DiffusionBatch::draw(&images, &schedule, &mut rng)?;

        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let tv = g.leaf(table.matrix());
        let v = encode_batch(&mut g, tv, &table, &prompts)?;
        let loss = diffusion_loss(&mut g, &net, &vars, &batch, v)?;
        g.backward(loss)?;
        losses.push(g.scalar(loss));

        for (var, t) in vars.vars().into_iter().zip(net.tensors_mut()) {
            g.export_grad(var, t)?;
        }
        g.export_grad(tv, table.matrix_mut())?;
        let mut params = net.tensors_mut();
        params.push(table.matrix_mut());
        adamw_step(&mut params, &mut states)?;
    }
    if !net.is_finite() {
        return Err(Error::NonFinite { op: "pretrain" });
    }
    Ok(Pretrained {
        net,
        table,
        losses,
        uncond_uses,
    })
}
