use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coffee::{CoffeeConfig, Method, TrainableGroup};
use crate::datagen::{ATTRIBUTES, CONCEPTS};
use crate::diffusion::PretrainConfig;
use crate::error::{Error, Result};
use crate::eval::FeatureExtractorConfig;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptPair {
    pub concept: String,
    pub attribute: String,
}

impl ConceptPair {
    pub fn new(concept: &str, attribute: &str) -> Self {
        Self {
            concept: concept.into(),
            attribute: attribute.into(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.concept, self.attribute)
    }
}

/// Sampling settings shared by every run; seeds and negative prompts are set per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub guidance_scale: f32,
    pub clip_denoised: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            guidance_scale: 3.0,
            clip_denoised: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSettings {
    pub steps: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub n_images: usize,
    /// Guidance scale of the negative-prompt training objective.
    pub train_guidance_scale: f32,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let c = CoffeeConfig::default();
        Self {
            steps: c.steps,
            lr: c.lr,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            n_images: 10,
            train_guidance_scale: c.guidance_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub feature_extractor: FeatureExtractorConfig,
    pub feature_corpus_size: usize,
    pub feature_seed: u64,
    /// Labeled images used to build the attribute prototypes.
    pub refset_size: usize,
    /// Attribute-free images per base concept for the Fréchet reference.
    pub clean_refset_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            feature_extractor: FeatureExtractorConfig::default(),
            feature_corpus_size: 2000,
            feature_seed: 1,
            refset_size: 1000,
            clean_refset_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("runs"),
        }
    }
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        self.work_dir.join("pretrained.ckpt")
    }

    pub fn feature_extractor(&self) -> PathBuf {
        self.work_dir.join("feature_extractor.ckpt")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub concept_pairs: Vec<ConceptPair>,
    pub methods: Vec<Method>,
    pub lambda: f32,
    pub lambda_sweep: Option<Vec<f32>>,
    pub seeds: Vec<u64>,
    pub trainable_groups: Vec<TrainableGroup>,
    pub sampler: SamplerSettings,
    pub n_eval_samples: usize,
    pub finetune: FinetuneSettings,
    pub pretrain: PretrainConfig,
    pub eval: EvalSettings,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            concept_pairs: vec![
                ConceptPair::new("circle", "frame"),
                ConceptPair::new("square", "stripe"),
                ConceptPair::new("triangle", "dot"),
                ConceptPair::new("cross", "checker"),
            ],
            methods: Method::ALL.to_vec(),
            lambda: 1.0,
            lambda_sweep: Some(vec![0.0, 0.1, 1.0, 10.0]),
            seeds: vec![0, 1, 2],
            trainable_groups: vec![TrainableGroup::TextEncoder],
            sampler: SamplerSettings::default(),
            n_eval_samples: 16,
            finetune: FinetuneSettings::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalSettings::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.concept_pairs.is_empty() {
            return bad("at least one concept pair is required".into());
        }
        if self.n_eval_samples < 16 {
            return bad(format!("n_eval_samples must be >= 16, got {}", self.n_eval_samples));
        }
        if self.finetune.n_images == 0 {
            return bad("finetune.n_images must be >= 1".into());
        }
        for p in &self.concept_pairs {
            if !CONCEPTS.contains(&p.concept.as_str()) {
                return Err(Error::UnknownConcept(p.concept.clone()));
            }
            if !ATTRIBUTES.contains(&p.attribute.as_str()) {
                return Err(Error::UnknownConcept(p.attribute.clone()));
            }
        }
        if let Some(sweep) = &self.lambda_sweep {
            check_lambdas(sweep)?;
        }
        self.coffee_config(self.lambda, &self.trainable_groups).validate()?;
        self.pretrain.validate()
    }

    /// Fine-tuning configuration for one run.
    pub fn coffee_config(&self, lambda: f32, groups: &[TrainableGroup]) -> CoffeeConfig {
        CoffeeConfig {
            lambda,
            trainable_groups: groups.to_vec(),
            steps: self.finetune.steps,
            lr: self.finetune.lr,
            weight_decay: self.finetune.weight_decay,
            batch_size: self.finetune.batch_size,
            guidance_scale: self.finetune.train_guidance_scale,
            live_concept_embeddings: false,
        }
    }
}

/// Non-empty, ascending, non-negative.
pub fn check_lambdas(lambdas: &[f32]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("lambda sweep is empty".into()));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0)) || lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!(
            "lambda sweep must be strictly ascending and non-negative: {lambdas:?}"
        )));
    }
    Ok(())
}

/// Hex SHA-256 of the compact JSON serialization.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("fingerprinted value serializes");
    hex::encode(Sha256::digest(&json))
}
