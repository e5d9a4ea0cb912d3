use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, load_feature_extractor, save_checkpoint, save_feature_extractor, ModelState};
use super::config::{check_lambdas, fingerprint, ConceptPair, ExperimentConfig};
use crate::coffee::{finetune, LossBreakdown, Method, TrainableGroup};
use crate::datagen::{build_clean_set, build_finetune_set, build_pretrain_corpus, AttributeSpec, LabeledImage};
use crate::diffusion::{pretrain, sample_images, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::{
    attribute_prototype, drift, ffd, is_analog, mcs_with_prototype, presence_rate, train_feature_extractor,
    EvalReport, ExtractorQuality, FeatureExtractor, MIN_FFD_SAMPLES,
};
use crate::rng::{derive_seed, stream};
use crate::textenc::{snapshot_refs, ConceptRefs};

/// Trains the backbone described by `cfg.pretrain`.
pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<ModelState> {
    let p = &cfg.pretrain;
    let corpus = build_pretrain_corpus(p.corpus_size, derive_seed(p.seed, "pretrain-corpus"))?;
    let trained = pretrain(&corpus, p)?;
    Ok(ModelState {
        net: trained.net,
        table: trained.table,
        schedule: p.schedule,
        fingerprint: fingerprint(p),
        seed: p.seed,
    })
}

/// Trains the frozen evaluation feature extractor.
pub fn train_eval_head(cfg: &ExperimentConfig) -> Result<(FeatureExtractor, ExtractorQuality)> {
    let e = &cfg.eval;
    let corpus = build_pretrain_corpus(e.feature_corpus_size, derive_seed(e.feature_seed, "feature-corpus"))?;
    train_feature_extractor(&corpus, e.feature_seed, &e.feature_extractor)
}

/// Everything an experiment run reads but never mutates.
pub struct Artifacts {
    pub model: ModelState,
    pub fx: FeatureExtractor,
    pub quality: Option<ExtractorQuality>,
    pub refset: Vec<LabeledImage>,
    prototypes: BTreeMap<String, Vec<f32>>,
    clean: BTreeMap<String, Vec<Vec<f32>>>,
}

impl Artifacts {
    pub fn from_parts(
        cfg: &ExperimentConfig,
        model: ModelState,
        fx: FeatureExtractor,
        quality: Option<ExtractorQuality>,
    ) -> Result<Self> {
        let e = &cfg.eval;
        let refset = build_pretrain_corpus(e.refset_size, derive_seed(e.feature_seed, "refset"))?;
        let mut prototypes = BTreeMap::new();
        let mut clean = BTreeMap::new();
        for pair in &cfg.concept_pairs {
            if !prototypes.contains_key(&pair.attribute) {
                let p = attribute_prototype(&pair.attribute, &fx, &refset)?;
                prototypes.insert(pair.attribute.clone(), p);
            }
            if !clean.contains_key(&pair.concept) {
                let set = build_clean_set(&pair.concept, e.clean_refset_size, derive_seed(e.feature_seed, "clean"))?;
                clean.insert(pair.concept.clone(), set.into_iter().map(|im| im.pixels).collect());
            }
        }
        Ok(Self {
            model,
            fx,
            quality,
            refset,
            prototypes,
            clean,
        })
    }

    /// Trains the backbone and feature extractor in memory.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let model = pretrain_model(cfg)?;
        let (fx, quality) = train_eval_head(cfg)?;
        Self::from_parts(cfg, model, fx, Some(quality))
    }

    /// Loads both checkpoints from `cfg.paths`, checking their fingerprints.
    pub fn load(cfg: &ExperimentConfig, config_path: Option<&Path>) -> Result<Self> {
        let flag = config_path.map_or(String::new(), |p| format!(" --config {}", p.display()));
        let ckpt = cfg.paths.checkpoint();
        if !ckpt.exists() {
            return Err(Error::MissingArtifact {
                what: "pretrained checkpoint",
                path: ckpt,
                hint: format!("coffee-lab pretrain{flag}"),
            });
        }
        let fx_path = cfg.paths.feature_extractor();
        if !fx_path.exists() {
            return Err(Error::MissingArtifact {
                what: "feature extractor",
                path: fx_path,
                hint: format!("coffee-lab train-eval-head{flag}"),
            });
        }
        let model = load_checkpoint(&ckpt, Some(&fingerprint(&cfg.pretrain)))?;
        let fx = load_feature_extractor(&fx_path, Some(&fingerprint(&cfg.eval)))?;
        Self::from_parts(cfg, model, fx, None)
    }

    /// Loads the checkpoints when present, otherwise trains and saves them.
    pub fn load_or_build(cfg: &ExperimentConfig) -> Result<Self> {
        let paths = &cfg.paths;
        let model = if paths.checkpoint().exists() {
            load_checkpoint(&paths.checkpoint(), Some(&fingerprint(&cfg.pretrain)))?
        } else {
            let m = pretrain_model(cfg)?;
            save_checkpoint(&paths.checkpoint(), &m)?;
            m
        };
        let (fx, quality) = if paths.feature_extractor().exists() {
            (load_feature_extractor(&paths.feature_extractor(), Some(&fingerprint(&cfg.eval)))?, None)
        } else {
            let (fx, q) = train_eval_head(cfg)?;
            save_feature_extractor(&paths.feature_extractor(), &fx, &fingerprint(&cfg.eval), cfg.eval.feature_seed)?;
            (fx, Some(q))
        };
        Self::from_parts(cfg, model, fx, quality)
    }

    pub fn prototype(&self, attribute: &str) -> Result<&[f32]> {
        self.prototypes
            .get(attribute)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownConcept(attribute.to_string()))
    }

    pub fn clean_refs(&self, concept: &str) -> Result<Vec<&[f32]>> {
        self.clean
            .get(concept)
            .map(|v| v.iter().map(Vec::as_slice).collect())
            .ok_or_else(|| Error::UnknownConcept(concept.to_string()))
    }
}

/// One fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub pair: ConceptPair,
    pub method: Method,
    pub seed: u64,
    pub lambda: f32,
    pub groups: Vec<TrainableGroup>,
    /// Fine-tune on the dominant-coverage variant of the attribute.
    pub dominant: bool,
}

impl RunSpec {
    pub fn new(pair: &ConceptPair, method: Method, seed: u64, cfg: &ExperimentConfig) -> Self {
        Self {
            pair: pair.clone(),
            method,
            seed,
            lambda: cfg.lambda,
            groups: cfg.trainable_groups.clone(),
            dominant: false,
        }
    }

    fn seed_for(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, &format!("{purpose}/{}", self.pair.label()))
    }
}

/// Fine-tuned state and the references it was regularized against.
pub struct FinetuneOutcome {
    pub state: ModelState,
    pub refs: ConceptRefs,
    pub trace: Vec<LossBreakdown>,
}

/// Fine-tunes a copy of the pretrained model.
///
/// Data, noise and sampling streams depend only on the seed and the concept
/// pair, so all methods of a pair see the same images and noise.
pub fn finetune_run(art: &Artifacts, cfg: &ExperimentConfig, spec: &RunSpec) -> Result<FinetuneOutcome> {
    let attr = if spec.dominant {
        AttributeSpec::dominant(&spec.pair.attribute)?
    } else {
        AttributeSpec::by_name(&spec.pair.attribute)?
    };
    let data = build_finetune_set(&spec.pair.concept, &attr, cfg.finetune.n_images, spec.seed_for("finetune-data"))?;
    let pixels: Vec<&[f32]> = data.iter().map(|im| im.pixels.as_slice()).collect();

    let mut state = art.model.clone();
    let refs = snapshot_refs(&spec.pair.concept, &[spec.pair.attribute.as_str()], &state.table)?;
    let schedule = NoiseSchedule::from_params(&state.schedule)?;
    let coffee_cfg = cfg.coffee_config(spec.lambda, &spec.groups);
    let mut rng = stream(spec.seed_for("finetune-noise"));
    let trace = finetune(
        spec.method,
        &mut state.net,
        &mut state.table,
        &pixels,
        Some(&refs),
        &spec.pair.concept,
        &schedule,
        &coffee_cfg,
        &mut rng,
    )?;
    Ok(FinetuneOutcome { state, refs, trace })
}

/// Samples with the method's inference prompt and computes every metric.
pub fn evaluate_model(
    art: &Artifacts,
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    state: &ModelState,
    refs: &ConceptRefs,
) -> Result<EvalReport> {
    let pair = &spec.pair;
    let undesired = [pair.attribute.clone()];
    let prompt = spec.method.inference_prompt(&pair.concept, &undesired);
    let sampler = SamplerConfig {
        guidance_scale: cfg.sampler.guidance_scale,
        negative_prompt: spec.method.samples_with_negative().then(|| pair.attribute.clone()),
        seed: spec.seed_for("sample"),
        clip_denoised: cfg.sampler.clip_denoised,
    };
    let schedule = NoiseSchedule::from_params(&state.schedule)?;
    let samples = sample_images(&state.net, &state.table, &prompt, &schedule, &sampler, cfg.n_eval_samples)?;
    let s: Vec<&[f32]> = samples.iter().map(Vec::as_slice).collect();
    let clean = art.clean_refs(&pair.concept)?;
    let ffd_value = if s.len() >= MIN_FFD_SAMPLES && clean.len() >= MIN_FFD_SAMPLES {
        Some(ffd(&s, &clean, &art.fx)?)
    } else {
        None
    };
    Ok(EvalReport {
        method: spec.method,
        concept: pair.concept.clone(),
        attribute: pair.attribute.clone(),
        seed: spec.seed,
        lambda: if spec.method == Method::Coffee { spec.lambda } else { 0.0 },
        guidance_scale: cfg.sampler.guidance_scale,
        mcs_analog: mcs_with_prototype(&s, art.prototype(&pair.attribute)?, &art.fx)?,
        presence_rate: presence_rate(&s, &pair.attribute, &art.fx)?,
        is_analog: is_analog(&s, &art.fx)?,
        ffd: ffd_value,
        drift: drift(&state.table, refs)?,
        n_samples: s.len(),
        fingerprint: art.model.fingerprint.clone(),
    })
}

/// Result of one run: its report, loss trace, and digests of the fine-tuned state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub report: EvalReport,
    pub trace: Vec<LossBreakdown>,
    /// SHA-256 of the fine-tuned checkpoint bytes.
    pub checkpoint_digest: String,
    /// SHA-256 of the embedding table bytes.
    pub table_digest: String,
}

pub fn table_digest(state: &ModelState) -> String {
    let mut h = Sha256::new();
    for x in state.table.matrix().data() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn run_one(art: &Artifacts, cfg: &ExperimentConfig, spec: &RunSpec) -> Result<RunOutcome> {
    let out = finetune_run(art, cfg, spec)?;
    let report = evaluate_model(art, cfg, spec, &out.state, &out.refs)?;
    Ok(RunOutcome {
        spec: spec.clone(),
        report,
        trace: out.trace,
        checkpoint_digest: hex::encode(Sha256::digest(out.state.to_bytes())),
        table_digest: table_digest(&out.state),
    })
}

/// Runs independent specs on the worker pool; output order follows `specs`.
pub fn run_specs(art: &Artifacts, cfg: &ExperimentConfig, specs: &[RunSpec]) -> Result<Vec<RunOutcome>> {
    specs.par_iter().map(|s| run_one(art, cfg, s)).collect()
}

/// Specs for every (pair, method, seed), sorted by pair, method, seed.
pub fn experiment_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let mut specs = Vec::new();
    for pair in &cfg.concept_pairs {
        for &m in &methods {
            for &seed in &cfg.seeds {
                specs.push(RunSpec::new(pair, m, seed, cfg));
            }
        }
    }
    specs
}

pub fn run_experiment(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    run_specs(art, cfg, &experiment_specs(cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f32,
    pub concept: String,
    pub attribute: String,
    pub seed: u64,
    pub mcs_analog: f64,
    pub presence_rate: f64,
    pub is_analog: f64,
    pub ffd: Option<f64>,
    pub drift: Vec<f32>,
    pub checkpoint_digest: String,
}

/// Per-λ means and standard errors across seeds (each seed averaged over pairs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda: f32,
    pub mcs_mean: f64,
    pub mcs_se: f64,
    pub ffd_mean: Option<f64>,
    pub ffd_se: Option<f64>,
    pub presence_mean: f64,
    pub is_mean: f64,
    pub drift_mean: f64,
    pub highlighted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    /// For a sweep containing λ = 0: whether every λ = 0 run reproduced the
    /// direct fine-tuning checkpoint and metrics bit for bit.
    pub zero_matches_direct: Option<bool>,
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn per_seed_means(rows: &[&SweepRow], seeds: &[u64], f: impl Fn(&SweepRow) -> Option<f64>) -> Option<Vec<f64>> {
    seeds
        .iter()
        .map(|&s| {
            let vals: Option<Vec<f64>> = rows.iter().filter(|r| r.seed == s).map(|r| f(r)).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

fn metrics_bits_equal(a: &EvalReport, b: &EvalReport) -> bool {
    a.mcs_analog.to_bits() == b.mcs_analog.to_bits()
        && a.presence_rate.to_bits() == b.presence_rate.to_bits()
        && a.is_analog.to_bits() == b.is_analog.to_bits()
        && a.ffd.map(f64::to_bits) == b.ffd.map(f64::to_bits)
        && a.drift == b.drift
}

/// Coffee runs for each λ; the direct runs used for the λ = 0 check are passed
/// in so callers can share them with the main experiment.
pub fn sweep_from_outcomes(
    cfg: &ExperimentConfig,
    lambdas: &[f32],
    coffee: &[RunOutcome],
    direct: &[RunOutcome],
) -> Result<SweepTable> {
    check_lambdas(lambdas)?;
    let rows: Vec<SweepRow> = coffee
        .iter()
        .map(|o| SweepRow {
            lambda: o.spec.lambda,
            concept: o.spec.pair.concept.clone(),
            attribute: o.spec.pair.attribute.clone(),
            seed: o.spec.seed,
            mcs_analog: o.report.mcs_analog,
            presence_rate: o.report.presence_rate,
            is_analog: o.report.is_analog,
            ffd: o.report.ffd,
            drift: o.report.drift.clone(),
            checkpoint_digest: o.checkpoint_digest.clone(),
        })
        .collect();
    let mut summary = Vec::new();
    for &l in lambdas {
        let at: Vec<&SweepRow> = rows.iter().filter(|r| r.lambda == l).collect();
        let (mcs_mean, mcs_se) = mean_se(&per_seed_means(&at, &cfg.seeds, |r| Some(r.mcs_analog)).expect("mcs"));
        let ffd = per_seed_means(&at, &cfg.seeds, |r| r.ffd).map(|v| mean_se(&v));
        let mean_of = |f: &dyn Fn(&SweepRow) -> f64| at.iter().map(|r| f(r)).sum::<f64>() / at.len() as f64;
        summary.push(SweepSummary {
            lambda: l,
            mcs_mean,
            mcs_se,
            ffd_mean: ffd.map(|x| x.0),
            ffd_se: ffd.map(|x| x.1),
            presence_mean: mean_of(&|r| r.presence_rate),
            is_mean: mean_of(&|r| r.is_analog),
            drift_mean: mean_of(&|r| r.drift.iter().map(|&d| d as f64).sum::<f64>() / r.drift.len() as f64),
            highlighted: l == 1.0,
        });
    }
    let zero_matches_direct = lambdas.contains(&0.0).then(|| {
        coffee.iter().filter(|o| o.spec.lambda == 0.0).all(|z| {
            direct.iter().any(|d| {
                d.spec.pair == z.spec.pair
                    && d.spec.seed == z.spec.seed
                    && d.checkpoint_digest == z.checkpoint_digest
                    && metrics_bits_equal(&d.report, &z.report)
            })
        })
    });
    Ok(SweepTable {
        rows,
        summary,
        zero_matches_direct,
    })
}

pub fn sweep_specs(cfg: &ExperimentConfig, lambdas: &[f32]) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for &l in lambdas {
        for pair in &cfg.concept_pairs {
            for &seed in &cfg.seeds {
                specs.push(RunSpec {
                    lambda: l,
                    ..RunSpec::new(pair, Method::Coffee, seed, cfg)
                });
            }
        }
    }
    specs
}

/// One coffee run per λ per (pair, seed), plus direct runs when λ = 0 is swept.
pub fn run_lambda_sweep(cfg: &ExperimentConfig, art: &Artifacts, lambdas: &[f32]) -> Result<SweepTable> {
    check_lambdas(lambdas)?;
    let coffee = run_specs(art, cfg, &sweep_specs(cfg, lambdas))?;
    let direct = if lambdas.contains(&0.0) {
        let specs: Vec<RunSpec> = experiment_specs(&ExperimentConfig {
            methods: vec![Method::Direct],
            ..cfg.clone()
        });
        run_specs(art, cfg, &specs)?
    } else {
        Vec::new()
    };
    sweep_from_outcomes(cfg, lambdas, &coffee, &direct)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub groups: Vec<TrainableGroup>,
    pub trainable_params: usize,
    /// Fraction of the full-model parameter count.
    pub param_fraction: f64,
    pub is_analog: f64,
    pub ffd: Option<f64>,
    pub mcs_analog: f64,
    pub presence_rate: f64,
    /// Percentage change against the full-model row.
    pub delta_is_pct: f64,
    pub delta_ffd_pct: Option<f64>,
    /// Whether every run left the embedding table bit-unchanged.
    pub table_unchanged: bool,
}

pub fn protocol_variants() -> [Vec<TrainableGroup>; 3] {
    [
        vec![TrainableGroup::TextEncoder],
        vec![TrainableGroup::Denoiser],
        vec![TrainableGroup::TextEncoder, TrainableGroup::Denoiser],
    ]
}

pub fn protocol_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for groups in protocol_variants() {
        for pair in &cfg.concept_pairs {
            for &seed in &cfg.seeds {
                specs.push(RunSpec {
                    groups: groups.clone(),
                    ..RunSpec::new(pair, Method::Direct, seed, cfg)
                });
            }
        }
    }
    specs
}

pub fn percent_change(value: f64, base: f64) -> f64 {
    (value - base) / base.abs() * 100.0
}

pub fn protocols_from_outcomes(art: &Artifacts, outcomes: &[RunOutcome]) -> Vec<ProtocolRow> {
    let table_params = art.model.table.matrix().numel();
    let net_params = art.model.net.param_count();
    let full = table_params + net_params;
    let pretrained_table = table_digest(&art.model);
    let mut rows: Vec<ProtocolRow> = protocol_variants()
        .into_iter()
        .map(|groups| {
            let runs: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.spec.groups == groups).collect();
            let n = runs.len() as f64;
            let trainable_params = groups
                .iter()
                .map(|g| match g {
                    TrainableGroup::TextEncoder => table_params,
                    TrainableGroup::Denoiser => net_params,
                })
                .sum();
            let ffd: Option<Vec<f64>> = runs.iter().map(|o| o.report.ffd).collect();
            ProtocolRow {
                trainable_params,
                param_fraction: trainable_params as f64 / full as f64,
                is_analog: runs.iter().map(|o| o.report.is_analog).sum::<f64>() / n,
                ffd: ffd.map(|v| v.iter().sum::<f64>() / n),
                mcs_analog: runs.iter().map(|o| o.report.mcs_analog).sum::<f64>() / n,
                presence_rate: runs.iter().map(|o| o.report.presence_rate).sum::<f64>() / n,
                delta_is_pct: 0.0,
                delta_ffd_pct: None,
                table_unchanged: runs.iter().all(|o| o.table_digest == pretrained_table),
                groups,
            }
        })
        .collect();
    let (base_is, base_ffd) = (rows[2].is_analog, rows[2].ffd);
    for r in &mut rows {
        r.delta_is_pct = percent_change(r.is_analog, base_is);
        r.delta_ffd_pct = r.ffd.zip(base_ffd).map(|(f, b)| percent_change(f, b));
    }
    rows
}

/// Direct fine-tuning under text-encoder-only, denoiser-only and full training.
pub fn run_protocol_comparison(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Vec<ProtocolRow>> {
    let outcomes = run_specs(art, cfg, &protocol_specs(cfg))?;
    Ok(protocols_from_outcomes(art, &outcomes))
}

/// Attribute presence under the standard and dominant coverage regimes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceRow {
    pub concept: String,
    pub attribute: String,
    pub coverage_standard: f64,
    pub coverage_dominant: f64,
    pub presence_direct_standard: f64,
    pub presence_coffee_standard: f64,
    pub presence_direct_dominant: f64,
    pub presence_coffee_dominant: f64,
}

pub fn dominance_specs(cfg: &ExperimentConfig, dominant: bool) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for pair in &cfg.concept_pairs {
        for m in [Method::Direct, Method::Coffee] {
            for &seed in &cfg.seeds {
                specs.push(RunSpec {
                    dominant,
                    ..RunSpec::new(pair, m, seed, cfg)
                });
            }
        }
    }
    specs
}

pub fn dominance_from_outcomes(cfg: &ExperimentConfig, outcomes: &[RunOutcome]) -> Result<Vec<DominanceRow>> {
    let mean = |pair: &ConceptPair, m: Method, dominant: bool| {
        let v: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.spec.pair == *pair && o.spec.method == m && o.spec.dominant == dominant)
            .map(|o| o.report.presence_rate)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    cfg.concept_pairs
        .iter()
        .map(|p| {
            Ok(DominanceRow {
                concept: p.concept.clone(),
                attribute: p.attribute.clone(),
                coverage_standard: AttributeSpec::by_name(&p.attribute)?.coverage(),
                coverage_dominant: AttributeSpec::dominant(&p.attribute)?.coverage(),
                presence_direct_standard: mean(p, Method::Direct, false),
                presence_coffee_standard: mean(p, Method::Coffee, false),
                presence_direct_dominant: mean(p, Method::Direct, true),
                presence_coffee_dominant: mean(p, Method::Coffee, true),
            })
        })
        .collect()
}

pub fn run_dominance_diagnostic(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Vec<DominanceRow>> {
    let mut specs = dominance_specs(cfg, false);
    specs.extend(dominance_specs(cfg, true));
    let outcomes = run_specs(art, cfg, &specs)?;
    dominance_from_outcomes(cfg, &outcomes)
}
