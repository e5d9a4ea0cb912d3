//! Desk-scale evaluation: a supervised feature extractor standing in for the
//! frozen image backbones, and the metrics computed in its feature space.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, kernels, AdamWConfig, AdamWState, Graph, Tensor};
use crate::coffee::{drift_of, Method};
use crate::datagen::{LabeledImage, ATTRIBUTES, CONCEPTS, PIXELS};
use crate::error::{Error, Result};
use crate::nn::{silu_in_place, Linear};
use crate::rng::{derive_seed, stream};
use crate::textenc::{ConceptRefs, EmbeddingTable};

pub const FEATURE_HIDDEN: usize = 64;
pub const FEATURE_DIM: usize = 32;
/// Logit magnitude the heads are regressed to.
const LOGIT_TARGET: f32 = 4.0;

pub const MIN_REFSET_PER_SIDE: usize = 50;
pub const MIN_IS_SAMPLES: usize = 16;
pub const MIN_FFD_SAMPLES: usize = FEATURE_DIM + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureExtractorConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Upper bound of the per-image Gaussian noise level used as augmentation.
    pub max_noise_std: f32,
    /// Fraction of the corpus held out for the accuracy checks.
    pub holdout: f64,
    pub min_base_accuracy: f64,
    pub min_attribute_auc: f64,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            lr: 3e-3,
            max_noise_std: 0.15,
            holdout: 0.2,
            min_base_accuracy: 0.98,
            min_attribute_auc: 0.99,
        }
    }
}

/// Held-out quality of a trained extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorQuality {
    pub train_base_accuracy: f64,
    pub heldout_base_accuracy: f64,
    pub heldout_attribute_auc: Vec<f64>,
}

/// `image → 64 → 32` SiLU MLP with a 4-way base-class head and a 4-way
/// attribute head over the 32-d feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: [Linear; 4],
}

/// Outputs of one forward pass, row-major per image.
#[derive(Clone, Debug)]
pub struct Heads {
    pub features: Vec<f32>,
    pub base_logits: Vec<f32>,
    pub attribute_logits: Vec<f32>,
}

impl FeatureExtractor {
    pub fn init(seed: u64) -> Self {
        let mut rng = stream(derive_seed(seed, "feature-extractor-init"));
        Self {
            layers: [
                Linear::init(PIXELS, FEATURE_HIDDEN, &mut rng),
                Linear::init(FEATURE_HIDDEN, FEATURE_DIM, &mut rng),
                Linear::init(FEATURE_DIM, CONCEPTS.len(), &mut rng),
                Linear::init(FEATURE_DIM, ATTRIBUTES.len(), &mut rng),
            ],
        }
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let dims = [
            (PIXELS, FEATURE_HIDDEN),
            (FEATURE_HIDDEN, FEATURE_DIM),
            (FEATURE_DIM, CONCEPTS.len()),
            (FEATURE_DIM, ATTRIBUTES.len()),
        ];
        if tensors.len() != 8 {
            return Err(Error::MalformedCheckpoint(format!(
                "feature extractor needs 8 tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(4);
        for (fan_in, fan_out) in dims {
            let (weight, bias) = (it.next().expect("checked"), it.next().expect("checked"));
            if weight.shape() != [fan_in, fan_out] || bias.shape() != [fan_out] {
                return Err(Error::MalformedCheckpoint(format!(
                    "feature extractor layer {:?}/{:?}, expected [{fan_in}, {fan_out}]",
                    weight.shape(),
                    bias.shape()
                )));
            }
            layers.push(Linear { weight, bias });
        }
        Ok(Self {
            layers: layers.try_into().expect("four layers"),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn heads(&self, images: &[&[f32]]) -> Result<Heads> {
        let n = images.len();
        let mut x = Vec::with_capacity(n * PIXELS);
        for im in images {
            if im.len() != PIXELS {
                return Err(Error::Shape {
                    op: "features",
                    detail: format!("image of {} pixels", im.len()),
                });
            }
            x.extend_from_slice(im);
        }
        let mut h = self.layers[0].apply(&x, n);
        silu_in_place(&mut h);
        let mut features = self.layers[1].apply(&h, n);
        silu_in_place(&mut features);
        let base_logits = self.layers[2].apply(&features, n);
        let attribute_logits = self.layers[3].apply(&features, n);
        Ok(Heads {
            features,
            base_logits,
            attribute_logits,
        })
    }

    /// 32-d features, one row per image.
    pub fn features(&self, images: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .heads(images)?
            .features
            .chunks_exact(FEATURE_DIM)
            .map(<[f32]>::to_vec)
            .collect())
    }

    /// Quality of the extractor on a labeled set.
    pub fn base_accuracy(&self, images: &[LabeledImage]) -> Result<f64> {
        let px: Vec<&[f32]> = images.iter().map(|im| im.pixels.as_slice()).collect();
        let heads = self.heads(&px)?;
        let hits = heads
            .base_logits
            .chunks_exact(CONCEPTS.len())
            .zip(images)
            .filter(|(logits, im)| argmax(logits) == concept_index(&im.base))
            .count();
        Ok(hits as f64 / images.len().max(1) as f64)
    }

    pub fn attribute_auc(&self, images: &[LabeledImage]) -> Result<Vec<f64>> {
        let px: Vec<&[f32]> = images.iter().map(|im| im.pixels.as_slice()).collect();
        let heads = self.heads(&px)?;
        Ok(ATTRIBUTES
            .iter()
            .enumerate()
            .map(|(a, name)| {
                let scored: Vec<(f32, bool)> = heads
                    .attribute_logits
                    .chunks_exact(ATTRIBUTES.len())
                    .zip(images)
                    .map(|(l, im)| (l[a], im.has_attribute(name)))
                    .collect();
                auc(&scored)
            })
            .collect())
    }
}

fn concept_index(name: &str) -> usize {
    CONCEPTS.iter().position(|c| *c == name).unwrap_or(usize::MAX)
}

fn attribute_index(name: &str) -> Result<usize> {
    ATTRIBUTES
        .iter()
        .position(|a| *a == name)
        .ok_or_else(|| Error::UnknownConcept(name.to_string()))
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mann–Whitney AUC with ties counted as one half; `NaN` when a class is absent.
fn auc(scored: &[(f32, bool)]) -> f64 {
    let pos: Vec<f32> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f32> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn targets(images: &[&LabeledImage]) -> (Vec<f32>, Vec<f32>) {
    let mut base = Vec::with_capacity(images.len() * CONCEPTS.len());
    let mut attr = Vec::with_capacity(images.len() * ATTRIBUTES.len());
    for im in images {
        let c = concept_index(&im.base);
        base.extend((0..CONCEPTS.len()).map(|i| if i == c { LOGIT_TARGET } else { -LOGIT_TARGET }));
        attr.extend(
            ATTRIBUTES
                .iter()
                .map(|a| if im.has_attribute(a) { LOGIT_TARGET } else { -LOGIT_TARGET }),
        );
    }
    (base, attr)
}

/// Trains the extractor on `corpus` and checks it on a held-out split.
///
/// Both heads regress to `±4` logits with MSE. Training images get additive
/// Gaussian noise so the extractor tolerates imperfect samples.
pub fn train_feature_extractor(
    corpus: &[LabeledImage],
    seed: u64,
    cfg: &FeatureExtractorConfig,
) -> Result<(FeatureExtractor, ExtractorQuality)> {
    if corpus.iter().any(|im| concept_index(&im.base) == usize::MAX) {
        return Err(Error::InvalidConfig("corpus contains an unknown base concept".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut stream(derive_seed(seed, "feature-split")));
    let n_held = ((corpus.len() as f64) * cfg.holdout).round() as usize;
    let (held_idx, train_idx) = order.split_at(n_held);
    if train_idx.is_empty() || held_idx.is_empty() {
        return Err(Error::InsufficientSamples {
            metric: "train_feature_extractor",
            needed: 2,
            got: corpus.len(),
        });
    }
    let train: Vec<&LabeledImage> = train_idx.iter().map(|&i| &corpus[i]).collect();
    let held: Vec<LabeledImage> = held_idx.iter().map(|&i| corpus[i].clone()).collect();

    let mut fx = FeatureExtractor::init(seed);
    let opt = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut states = AdamWState::for_params(&fx.tensors(), &opt);
    let mut rng = stream(derive_seed(seed, "feature-steps"));
    for _ in 0..cfg.steps {
        let batch: Vec<&LabeledImage> = (0..cfg.batch_size)
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let mut x = Vec::with_capacity(batch.len() * PIXELS);
        for im in &batch {
            let std = rng.random::<f32>() * cfg.max_noise_std;
            x.extend(im.pixels.iter().map(|&p| {
                let n: f32 = rng.sample(StandardNormal);
                (p + std * n).clamp(0.0, 1.0)
            }));
        }
        let (tb, ta) = targets(&batch);
        let b = batch.len();

        let mut g = Graph::new();
        let vars: Vec<_> = fx.layers.iter().map(|l| l.bind(&mut g)).collect();
        let xv = g.constant(vec![b, PIXELS], x)?;
        let h = Linear::forward(&mut g, xv, vars[0])?;
        let h = g.silu(h)?;
        let f = Linear::forward(&mut g, h, vars[1])?;
        let f = g.silu(f)?;
        let base = Linear::forward(&mut g, f, vars[2])?;
        let attr = Linear::forward(&mut g, f, vars[3])?;
        let tbv = g.constant(vec![b, CONCEPTS.len()], tb)?;
        let tav = g.constant(vec![b, ATTRIBUTES.len()], ta)?;
        let lb = g.mse(base, tbv)?;
        let la = g.mse(attr, tav)?;
        let loss = g.add(lb, la)?;
        g.backward(loss)?;

        let leaves: Vec<_> = vars.iter().flat_map(|&(w, b)| [w, b]).collect();
        let mut params = fx.tensors_mut();
        for (var, t) in leaves.into_iter().zip(params.iter_mut()) {
            g.export_grad(var, t)?;
        }
        adamw_step(&mut params, &mut states)?;
    }
    for t in fx.tensors_mut() {
        t.zero_grad();
        t.set_requires_grad(false);
    }

    let train_owned: Vec<LabeledImage> = train.iter().map(|&im| im.clone()).collect();
    let quality = ExtractorQuality {
        train_base_accuracy: fx.base_accuracy(&train_owned)?,
        heldout_base_accuracy: fx.base_accuracy(&held)?,
        heldout_attribute_auc: fx.attribute_auc(&held)?,
    };
    let min_auc = quality
        .heldout_attribute_auc
        .iter()
        .fold(f64::INFINITY, |m, &a| if a.is_nan() { f64::NEG_INFINITY } else { m.min(a) });
    if quality.heldout_base_accuracy < cfg.min_base_accuracy || !(min_auc >= cfg.min_attribute_auc) {
        return Err(Error::TrainingFailed(format!(
            "held-out base accuracy {:.4} (need {}), min attribute AUC {:.4} (need {})",
            quality.heldout_base_accuracy, cfg.min_base_accuracy, min_auc, cfg.min_attribute_auc
        )));
    }
    Ok((fx, quality))
}

fn normalized(f: &[f32]) -> Vec<f64> {
    let n = kernels::norm(f).max(kernels::COSINE_EPS);
    f.iter().map(|&x| x as f64 / n).collect()
}

/// Unit vector `mean(pos) − mean(neg)` of L2-normalized refset features.
pub fn attribute_prototype(attribute: &str, fx: &FeatureExtractor, refset: &[LabeledImage]) -> Result<Vec<f32>> {
    attribute_index(attribute)?;
    let (pos, neg): (Vec<&LabeledImage>, Vec<&LabeledImage>) =
        refset.iter().partition(|im| im.has_attribute(attribute));
    let fewest = pos.len().min(neg.len());
    if fewest < MIN_REFSET_PER_SIDE {
        return Err(Error::InsufficientSamples {
            metric: "mcs_analog",
            needed: MIN_REFSET_PER_SIDE,
            got: fewest,
        });
    }
    let mean_of = |set: &[&LabeledImage]| -> Result<Vec<f64>> {
        let px: Vec<&[f32]> = set.iter().map(|im| im.pixels.as_slice()).collect();
        let mut acc = vec![0f64; FEATURE_DIM];
        for f in fx.features(&px)? {
            for (a, x) in acc.iter_mut().zip(normalized(&f)) {
                *a += x;
            }
        }
        Ok(acc.into_iter().map(|a| a / set.len() as f64).collect())
    };
    let (mp, mn) = (mean_of(&pos)?, mean_of(&neg)?);
    let diff: Vec<f32> = mp.iter().zip(&mn).map(|(p, n)| (p - n) as f32).collect();
    let n = kernels::norm(&diff).max(kernels::COSINE_EPS);
    Ok(diff.iter().map(|&d| (d as f64 / n) as f32).collect())
}

/// Mean cosine between sample features and the attribute's contrast prototype.
pub fn mcs_analog(samples: &[&[f32]], attribute: &str, fx: &FeatureExtractor, refset: &[LabeledImage]) -> Result<f64> {
    let proto = attribute_prototype(attribute, fx, refset)?;
    mcs_with_prototype(samples, &proto, fx)
}

pub fn mcs_with_prototype(samples: &[&[f32]], prototype: &[f32], fx: &FeatureExtractor) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples {
            metric: "mcs_analog",
            needed: 1,
            got: 0,
        });
    }
    let feats = fx.features(samples)?;
    let total: f64 = feats.iter().map(|f| kernels::cosine(f, prototype) as f64).sum();
    Ok(total / feats.len() as f64)
}

/// Fraction of samples whose attribute logit is positive (sigmoid > 0.5).
pub fn presence_rate(samples: &[&[f32]], attribute: &str, fx: &FeatureExtractor) -> Result<f64> {
    let a = attribute_index(attribute)?;
    if samples.is_empty() {
        return Err(Error::InsufficientSamples {
            metric: "presence_rate",
            needed: 1,
            got: 0,
        });
    }
    let heads = fx.heads(samples)?;
    let hits = heads
        .attribute_logits
        .chunks_exact(ATTRIBUTES.len())
        .filter(|l| l[a] > 0.0)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `exp(mean_x KL(p(class|x) ‖ p(class)))` over the base-class head.
pub fn is_analog(samples: &[&[f32]], fx: &FeatureExtractor) -> Result<f64> {
    if samples.len() < MIN_IS_SAMPLES {
        return Err(Error::InsufficientSamples {
            metric: "is_analog",
            needed: MIN_IS_SAMPLES,
            got: samples.len(),
        });
    }
    let heads = fx.heads(samples)?;
    let probs: Vec<Vec<f64>> = heads.base_logits.chunks_exact(CONCEPTS.len()).map(softmax).collect();
    Ok(inception_score(&probs))
}

/// Inception-score formula on class probabilities; clamped to `≥ 1`.
pub fn inception_score(probs: &[Vec<f64>]) -> f64 {
    let k = probs.first().map_or(0, Vec::len);
    let mut marginal = vec![0f64; k];
    for p in probs {
        for (m, &x) in marginal.iter_mut().zip(p) {
            *m += x / probs.len() as f64;
        }
    }
    let mean_kl: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&x, _)| x > 0.0)
                .map(|(&x, &m)| x * (x / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / probs.len() as f64;
    mean_kl.exp().max(1.0)
}

fn gaussian_fit(feats: &[Vec<f32>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mu = vec![0f64; d];
    for f in feats {
        for (m, &x) in mu.iter_mut().zip(f) {
            *m += x as f64 / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for f in feats {
        let c: Vec<f64> = f.iter().zip(&mu).map(|(&x, m)| x as f64 - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// The trace of `(Σ1Σ2)^{1/2}` is computed as the trace of the square root
/// of the symmetric matrix `Σ1^{1/2} Σ2 Σ1^{1/2}`.
pub fn frechet_distance(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let fewest = a.len().min(b.len());
    if fewest < MIN_FFD_SAMPLES {
        return Err(Error::InsufficientSamples {
            metric: "ffd",
            needed: MIN_FFD_SAMPLES,
            got: fewest,
        });
    }
    let (mu1, s1) = gaussian_fit(a);
    let (mu2, s2) = gaussian_fit(b);
    let mean_term: f64 = mu1.iter().zip(&mu2).map(|(x, y)| (x - y).powi(2)).sum();
    let r1 = psd_sqrt(&s1);
    let cross = psd_sqrt(&(&r1 * &s2 * &r1)).trace();
    Ok((mean_term + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet feature distance between samples and an attribute-free reference set.
pub fn ffd(samples: &[&[f32]], refset: &[&[f32]], fx: &FeatureExtractor) -> Result<f64> {
    frechet_distance(&fx.features(samples)?, &fx.features(refset)?)
}

/// Post-hoc cosine drift of the user prompt against the frozen references.
pub fn drift(table: &EmbeddingTable, refs: &ConceptRefs) -> Result<Vec<f32>> {
    let v = table.encode_value(refs.user_prompt())?;
    Ok(drift_of(&v, refs.v_m(), refs.ref_cosines()))
}

/// Metrics of one fine-tuning run. `ffd` is measured against attribute-free
/// images of the base concept, so lower is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub concept: String,
    pub attribute: String,
    pub seed: u64,
    pub lambda: f32,
    pub guidance_scale: f32,
    pub mcs_analog: f64,
    pub presence_rate: f64,
    pub is_analog: f64,
    pub ffd: Option<f64>,
    pub drift: Vec<f32>,
    pub n_samples: usize,
    pub fingerprint: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_counts_ties_as_half() {
        assert_eq!(auc(&[(1.0, true), (0.0, false)]), 1.0);
        assert_eq!(auc(&[(0.0, true), (1.0, false)]), 0.0);
        assert_eq!(auc(&[(0.5, true), (0.5, false)]), 0.5);
        assert!(auc(&[(0.5, true)]).is_nan());
    }

    #[test]
    fn inception_score_bounds() {
        let same = vec![vec![0.7, 0.1, 0.1, 0.1]; 20];
        assert_eq!(inception_score(&same), 1.0);
        let onehot: Vec<Vec<f64>> = (0..20)
            .map(|i| (0..4).map(|k| if k == i % 4 { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!((inception_score(&onehot) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn frechet_of_identical_sets_is_zero_and_shift_is_squared_norm() {
        let mut rng = stream(3);
        let a: Vec<Vec<f32>> = (0..80)
            .map(|_| (0..FEATURE_DIM).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-4);
        let c: Vec<f32> = (0..FEATURE_DIM).map(|i| 0.1 * i as f32 - 1.0).collect();
        let shifted: Vec<Vec<f32>> = a
            .iter()
            .map(|f| f.iter().zip(&c).map(|(x, y)| x + y).collect())
            .collect();
        let want: f64 = c.iter().map(|&x| (x as f64).powi(2)).sum();
        assert!((frechet_distance(&a, &shifted).unwrap() - want).abs() < 1e-3 * want.max(1.0));
    }

    #[test]
    fn frechet_needs_enough_samples() {
        let a = vec![vec![0.0f32; FEATURE_DIM]; 20];
        assert!(matches!(
            frechet_distance(&a, &a),
            Err(Error::InsufficientSamples { needed: 33, got: 20, .. })
        ));
    }
}
