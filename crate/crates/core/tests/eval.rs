use std::sync::OnceLock;

use coffee_core::datagen::{build_clean_set, build_finetune_set, build_pretrain_corpus, AttributeSpec, LabeledImage, ATTRIBUTES};
use coffee_core::error::Error;
use coffee_core::eval::{
    attribute_prototype, drift, ffd, frechet_distance, inception_score, is_analog, mcs_analog, mcs_with_prototype,
    presence_rate, train_feature_extractor, FeatureExtractor, FeatureExtractorConfig,
};
use coffee_core::rng::stream;
use coffee_core::textenc::{snapshot_refs, EmbeddingTable, Vocabulary};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn extractor() -> &'static FeatureExtractor {
    static FX: OnceLock<FeatureExtractor> = OnceLock::new();
    FX.get_or_init(|| {
        let corpus = build_pretrain_corpus(2000, 100).unwrap();
        let (fx, q) = train_feature_extractor(&corpus, 1, &FeatureExtractorConfig::default()).unwrap();
        assert!(q.train_base_accuracy >= q.heldout_base_accuracy - 0.02);
        fx
    })
}

fn heldout() -> Vec<LabeledImage> {
    build_pretrain_corpus(1000, 555).unwrap()
}

fn pixels(set: &[LabeledImage]) -> Vec<&[f32]> {
    set.iter().map(|im| im.pixels.as_slice()).collect()
}

#[test]
fn training_is_deterministic() {
    let corpus = build_pretrain_corpus(400, 3).unwrap();
    let cfg = FeatureExtractorConfig {
        steps: 50,
        min_base_accuracy: 0.0,
        min_attribute_auc: 0.0,
        ..FeatureExtractorConfig::default()
    };
    let (a, _) = train_feature_extractor(&corpus, 9, &cfg).unwrap();
    let (b, _) = train_feature_extractor(&corpus, 9, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shuffled_labels_fail_training() {
    let mut corpus = build_pretrain_corpus(2000, 4).unwrap();
    let mut rng = stream(5);
    let mut labels: Vec<(String, Vec<String>)> = corpus.iter().map(|im| (im.base.clone(), im.attributes.clone())).collect();
    labels.shuffle(&mut rng);
    for (im, (b, a)) in corpus.iter_mut().zip(labels) {
        im.base = b;
        im.attributes = a;
    }
    let cfg = FeatureExtractorConfig {
        steps: 400,
        ..FeatureExtractorConfig::default()
    };
    assert!(matches!(train_feature_extractor(&corpus, 1, &cfg), Err(Error::TrainingFailed(_))));
}

#[test]
fn mcs_sign_follows_attribute_presence_on_heldout_images() {
    let fx = extractor();
    let refset = build_pretrain_corpus(1000, 77).unwrap();
    let test = heldout();
    for attr in ATTRIBUTES {
        let (pos, neg): (Vec<LabeledImage>, Vec<LabeledImage>) = test.iter().cloned().partition(|im| im.has_attribute(attr));
        assert!(mcs_analog(&pixels(&pos), attr, fx, &refset).unwrap() > 0.0, "{attr} positives");
        assert!(mcs_analog(&pixels(&neg), attr, fx, &refset).unwrap() < 0.0, "{attr} negatives");
    }
}

#[test]
fn mcs_of_a_repeated_sample_equals_the_single_value() {
    let fx = extractor();
    let refset = build_pretrain_corpus(1000, 77).unwrap();
    let proto = attribute_prototype("dot", fx, &refset).unwrap();
    let im = &heldout()[0].pixels;
    let one = mcs_with_prototype(&[im], &proto, fx).unwrap();
    let many = mcs_with_prototype(&vec![im.as_slice(); 7], &proto, fx).unwrap();
    assert!((one - many).abs() < 1e-12);
}

#[test]
fn presence_is_high_on_finetune_sets_and_low_on_clean_images() {
    let fx = extractor();
    for (c, a) in [("circle", "frame"), ("square", "stripe"), ("triangle", "dot"), ("cross", "checker")] {
        let ft = build_finetune_set(c, &AttributeSpec::by_name(a).unwrap(), 40, 8).unwrap();
        assert!(presence_rate(&pixels(&ft), a, fx).unwrap() >= 0.95, "{c}/{a}");
        let clean = build_clean_set(c, 40, 9).unwrap();
        assert!(presence_rate(&pixels(&clean), a, fx).unwrap() <= 0.05, "{c} clean");
    }
    assert!(matches!(
        presence_rate(&[], "dot", fx),
        Err(Error::InsufficientSamples { .. })
    ));
}

#[test]
fn inception_score_limits() {
    let fx = extractor();
    let im = heldout()[3].pixels.clone();
    let same = vec![im.as_slice(); 16];
    assert!((is_analog(&same, fx).unwrap() - 1.0).abs() < 1e-9);
    let onehot: Vec<Vec<f64>> = (0..400).map(|i| (0..4).map(|k| (k == i % 4) as u8 as f64).collect()).collect();
    assert!((inception_score(&onehot) - 4.0).abs() < 1e-9);
    let v = is_analog(&pixels(&heldout()[..64]), fx).unwrap();
    assert!((1.0..=4.0).contains(&v));
}

#[test]
fn ffd_of_a_set_with_itself_is_zero_and_shift_adds_its_squared_norm() {
    let fx = extractor();
    let set = heldout();
    let px = pixels(&set[..200]);
    assert!(ffd(&px, &px, fx).unwrap().abs() < 1e-4);
    let feats = fx.features(&px).unwrap();
    let c: Vec<f32> = (0..feats[0].len()).map(|i| 0.05 * (i as f32 - 10.0)).collect();
    let shifted: Vec<Vec<f32>> = feats.iter().map(|f| f.iter().zip(&c).map(|(a, b)| a + b).collect()).collect();
    let norm2: f64 = c.iter().map(|&x| (x as f64).powi(2)).sum();
    let d = frechet_distance(&feats, &shifted).unwrap();
    assert!((d - norm2).abs() < 1e-3 * norm2.max(1.0), "{d} vs {norm2}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>()) {
        let mut rng = stream(seed);
        let mut draw = |n: usize, shift: f32| -> Vec<Vec<f32>> {
            (0..n).map(|_| (0..32).map(|_| rng.random_range(-1.0f32..1.0) + shift).collect()).collect()
        };
        let a = draw(40, 0.0);
        let b = draw(45, 0.3);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0), "{} vs {}", ab, ba);
    }

    #[test]
    fn drift_ignores_positive_rescaling_of_the_prompt_row(scale in 0.05f32..20.0) {
        let mut table = EmbeddingTable::init(Vocabulary::toy(), 3);
        let refs = snapshot_refs("circle", &["frame"], &table).unwrap();
        let id = table.vocab().id("circle").unwrap();
        for x in &mut table.matrix_mut().data_mut()[id * 32..(id + 1) * 32] {
            *x = *x * 0.7 + 0.01;
        }
        let before = drift(&table, &refs).unwrap();
        for x in &mut table.matrix_mut().data_mut()[id * 32..(id + 1) * 32] {
            *x *= scale;
        }
        let after = drift(&table, &refs).unwrap();
        prop_assert!((before[0] - after[0]).abs() < 1e-5);
    }
}

#[test]
fn untouched_table_has_zero_drift() {
    let table = EmbeddingTable::init(Vocabulary::toy(), 4);
    let refs = snapshot_refs("square", &["stripe", "dot"], &table).unwrap();
    assert_eq!(drift(&table, &refs).unwrap(), vec![0.0, 0.0]);
}
