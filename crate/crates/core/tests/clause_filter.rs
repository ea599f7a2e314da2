use std::collections::HashMap;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use proptest::prelude::*;

use monitorvlm_core::clause_filter::{
    read_pairs, score_clause, top_k, write_pairs, ClauseFilter, ClauseScore, EmbeddingProvider, FilterModel,
    FilterSample, FilterTrainer, HashEmbedder, Payload, PrecomputedImages, SeparablePairs, TrainConfig, FILTER_DIMS,
    IMAGE_DIM,
};
use monitorvlm_core::error::Error;
use monitorvlm_core::registry::ClauseRegistry;
use monitorvlm_core::types::{Frame, FrameTriplet};

/// Plain nested-loop forward pass over the model's own weights.
fn reference_score(model: &FilterModel, input: &[f64]) -> f64 {
    let mut h = input.to_vec();
    let layers = model.mlp().layers();
    for (l, layer) in layers.iter().enumerate() {
        let w = layer.weights();
        let b = layer.bias();
        let mut out = vec![0.0; layer.out_dim()];
        for (i, o) in out.iter_mut().enumerate() {
            let row = w.row(i);
            let row = row.as_slice().unwrap();
            let mut acc = b[i];
            for (wij, xj) in row.iter().zip(&h) {
                acc += wij * xj;
            }
            *o = if l + 1 < layers.len() { acc.max(0.0) } else { acc };
        }
        h = out;
    }
    1.0 / (1.0 + (-h[0]).exp())
}

fn text_provider() -> Arc<dyn EmbeddingProvider> {
    Arc::new(HashEmbedder::text())
}

fn image_vec(seed: u64) -> Vec<f64> {
    let img = RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 31 + y) as u8, seed as u8, (seed >> 8) as u8]));
    HashEmbedder::image().embed(Payload::Image(&img)).unwrap()
}

#[test]
fn scores_match_layer_by_layer_reference() {
    let registry = ClauseRegistry::bundled();
    let model = FilterModel::init(11, registry.version());
    assert_eq!(model.mlp().dims(), FILTER_DIMS.to_vec());
    let filter = ClauseFilter::new(Arc::new(model.clone()), text_provider());
    let image = image_vec(3);
    let scores = filter.score_all(&image, &registry).unwrap();
    assert_eq!(scores.len(), 40);
    assert_eq!(scores.iter().map(|s| s.clause_id).collect::<Vec<_>>(), (1..=40).collect::<Vec<u32>>());
    let texts = HashEmbedder::text();
    for (clause, score) in registry.clauses().iter().zip(&scores) {
        let text = texts.embed(Payload::Text(&clause.text)).unwrap();
        let input: Vec<f64> = image.iter().chain(&text).copied().collect();
        let expected = reference_score(&model, &input);
        assert!((score.probability - expected).abs() <= 1e-12, "clause {}", clause.id);
        assert!(score.probability > 0.0 && score.probability < 1.0);
    }
}

#[test]
fn cached_scoring_equals_per_clause_scoring_for_400_clauses() {
    let registry = ClauseRegistry::synthetic(400).unwrap();
    let model = FilterModel::init(5, registry.version());
    let filter = ClauseFilter::new(Arc::new(model.clone()), text_provider());
    let image = image_vec(9);
    let batched = filter.score_all(&image, &registry).unwrap();
    // A second call goes through the projection cache.
    assert_eq!(batched, filter.score_all(&image, &registry).unwrap());
    let texts = HashEmbedder::text();
    for (clause, score) in registry.clauses().iter().zip(&batched) {
        let looped = score_clause(&model, &image, &texts.embed(Payload::Text(&clause.text)).unwrap()).unwrap();
        assert!((score.probability - looped).abs() <= 1e-12);
    }
}

#[test]
fn scores_are_invariant_to_registry_order() {
    let registry = ClauseRegistry::synthetic(12).unwrap();
    let model = FilterModel::init(2, registry.version());
    let filter = ClauseFilter::new(Arc::new(model), text_provider());
    let image = image_vec(1);
    let forward: HashMap<u32, f64> = filter
        .score_all(&image, &registry)
        .unwrap()
        .into_iter()
        .map(|s| (s.clause_id, s.probability))
        .collect();
    // Same clauses under new ids in reverse order: each text keeps its score.
    let mut clauses = registry.clauses().to_vec();
    clauses.reverse();
    for (i, c) in clauses.iter_mut().enumerate() {
        c.id = 100 + i as u32;
    }
    let reversed = ClauseRegistry::new("reversed", clauses.clone()).unwrap();
    let other = filter.score_all(&image, &reversed).unwrap();
    for (clause, score) in clauses.iter().zip(other) {
        let original = registry.clauses().iter().find(|c| c.text == clause.text).unwrap().id;
        assert_eq!(score.probability, forward[&original]);
    }
}

#[test]
fn triplet_score_is_per_clause_maximum() {
    let registry = ClauseRegistry::bundled();
    let model = FilterModel::init(4, registry.version());
    let filter = ClauseFilter::new(Arc::new(model), text_provider());
    let images: Vec<RgbImage> = (0..3u8)
        .map(|k| RgbImage::from_fn(10, 6, |x, y| Rgb([x as u8 * k, y as u8 + k, 40 * k])))
        .collect();
    let frames = [0usize, 1, 2].map(|i| Frame::new(i as u64, i as f64, images[i].clone()).unwrap());
    let triplet = FrameTriplet::new("v", frames).unwrap();
    let embedder = HashEmbedder::image();
    let got = filter.score_triplet(&triplet, &registry, &embedder).unwrap();
    let per_frame: Vec<Vec<ClauseScore>> = images
        .iter()
        .map(|img| filter.score_all(&embedder.embed(Payload::Image(img)).unwrap(), &registry).unwrap())
        .collect();
    for (c, score) in got.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for frame in &per_frame {
            if frame[c].probability > best {
                best = frame[c].probability;
            }
        }
        assert_eq!(score.probability, best);
    }
}

fn score_list() -> impl Strategy<Value = Vec<ClauseScore>> {
    prop::collection::vec(0u32..50, 1..40).prop_map(|levels| {
        levels
            .into_iter()
            .enumerate()
            .map(|(i, level)| ClauseScore {
                clause_id: i as u32 + 1,
                probability: level as f64 / 50.0,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn top_k_prefixes_nest(scores in score_list(), k in 1usize..45) {
        let small = top_k(&scores, k).unwrap();
        let large = top_k(&scores, k + 1).unwrap();
        prop_assert_eq!(small.len(), k.min(scores.len()));
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn top_k_ignores_monotone_rescaling_and_input_order(scores in score_list(), k in 1usize..45, rot in 0usize..40) {
        let base = top_k(&scores, k).unwrap();
        let squashed: Vec<ClauseScore> = scores
            .iter()
            .map(|s| ClauseScore { clause_id: s.clause_id, probability: s.probability.powi(3) * 0.5 + 0.1 })
            .collect();
        prop_assert_eq!(&top_k(&squashed, k).unwrap(), &base);
        let mut rotated = scores.clone();
        let n = rotated.len();
        rotated.rotate_left(rot % n);
        prop_assert_eq!(&top_k(&rotated, k).unwrap(), &base);
    }

    #[test]
    fn top_k_is_a_best_first_selection(scores in score_list(), k in 1usize..45) {
        let picked = top_k(&scores, k).unwrap();
        let prob = |id: u32| scores[id as usize - 1].probability;
        for pair in picked.windows(2) {
            prop_assert!(prob(pair[0]) >= prob(pair[1]));
        }
        let worst = prob(*picked.last().unwrap());
        for s in &scores {
            if !picked.contains(&s.clause_id) {
                prop_assert!(s.probability <= worst);
            }
        }
    }
}

fn small_training_set(seed: u64) -> (ClauseRegistry, Vec<FilterSample>, PrecomputedImages) {
    let registry = ClauseRegistry::bundled();
    let pairs = SeparablePairs::new(&registry, 4, 0.01, seed).unwrap();
    let (samples, images) = pairs.draw(64, 0, "img");
    (registry, samples, images)
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs,
        batch: 16,
        seed: 8,
    }
}

#[test]
fn zero_epochs_leave_the_initial_weights() {
    let (registry, samples, images) = small_training_set(1);
    let trainer = FilterTrainer::new(&samples, &registry, &images, text_provider(), config(0)).unwrap();
    let outcome = trainer.into_outcome();
    assert!(outcome.history.is_empty());
    assert_eq!(outcome.model.mlp(), FilterModel::init(8, registry.version()).mlp());
}

#[test]
fn single_class_data_is_rejected() {
    let (registry, samples, images) = small_training_set(1);
    let positives: Vec<FilterSample> = samples.into_iter().filter(|s| s.is_positive()).collect();
    let err = FilterTrainer::new(&positives, &registry, &images, text_provider(), config(1)).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err:?}");
}

#[test]
fn unknown_clause_or_image_is_reported() {
    let (registry, mut samples, images) = small_training_set(1);
    samples.push(FilterSample::new("img-000000", 999, true));
    assert!(FilterTrainer::new(&samples, &registry, &images, text_provider(), config(1))
        .unwrap_err()
        .is_validation());
    samples.pop();
    samples.push(FilterSample::new("missing", 1, true));
    let err = FilterTrainer::new(&samples, &registry, &images, text_provider(), config(1)).unwrap_err();
    assert!(matches!(err, Error::Provider { .. }), "{err:?}");
}

#[test]
fn training_is_balanced_seeded_and_decreasing() {
    let (registry, samples, images) = small_training_set(3);
    // Skew the labels 3:1 so balancing has something to do.
    let skewed: Vec<FilterSample> = samples
        .iter()
        .enumerate()
        .filter(|(i, s)| s.is_positive() || i % 3 == 0)
        .map(|(_, s)| s.clone())
        .collect();
    let run = || {
        let mut trainer = FilterTrainer::new(&skewed, &registry, &images, text_provider(), config(10)).unwrap();
        for _ in 0..10 {
            trainer.run_epoch().unwrap();
            assert!(trainer.batch_positive_fractions().iter().all(|&f| f == 0.5));
            assert_eq!(trainer.batch_positive_fractions().len(), trainer.batches_per_epoch());
        }
        trainer.into_outcome()
    };
    let a = run();
    let b = run();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 10);
    assert!(a.history[9] < a.history[0], "{:?}", a.history);

    let dir = tempfile::tempdir().unwrap();
    a.model.save(dir.path().join("a.json")).unwrap();
    b.model.save(dir.path().join("b.json")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a.json")).unwrap(),
        std::fs::read(dir.path().join("b.json")).unwrap()
    );
    let loaded = FilterModel::load(dir.path().join("a.json")).unwrap();
    let image = &images.0["img-000001"];
    let filter_a = ClauseFilter::new(Arc::new(a.model), text_provider());
    let filter_l = ClauseFilter::new(Arc::new(loaded), text_provider());
    assert_eq!(
        filter_a.score_all(image, &registry).unwrap(),
        filter_l.score_all(image, &registry).unwrap()
    );
}

#[test]
fn bad_hyperparameters_are_validation_errors() {
    let (registry, samples, images) = small_training_set(1);
    for cfg in [
        TrainConfig { batch: 1, ..config(1) },
        TrainConfig { lr: 0.0, ..config(1) },
        TrainConfig { lr: f64::NAN, ..config(1) },
    ] {
        assert!(FilterTrainer::new(&samples, &registry, &images, text_provider(), cfg)
            .unwrap_err()
            .is_validation());
    }
}

#[test]
fn pairs_file_round_trip_and_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let samples = vec![
        FilterSample::new("frames/a.png", 3, true),
        FilterSample::new("frames/b.png", 40, false),
    ];
    write_pairs(&path, &samples).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), r#"{"image":"frames/a.png","clause_id":3,"label":1}"#);
    assert_eq!(read_pairs(&path).unwrap(), samples);

    std::fs::write(&path, format!("{text}\n{{\"image\":\"c\",\"clause_id\":\"x\",\"label\":0}}\n")).unwrap();
    match read_pairs(&path) {
        Err(Error::Schema { line, path, .. }) => {
            assert_eq!(line, 4);
            assert_eq!(path, "clause_id");
        }
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "{\"image\":\"c\",\"clause_id\":1,\"label\":2}\n").unwrap();
    assert!(matches!(read_pairs(&path), Err(Error::Schema { line: 1, .. })));
}

#[test]
fn image_dims_are_checked_before_scoring() {
    let registry = ClauseRegistry::bundled();
    let filter = ClauseFilter::new(Arc::new(FilterModel::init(0, registry.version())), text_provider());
    let err = filter.score_all(&vec![0.0; IMAGE_DIM - 1], &registry).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err:?}");
}
