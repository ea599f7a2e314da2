use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use monitorvlm_core::dataset::{
    annotate_record, augment_record, emit_filter_pairs, emit_vqa, ingest_video, read_vqa, AugmentKind, AugmentSpec,
    Augmentation, GroundTruthLabeler, ImageDirs, VqaMeta, VqaRecord,
};
use monitorvlm_core::error::Error;
use monitorvlm_core::magnifier::{FixtureDetector, FixtureLine};
use monitorvlm_core::registry::ClauseRegistry;
use monitorvlm_core::types::{BoundingBox, Detection};
use monitorvlm_core::video::{open_video, write_raw_video};
use monitorvlm_core::vlm::AUX_HEADER;

fn textured(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

fn record(id: &str, images: [&str; 3], labels: &[(u32, bool)], rng: &mut ChaCha8Rng) -> VqaRecord {
    VqaRecord {
        id: id.into(),
        images: images.map(String::from),
        system_prompt: format!("system {}", rng.random::<u32>()),
        user_prompt: "Check the frames.\nLine two with \"quotes\" and ünïcode".into(),
        assistant: format!("Reasoning {}. [{{\"clause_id\": 19, \"violated\": true}}]", rng.random::<u16>()),
        labels: labels.iter().copied().collect(),
        meta: VqaMeta {
            site: "pit-7".into(),
            augmentation: Augmentation::None,
            source_video: "cam3.mvraw".into(),
            start_ts: rng.random_range(0.0..1e4),
            lowlight_factor: None,
            mask_fraction: None,
            seed: None,
        },
    }
}

fn write_images(root: &Path, names: &[&str], seed: u64) {
    for (i, name) in names.iter().enumerate() {
        let path = root.join(name);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        textured(seed + i as u64, 24, 16).save(path).unwrap();
    }
}

fn load(path: impl AsRef<Path>) -> RgbImage {
    image::open(path).unwrap().to_rgb8()
}

#[test]
fn ingest_samples_a_raw_video_into_png_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let frames: Vec<RgbImage> = (0..91).map(|i| textured(i, 12, 8)).collect();
    let video = dir.path().join("cam.mvraw");
    write_raw_video(&video, 30.0, &frames).unwrap();
    let mut source = open_video(&video).unwrap();
    let out = dir.path().join("out");
    let manifest = ingest_video(source.as_mut(), "cam", &out, 1.0, 1).unwrap();
    assert_eq!(manifest.len(), 2);
    assert_eq!(manifest[0].start_ts, 0.0);
    assert_eq!(manifest[1].start_ts, 1.0);
    assert_eq!(
        manifest[0].images,
        ["cam/frame_000000.png", "cam/frame_000030.png", "cam/frame_000060.png"].map(String::from)
    );
    assert_eq!(manifest[1].images[2], "cam/frame_000090.png");
    for (k, src) in [0usize, 30, 60, 90].into_iter().enumerate() {
        let name = format!("cam/frame_{src:06}.png");
        assert_eq!(load(out.join(&name)), frames[src], "sample {k}");
    }
    assert_eq!(std::fs::read_dir(out.join("cam")).unwrap().count(), 4);
}

#[test]
fn vqa_records_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let records: Vec<VqaRecord> = (0..50)
        .map(|i| {
            let labels: Vec<(u32, bool)> = (1..=40).map(|c| (c, rng.random_bool(0.1))).collect();
            let mut r = record(&format!("r{i}"), ["a.png", "b.png", "c.png"], &labels, &mut rng);
            if i % 3 == 0 {
                r.meta.augmentation = Augmentation::Lowlight;
                r.meta.lowlight_factor = Some(rng.random_range(0.5..0.8));
                r.meta.seed = Some(rng.random());
            }
            r
        })
        .collect();
    let path = dir.path().join("vqa.jsonl");
    assert_eq!(emit_vqa(&path, &records).unwrap(), 50);
    assert_eq!(read_vqa(&path).unwrap(), records);
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&path).unwrap().lines().next().unwrap()).unwrap();
    for key in ["id", "images", "system", "user", "assistant", "labels", "meta"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn malformed_vqa_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let path = dir.path().join("vqa.jsonl");
    emit_vqa(&path, &[record("ok", ["a", "b", "c"], &[], &mut rng)]).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"id\": \"broken\", \"images\": [\"a\"]}\n");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(read_vqa(&path), Err(Error::Schema { line: 2, .. })));
}

#[test]
fn augmented_records_inherit_labels_and_tag_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let names = ["v/0.png", "v/1.png", "v/2.png"];
    write_images(&input, &names, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = record("rec", names, &[(19, true), (16, false)], &mut rng);
    let dirs = ImageDirs {
        input: input.clone(),
        output: dir.path().join("out"),
    };

    let flip = augment_record(&base, &AugmentSpec::resolve(AugmentKind::Flip, None, None, 0).unwrap(), &dirs, None)
        .unwrap();
    assert_eq!(flip.id, "rec-flip");
    assert_eq!(flip.labels, base.labels);
    assert_eq!(flip.assistant, base.assistant);
    assert_eq!(flip.meta.augmentation, Augmentation::Flip);
    for (src, dst) in names.iter().zip(&flip.images) {
        let a = load(input.join(src));
        let b = load(dirs.output.join(dst));
        for (x, y, p) in a.enumerate_pixels() {
            assert_eq!(b.get_pixel(a.width() - 1 - x, y), p);
        }
    }

    let spec = AugmentSpec::resolve(AugmentKind::Lowlight, None, None, 5).unwrap();
    let factor = spec.lowlight_factor.unwrap();
    assert!((0.5..=0.8).contains(&factor));
    let low = augment_record(&base, &spec, &dirs, None).unwrap();
    assert_eq!(low.meta.lowlight_factor, Some(factor));
    assert_eq!(low.meta.seed, Some(5));
    let a = load(input.join(names[1]));
    let b = load(dirs.output.join(&low.images[1]));
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        for c in 0..3 {
            let expected = (pa[c] as f64 * factor).round() as u8;
            assert_eq!(pb[c], expected);
        }
    }

    let bad = AugmentSpec {
        kind: AugmentKind::Lowlight,
        lowlight_factor: Some(0.9),
        mask_fraction: None,
        seed: 0,
    };
    assert!(augment_record(&base, &bad, &dirs, None).unwrap_err().is_validation());
}

#[test]
fn mask_augmentation_spares_detected_objects() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let names = ["m/0.png", "m/1.png", "m/2.png"];
    write_images(&input, &names, 90);
    let worker = BoundingBox::new(2, 3, 10, 12).unwrap();
    let detector = FixtureDetector::new((0..3).map(|i| FixtureLine {
        frame: i.to_string(),
        detections: vec![Detection::new(worker, "worker", 0.9).unwrap()],
    }));
    let vocab = vec!["worker".to_string()];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = record("rec", names, &[(3, true)], &mut rng);
    let dirs = ImageDirs {
        input: input.clone(),
        output: dir.path().join("out"),
    };
    let spec = AugmentSpec::resolve(AugmentKind::Mask, None, Some(0.2), 11).unwrap();
    let masked = augment_record(&base, &spec, &dirs, Some((&detector, &vocab))).unwrap();
    assert_eq!(masked.meta.mask_fraction, Some(0.2));
    for (src, dst) in names.iter().zip(&masked.images) {
        let a = load(input.join(src));
        let b = load(dirs.output.join(dst));
        let mut changed = 0u32;
        for (x, y, p) in a.enumerate_pixels() {
            let q = b.get_pixel(x, y);
            if worker.contains(x, y) {
                assert_eq!(q, p);
            } else if q != p {
                assert_eq!(q, &Rgb([0, 0, 0]));
                changed += 1;
            }
        }
        let free = a.width() * a.height() - worker.area() as u32;
        // Painted pixels are black; black source pixels may hide a few, so the
        // lower bound allows for them.
        assert!(changed as f64 / free as f64 <= 0.2 + 0.316 * 0.316 + 1e-9);
        assert!(changed as f64 / free as f64 >= 0.2 - 0.01);
    }
    // Same seed, same output.
    let again = augment_record(&base, &spec, &dirs, Some((&detector, &vocab))).unwrap();
    assert_eq!(load(dirs.output.join(&again.images[0])), load(dirs.output.join(&masked.images[0])));
}

#[test]
fn annotated_record_appends_detection_block() {
    let dir = tempfile::tempdir().unwrap();
    let names = ["d/0.png", "d/1.png", "d/2.png"];
    write_images(dir.path(), &names, 5);
    let detector = FixtureDetector::new([FixtureLine {
        frame: "1".into(),
        detections: vec![
            Detection::new(BoundingBox::new(0, 0, 4, 4).unwrap(), "helmet", 0.4).unwrap(),
            Detection::new(BoundingBox::new(1, 1, 20, 15).unwrap(), "worker", 0.95).unwrap(),
        ],
    }]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = record("rec", names, &[(16, true)], &mut rng);
    let out = annotate_record(&base, dir.path(), &detector, &["worker".into(), "helmet".into()]).unwrap();
    assert_eq!(out.id, "rec-detect");
    assert_eq!(out.meta.augmentation, Augmentation::Detect);
    assert_eq!(out.labels, base.labels);
    assert_eq!(
        out.user_prompt,
        format!(
            "{}\n\n{AUX_HEADER}\nworker (0.95) at [1,1,20,15]\nhelmet (0.40) at [0,0,4,4]",
            base.user_prompt
        )
    );
}

#[test]
fn filter_pairs_are_one_per_key_frame_and_clause() {
    let registry = ClauseRegistry::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let all: Vec<(u32, bool)> = registry.ids().map(|id| (id, id == 19)).collect();
    let records = vec![
        record("a", ["x0", "k1", "x2"], &all, &mut rng),
        record("b", ["y0", "k1", "y2"], &all, &mut rng),
        record("c", ["z0", "k2", "z2"], &[(5, true)], &mut rng),
    ];
    let mut out = Vec::new();
    let strict = GroundTruthLabeler::default();
    assert!(emit_filter_pairs(&records, &strict, &registry, &mut out)
        .unwrap_err()
        .is_validation());

    let mut out = Vec::new();
    let lenient = GroundTruthLabeler {
        missing_is_negative: true,
    };
    let n = emit_filter_pairs(&records, &lenient, &registry, &mut out).unwrap();
    assert_eq!(n, 80);
    let lines: Vec<serde_json::Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut positives: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for l in &lines {
        if l["label"] == 1 {
            positives.entry(l["image"].as_str().unwrap().into()).or_default().push(l["clause_id"].as_u64().unwrap());
        }
    }
    assert_eq!(positives, BTreeMap::from([("k1".into(), vec![19]), ("k2".into(), vec![5])]));
}
