use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use monitorvlm_core::clause_filter::{EmbeddingProvider, HashEmbedder, Payload, FILTER_DIMS};
use monitorvlm_core::nnlab::{
    finite_diff_check, finite_diff_check_subset, AdamConfig, AdamState, FnObjective, LoraLinear, Mlp, MlpObjective,
    Objective, WeightFile,
};

fn filter_input(seed: u64) -> Vec<f64> {
    let img = RgbImage::from_fn(6, 6, |x, y| Rgb([(x * 40) as u8, (y * 40) as u8, seed as u8]));
    let mut v = HashEmbedder::image().embed(Payload::Image(&img)).unwrap();
    v.extend(HashEmbedder::text().embed(Payload::Text("Smoking in work areas")).unwrap());
    v
}

#[test]
fn filter_sized_network_passes_gradient_check_on_one_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mlp = Mlp::glorot(&FILTER_DIMS, &mut rng).unwrap();
    let x = Array2::from_shape_vec((1, FILTER_DIMS[0]), filter_input(0)).unwrap();
    let mut objective = MlpObjective::new(mlp, x, vec![1.0]);
    let mut probe = Vec::new();
    for tensor in 0..8 {
        let range = objective.tensor_range(tensor);
        for _ in 0..6 {
            probe.push(rng.random_range(range.clone()));
        }
    }
    let err = finite_diff_check_subset(&mut objective, 1e-4, &probe).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn filter_sized_weights_round_trip_through_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mlp = Mlp::glorot(&FILTER_DIMS, &mut rng).unwrap();
    assert_eq!(mlp.num_params(), 2816 * 1024 + 1024 + 1024 * 512 + 512 + 512 * 256 + 256 + 256 + 1);
    let mut bytes = Vec::new();
    mlp.to_weight_file().write_to(&mut bytes).unwrap();
    let back = Mlp::from_weight_file(&WeightFile::read_from(bytes.as_slice()).unwrap()).unwrap();
    assert_eq!(back, mlp);
    let x = Array1::from(filter_input(3));
    assert_eq!(back.forward(x.view()).unwrap(), mlp.forward(x.view()).unwrap());
}

/// Least squares through a LoRA layer: only A and B move, and the loss drops.
#[test]
fn lora_adapter_trains_while_base_stays_frozen() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (d, k, r) = (6, 10, 2);
    let base = Array2::from_shape_fn((d, k), |_| rng.random_range(-0.5..0.5));
    let target_delta = Array2::from_shape_fn((d, r), |_| rng.random_range(-1.0..1.0))
        .dot(&Array2::from_shape_fn((r, k), |_| rng.random_range(-1.0..1.0)));
    let xs: Vec<Array1<f64>> = (0..32).map(|_| Array1::from_shape_fn(k, |_| rng.random_range(-1.0..1.0))).collect();
    let ys: Vec<Array1<f64>> = xs.iter().map(|x| (&base + &target_delta).dot(x)).collect();

    let mut layer = LoraLinear::init(base.clone(), r, 4.0, &mut rng).unwrap();
    let loss = |layer: &LoraLinear| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(x, y)| (layer.forward(x.view()).unwrap() - y).mapv(|e| e * e).sum())
            .sum::<f64>()
            / xs.len() as f64
    };
    let start = loss(&layer);
    let mut adam = AdamState::new(
        &[layer.a().len(), layer.b().len()],
        AdamConfig {
            lr: 0.02,
            ..AdamConfig::default()
        },
    );
    for _ in 0..400 {
        let mut ga = Array2::zeros(layer.a().dim());
        let mut gb = Array2::zeros(layer.b().dim());
        for (x, y) in xs.iter().zip(&ys) {
            let out = layer.forward(x.view()).unwrap();
            let g = (out - y) * (2.0 / xs.len() as f64);
            let grads = layer.backward(x.view(), g.view()).unwrap();
            ga += &grads.a;
            gb += &grads.b;
        }
        let mut a = layer.a().clone();
        let mut b = layer.b().clone();
        adam.step(
            &mut [a.as_slice_mut().unwrap(), b.as_slice_mut().unwrap()],
            &[ga.as_slice().unwrap(), gb.as_slice().unwrap()],
        )
        .unwrap();
        *layer.a_mut() = a;
        *layer.b_mut() = b;
    }
    assert_eq!(layer.base(), &base);
    assert!(loss(&layer) < start * 0.05, "{start} -> {}", loss(&layer));
    assert_eq!(layer.trainable_count(), r * (d + k));
}

#[test]
fn gradient_check_flags_a_wrong_gradient() {
    let loss = |p: &[f64]| p[0].sin() * p[1] + p[1] * p[1];
    let good = |p: &[f64]| vec![p[0].cos() * p[1], p[0].sin() + 2.0 * p[1]];
    let bad = |p: &[f64]| vec![p[0].cos() * p[1], p[0].sin() + 2.1 * p[1]];
    let mut ok = FnObjective::new(vec![0.3, -1.2], loss, good);
    assert!(finite_diff_check(&mut ok, 1e-5).unwrap() < 1e-6);
    assert_eq!(ok.get(0), 0.3);
    let mut wrong = FnObjective::new(vec![0.3, -1.2], loss, bad);
    assert!(finite_diff_check(&mut wrong, 1e-5).unwrap() > 1e-2);
    assert_eq!(wrong.num_params(), 2);
}
