use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slwsr::eval::{self_ensemble, Bicubic, Upscaler};
use slwsr::model::checkpoint::{self, OptimizerState};
use slwsr::nn::ParamStore;
use slwsr::ops::{concat_channels, pixel_shuffle, pixel_unshuffle, slice_channels};
use slwsr::train::{Adam, TrainConfig};
use slwsr::transform::{dihedral, dihedral_inverse};
use slwsr::{Model, ModelConfig, Result, Shape, Tensor};

fn random(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Nearest-neighbour upscaling plus a position-dependent ramp, so the
/// output changes with orientation.
struct Skewed;

impl Upscaler for Skewed {
    fn scale(&self) -> usize {
        2
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [n, c, h, w] = lr.shape().dims();
        Ok(Tensor::from_fn(Shape::new(n, c, 2 * h, 2 * w), |n, c, y, x| {
            lr.at(n, c, y / 2, x / 2) + 0.01 * (y as f32) - 0.003 * (x as f32 * x as f32)
        }))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shuffle_then_unshuffle_is_identity(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, r in 1usize..4, seed: u64) {
        let x = random(Shape::new(n, c * r * r, h, w), seed);
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(n, c, h * r, w * r));
        prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x);
    }

    #[test]
    fn slicing_a_concatenation_recovers_the_parts(sizes in prop::collection::vec(1usize..5, 1..5), h in 1usize..5, w in 1usize..5, seed: u64) {
        let parts: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(i, &c)| random(Shape::new(2, c, h, w), seed.wrapping_add(i as u64)))
            .collect();
        let refs: Vec<_> = parts.iter().collect();
        let joined = concat_channels(&refs).unwrap();
        let mut start = 0;
        for p in &parts {
            let c = p.shape().c;
            prop_assert_eq!(&slice_channels(&joined, start, c).unwrap(), p);
            start += c;
        }
        prop_assert_eq!(start, joined.shape().c);
    }

    #[test]
    fn dihedral_inverse_undoes_every_transform(code in 0u8..8, h in 1usize..7, w in 1usize..7, seed: u64) {
        let x = random(Shape::new(1, 3, h, w), seed);
        prop_assert_eq!(dihedral_inverse(&dihedral(&x, code), code), x);
    }

    #[test]
    fn ensemble_matches_the_eightfold_mean(h in 1usize..6, w in 1usize..6, seed: u64) {
        let lr = random(Shape::new(1, 3, h, w), seed);
        let got = self_ensemble(&Skewed, &lr).unwrap();
        let outs: Vec<_> = (0..8u8)
            .map(|code| dihedral_inverse(&Skewed.upscale(&dihedral(&lr, code)).unwrap(), code))
            .collect();
        for (i, v) in got.data().iter().enumerate() {
            let mean = outs.iter().map(|o| f64::from(o.data()[i])).sum::<f64>() / 8.0;
            prop_assert!((f64::from(*v) - mean).abs() < 1e-5, "{} vs {}", v, mean);
        }
    }

    #[test]
    fn ensemble_of_an_equivariant_upscaler_is_exact(h in 4usize..9, w in 4usize..9, seed: u64) {
        let lr = random(Shape::new(1, 3, h, w), seed);
        let cfg = ModelConfig { n_feats: 4, scale: 2, ..Default::default() };
        let model = Model::<f32>::pixel_replicator(cfg, seed).unwrap();
        prop_assert_eq!(self_ensemble(&model, &lr).unwrap(), model.upscale(&lr).unwrap());
    }

    #[test]
    fn adam_steps_are_bounded_by_the_learning_rate(grads in prop::collection::vec(-1e3f32..1e3, 1..40), lr in 1e-5f64..1e-2, steps in 1usize..6) {
        let n = grads.len();
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(Shape::new(1, 1, 1, n)).with_requires_grad()).unwrap();
        let mut adam = Adam::new(&store, &TrainConfig::default());
        for _ in 0..steps {
            let before = store.iter().next().unwrap().tensor.data().to_vec();
            for p in store.iter_mut() {
                p.tensor.zero_grad();
                p.tensor.accumulate_grad(&grads);
            }
            adam.step(&mut store, lr).unwrap();
            let after = store.iter().next().unwrap().tensor.data();
            for (a, b) in after.iter().zip(&before) {
                prop_assert!(f64::from((a - b).abs()) <= lr * (1.0 + 1e-3));
            }
        }
    }
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut store = ParamStore::<f32>::new();
    store
        .add("w", Tensor::full(Shape::new(1, 1, 2, 2), 0.5f32).with_requires_grad())
        .unwrap();
    for p in store.iter_mut() {
        p.tensor.accumulate_grad(&[1.0; 4]);
    }
    let mut adam = Adam::new(&store, &TrainConfig::default());
    adam.step(&mut store, 1e-4).unwrap();
    for v in store.iter().next().unwrap().tensor.data() {
        assert!((f64::from(*v) - (0.5 - 1e-4)).abs() < 1e-7);
    }
}

#[test]
fn adam_rejects_non_finite_gradients_and_names_the_parameter() {
    let mut store = ParamStore::<f32>::new();
    store.add("head.weight", Tensor::zeros(Shape::new(1, 1, 1, 2)).with_requires_grad()).unwrap();
    for p in store.iter_mut() {
        p.tensor.accumulate_grad(&[0.0, f32::NAN]);
    }
    let mut adam = Adam::new(&store, &TrainConfig::default());
    let err = adam.step(&mut store, 1e-4).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("head.weight"));
    assert!(store.iter().next().unwrap().tensor.data().iter().all(|v| *v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(n_feats in 1usize..6, seed: u64, step: u64, t in 0u64..1000, with_state: bool) {
        let model = Model::<f32>::new(ModelConfig { n_feats, ..Default::default() }, seed).unwrap();
        let state = with_state.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mut moments = || {
                model
                    .params()
                    .iter()
                    .map(|p| (0..p.tensor.numel()).map(|_| rng.random::<f32>()).collect())
                    .collect()
            };
            OptimizerState { t, m: moments(), v: moments() }
        });
        let bytes = checkpoint::encode(&model, step, state.as_ref());
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(back.model.config(), model.config());
        for (a, b) in back.model.params().iter().zip(model.params().iter()) {
            prop_assert_eq!(&a.name, &b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        prop_assert_eq!(&back.optimizer, &state);
        prop_assert_eq!(checkpoint::encode(&back.model, back.step, back.optimizer.as_ref()), bytes);
    }
}

#[test]
fn bicubic_ensemble_stays_close_to_single_pass() {
    let lr = random(Shape::new(1, 3, 9, 7), 5).map(|v| v * 0.5 + 0.5);
    let up = Bicubic { scale: 4 };
    let single = up.upscale(&lr).unwrap();
    let ens = self_ensemble(&up, &lr).unwrap();
    assert!(ens.max_abs_diff(&single) < 1e-5);
}
