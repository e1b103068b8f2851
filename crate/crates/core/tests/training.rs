//! Training behavior: overfit sanity, gradient coverage, and point-order
//! invariance of the loss.

use ndarray::Array2;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha12Rng;

use stmd_core::data::{generate_synthetic_sequence, ScenarioConfig, SequenceSample, TrackerConfig};
use stmd_core::model::{mix_seed, StmdModel};
use stmd_core::nn::ParamStore;
use stmd_core::tape::Tape;
use stmd_core::train::{compute_loss, param_grads, LossWeights, Optimizer, OptimizerKind};

fn small_cfg(seed: u64) -> TrackerConfig {
    TrackerConfig {
        frames: 4,
        points: 48,
        centers: 16,
        knn: 4,
        feat_c: 8,
        feat_cm: 12,
        feat_cp: 16,
        heads: 2,
        k_top: 8,
        seed,
        ..Default::default()
    }
}

fn samples(n: usize, frames: usize, base_seed: u64) -> Vec<SequenceSample> {
    samples_with(n, frames, base_seed, 2)
}

fn samples_with(n: usize, frames: usize, base_seed: u64, distractors: usize) -> Vec<SequenceSample> {
    (0..n)
        .map(|i| {
            let cfg = ScenarioConfig {
                frames,
                points_per_frame: 72,
                num_distractors: distractors,
                seed: base_seed + i as u64,
                ..Default::default()
            };
            generate_synthetic_sequence(&cfg).unwrap()
        })
        .collect()
}

fn batch_loss_and_grads(
    model: &StmdModel<f32>,
    batch: &[SequenceSample],
) -> (f64, Vec<Array2<f32>>) {
    let mut acc: Vec<Array2<f32>> = model
        .store
        .ids()
        .map(|id| Array2::zeros(model.store.get(id).dim()))
        .collect();
    let mut total = 0.0;
    for (i, sample) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let fwd = model
            .training_forward(&mut tape, &bound, sample, mix_seed(9, i as u64, 0), 0.2)
            .unwrap();
        let (loss, bd) =
            compute_loss(&mut tape, &fwd, &LossWeights::default(), model.cfg.positive_radius)
                .unwrap();
        let grads = tape.backward(loss);
        for (a, g) in acc
            .iter_mut()
            .zip(param_grads(&model.store, &bound, &grads))
        {
            *a += &g;
        }
        total += bd.total;
    }
    let inv = 1.0 / batch.len() as f32;
    for a in &mut acc {
        a.mapv_inplace(|v| v * inv);
    }
    (total / batch.len() as f64, acc)
}

#[test]
fn fifty_steps_on_a_fixed_batch_halve_the_loss() {
    let mut model: StmdModel<f32> = StmdModel::new(small_cfg(0)).unwrap();
    // A distractor-free batch keeps the objectness labels stable while the
    // votes converge, so 50 steps are enough to fit it.
    let batch = samples_with(4, 4, 7000, 0);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 8e-3, usize::MAX, &model.store);

    let (initial, _) = batch_loss_and_grads(&model, &batch);
    let mut last = initial;
    for _ in 0..50 {
        let (loss, grads) = batch_loss_and_grads(&model, &batch);
        opt.apply(&mut model.store, &grads);
        last = loss;
    }
    eprintln!("overfit: initial {initial:.4}, after 50 steps {last:.4}");
    assert!(
        last < 0.5 * initial,
        "overfit sanity failed: initial {initial}, after 50 steps {last}"
    );
}

#[test]
fn every_parameter_receives_gradient_on_a_batch() {
    let model: StmdModel<f32> = StmdModel::new(small_cfg(1)).unwrap();
    let batch = samples(3, 4, 8000);
    let (_, grads) = batch_loss_and_grads(&model, &batch);
    for (id, name, _) in model.store.iter() {
        let g = &grads[id.0];
        assert!(
            g.iter().any(|&v| v != 0.0),
            "parameter {name} received no gradient"
        );
    }
}

#[test]
fn loss_is_invariant_under_point_permutation() {
    let model: StmdModel<f64> = StmdModel::new(small_cfg(2)).unwrap();
    let sample = &samples(1, 4, 9000)[0];
    let window = model.prepare_training_window(sample, 55, 0.2).unwrap();

    let loss_of = |w: &stmd_core::model::TrainingWindow<f64>| {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let fwd = model
            .training_forward_prepared(&mut tape, &bound, w, sample)
            .unwrap();
        let (_, bd) =
            compute_loss(&mut tape, &fwd, &LossWeights::default(), model.cfg.positive_radius)
                .unwrap();
        bd.total
    };
    let base = loss_of(&window);

    // Permute each frame's rows while keeping the sampling start point in
    // place, so farthest-point sampling still begins at the same physical
    // point.
    let n = model.cfg.points;
    let mut permuted = stmd_core::model::TrainingWindow {
        prepared: Vec::new(),
        crop_center: window.crop_center,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(123);
    for frame in window.prepared.iter() {
        let seed = stmd_core::backbone::Backbone::sa_seed(&model.cfg);
        let start = (seed % n as u64) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pos = perm.iter().position(|&p| p == start).unwrap();
        perm.swap(pos, start);

        let centers =
            Array2::from_shape_fn((n, 3), |(r, d)| frame.features.centers[(perm[r], d)]);
        let feats = Array2::from_shape_fn((n, frame.features.feats.ncols()), |(r, d)| {
            frame.features.feats[(perm[r], d)]
        });
        let labels: Vec<bool> = perm.iter().map(|&p| frame.labels[p]).collect();
        permuted.prepared.push(stmd_core::model::PreparedFrame {
            features: stmd_core::backbone::FrameFeatures {
                centers,
                feats,
                t: frame.features.t,
            },
            labels,
            real_points: frame.real_points,
        });
    }
    let permuted_loss = loss_of(&permuted);
    assert!(
        (base - permuted_loss).abs() < 1e-9,
        "loss changed under point permutation: {base} vs {permuted_loss}"
    );
}

#[test]
fn unused_store_has_no_parameters() {
    let store: ParamStore<f64> = ParamStore::new();
    assert_eq!(store.num_scalars(), 0);
}
