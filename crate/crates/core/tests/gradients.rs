mod common;

use herdid::head::ProjectionHead;
use herdid::objective::{build_mask_with, contrastive_objective, loss_and_grads, similarity, LossParams};
use herdid::batching::TrainingBatch;
use herdid::Exec;
use ndarray::Array2;
use proptest::prelude::*;

fn variants() -> [LossParams; 3] {
    [LossParams::bce(), LossParams::supcon_fixed(0.5), LossParams::supcon_learnable()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn head_and_loss_gradients_match_finite_differences(
        dim in 3usize..=16,
        half in 2usize..=6,
        variant in 0usize..3,
        seed in any::<u64>(),
    ) {
        let err = common::gradient_check(dim, 2 * half, variants()[variant], 12, seed);
        prop_assert!(err.head < 1e-4, "{err:?}");
        prop_assert!(err.sim < 1e-6, "{err:?}");
        prop_assert!(err.t < 1e-6, "{err:?}");
        prop_assert!(err.b < 1e-6, "{err:?}");
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = herdid::seed::rng(3);
    let x = common::uniform_matrix(&mut rng, 8, 5);
    let frames = vec![2, 2];
    let params = LossParams::bce();
    let mut head = ProjectionHead::<f64>::init(5, 4).unwrap();
    let out = head.forward(x.view()).unwrap();
    let sim = similarity(out.view()).unwrap();
    let mask = build_mask_with(sim.values.view(), &frames, Exec::Sequential).unwrap();
    let lo = loss_and_grads(sim.values.view(), &mask, &params).unwrap();
    let (_, dx) = head.backward_with_input(sim.backward(lo.dsim.view()).view()).unwrap();

    let mut loss_at = |x: &Array2<f64>| {
        let out = head.forward(x.view()).unwrap();
        let sim = similarity(out.view()).unwrap();
        loss_and_grads(sim.values.view(), &mask, &params).unwrap().loss
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for ((i, j), &g) in dx.indexed_iter() {
        let mut p = x.clone();
        p[[i, j]] += h;
        let up = loss_at(&p);
        p[[i, j]] -= 2.0 * h;
        let down = loss_at(&p);
        worst = worst.max(((up - down) / (2.0 * h) - g).abs());
    }
    assert!(worst < 1e-7, "worst abs error {worst}");
}

#[test]
fn objective_feature_gradient_matches_finite_differences() {
    let mut rng = herdid::seed::rng(11);
    let features = common::uniform_matrix(&mut rng, 10, 6);
    let batch = TrainingBatch {
        features: features.mapv(|v| v as f32),
        provenance: Vec::new(),
        frame_ids: vec![0, 1, 2],
        frame_sizes: vec![2, 2, 1],
    };
    for params in variants() {
        let out = contrastive_objective(features.view(), &batch, &params, Exec::Sequential).unwrap();
        let h = 1e-6;
        for ((i, j), &g) in out.dfeatures.indexed_iter() {
            let mut p = features.clone();
            p[[i, j]] += h;
            let sim = similarity(p.view()).unwrap();
            let up = loss_and_grads(sim.values.view(), &out.mask, &params).unwrap().loss;
            p[[i, j]] -= 2.0 * h;
            let sim = similarity(p.view()).unwrap();
            let down = loss_and_grads(sim.values.view(), &out.mask, &params).unwrap().loss;
            let n = (up - down) / (2.0 * h);
            assert!((n - g).abs() < 1e-7 * (1.0 + g.abs()), "{:?} ({i},{j}): {g} vs {n}", params.variant);
        }
    }
}
