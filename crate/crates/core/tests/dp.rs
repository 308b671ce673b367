mod common;

use clicooper::dp::{
    clip_l1, clip_rows, l1_norm, laplace_log_density_ratio, laplace_perturb, pair_linkage_log_ratio,
    ClassHypothesis, DpActivationBatch, DpParams,
};
use clicooper::rng;
use clicooper::{Error, TensorF64};
use common::random_matrix;
use proptest::prelude::*;

#[test]
fn every_clipped_row_is_inside_the_ball() {
    let s = 1.6;
    let mut x = random_matrix(100_000, 8, 3);
    for (i, v) in x.values_mut().iter_mut().enumerate() {
        *v *= 1.0 + (i % 7) as f64;
    }
    let clipped = clip_rows(&x, s);
    let worst = clipped.iter_rows().map(l1_norm).fold(0.0, f64::max);
    assert!(worst <= s + 1e-12, "max l1 {worst}");
}

#[test]
fn laplace_mean_absolute_noise_is_the_scale() {
    let params = DpParams::new(5.0, 1.6).unwrap();
    let zeros = TensorF64::zeros(vec![125_000, 8]);
    let batch = laplace_perturb(&zeros, params, 77).unwrap();
    let mean_abs = batch.values.values().iter().map(|v| v.abs()).sum::<f64>() / 1e6;
    let b = params.sensitivity() / params.epsilon();
    assert!((mean_abs / b - 1.0).abs() < 0.01, "E|noise| {mean_abs}, expected {b}");
    let mean = batch.values.values().iter().sum::<f64>() / 1e6;
    assert!(mean.abs() < 0.01 * b);
}

#[test]
fn density_ratio_of_clipped_neighbours_is_bounded() {
    let params = DpParams::new(2.0, 1.0).unwrap();
    let b = params.noise_scale();
    let mut r = rng::seeded(5);
    let mut draw = |n: usize, w: f64| -> Vec<f64> { (0..n).map(|_| rng::uniform_range(&mut r, -w, w)).collect() };
    for _ in 0..10_000 {
        let x = clip_l1(&draw(6, 3.0), 1.0);
        let xp = clip_l1(&draw(6, 3.0), 1.0);
        let y = draw(6, 4.0);
        let single = laplace_log_density_ratio(&y, &x, &xp, b);
        assert!(single <= params.epsilon() + 1e-9);
        let ya = draw(6, 4.0);
        let t = ClassHypothesis {
            inputs: vec![x.clone(), clip_l1(&draw(6, 3.0), 1.0)],
            priors: vec![0.3, 0.7],
        };
        let u = ClassHypothesis {
            inputs: vec![xp.clone()],
            priors: vec![1.0],
        };
        let pair = pair_linkage_log_ratio(&ya, &y, &t, &u, b);
        assert!(pair <= 2.0 * params.epsilon() + 1e-9, "pair ratio {pair}");
        assert!(pair >= -2.0 * params.epsilon() - 1e-9);
    }
}

#[test]
fn zero_noise_release_is_the_clipped_input() {
    let x = clip_rows(&random_matrix(20, 5, 1), 1.0);
    let out = laplace_perturb(&x, DpParams::noiseless(1.0).unwrap(), 9).unwrap();
    assert_eq!(out.values, x);
}

#[test]
fn cache_survives_a_file_round_trip_and_detects_edits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cldp");
    let x = clip_rows(&random_matrix(30, 4, 2), 1.0);
    let cache = laplace_perturb(&x, DpParams::new(1.0, 1.0).unwrap(), 4).unwrap();
    cache.save(&path).unwrap();
    assert_eq!(DpActivationBatch::load(&path).unwrap(), cache);

    let mut bytes = std::fs::read(&path).unwrap();
    let last_value = bytes.len() - 32 - 3;
    bytes[last_value] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(DpActivationBatch::load(&path), Err(Error::DigestMismatch(_))));
}

proptest! {
    #[test]
    fn clipping_is_idempotent_and_direction_preserving(
        row in proptest::collection::vec(-50.0f64..50.0, 1..12),
        s in 0.01f64..10.0,
    ) {
        let once = clip_l1(&row, s);
        prop_assert!(l1_norm(&once) <= s * (1.0 + 1e-12));
        let twice = clip_l1(&once, s);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12 * s);
        }
        for (a, b) in row.iter().zip(&once) {
            prop_assert!(a * b >= 0.0);
        }
    }
}
