mod common;

use dd_spectro::mlp::{AdamState, MlpParams};

#[test]
fn backprop_matches_central_differences() {
    for (dims, seed) in [
        (vec![6usize, 9, 7, 3], 11u64),
        (vec![12, 5, 3], 2),
        (vec![4, 3], 5),
    ] {
        let err = common::gradient_check_max_rel_error(&dims, 10, 1e-5, seed);
        assert!(err < 1e-4, "dims {dims:?}: {err}");
    }
}

#[test]
fn adam_constant_gradient_two_steps() {
    // Hand computation, g = 0.5, lr = 0.1:
    // step 1: m̂ = 0.5, v̂ = 0.25, Δ = 0.1·0.5/(0.5 + 1e-8)
    // step 2: identical bias-corrected moments, same Δ.
    let mut params = MlpParams::zeros(&[1, 1]).unwrap();
    let mut grad = params.zeros_like();
    grad.as_mut_slice().fill(0.5);
    let mut adam = AdamState::new(&params);
    let delta = 0.1 * 0.5 / (0.5 + 1e-8);
    adam.step(&mut params, &grad, 0.1).unwrap();
    for &p in params.as_slice() {
        assert!((p + delta).abs() < 1e-12);
    }
    adam.step(&mut params, &grad, 0.1).unwrap();
    for &p in params.as_slice() {
        assert!((p + 2.0 * delta).abs() < 1e-12);
    }
}
