//! Finite-difference checks of every differentiable operation.

mod support;

use support::grad::{self, Checks, TOL};

fn assert_all(checks: Checks) {
    for (name, err) in checks {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn matmul_products() {
    assert_all(grad::matmul_products());
}

#[test]
fn elementwise_and_row_ops() {
    assert_all(grad::elementwise_and_row_ops());
}

#[test]
fn transformer_block_input_and_params() {
    assert_all(grad::transformer_block_input_and_params());
}

#[test]
fn patchify_and_unpatchify() {
    assert_all(grad::patchify_and_unpatchify());
}

#[test]
fn sphere_projection_and_entropy() {
    assert_all(grad::sphere_projection_and_entropy());
}

#[test]
fn loss_functions() {
    assert_all(grad::loss_functions());
}

#[test]
fn straight_through_composition() {
    assert_all(grad::straight_through_composition());
}

#[test]
fn autoencoder_loss_in_bypass_mode() {
    assert_all(grad::autoencoder_loss_in_bypass_mode());
}

#[test]
fn decoder_params_under_sign_quantization() {
    assert_all(grad::decoder_params_under_sign_quantization());
}

#[test]
fn forecaster_and_bce() {
    assert_all(grad::forecaster_and_bce());
}
