//! Monte-Carlo checks of the gradient statistics under an additive-noise
//! feature model with frozen α.

mod checks;
mod mc;
mod model;

pub use checks::{
    expectation_shift_check, expected_grad_check, hat_noise_stats, mean_grad_flow, mean_hat_cov,
    one_hot_alpha, predicted_expected_grad, predicted_tr_r_variance, predicted_tr_r_variance_full,
    sigma_prime_sweep, softmax_coupled_diagnostic, sweep_csv, tr_r_samples, tr_r_variance_check,
    uniform_alpha, variance_ratio_check, variance_shift_check, Alternative, TheoryCheckResult,
};
pub use mc::{pairwise_sum, run_chunks, MatrixSums, McOptions, ScalarMoments, CHUNK, MIN_TRIALS};
pub use model::{psd_cholesky, sample_features, Features, Gaussian, NoiseModel};
