//! Intra-image and cross-image variance of encodings.

mod intra;
mod report;

pub use intra::{
    draw_view, image_row, image_stream, intra_image_variance, mean_population_variance,
    FrozenEncoder, LinearProbeHead, VarianceOptions, ViewEncoder,
};
pub use report::{bootstrap_gap_ci, variance_cdf, GapCi, VarianceReport};

use crate::error::{LabError, Result};
use crate::numerics::Tensor;

/// Per-channel population variance across the batch, averaged over channels.
///
/// For unit-norm rows this equals `(1 − ‖mean row‖²) / d`.
pub fn cross_image_variance(z: &Tensor) -> Result<f64> {
    let (b, d) = (z.rows(), z.cols());
    if b < 2 {
        return Err(LabError::Config(format!("cross-image variance needs batch >= 2, got {b}")));
    }
    for i in 0..b {
        let n = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(LabError::Integrity(format!("row {i} has norm {n}, expected 1")));
        }
    }
    let rows: Vec<&[f64]> = (0..b).map(|i| z.row(i)).collect();
    Ok(mean_population_variance(&rows, d))
}
