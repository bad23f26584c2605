//! InfoNCE against a memory bank, its α coefficients and analytic gradients.

mod bank;
mod flow;
mod infonce;

pub use bank::{MemoryBank, UNIT_NORM_TOL};
pub use flow::last_layer_grad_flow;
pub use infonce::{
    alpha_coefficients, info_nce, info_nce_full, info_nce_grad_z, info_nce_with_negatives,
    InfoNce, LossConfig,
};

use crate::error::Result;
use crate::numerics::Tensor;

/// FIFO insertion of `batch` into `bank`.
pub fn bank_enqueue(bank: &mut MemoryBank, batch: &Tensor) -> Result<()> {
    bank.enqueue(batch)
}
