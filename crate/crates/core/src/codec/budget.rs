use serde::Serialize;

use crate::error::{Error, Result};

/// Storage accounting for one class under a raw 8-bit IPC budget.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BudgetReport {
    pub raw_budget_bits: u64,
    pub per_image_cost_bits: u64,
    pub capacity: u64,
    /// Palettes of `2^n` colors that fit in a shared 256-entry table.
    pub palette_slots: u64,
    pub overhead_bits: u64,
    pub raw_mode: bool,
}

/// Budget with no per-image overhead.
pub fn budget(ipc_base: u64, channels: u64, height: u64, width: u64, n_bits: u32, k: u64) -> Result<BudgetReport> {
    budget_with_overhead(ipc_base, channels, height, width, n_bits, k, 0)
}

/// Per-image cost is `n·C·H·W + 8·C·K + overhead`; `n = 8, K = 256` is raw
/// storage with no palette or overhead.
pub fn budget_with_overhead(
    ipc_base: u64,
    channels: u64,
    height: u64,
    width: u64,
    n_bits: u32,
    k: u64,
    overhead_bits: u64,
) -> Result<BudgetReport> {
    if !(1..=8).contains(&n_bits) {
        return Err(Error::Parameter(format!("bits per index must be in 1..=8, got {n_bits}")));
    }
    if k == 0 || k > 1 << n_bits {
        return Err(Error::Parameter(format!("K={k} violates K ≤ 2^n = {}", 1u64 << n_bits)));
    }
    let chw = channels * height * width;
    if chw == 0 {
        return Err(Error::Parameter("image dimensions must be positive".into()));
    }
    let raw_budget_bits = 8 * ipc_base * chw;
    let raw_mode = n_bits == 8 && k == 256;
    let (per_image_cost_bits, overhead_bits) = if raw_mode {
        (8 * chw, 0)
    } else {
        (n_bits as u64 * chw + 8 * channels * k + overhead_bits, overhead_bits)
    };
    Ok(BudgetReport {
        raw_budget_bits,
        per_image_cost_bits,
        capacity: raw_budget_bits / per_image_cost_bits,
        palette_slots: 1 << (8 - n_bits),
        overhead_bits,
        raw_mode,
    })
}
