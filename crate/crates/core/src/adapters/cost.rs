use serde::{Deserialize, Serialize};

use super::Variant;

/// Closed-form cost of one adapted layer, `R×C` base, `L` tokens, rank `r`.
/// SPP figures assume dropout is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostPrediction {
    pub macs_forward: u64,
    pub macs_backward: u64,
    pub saved_elements: u64,
}

impl CostPrediction {
    pub fn total_macs(&self) -> u64 {
        self.macs_forward + self.macs_backward
    }
}

pub fn predict_cost(variant: Variant, rows: usize, cols: usize, tokens: usize, rank: usize) -> CostPrediction {
    let (r_, c, l, r) = (rows as u64, cols as u64, tokens as u64, rank as u64);
    let rcl = r_ * c * l;
    let rc = r_ * c;
    let merged = r * rc + rc;
    let (macs_forward, macs_backward, saved_elements) = match variant {
        Variant::Lora => (rcl + r * c * l + r * r_ * l, rcl + 2 * r * r_ * l + 2 * r * c * l, r * l + c * l),
        Variant::Sqft => (rcl + merged, 2 * rcl + 2 * r * rc + rc, 2 * rc + c * l),
        Variant::SqftGc => (rcl + merged, 2 * rcl + 3 * r * rc + 2 * rc, c * l),
        Variant::Spp => (rcl + merged, 2 * rcl + 2 * r * rc + rc, c * l + rc + r * c),
        Variant::SppGc => (rcl + merged, 3 * rcl + 3 * r * rc + 2 * rc, c * l),
        Variant::Lors => (rcl + merged, rcl + 2 * r * r_ * l + 2 * r * c * l + merged, c * l),
    };
    CostPrediction { macs_forward, macs_backward, saved_elements }
}
