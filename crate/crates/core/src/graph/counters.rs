use serde::{Deserialize, Serialize};

use crate::error::{LorsError, Result};
use crate::tensor::{self, DenseMatrix};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[default]
    Forward,
    Backward,
}

/// MAC and saved-element tallies for one pass.
///
/// Counting convention: a matmul `m×k · k×n` is `m·k·n` MACs and a Hadamard
/// product of two `m×n` matrices is `m·n` MACs. Additions, scalar scaling and
/// bias broadcasts go to the separate `elementwise_*` tallies, which are not
/// part of any MAC comparison.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub macs_forward: u64,
    pub macs_backward: u64,
    pub elementwise_forward: u64,
    pub elementwise_backward: u64,
    pub saved_elements: u64,
    phase: Phase,
}

impl CostCounters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zeroes every tally and returns to the forward phase.
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn add_macs(&mut self, n: u64) {
        match self.phase {
            Phase::Forward => self.macs_forward += n,
            Phase::Backward => self.macs_backward += n,
        }
    }

    pub fn add_elementwise(&mut self, n: u64) {
        match self.phase {
            Phase::Forward => self.elementwise_forward += n,
            Phase::Backward => self.elementwise_backward += n,
        }
    }

    pub fn add_saved(&mut self, n: u64) {
        self.saved_elements += n;
    }

    pub fn total_macs(&self) -> u64 {
        self.macs_forward + self.macs_backward
    }

    /// Folds another counter's MACs into this one's current phase. Used when
    /// a nested computation runs on its own tape; saved elements are left out
    /// because the enclosing op reports what it keeps itself.
    pub fn absorb(&mut self, other: &CostCounters) {
        self.add_macs(other.macs_forward + other.macs_backward);
        self.add_elementwise(other.elementwise_forward + other.elementwise_backward);
    }

    pub fn matmul(&mut self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
        let out = tensor::matmul(a, b)?;
        self.add_macs((a.rows() * a.cols() * b.cols()) as u64);
        Ok(out)
    }

    pub fn hadamard(&mut self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
        let out = tensor::hadamard(a, b)?;
        self.add_macs(out.elements());
        Ok(out)
    }

    pub fn add(&mut self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
        let out = tensor::add(a, b)?;
        self.add_elementwise(out.elements());
        Ok(out)
    }

    pub fn sub(&mut self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
        let out = tensor::sub(a, b)?;
        self.add_elementwise(out.elements());
        Ok(out)
    }

    pub fn scale(&mut self, a: &DenseMatrix, s: f64) -> DenseMatrix {
        self.add_elementwise(a.elements());
        tensor::scale(a, s)
    }

    pub fn add_bias(&mut self, y: &DenseMatrix, bias: &DenseMatrix) -> Result<DenseMatrix> {
        let out = tensor::add_column_broadcast(y, bias)?;
        self.add_elementwise(out.elements());
        Ok(out)
    }

    pub fn row_sums(&mut self, m: &DenseMatrix) -> DenseMatrix {
        self.add_elementwise(m.elements());
        m.reduce_sum_rows()
    }
}

/// Per-node saved-element counts for one tape, plus the live high-water mark.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedContext {
    per_node: Vec<u64>,
    live: u64,
    peak: u64,
}

impl SavedContext {
    pub(crate) fn push(&mut self, n: u64) {
        self.per_node.push(n);
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    pub(crate) fn release(&mut self, node: usize) -> Result<()> {
        let n = *self
            .per_node
            .get(node)
            .ok_or_else(|| LorsError::graph(format!("no saved entry for node {node}")))?;
        self.live -= n;
        Ok(())
    }

    pub fn node(&self, node: usize) -> u64 {
        self.per_node.get(node).copied().unwrap_or(0)
    }

    pub fn per_node(&self) -> &[u64] {
        &self.per_node
    }

    /// Sum over all nodes recorded in this pass.
    pub fn pass_total(&self) -> u64 {
        self.per_node.iter().sum()
    }

    pub fn live(&self) -> u64 {
        self.live
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_zeroes_everything() {
        let mut c = CostCounters::new();
        c.matmul(&DenseMatrix::ones(2, 3), &DenseMatrix::ones(3, 4)).unwrap();
        c.set_phase(Phase::Backward);
        c.add_macs(5);
        c.add_saved(9);
        c.reset();
        assert_eq!(c, CostCounters::default());
        c.reset();
        assert_eq!(c, CostCounters::default());
    }

    #[test]
    fn matmul_after_reset_counts_mkn() {
        let mut c = CostCounters::new();
        c.add_macs(100);
        c.reset();
        c.matmul(&DenseMatrix::ones(2, 3), &DenseMatrix::ones(3, 4)).unwrap();
        assert_eq!(c.macs_forward, 24);
        assert_eq!(c.macs_backward, 0);
    }

    #[test]
    fn elementwise_ops_do_not_touch_macs() {
        let mut c = CostCounters::new();
        let a = DenseMatrix::ones(3, 3);
        c.add(&a, &a).unwrap();
        c.scale(&a, 2.0);
        assert_eq!(c.macs_forward, 0);
        assert_eq!(c.elementwise_forward, 18);
        c.hadamard(&a, &a).unwrap();
        assert_eq!(c.macs_forward, 9);
    }

    #[test]
    fn absorb_lands_in_current_phase() {
        let mut inner = CostCounters::new();
        inner.add_macs(7);
        inner.set_phase(Phase::Backward);
        inner.add_macs(3);
        let mut outer = CostCounters::new();
        outer.set_phase(Phase::Backward);
        outer.absorb(&inner);
        assert_eq!(outer.macs_backward, 10);
        assert_eq!(outer.macs_forward, 0);
    }

    #[test]
    fn saved_context_tracks_peak() {
        let mut s = SavedContext::default();
        s.push(10);
        s.push(5);
        s.release(1).unwrap();
        s.push(2);
        assert_eq!(s.pass_total(), 17);
        assert_eq!(s.peak(), 15);
        assert_eq!(s.live(), 12);
    }
}
