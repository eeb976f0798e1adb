//! Post-training pruning front end: magnitude, activation-scaled and 2:4
//! semi-structured masks.
//!
//! Pruned entries are stored as exact zeros; the mask of a [`SparseWeight`]
//! is recovered from its values. All orderings break ties by index so results
//! are reproducible.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{LorsError, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sparsity {
    Unstructured { ratio: f64 },
    TwoFour,
    /// No pruning applied (dense base).
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Magnitude,
    ActivationScaled,
}

/// A dense-stored weight whose zero entries are the pruned ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseWeight {
    values: DenseMatrix,
    sparsity: Sparsity,
}

impl SparseWeight {
    pub fn new(values: DenseMatrix, sparsity: Sparsity) -> Self {
        Self { values, sparsity }
    }

    /// Wraps a weight without pruning anything.
    pub fn dense(values: DenseMatrix) -> Self {
        Self { values, sparsity: Sparsity::Dense }
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn into_values(self) -> DenseMatrix {
        self.values
    }

    pub fn sparsity(&self) -> Sparsity {
        self.sparsity
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// `M = (W ≠ 0)` as a 0/1 matrix.
    pub fn mask(&self) -> DenseMatrix {
        self.values.nonzero_mask()
    }

    pub fn nonzero_fraction(&self) -> f64 {
        self.values.count_nonzero() as f64 / self.values.len() as f64
    }

    /// Checks the invariant for the declared sparsity kind.
    pub fn validate(&self) -> Result<()> {
        match self.sparsity {
            Sparsity::Dense => Ok(()),
            Sparsity::Unstructured { ratio } => {
                let n = self.values.len() as f64;
                if self.nonzero_fraction() > 1.0 - ratio + 1.0 / n + 1e-12 {
                    return Err(LorsError::arg(format!(
                        "nonzero fraction {} exceeds 1 - {ratio}",
                        self.nonzero_fraction()
                    )));
                }
                Ok(())
            }
            Sparsity::TwoFour => match two_four_violations(&self.values) {
                0 => Ok(()),
                v => Err(LorsError::arg(format!("{v} groups violate 2:4 sparsity"))),
            },
        }
    }
}

/// Activations used to score weights, one column per sample (`C×L`).
#[derive(Debug, Clone)]
pub struct CalibrationBatch {
    x: DenseMatrix,
}

impl CalibrationBatch {
    pub fn new(x: DenseMatrix) -> Result<Self> {
        if !x.all_finite() {
            return Err(LorsError::arg("calibration batch contains non-finite values"));
        }
        Ok(Self { x })
    }

    pub fn activations(&self) -> &DenseMatrix {
        &self.x
    }

    /// `‖x_j‖₂` over samples for each input feature `j`.
    pub fn feature_norms(&self) -> Vec<f64> {
        (0..self.x.rows()).map(|j| self.x.row(j).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(LorsError::arg(format!("pruning ratio must be in [0, 1), got {ratio}")));
    }
    Ok(())
}

fn check_finite(w: &DenseMatrix) -> Result<()> {
    if !w.all_finite() {
        return Err(LorsError::arg("weight contains non-finite values"));
    }
    Ok(())
}

/// Ascending by score, then by index.
fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

/// Zeroes the `⌊ratio·R·C⌋` smallest-magnitude entries over the whole matrix.
pub fn prune_magnitude(w: &DenseMatrix, ratio: f64) -> Result<SparseWeight> {
    check_ratio(ratio)?;
    check_finite(w)?;
    let n = w.len();
    let k = (ratio * n as f64).floor() as usize;
    let scores: Vec<f64> = w.data().iter().map(|v| v.abs()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(by_score(&scores));
    let mut values = w.clone();
    for &idx in &order[..k] {
        values.data_mut()[idx] = 0.0;
    }
    Ok(SparseWeight::new(values, Sparsity::Unstructured { ratio }))
}

/// Per output row, zeroes the `⌊ratio·C⌋` entries with the lowest
/// `|w_ij|·‖x_j‖₂`.
pub fn prune_activation_scaled(w: &DenseMatrix, calib: &CalibrationBatch, ratio: f64) -> Result<SparseWeight> {
    check_ratio(ratio)?;
    check_finite(w)?;
    let (rows, cols) = w.shape();
    if calib.x.rows() != cols {
        return Err(LorsError::shape("prune_activation_scaled", w.shape(), calib.x.shape()));
    }
    let norms = calib.feature_norms();
    let k = (ratio * cols as f64).floor() as usize;
    let mut values = w.clone();
    for i in 0..rows {
        let scores: Vec<f64> = (0..cols).map(|j| w.get(i, j).abs() * norms[j]).collect();
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(by_score(&scores));
        for &j in &order[..k] {
            values.set(i, j, 0.0);
        }
    }
    Ok(SparseWeight::new(values, Sparsity::Unstructured { ratio }))
}

/// Keeps the two highest-scoring entries of every aligned group of four along
/// each row. Ties prune the lower index first.
pub fn prune_two_four(w: &DenseMatrix, score: ScoreKind, calib: Option<&CalibrationBatch>) -> Result<SparseWeight> {
    check_finite(w)?;
    let (rows, cols) = w.shape();
    if cols % 4 != 0 {
        return Err(LorsError::arg(format!(
            "2:4 pruning requires the input dimension to be divisible by 4, got {cols}"
        )));
    }
    let norms = match (score, calib) {
        (ScoreKind::Magnitude, _) => vec![1.0; cols],
        (ScoreKind::ActivationScaled, Some(c)) => {
            if c.x.rows() != cols {
                return Err(LorsError::shape("prune_two_four", w.shape(), c.x.shape()));
            }
            c.feature_norms()
        }
        (ScoreKind::ActivationScaled, None) => {
            return Err(LorsError::arg("activation-scaled scoring needs a calibration batch"));
        }
    };
    let mut values = w.clone();
    for i in 0..rows {
        for g in (0..cols).step_by(4) {
            let scores: Vec<f64> = (0..4).map(|p| w.get(i, g + p).abs() * norms[g + p]).collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(by_score(&scores));
            for &p in &order[..2] {
                values.set(i, g + p, 0.0);
            }
        }
    }
    Ok(SparseWeight::new(values, Sparsity::TwoFour))
}

/// Number of aligned 4-groups along rows holding more than two nonzeros.
/// Trailing columns that do not fill a group are ignored.
pub fn two_four_violations(w: &DenseMatrix) -> usize {
    let (rows, cols) = w.shape();
    let mut bad = 0;
    for i in 0..rows {
        for g in (0..cols - cols % 4).step_by(4) {
            if (0..4).filter(|p| w.get(i, g + p) != 0.0).count() > 2 {
                bad += 1;
            }
        }
    }
    bad
}

/// Count of nonzero entries of `w` at positions where `mask` is zero.
pub fn mask_violations(w: &DenseMatrix, mask: &DenseMatrix) -> usize {
    assert_eq!(w.shape(), mask.shape());
    w.data().iter().zip(mask.data()).filter(|(v, m)| **m == 0.0 && **v != 0.0).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;
    use proptest::prelude::*;

    fn zeros_of(w: &DenseMatrix) -> Vec<usize> {
        (0..w.len()).filter(|&k| w.data()[k] == 0.0).collect()
    }

    #[test]
    fn magnitude_removes_two_smallest() {
        let w = DenseMatrix::from_rows(&[&[1.0, -4.0], &[2.0, 3.0]]);
        let p = prune_magnitude(&w, 0.5).unwrap();
        assert_eq!(p.values(), &DenseMatrix::from_rows(&[&[0.0, -4.0], &[0.0, 3.0]]));
        p.validate().unwrap();
    }

    #[test]
    fn magnitude_ratio_zero_is_identity() {
        let w = DenseMatrix::from_rows(&[&[1.0, -4.0], &[2.0, 3.0]]);
        assert_eq!(prune_magnitude(&w, 0.0).unwrap().values(), &w);
    }

    #[test]
    fn magnitude_rejects_ratio_one() {
        let w = DenseMatrix::ones(2, 2);
        assert!(matches!(prune_magnitude(&w, 1.0), Err(LorsError::Argument(_))));
    }

    #[test]
    fn magnitude_matches_full_sort() {
        let mut rng = RngState::new(0);
        let w = DenseMatrix::random_normal(8, 8, &mut rng, 0.0, 1.0);
        let p = prune_magnitude(&w, 0.5).unwrap();
        assert_eq!(p.values().count_nonzero(), 32);
        let mut mags: Vec<(f64, usize)> = w.data().iter().enumerate().map(|(k, v)| (v.abs(), k)).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect: Vec<usize> = mags[..32].iter().map(|(_, k)| *k).collect();
        expect.sort();
        assert_eq!(zeros_of(p.values()), expect);
    }

    #[test]
    fn magnitude_ties_prune_lower_index_first() {
        let w = DenseMatrix::from_rows(&[&[2.0, 2.0, 2.0, 2.0]]);
        let p = prune_magnitude(&w, 0.5).unwrap();
        assert_eq!(p.values(), &DenseMatrix::from_rows(&[&[0.0, 0.0, 2.0, 2.0]]));
    }

    #[test]
    fn activation_scaled_uniform_calib_is_per_row_magnitude() {
        let mut rng = RngState::new(1);
        let w = DenseMatrix::random_normal(4, 6, &mut rng, 0.0, 1.0);
        let calib = CalibrationBatch::new(DenseMatrix::ones(6, 3)).unwrap();
        let p = prune_activation_scaled(&w, &calib, 0.5).unwrap();
        for i in 0..4 {
            let row = DenseMatrix::from_fn(1, 6, |_, j| w.get(i, j));
            let pr = prune_magnitude(&row, 0.5).unwrap();
            assert_eq!(pr.values().row(0), p.values().row(i));
        }
    }

    #[test]
    fn activation_scaled_zero_feature_goes_first() {
        let mut rng = RngState::new(2);
        let w = DenseMatrix::random_uniform(5, 4, &mut rng, 1.0, 2.0);
        let mut x = DenseMatrix::ones(4, 3);
        for l in 0..3 {
            x.set(2, l, 0.0);
        }
        let p = prune_activation_scaled(&w, &CalibrationBatch::new(x).unwrap(), 0.25).unwrap();
        for i in 0..5 {
            assert_eq!(p.values().get(i, 2), 0.0);
            assert_eq!(p.values().row(i).iter().filter(|v| **v == 0.0).count(), 1);
        }
    }

    #[test]
    fn activation_scaled_shape_mismatch() {
        let w = DenseMatrix::ones(2, 4);
        let calib = CalibrationBatch::new(DenseMatrix::ones(3, 2)).unwrap();
        assert!(matches!(prune_activation_scaled(&w, &calib, 0.5), Err(LorsError::Shape { .. })));
    }

    #[test]
    fn two_four_top_two_of_four() {
        let w = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]);
        let p = prune_two_four(&w, ScoreKind::Magnitude, None).unwrap();
        assert_eq!(p.values(), &DenseMatrix::from_rows(&[&[0.0, 0.0, 3.0, 4.0]]));
    }

    #[test]
    fn two_four_tie_rule() {
        let w = DenseMatrix::from_rows(&[&[5.0, 5.0, 5.0, 5.0]]);
        let p = prune_two_four(&w, ScoreKind::Magnitude, None).unwrap();
        assert_eq!(p.values(), &DenseMatrix::from_rows(&[&[0.0, 0.0, 5.0, 5.0]]));
    }

    #[test]
    fn two_four_rejects_indivisible() {
        let err = prune_two_four(&DenseMatrix::ones(2, 6), ScoreKind::Magnitude, None).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"));
    }

    #[test]
    fn two_four_matches_group_enumeration() {
        let mut rng = RngState::new(3);
        let w = DenseMatrix::random_normal(4, 16, &mut rng, 0.0, 1.0);
        let p = prune_two_four(&w, ScoreKind::Magnitude, None).unwrap();
        assert_eq!(two_four_violations(p.values()), 0);
        for i in 0..4 {
            for g in (0..16).step_by(4) {
                // Enumerate the six keep-pairs and take the one with the largest kept mass.
                let mut best = (f64::NEG_INFINITY, 0, 0);
                for a in 0..4 {
                    for b in a + 1..4 {
                        let mass = w.get(i, g + a).abs() + w.get(i, g + b).abs();
                        if mass > best.0 {
                            best = (mass, a, b);
                        }
                    }
                }
                for q in 0..4 {
                    let kept = q == best.1 || q == best.2;
                    assert_eq!(p.values().get(i, g + q) != 0.0, kept);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn magnitude_is_idempotent_and_monotone(seed in 0u64..500, r1 in 0.0f64..0.9, dr in 0.0f64..0.09) {
            let w = DenseMatrix::random_normal(6, 7, &mut RngState::new(seed), 0.0, 1.0);
            let p1 = prune_magnitude(&w, r1).unwrap();
            let again = prune_magnitude(p1.values(), r1).unwrap();
            prop_assert!(again.values().bitwise_eq(p1.values()));
            p1.validate().unwrap();
            let p2 = prune_magnitude(&w, r1 + dr).unwrap();
            prop_assert_eq!(mask_violations(p2.values(), &p1.mask()), 0);
        }

        #[test]
        fn two_four_is_idempotent(seed in 0u64..500) {
            let w = DenseMatrix::random_normal(3, 12, &mut RngState::new(seed), 0.0, 1.0);
            let p = prune_two_four(&w, ScoreKind::Magnitude, None).unwrap();
            let again = prune_two_four(p.values(), ScoreKind::Magnitude, None).unwrap();
            prop_assert!(again.values().bitwise_eq(p.values()));
            prop_assert_eq!(two_four_violations(p.values()), 0);
        }
    }
}
