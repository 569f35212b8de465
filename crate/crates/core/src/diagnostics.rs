//! Attention uniformity scores.

use crate::float::Float;
use crate::tensor::Tensor;

/// Entropy of a probability row divided by `ln(len)`: 1 for a uniform row,
/// 0 for a one-hot row. Rows of length 1 score 1.
pub fn uniformity<F: Float>(row: &[F]) -> f64 {
    if row.len() <= 1 {
        return 1.0;
    }
    let h: f64 = row
        .iter()
        .map(|&p| p.to_f64().unwrap_or(0.0))
        .filter(|&p| p > 0.0)
        .map(|p| -p * num_traits::Float::ln(p))
        .sum();
    h / num_traits::Float::ln(row.len() as f64)
}

/// Mean row uniformity.
pub fn mean_uniformity<F: Float>(attn: &Tensor<F>) -> f64 {
    if attn.rows() == 0 {
        return 1.0;
    }
    (0..attn.rows()).map(|r| uniformity(attn.row(r))).sum::<f64>() / attn.rows() as f64
}
