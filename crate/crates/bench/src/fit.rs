//! Least-squares polynomial fits used to check prefill growth shapes.

use intra_core::{IntraError, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    /// Coefficients from the constant term upward.
    pub coeffs: Vec<f64>,
    /// Fraction of variance explained.
    pub r2: f64,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<PolyFit> {
    if x.len() != y.len() {
        return Err(IntraError::Shape(format!(
            "{} x values, {} y values",
            x.len(),
            y.len()
        )));
    }
    if x.len() <= degree {
        return Err(IntraError::InvalidArgument(format!(
            "a degree-{degree} fit needs more than {degree} points, got {}",
            x.len()
        )));
    }
    // rescale x so the Vandermonde columns stay well conditioned
    let span = x
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| (x[i] / span).powi(j as i32));
    let b = DVector::from_column_slice(y);
    let sol = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| IntraError::InvalidArgument(format!("least squares failed: {e}")))?;
    let coeffs: Vec<f64> = (0..=degree).map(|j| sol[j] / span.powi(j as i32)).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let fitted = &a * &sol;
    let ss_res: f64 = y
        .iter()
        .zip(fitted.iter())
        .map(|(v, f)| (v - f).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(PolyFit { coeffs, r2 })
}
