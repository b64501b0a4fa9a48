//! Modal exponential filter applied element by element.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::ReferenceElement;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("invalid filter parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSettings {
    pub alpha: f64,
    pub s: f64,
    pub eta_c: usize,
    pub t_ref: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings { alpha: 100.0, s: 1.0, eta_c: 3, t_ref: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ModalFilter {
    pub alpha: f64,
    pub s: f64,
    pub eta_c: usize,
    pub eta_max: usize,
    /// Unnormalized damping per mode.
    pub lambda: Vec<f64>,
    /// `lambda^(dt / t_ref)`.
    pub lambda_star: Vec<f64>,
    /// Nodal operator `V diag(lambda_star) V^-1`.
    pub matrix: DMatrix<f64>,
}

/// Filter function of the total mode degree.
pub fn sigma(eta: usize, alpha: f64, s: f64, eta_c: usize, eta_max: usize) -> f64 {
    if eta < eta_c {
        1.0
    } else if eta > eta_max {
        0.0
    } else if eta_max == eta_c {
        1.0
    } else {
        let r = (eta - eta_c) as f64 / (eta_max - eta_c) as f64;
        (-alpha * r.powf(s)).exp()
    }
}

pub fn build_filter(re: &ReferenceElement, alpha: f64, s: f64, eta_c: usize, dt: f64, t_ref: f64) -> Result<ModalFilter, FilterError> {
    let eta_max = 2 * re.degree;
    let bad = |m: &str| Err(FilterError::InvalidParameters(m.to_string()));
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return bad("alpha must be finite and non-negative");
    }
    if !(s > 0.0 && s.is_finite()) {
        return bad("strength exponent must be positive");
    }
    if eta_c > eta_max {
        return bad(&format!("cutoff {eta_c} exceeds the maximum mode degree {eta_max}"));
    }
    if !(dt > 0.0 && t_ref > 0.0 && dt.is_finite() && t_ref.is_finite()) {
        return bad("time-step and reference time must be positive");
    }
    let lambda: Vec<f64> = re.mode_degrees.iter().map(|&eta| sigma(eta, alpha, s, eta_c, eta_max)).collect();
    let lambda_star: Vec<f64> = lambda.iter().map(|l| l.powf(dt / t_ref)).collect();
    let matrix = &re.vandermonde * DMatrix::from_diagonal(&DVector::from_vec(lambda_star.clone())) * &re.vandermonde_inv;
    Ok(ModalFilter { alpha, s, eta_c, eta_max, lambda, lambda_star, matrix })
}

impl ModalFilter {
    pub fn from_settings(re: &ReferenceElement, settings: &FilterSettings, dt: f64) -> Result<Self, FilterError> {
        build_filter(re, settings.alpha, settings.s, settings.eta_c, dt, settings.t_ref)
    }
}

/// Multiply the nodal values of each element in `elems` (all if `None`) by the filter matrix.
pub fn apply_filter(u: &mut [f64], filt: &ModalFilter, n_vars: usize, elems: Option<&[usize]>) {
    let ns = filt.matrix.nrows();
    let bl = ns * n_vars;
    assert_eq!(u.len() % bl, 0, "state length does not match the filter degree");
    let mask = elems.map(|es| {
        let mut m = vec![false; u.len() / bl];
        es.iter().for_each(|&e| m[e] = true);
        m
    });
    let f = &filt.matrix;
    u.par_chunks_mut(bl).enumerate().for_each(|(e, block)| {
        if mask.as_ref().is_some_and(|m| !m[e]) {
            return;
        }
        let old = block.to_vec();
        for i in 0..ns {
            for v in 0..n_vars {
                block[i * n_vars + v] = (0..ns).map(|j| f[(i, j)] * old[j * n_vars + v]).sum();
            }
        }
    });
}
