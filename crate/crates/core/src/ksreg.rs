//! placeholder
pub struct KsConfig;
pub fn ks_exact(_a: &[f64], _b: &[f64]) -> f64 { 0.0 }
pub fn ks_smoothed(_a: &[f64], _b: &[f64], _gamma: f64, _grid: &[f64]) -> f64 { 0.0 }
