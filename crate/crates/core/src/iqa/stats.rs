//! Shared statistical helpers for metric evaluation.

use crate::error::{Result, UieError};

/// Pearson linear correlation between two paired score vectors, computed
/// in two passes (means first, then centered products) for stability.
///
/// Requires at least three pairs and non-constant inputs on both sides.
pub fn plcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(UieError::Shape(format!(
            "plcc on {} vs {} scores",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(UieError::Degenerate(format!(
            "plcc needs at least 3 pairs, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(UieError::Range("plcc on non-finite scores".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(UieError::Degenerate(
            "plcc on a constant score vector".into(),
        ));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}
