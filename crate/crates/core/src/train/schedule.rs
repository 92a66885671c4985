use crate::error::{Error, Result};

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::param("learning-rate step starts at 1"));
    }
    if warmup == 0 {
        return Err(Error::param("warmup must be at least 1"));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}
