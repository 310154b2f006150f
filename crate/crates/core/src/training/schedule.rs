use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak` over `round(warmup_ratio * total_steps)`
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup {
        return Ok(peak * (step as f64 / warmup as f64));
    }
    if warmup == total_steps {
        return Ok(peak);
    }
    // Fraction first, so the warmup boundary gives `peak` exactly.
    Ok(peak * ((total_steps - step) as f64 / (total_steps - warmup) as f64))
}

pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total_steps as f64).round() as usize
}
