//! AdamW with bias correction and decoupled weight decay.

use crate::arraycore::{Array, Scalar};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(shapes: &[usize]) -> Self {
        OptimizerState {
            first_moment: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One parameter tensor as seen by the optimizer.
pub struct ParamSlot<'a, T> {
    pub value: &'a mut Array<T>,
    pub decay: bool,
}

/// Applies `p ← p − lr·wd·p` (decaying slots only), then the
/// bias-corrected Adam update.
pub fn adamw_step<T: Scalar>(
    params: &mut [ParamSlot<'_, T>],
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (slot, (g, m)) in params.iter().zip(grads.iter().zip(&state.first_moment)) {
        if slot.value.len() != g.len() || g.len() != m.len() {
            return Err(Error::shape("adamw_step", slot.value.shape(), &[g.len()]));
        }
    }
    let next = state.step + 1;
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: next });
    }
    state.step = next;

    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let one = T::one();
    let bc1 = T::from_f64_lossy(1.0 - state.beta1.powi(next as i32));
    let bc2 = T::from_f64_lossy(1.0 - state.beta2.powi(next as i32));
    let eps = T::from_f64_lossy(state.eps);
    let lr_t = T::from_f64_lossy(lr);
    let decay = T::from_f64_lossy(lr * weight_decay);

    for (i, slot) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, p) in slot.value.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            if slot.decay && weight_decay != 0.0 {
                *p = *p - decay * *p;
            }
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g = *g * s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Array<f64> {
        Array::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Array::from_f64(&[3], &[0.5, -2.0, 7.25]).unwrap();
        let before = p.clone();
        let mut state = OptimizerState::new(&[3]);
        let mut slots = [ParamSlot {
            value: &mut p,
            decay: true,
        }];
        adamw_step(&mut slots, &[vec![0.0; 3]], &mut state, 0.1, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn pure_decay() {
        let mut p = one_param(1.0);
        let mut state = OptimizerState::new(&[1]);
        let mut slots = [ParamSlot {
            value: &mut p,
            decay: true,
        }];
        adamw_step(&mut slots, &[vec![0.0]], &mut state, 0.1, 0.01).unwrap();
        assert_eq!(p.data()[0], 0.999);
    }

    #[test]
    fn decay_skipped_when_flagged() {
        let mut p = one_param(1.0);
        let mut state = OptimizerState::new(&[1]);
        let mut slots = [ParamSlot {
            value: &mut p,
            decay: false,
        }];
        adamw_step(&mut slots, &[vec![0.0]], &mut state, 0.1, 0.01).unwrap();
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = one_param(0.0);
            let mut state = OptimizerState::new(&[1]);
            let mut slots = [ParamSlot {
                value: &mut p,
                decay: true,
            }];
            adamw_step(&mut slots, &[vec![g]], &mut state, 0.01, 0.0).unwrap();
            let expected = -0.01 * g / (g.abs() + EPSILON);
            assert!((p.data()[0] - expected).abs() < 1e-15);
            assert!((p.data()[0] + 0.01 * f64::signum(g)).abs() < 0.01 * 1e-4);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = one_param(0.0);
        let mut state = OptimizerState::new(&[1]);
        let mut slots = [ParamSlot {
            value: &mut p,
            decay: true,
        }];
        let r = adamw_step(&mut slots, &[vec![f64::NAN]], &mut state, 0.01, 0.0);
        assert!(matches!(r, Err(Error::NonFiniteGradient { step: 1 })));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1f64]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
