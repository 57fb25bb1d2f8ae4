use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr` over `warmup` epochs, then cosine decay
/// towards 0 at `epochs`.
pub fn lr_at(epoch: usize, epochs: usize, warmup: usize, base_lr: f64) -> f64 {
    if epoch < warmup {
        return base_lr * epoch as f64 / warmup as f64;
    }
    let span = (epochs - warmup).max(1) as f64;
    let phase = (epoch - warmup) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is coupled: `wd · θ` is added
/// to the gradient before the moment updates.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            &[state.m.len()],
            &[params.len(), grads.len()],
        ));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.m[k].len() || g.len() != p.len() {
            return Err(Error::shape("adam_step", &[state.m[k].len()], &[p.len(), g.len()]));
        }
    }
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            let gi = g[i] + weight_decay * p[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 150, 10, 1e-3), 0.0);
        assert_eq!(lr_at(5, 150, 10, 1e-3), 5e-4);
        assert_eq!(lr_at(10, 150, 10, 1e-3), 1e-3);
        let last = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 139.0 / 140.0).cos());
        assert!((lr_at(149, 150, 10, 1e-3) - last).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_nonincreasing_after_warmup() {
        let mut prev = f64::INFINITY;
        for e in 10..150 {
            let lr = lr_at(e, 150, 10, 1e-3);
            assert!(lr <= prev);
            prev = lr;
        }
        // continuity at the boundary
        assert!((lr_at(9, 150, 10, 1e-3) - 9e-4).abs() < 1e-18);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        assert_eq!(lr_at(0, 5, 0, 0.01), 0.01);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = AdamState::new(AdamConfig::default(), [3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        adam_step(&mut s, &mut [&mut p], &[&[0.0; 3]], 0.1, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = lr · g / (|g| + ε)
        let mut s = AdamState::new(AdamConfig::default(), [1]);
        let mut p = vec![2.0];
        adam_step(&mut s, &mut [&mut p], &[&[1.0]], 0.01, 0.0).unwrap();
        let want = 2.0 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
    }

    #[test]
    fn two_step_hand_evaluation() {
        let mut s = AdamState::new(AdamConfig::default(), [1]);
        let mut p = vec![0.0];
        adam_step(&mut s, &mut [&mut p], &[&[1.0]], 0.1, 0.0).unwrap();
        adam_step(&mut s, &mut [&mut p], &[&[-2.0]], 0.1, 0.0).unwrap();
        let m = 0.9 * 0.1 + 0.1 * -2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat: f64 = v / (1.0 - 0.999f64 * 0.999);
        let want = -0.1 / (1.0 + 1e-8) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - want).abs() < 1e-14);
    }

    #[test]
    fn weight_decay_is_coupled_into_gradient() {
        let mut s = AdamState::new(AdamConfig::default(), [1]);
        let mut p = vec![3.0];
        adam_step(&mut s, &mut [&mut p], &[&[0.0]], 0.01, 0.1).unwrap();
        assert!((p[0] - (3.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut s = AdamState::new(AdamConfig::default(), [2]);
        let mut p = vec![0.0; 3];
        assert!(adam_step(&mut s, &mut [&mut p], &[&[0.0; 3]], 0.1, 0.0).is_err());
    }
}
