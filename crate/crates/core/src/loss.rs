//! Cross-correlation between embedding batches and the redundancy-reduction
//! loss built on it.
//!
//! The `*_var` functions record onto a tape for training; the plain versions
//! evaluate on tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Off-diagonal weight.
    pub lambda: f64,
    /// Subtract per-dimension batch means before correlating.
    pub center_embeddings: bool,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 2e-4,
            center_embeddings: true,
            epsilon: 1e-9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("loss.lambda must be positive, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("loss.epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Loss values of one PSTL step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTriple {
    pub total: f64,
    pub spatial: f64,
    pub temporal: f64,
}

fn normalized_columns(tape: &mut Tape, z: Var, config: &LossConfig) -> Result<Var> {
    let b = tape.shape(z)[0];
    let z = if config.center_embeddings {
        let mean = tape.mean_pool(z, &[0])?;
        let mean = tape.broadcast_rows(mean, b)?;
        tape.sub(z, mean)?
    } else {
        z
    };
    let sq = tape.mul(z, z)?;
    let energy = tape.mean_pool(sq, &[0])?;
    let energy = tape.scale(energy, b as f64)?;
    let energy = tape.add_scalar(energy, config.epsilon)?;
    let norm = tape.sqrt(energy)?;
    let norm = tape.broadcast_rows(norm, b)?;
    tape.div(z, norm)
}

/// `C_ij = Σ_b z_bi z'_bj / (√(Σ_b z_bi² + ε) √(Σ_b z'_bj² + ε))`, after
/// optional centering. Inputs are `[B, d]` with `B ≥ 2`.
pub fn cross_correlation_var(tape: &mut Tape, z: Var, z2: Var, config: &LossConfig) -> Result<Var> {
    let (sa, sb) = (tape.shape(z).to_vec(), tape.shape(z2).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("cross_correlation", &sa, &sb));
    }
    if sa[0] < 2 {
        return Err(Error::InvalidInput(format!(
            "cross-correlation needs a batch of at least 2, got {}",
            sa[0]
        )));
    }
    let a = normalized_columns(tape, z, config)?;
    let b = normalized_columns(tape, z2, config)?;
    let at = tape.transpose(a)?;
    tape.matmul(at, b)
}

/// `Σ_i (1 − C_ii)² + λ Σ_i Σ_{j≠i} C_ij²`.
pub fn bt_loss_var(tape: &mut Tape, c: Var, lambda: f64) -> Result<Var> {
    let shape = tape.shape(c).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("bt_loss", &shape, &[shape[0], shape[0]]));
    }
    let d = shape[0];
    let eye = tape.constant(Tensor::eye(d))?;
    let mut w = Tensor::full(&[d, d], lambda);
    for i in 0..d {
        w.data[i * d + i] = 1.0;
    }
    let w = tape.constant(w)?;
    let diff = tape.sub(c, eye)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, w)?;
    tape.sum(weighted)
}

/// Returns `(L_p, L_1, L_2)` with `L_1` pairing anchor and spatial views and
/// `L_2` anchor and temporal views.
pub fn pstl_loss_var(
    tape: &mut Tape,
    anchor: Var,
    spatial: Var,
    temporal: Var,
    config: &LossConfig,
) -> Result<(Var, Var, Var)> {
    let (sa, ss, st) = (tape.shape(anchor), tape.shape(spatial), tape.shape(temporal));
    if sa != ss || sa != st {
        return Err(Error::shape("pstl_loss", sa, if sa != ss { ss } else { st }));
    }
    let c1 = cross_correlation_var(tape, anchor, spatial, config)?;
    let l1 = bt_loss_var(tape, c1, config.lambda)?;
    let c2 = cross_correlation_var(tape, anchor, temporal, config)?;
    let l2 = bt_loss_var(tape, c2, config.lambda)?;
    let lp = tape.add(l1, l2)?;
    Ok((lp, l1, l2))
}

pub fn cross_correlation(z: &Tensor, z2: &Tensor, config: &LossConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone())?;
    let b = tape.constant(z2.clone())?;
    let c = cross_correlation_var(&mut tape, a, b, config)?;
    Ok(tape.value(c).clone())
}

pub fn bt_loss(c: &Tensor, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(c.clone())?;
    let l = bt_loss_var(&mut tape, v, lambda)?;
    Ok(tape.data(l)[0])
}

pub fn pstl_loss(
    anchor: &Tensor,
    spatial: &Tensor,
    temporal: &Tensor,
    config: &LossConfig,
) -> Result<LossTriple> {
    let mut tape = Tape::new();
    let a = tape.constant(anchor.clone())?;
    let s = tape.constant(spatial.clone())?;
    let t = tape.constant(temporal.clone())?;
    let (lp, l1, l2) = pstl_loss_var(&mut tape, a, s, t, config)?;
    Ok(LossTriple {
        total: tape.data(lp)[0],
        spatial: tape.data(l1)[0],
        temporal: tape.data(l2)[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn oracle_cc(z: &Tensor, z2: &Tensor, cfg: &LossConfig) -> Vec<f64> {
        let (b, d) = (z.shape[0], z.shape[1]);
        let center = |t: &Tensor| {
            let mut out = t.data.clone();
            if cfg.center_embeddings {
                for j in 0..d {
                    let m: f64 = (0..b).map(|r| t.data[r * d + j]).sum::<f64>() / b as f64;
                    for r in 0..b {
                        out[r * d + j] -= m;
                    }
                }
            }
            out
        };
        let (x, y) = (center(z), center(z2));
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut num = 0.0;
                let mut nx = 0.0;
                let mut ny = 0.0;
                for r in 0..b {
                    num += x[r * d + i] * y[r * d + j];
                    nx += x[r * d + i] * x[r * d + i];
                    ny += y[r * d + j] * y[r * d + j];
                }
                c[i * d + j] = num / ((nx + cfg.epsilon).sqrt() * (ny + cfg.epsilon).sqrt());
            }
        }
        c
    }

    fn oracle_bt(c: &[f64], d: usize, lambda: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let x = c[i * d + j];
                s += if i == j { (1.0 - x).powi(2) } else { lambda * x * x };
            }
        }
        s
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for center in [true, false] {
            let cfg = LossConfig {
                center_embeddings: center,
                ..Default::default()
            };
            let (z, z2) = (random(4, 3, &mut rng), random(4, 3, &mut rng));
            let c = cross_correlation(&z, &z2, &cfg).unwrap();
            for (a, b) in c.data.iter().zip(oracle_cc(&z, &z2, &cfg)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn self_correlation_has_unit_diagonal() {
        // The diagonal is Σ/(Σ + ε), so it needs unit-scale energy per dimension.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut z = random(6, 4, &mut rng);
        z.data.iter_mut().for_each(|x| *x *= 4.0);
        let c = cross_correlation(&z, &z, &LossConfig::default()).unwrap();
        for i in 0..4 {
            assert!((c.data[i * 5] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn scaling_a_dimension_leaves_correlation_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random(5, 3, &mut rng);
        let z2 = random(5, 3, &mut rng);
        let mut scaled = z.clone();
        for r in 0..5 {
            scaled.data[r * 3 + 1] *= 7.5;
        }
        let cfg = LossConfig::default();
        let a = cross_correlation(&z, &z2, &cfg).unwrap();
        let b = cross_correlation(&scaled, &z2, &cfg).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn bt_loss_closed_forms() {
        assert_eq!(bt_loss(&Tensor::eye(3), 2e-4).unwrap(), 0.0);
        assert_eq!(bt_loss(&Tensor::zeros(&[4, 4]), 2e-4).unwrap(), 4.0);
        let mut c = Tensor::full(&[3, 3], 0.5);
        for i in 0..3 {
            c.data[i * 4] = 1.0;
        }
        assert!((bt_loss(&c, 2e-4).unwrap() - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn bt_loss_rejects_non_square() {
        assert!(bt_loss(&Tensor::zeros(&[2, 3]), 2e-4).is_err());
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let z = Tensor::zeros(&[1, 3]);
        assert!(cross_correlation(&z, &z, &LossConfig::default()).is_err());
    }

    #[test]
    fn pstl_loss_is_sum_of_two_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LossConfig::default();
        let (a, s, t) = (random(6, 4, &mut rng), random(6, 4, &mut rng), random(6, 4, &mut rng));
        let out = pstl_loss(&a, &s, &t, &cfg).unwrap();
        let l1 = oracle_bt(&oracle_cc(&a, &s, &cfg), 4, cfg.lambda);
        let l2 = oracle_bt(&oracle_cc(&a, &t, &cfg), 4, cfg.lambda);
        assert!((out.spatial - l1).abs() < 1e-12);
        assert!((out.temporal - l2).abs() < 1e-12);
        assert_eq!(out.total, out.spatial + out.temporal);
        let same = pstl_loss(&a, &s, &s, &cfg).unwrap();
        assert_eq!(same.spatial, same.temporal);
    }

    #[test]
    fn identical_streams_leave_only_off_diagonal_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = LossConfig::default();
        let z = random(8, 3, &mut rng);
        let out = pstl_loss(&z, &z, &z, &cfg).unwrap();
        let c = oracle_cc(&z, &z, &cfg);
        let off: f64 = (0..9).filter(|k| k % 4 != 0).map(|k| c[k] * c[k]).sum();
        assert!((out.spatial - cfg.lambda * off).abs() < 1e-12);
        assert_eq!(out.total, 2.0 * out.spatial);
    }

    #[test]
    fn mismatched_streams_are_rejected() {
        let cfg = LossConfig::default();
        let (a, b) = (Tensor::zeros(&[4, 3]), Tensor::zeros(&[4, 2]));
        assert!(pstl_loss(&a, &a, &b, &cfg).is_err());
    }

    #[test]
    fn gradient_through_correlation_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LossConfig::default();
        let inputs = vec![("z".to_string(), random(8, 6, &mut rng)), ("z2".to_string(), random(8, 6, &mut rng))];
        let report = grad_check(
            |tape, v| {
                let c = cross_correlation_var(tape, v[0], v[1], &cfg)?;
                bt_loss_var(tape, c, cfg.lambda)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
