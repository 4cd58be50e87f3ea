//! Margin classification loss and the combined training objective.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Margin-loss constants and the reconstruction weight.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
    /// Weight on the (per-sample mean) reconstruction error.
    pub recon_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
            recon_weight: 0.0005,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return Err(Error::Config(format!(
                "margin constants need 0 < m_minus < m_plus <= 1, got {} / {}",
                self.m_minus, self.m_plus
            )));
        }
        if self.recon_weight < 0.0 {
            return Err(Error::Config("recon_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean over the batch of
/// Σ_k [ T_k max(0, m+ − ||v_k||)² + λ (1 − T_k) max(0, ||v_k|| − m−)² ].
pub fn margin_loss<T: Scalar>(
    lengths: &Tensor<T>,
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<T> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let l = tape.leaf(lengths.clone());
    let loss = margin_loss_node(&mut tape, l, targets, cfg)?;
    Ok(tape.value(loss).item())
}

/// Tape-op form of [`margin_loss`] for use inside a training graph.
pub fn margin_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    lengths: NodeId,
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId> {
    tape.margin_loss(
        lengths,
        targets,
        T::from_f64(cfg.m_plus),
        T::from_f64(cfg.m_minus),
        T::from_f64(cfg.lambda_down),
    )
}

/// margin + α · recon
pub fn total_loss<T: Scalar>(margin: T, recon: T, alpha: f64) -> Result<T> {
    if alpha < 0.0 {
        return Err(Error::InvalidArgument("alpha must be >= 0".into()));
    }
    Ok(margin + T::from_f64(alpha) * recon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lengths(rows: &[&[f64]]) -> Tensor<f64> {
        let j = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(&[rows.len(), j], data).unwrap()
    }

    #[test]
    fn inactive_hinges_give_zero_loss() {
        let cfg = LossConfig::default();
        let l = lengths(&[&[0.95, 0.05]]);
        assert_eq!(margin_loss(&l, &[0], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_lengths_hit_the_positive_hinge() {
        let cfg = LossConfig::default();
        let l = lengths(&[&[0.0, 0.0]]);
        let loss = margin_loss(&l, &[0], &cfg).unwrap();
        assert!((loss - 0.81).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn batch_loss_matches_scalar_loop_oracle() {
        let cfg = LossConfig::default();
        let mut rng = crate::rng::SplitMix64::new(30);
        let (n, j) = (7, 3);
        let data: Vec<f64> = (0..n * j).map(|_| rng.next_f64()).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.next_below(j as u64) as usize).collect();
        let l = Tensor::from_vec(&[n, j], data.clone()).unwrap();
        let got = margin_loss(&l, &targets, &cfg).unwrap();

        let mut want = 0.0;
        for nn in 0..n {
            for jj in 0..j {
                let v = data[nn * j + jj];
                if targets[nn] == jj {
                    want += (cfg.m_plus - v).max(0.0).powi(2);
                } else {
                    want += cfg.lambda_down * (v - cfg.m_minus).max(0.0).powi(2);
                }
            }
        }
        want /= n as f64;
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn loss_is_nonnegative_and_monotone_in_target_length() {
        let cfg = LossConfig::default();
        let mut rng = crate::rng::SplitMix64::new(31);
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let lt = step as f64 / 19.0;
            let l = lengths(&[&[lt, rng.next_f64() * 0.05]]);
            let loss = margin_loss(&l, &[0], &cfg).unwrap();
            assert!(loss >= 0.0);
            assert!(loss <= prev + 1e-12, "raising target length raised loss");
            prev = loss;
        }
    }

    #[test]
    fn rejects_bad_targets_and_configs() {
        let cfg = LossConfig::default();
        let l = lengths(&[&[0.5, 0.5]]);
        assert!(margin_loss(&l, &[2], &cfg).is_err());
        let bad = LossConfig {
            m_plus: 0.1,
            m_minus: 0.9,
            ..cfg
        };
        assert!(margin_loss(&l, &[0], &bad).is_err());
    }

    #[test]
    fn total_loss_combines_terms() {
        assert_eq!(total_loss(1.0f64, 100.0, 0.0).unwrap(), 1.0);
        let v = total_loss(1.0f64, 100.0, 0.0005).unwrap();
        assert!((v - 1.05).abs() < 1e-12);
        assert!(total_loss(1.0f64, 1.0, -0.1).is_err());
    }
}
