//! Asymmetric loss over partially labelled data, exact prompt gradients and
//! the SGD training loop.

mod objective;
mod train;

use serde::{Deserialize, Serialize};

pub use objective::{batch_loss, loss_and_gradients, loss_gradients, ObjectiveInputs};
pub use train::{bank_digest, train, EpochRecord, Schedule, TrainAbort, TrainConfig, TrainHistory, TrainOutcome};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over known cells divided by their count.
    #[default]
    MeanOverKnown,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            margin: 0.05,
            reduction: Reduction::MeanOverKnown,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_pos.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma_pos must be >= 0, got {}",
                self.gamma_pos
            )));
        }
        if !(self.gamma_neg >= 0.0 && self.gamma_neg.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma_neg must be >= 0, got {}",
                self.gamma_neg
            )));
        }
        if !(self.margin >= 0.0 && self.margin < 1.0) {
            return Err(Error::invalid(format!(
                "margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.gamma_neg < self.gamma_pos {
            w.push(format!(
                "gamma_neg ({}) < gamma_pos ({}): negatives are not down-weighted",
                self.gamma_neg, self.gamma_pos
            ));
        }
        w
    }
}

/// `x^g` with `0^0 = 1`.
fn pow0(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        1.0
    } else {
        x.powf(g)
    }
}

/// Asymmetric loss of one (probability, label) cell.
///
/// Positive cells: `-(1-p)^g+ ln p`. Negative cells: `-(p_c)^g- ln(1-p_c)`
/// with `p_c = max(p - c, 0)`; the negative term is exactly 0 when `p <= c`.
pub fn asl_loss(p: f64, y: i8, cfg: &LossConfig) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("probability must lie in (0, 1), got {p}")));
    }
    match y {
        1 => Ok(-pow0(1.0 - p, cfg.gamma_pos) * p.ln()),
        -1 => {
            let pc = (p - cfg.margin).max(0.0);
            if pc == 0.0 {
                return Ok(0.0);
            }
            Ok(-pow0(pc, cfg.gamma_neg) * (-pc).ln_1p())
        }
        other => Err(Error::invalid(format!("asl_loss takes labels +1 or -1, got {other}"))),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Loss and d(loss)/dz for a cell whose probability is `sigmoid(z)`.
///
/// Works in the logit domain so saturated probabilities stay finite.
pub(crate) fn asl_from_logit(z: f64, y: i8, cfg: &LossConfig) -> (f64, f64) {
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if y > 0 {
        let g = cfg.gamma_pos;
        let log_p = -softplus(-z);
        let qg = pow0(q, g);
        let loss = -qg * log_p;
        let grad = qg * (g * p * log_p - q);
        (loss, grad)
    } else if cfg.margin == 0.0 {
        let g = cfg.gamma_neg;
        let log_q = -softplus(z);
        let pg = pow0(p, g);
        (-pg * log_q, pg * (p - g * q * log_q))
    } else {
        let g = cfg.gamma_neg;
        let pc = p - cfg.margin;
        if pc <= 0.0 {
            return (0.0, 0.0);
        }
        let one_minus = q + cfg.margin;
        let log_om = one_minus.ln();
        let pcg = pow0(pc, g);
        let loss = -pcg * log_om;
        let first = if g == 0.0 { 0.0 } else { -g * pc.powf(g - 1.0) * log_om };
        let d_pc = first + pcg / one_minus;
        (loss, d_pc * p * q)
    }
}

/// Cosine annealing: `lr0 * (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    assert!(total >= 1 && step <= total, "cosine_lr needs 0 <= t <= T, T >= 1");
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce(p: f64, y: i8) -> f64 {
        if y > 0 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    #[test]
    fn scalar_examples() {
        let plain = LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
            ..LossConfig::default()
        };
        assert!((asl_loss(0.5, 1, &plain).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(asl_loss(1.0 - 1e-12, 1, &LossConfig::default()).unwrap() < 1e-12);
        let cfg = LossConfig::default();
        assert_eq!(asl_loss(0.03, -1, &cfg).unwrap(), 0.0);
        assert_eq!(asl_loss(0.05, -1, &cfg).unwrap(), 0.0);
        let g0 = LossConfig {
            gamma_neg: 0.0,
            ..cfg.clone()
        };
        assert_eq!(asl_loss(0.01, -1, &g0).unwrap(), 0.0);
        assert!(asl_loss(0.0, 1, &cfg).is_err());
        assert!(asl_loss(1.0, -1, &cfg).is_err());
        assert!(asl_loss(0.5, 0, &cfg).is_err());
    }

    #[test]
    fn reduces_to_bce() {
        let plain = LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
            ..LossConfig::default()
        };
        for k in 1..200 {
            let p = k as f64 / 200.0;
            for y in [1, -1] {
                assert!((asl_loss(p, y, &plain).unwrap() - bce(p, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_form_matches_probability_form() {
        for cfg in [
            LossConfig::default(),
            LossConfig {
                margin: 0.0,
                ..LossConfig::default()
            },
            LossConfig {
                gamma_pos: 0.0,
                gamma_neg: 0.0,
                margin: 0.0,
                ..LossConfig::default()
            },
            LossConfig {
                gamma_neg: 0.0,
                ..LossConfig::default()
            },
            LossConfig {
                gamma_pos: 0.5,
                gamma_neg: 3.0,
                margin: 0.2,
                ..LossConfig::default()
            },
        ] {
            for k in -60..=60 {
                let z = k as f64 * 0.1;
                let p = sigmoid(z);
                for y in [1i8, -1] {
                    let (l, g) = asl_from_logit(z, y, &cfg);
                    let want = asl_loss(p, y, &cfg).unwrap();
                    assert!((l - want).abs() < 1e-10, "z={z} y={y} {l} vs {want}");
                    let h = 1e-6;
                    let fd = (asl_from_logit(z + h, y, &cfg).0 - asl_from_logit(z - h, y, &cfg).0) / (2.0 * h);
                    if y < 0 && (p - cfg.margin).abs() < 1e-4 {
                        continue;
                    }
                    assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()), "z={z} y={y} fd={fd} g={g}");
                }
            }
        }
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let cfg = LossConfig::default();
        for z in [-800.0, -50.0, 50.0, 800.0] {
            for y in [1, -1] {
                let (l, g) = asl_from_logit(z, y, &cfg);
                assert!(l.is_finite() && g.is_finite() && l >= 0.0);
            }
        }
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 10, 0.002), 0.002);
        assert!(cosine_lr(10, 10, 0.002).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.002) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn gamma_order_warning() {
        assert!(LossConfig::default().warnings().is_empty());
        let c = LossConfig {
            gamma_pos: 3.0,
            ..LossConfig::default()
        };
        assert_eq!(c.warnings().len(), 1);
        assert!(c.validate().is_ok());
        assert!(LossConfig {
            margin: 1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }
}
