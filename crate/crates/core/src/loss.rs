//! Training objective: (weighted) binary cross-entropy plus soft Dice.
//!
//! With class weighting each voxel's BCE term is scaled by
//! `w_i = (N0 y_i + N1 (1 - y_i)) / N`, where `N0`/`N1` count background and
//! lesion voxels over all training masks. Both terms are summed over the
//! whole batch as a single population.

use serde::{Deserialize, Serialize};

use crate::autograd::{BceWeights, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Soft Dice smoothing term.
    pub eps: f64,
    pub weighted: bool,
    /// Background voxel count over the training set.
    pub n0: u64,
    /// Lesion voxel count over the training set.
    pub n1: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps: 1.0,
            weighted: true,
            n0: 0,
            n1: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(alloc::format!(
                "soft Dice eps must be > 0, got {}",
                self.eps
            )));
        }
        if self.weighted && self.n1 == 0 {
            return Err(Error::NoLesionVoxels);
        }
        Ok(())
    }

    pub fn bce_weights(&self) -> Result<BceWeights> {
        if !self.weighted {
            return Ok(BceWeights::Unit);
        }
        if self.n1 == 0 {
            return Err(Error::NoLesionVoxels);
        }
        let n = (self.n0 + self.n1) as f64;
        Ok(BceWeights::Class {
            positive: self.n0 as f64 / n,
            negative: self.n1 as f64 / n,
        })
    }
}

/// Scalar loss terms of one evaluation, plus the total node on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub bce: f64,
    pub dice: f64,
    pub total: Var,
}

impl LossTerms {
    pub fn total_value<T: Scalar>(&self, tape: &Tape<T>) -> f64 {
        tape.value(self.total).data()[0].as_f64()
    }
}

/// `sigmoid(logits)`, then BCE + soft Dice against `target`.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let p = tape.sigmoid(logits);
    let bce = tape.bce(p, target, cfg.bce_weights()?)?;
    let dice = tape.soft_dice(p, target, cfg.eps)?;
    let total = tape.add(bce, dice)?;
    Ok(LossTerms {
        bce: tape.value(bce).data()[0].as_f64(),
        dice: tape.value(dice).data()[0].as_f64(),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use alloc::vec;

    fn eval(p: &[f64], y: &[f64], weights: BceWeights, eps: f64) -> (f64, f64) {
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(Tensor::from_vec(&[p.len()], p.to_vec()).unwrap(), true);
        let yv = tape.constant(Tensor::from_vec(&[y.len()], y.to_vec()).unwrap());
        let b = tape.bce(pv, yv, weights).unwrap();
        let d = tape.soft_dice(pv, yv, eps).unwrap();
        (tape.value(b).data()[0], tape.value(d).data()[0])
    }

    #[test]
    fn dice_zero_on_perfect_agreement() {
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(eval(&y, &y, BceWeights::Unit, 1.0).1, 0.0);
        let z = [0.0; 8];
        assert_eq!(eval(&z, &z, BceWeights::Unit, 1.0).1, 0.0);
    }

    #[test]
    fn dice_total_disagreement() {
        let y = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let p: alloc::vec::Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let d = eval(&p, &y, BceWeights::Unit, 1.0).1;
        assert!((d - (1.0 - 1.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn class_weights_from_counts() {
        let cfg = LossConfig {
            eps: 1.0,
            weighted: true,
            n0: 99,
            n1: 1,
        };
        match cfg.bce_weights().unwrap() {
            BceWeights::Class { positive, negative } => {
                assert!((positive - 0.99).abs() < 1e-15);
                assert!((negative - 0.01).abs() < 1e-15);
            }
            BceWeights::Unit => panic!("expected class weights"),
        }
        let none = LossConfig { n1: 0, ..cfg };
        assert_eq!(none.bce_weights(), Err(Error::NoLesionVoxels));
    }

    #[test]
    fn unweighted_half_probability_is_ln2_per_voxel() {
        let (b, _) = eval(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0], BceWeights::Unit, 1.0);
        assert!((b / 3.0 - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weighted_single_pixel() {
        let w = BceWeights::Class {
            positive: 0.99,
            negative: 0.01,
        };
        let (b, _) = eval(&[0.9], &[1.0], w, 1.0);
        let oracle = 0.99 * -libm::log(0.9);
        assert!((b - oracle).abs() < 1e-9, "{b}");
        assert!((b - 0.104307).abs() < 1e-6);
    }

    #[test]
    fn balanced_weights_halve_bce() {
        let p = [0.2, 0.7, 0.4, 0.95];
        let y = [0.0, 1.0, 1.0, 0.0];
        let (u, _) = eval(&p, &y, BceWeights::Unit, 1.0);
        let (w, _) = eval(
            &p,
            &y,
            BceWeights::Class {
                positive: 0.5,
                negative: 0.5,
            },
            1.0,
        );
        assert!((w - 0.5 * u).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_drive_loss_to_zero() {
        let y = vec![1.0, 0.0, 0.0, 1.0];
        let logits: alloc::vec::Vec<f64> = y
            .iter()
            .map(|v| if *v > 0.5 { 40.0 } else { -40.0 })
            .collect();
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::from_vec(&[4], logits).unwrap(), true);
        let t = tape.constant(Tensor::from_vec(&[4], y).unwrap());
        let cfg = LossConfig {
            eps: 1.0,
            weighted: true,
            n0: 3,
            n1: 1,
        };
        let terms = combined_loss(&mut tape, l, t, &cfg).unwrap();
        assert!(terms.total_value(&tape) < 1e-6);
    }

    #[test]
    fn weighted_and_unweighted_differ_when_imbalanced() {
        let p = [0.3, 0.6, 0.2];
        let y = [1.0, 0.0, 0.0];
        let (u, _) = eval(&p, &y, BceWeights::Unit, 1.0);
        let (w, _) = eval(
            &p,
            &y,
            BceWeights::Class {
                positive: 0.9,
                negative: 0.1,
            },
            1.0,
        );
        assert!((u - w).abs() > 1e-3);
    }
}
