//! SGD with (Nesterov) momentum, weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    /// `(epoch, lr)` breakpoints; the lr holds from its epoch until the next breakpoint.
    pub lr_schedule: Vec<(usize, f32)>,
    pub momentum: f32,
    pub weight_decay: f32,
    #[serde(default = "default_nesterov")]
    pub nesterov: bool,
}

fn default_nesterov() -> bool {
    true
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr_schedule: vec![(0, 0.1), (91, 0.01), (136, 0.001)],
            momentum: 0.9,
            weight_decay: 2e-4,
            nesterov: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.is_empty() {
            return Err(Error::Config("lr_schedule must have at least one breakpoint".into()));
        }
        for pair in self.lr_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Config(format!(
                    "lr_schedule epochs must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        if let Some((e, lr)) = self.lr_schedule.iter().find(|(_, lr)| !(*lr > 0.0)) {
            return Err(Error::Config(format!("lr at epoch {e} must be > 0 (got {lr})")));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0,1) and weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f32> {
        self.lr_schedule
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map(|&(_, lr)| lr)
            .ok_or_else(|| {
                Error::Config(format!(
                    "epoch {epoch} precedes the first lr breakpoint {}",
                    self.lr_schedule.first().map_or(0, |b| b.0)
                ))
            })
    }
}

/// One update of a flat parameter buffer and its velocity.
///
/// `g = grad + wd·w; v = μ·v + g; w -= lr·(g + μ·v)` (Nesterov) or `w -= lr·v`.
pub fn sgd_step(weights: &mut [f32], grads: &[f32], velocity: &mut [f32], cfg: &SgdConfig, lr: f32) {
    debug_assert_eq!(weights.len(), grads.len());
    debug_assert_eq!(weights.len(), velocity.len());
    let mu = cfg.momentum;
    let wd = cfg.weight_decay;
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let d = g + wd * *w;
        *v = mu * *v + d;
        let step = if cfg.nesterov { d + mu * *v } else { *v };
        *w -= lr * step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_schedule() -> SgdConfig {
        SgdConfig::default()
    }

    #[test]
    fn lr_breakpoints() {
        let cfg = paper_schedule();
        assert_eq!(cfg.lr_at_epoch(90).unwrap(), 0.1);
        assert_eq!(cfg.lr_at_epoch(91).unwrap(), 0.01);
        assert_eq!(cfg.lr_at_epoch(135).unwrap(), 0.01);
        assert_eq!(cfg.lr_at_epoch(136).unwrap(), 0.001);
        assert_eq!(cfg.lr_at_epoch(200).unwrap(), 0.001);
    }

    #[test]
    fn epoch_before_first_breakpoint_is_config_error() {
        let cfg = SgdConfig {
            lr_schedule: vec![(5, 0.1)],
            ..SgdConfig::default()
        };
        assert!(matches!(cfg.lr_at_epoch(4), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_validation() {
        let mut cfg = SgdConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr_schedule = vec![(0, 0.1), (0, 0.01)];
        assert!(cfg.validate().is_err());
        cfg.lr_schedule = vec![(0, 0.0)];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut w = vec![1.5, -2.0, 0.25];
        let mut v = vec![0.0; 3];
        sgd_step(&mut w, &[0.0; 3], &mut v, &cfg, 0.1);
        assert_eq!(w, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn plain_gradient_step() {
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut w = vec![1.0f32];
        let mut v = vec![0.0];
        sgd_step(&mut w, &[0.5], &mut v, &cfg, 0.1);
        assert_eq!(w[0], 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn nesterov_three_steps_hand_unrolled() {
        // w0 = 1, grads 1.0, 0.5, -0.25, mu = 0.9, lr = 0.1, wd = 0
        // v1 = 1.0            w1 = 1 - 0.1(1.0 + 0.9)       = 0.81
        // v2 = 0.9 + 0.5 = 1.4  w2 = 0.81 - 0.1(0.5 + 1.26)  = 0.634
        // v3 = 1.26 - 0.25 = 1.01  w3 = 0.634 - 0.1(-0.25 + 0.909) = 0.5681
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut w = vec![1.0f32];
        let mut v = vec![0.0f32];
        let expected = [(1.0, 0.81), (1.4, 0.634), (1.01, 0.5681)];
        for (g, (ve, we)) in [1.0, 0.5, -0.25].into_iter().zip(expected) {
            sgd_step(&mut w, &[g], &mut v, &cfg, 0.1);
            assert!((v[0] - ve).abs() < 1e-6, "v {} vs {ve}", v[0]);
            assert!((w[0] - we).abs() < 1e-6, "w {} vs {we}", w[0]);
        }
    }

    #[test]
    fn plain_momentum_flag() {
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            nesterov: false,
            ..SgdConfig::default()
        };
        let mut w = vec![1.0f32];
        let mut v = vec![0.0f32];
        sgd_step(&mut w, &[1.0], &mut v, &cfg, 0.1);
        sgd_step(&mut w, &[1.0], &mut v, &cfg, 0.1);
        // v1 = 1, w1 = 0.9; v2 = 1.9, w2 = 0.71
        assert!((w[0] - 0.71).abs() < 1e-6);
    }
}
