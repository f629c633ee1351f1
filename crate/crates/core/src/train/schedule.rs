use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::objectives::DEFAULT_TEMPERATURE;

/// How decoder states for instruction contrast are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IclMode {
    /// Greedy-generate under each instruction, then pool the states of the
    /// generated tokens.
    #[default]
    FreeRunning,
    /// Pool the states of the gold target under each instruction.
    TeacherForced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Generation examples per step, spread round-robin over the families.
    pub batch_size: usize,
    /// Pairs per step for each feature-matching sub-task.
    pub hfm_pairs: usize,
    /// Instruction-contrast examples per step.
    pub icl_examples: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Negatives per feature-matching direction.
    pub k: usize,
    /// Negative instructions per contrast example.
    pub m: usize,
    pub tau: f64,
    /// Initial weight of the instruction-contrast loss.
    pub lambda3_init: f64,
    pub icl_mode: IclMode,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 300,
            batch_size: 10,
            hfm_pairs: 50,
            icl_examples: 2,
            peak_lr: 1e-3,
            floor_lr: 1e-6,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            k: 10,
            m: 5,
            tau: DEFAULT_TEMPERATURE,
            lambda3_init: 0.0,
            icl_mode: IclMode::FreeRunning,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.k == 0 || self.m == 0 {
            return bad("k and m must be at least 1".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda3_init) {
            return bad(format!("lambda3_init must lie in [0, 1], got {}", self.lambda3_init));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac must lie in [0, 1], got {}", self.warmup_frac));
        }
        if !(self.peak_lr > 0.0 && self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr) {
            return bad("need 0 <= floor_lr <= peak_lr and peak_lr > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        Ok(())
    }

    /// Length of the warm-up phase, `⌈warmup_frac · T⌉`. Products that land
    /// within rounding noise of an integer count as that integer.
    pub fn warmup_steps(&self) -> u64 {
        let x = self.warmup_frac * self.total_steps as f64;
        let r = x.round();
        if (x - r).abs() <= 1e-9 * x.max(1.0) {
            r as u64
        } else {
            x.ceil() as u64
        }
    }
}

/// Linear warm-up from 0 to the peak over the first `⌈warmup_frac · T⌉`
/// steps, then linear decay to the floor at step `T`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let total = cfg.total_steps;
    if step > total {
        return Err(TrainError::StepBeyondTotal { step, total });
    }
    if step == total {
        return Ok(cfg.floor_lr);
    }
    let w = cfg.warmup_steps();
    if step <= w {
        return Ok(if w == 0 {
            cfg.peak_lr
        } else {
            cfg.peak_lr * step as f64 / w as f64
        });
    }
    let f = (step - w) as f64 / (total - w) as f64;
    Ok(cfg.peak_lr * (1.0 - f) + cfg.floor_lr * f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(t: u64) -> TrainConfig {
        TrainConfig {
            total_steps: t,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn anchors() {
        for t in [20, 100, 300, 1000, 12345] {
            let c = cfg(t);
            let w = c.warmup_steps();
            assert_eq!(w, (t as f64 * 0.05).ceil() as u64);
            assert_eq!(lr_at(0, &c).unwrap(), 0.0);
            assert_eq!(lr_at(w, &c).unwrap(), 1e-3);
            assert_eq!(lr_at(t, &c).unwrap(), 1e-6);
        }
        assert_eq!(cfg(300).warmup_steps(), 15);
        assert_eq!(cfg(301).warmup_steps(), 16);
        assert!(matches!(lr_at(301, &cfg(300)), Err(TrainError::StepBeyondTotal { .. })));
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(cfg(0).validate().is_err());
        let c = TrainConfig {
            lambda3_init: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            floor_lr: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn single_peak_and_continuity(t in 2u64..3000) {
            let c = cfg(t);
            let lrs: Vec<f64> = (0..=t).map(|s| lr_at(s, &c).unwrap()).collect();
            let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(peak, 1e-3);
            prop_assert_eq!(lrs.iter().filter(|&&x| x == peak).count(), 1);
            let w = c.warmup_steps() as usize;
            for s in 1..lrs.len() {
                if s <= w {
                    prop_assert!(lrs[s] > lrs[s - 1]);
                } else {
                    prop_assert!(lrs[s] < lrs[s - 1]);
                }
                // each step moves by at most one slope increment
                let slope = 1e-3 / w.max(1) as f64 + 1e-3 / (t as usize - w).max(1) as f64;
                prop_assert!((lrs[s] - lrs[s - 1]).abs() <= slope * (1.0 + 1e-9));
            }
        }
    }
}
