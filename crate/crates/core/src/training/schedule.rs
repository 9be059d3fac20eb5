//! Learning-rate schedule: linear warmup, then cosine annealing with
//! periodic restarts.

use std::f64::consts::PI;

use crate::config::ScheduleConfig;

/// Warmup value after `t_cur` steps of warmup.
pub fn warmup_lr(t_cur: f64, cfg: &ScheduleConfig) -> f64 {
    cfg.lr_min + (cfg.lr_max - cfg.lr_min) * t_cur / cfg.t_warm as f64
}

/// Cosine value `t_cur` steps after the most recent restart.
pub fn cosine_phase_lr(t_cur: f64, cfg: &ScheduleConfig) -> f64 {
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * t_cur / cfg.t_freq as f64).cos())
}

/// Learning rate at optimizer step `step` (0-based). Warmup covers steps
/// `[0, t_warm)`; afterwards the cosine phase restarts every `t_freq` steps.
pub fn lr_at_step(step: usize, cfg: &ScheduleConfig) -> f64 {
    if step < cfg.t_warm {
        warmup_lr(step as f64, cfg)
    } else {
        let t_cur = (step - cfg.t_warm) % cfg.t_freq;
        cosine_phase_lr(t_cur as f64, cfg)
    }
}
