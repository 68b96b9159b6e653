//! 1cycle learning-rate/momentum schedule and the learning-rate finder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Cosine,
    Linear,
}

impl Interpolation {
    /// Interpolate from `a` (t = 0) to `b` (t = 1); endpoints are returned exactly.
    fn at(self, a: f64, b: f64, t: f64) -> f64 {
        if t <= 0.0 {
            return a;
        }
        if t >= 1.0 {
            return b;
        }
        let w = match self {
            Interpolation::Cosine => (1.0 - (std::f64::consts::PI * t).cos()) / 2.0,
            Interpolation::Linear => t,
        };
        a + (b - a) * w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Peak learning rate `l2`.
    pub max_lr: f64,
    /// Starting rate is `max_lr / div`.
    pub div: f64,
    /// Final rate is `start_lr / final_div`.
    pub final_div: f64,
    pub pct_ramp: f64,
    pub max_momentum: f64,
    pub min_momentum: f64,
    pub total_steps: usize,
    pub interpolation: Interpolation,
}

impl ScheduleConfig {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            div: 25.0,
            final_div: 1e4,
            pct_ramp: 0.25,
            max_momentum: 0.95,
            min_momentum: 0.85,
            total_steps,
            interpolation: Interpolation::Cosine,
        }
    }

    pub fn start_lr(&self) -> f64 {
        self.max_lr / self.div
    }

    pub fn final_lr(&self) -> f64 {
        self.start_lr() / self.final_div
    }

    /// Index of the step at which the peak rate is reached.
    pub fn ramp_steps(&self) -> usize {
        let r = (self.pct_ramp * self.total_steps as f64).round() as usize;
        r.clamp(1, self.total_steps.saturating_sub(1).max(1))
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: &str| Err(ScheduleError::Invalid(m.to_string()));
        if !(self.max_lr > 0.0) || !(self.div > 1.0) || !(self.final_div > 1.0) {
            return bad("need max_lr > 0, div > 1, final_div > 1");
        }
        if !(self.pct_ramp > 0.0 && self.pct_ramp < 1.0) {
            return bad("pct_ramp must lie in (0, 1)");
        }
        if !(self.min_momentum < self.max_momentum) {
            return bad("min_momentum must be below max_momentum");
        }
        if self.total_steps < 2 {
            return bad("total_steps must be at least 2");
        }
        Ok(())
    }
}

/// Learning rate and momentum at `step` of a 1cycle schedule.
pub fn one_cycle(step: usize, cfg: &ScheduleConfig) -> Result<(f64, f64), ScheduleError> {
    if step > cfg.total_steps {
        return Err(ScheduleError::StepOutOfRange { step, total: cfg.total_steps });
    }
    let ramp = cfg.ramp_steps();
    let interp = cfg.interpolation;
    if step <= ramp {
        let t = step as f64 / ramp as f64;
        Ok((
            interp.at(cfg.start_lr(), cfg.max_lr, t),
            interp.at(cfg.max_momentum, cfg.min_momentum, t),
        ))
    } else {
        let t = (step - ramp) as f64 / (cfg.total_steps - ramp) as f64;
        Ok((
            interp.at(cfg.max_lr, cfg.final_lr(), t),
            interp.at(cfg.min_momentum, cfg.max_momentum, t),
        ))
    }
}

/// Stateful view over a [`ScheduleConfig`], advanced once per optimiser step.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    cfg: ScheduleConfig,
    step: usize,
}

impl ScheduleState {
    pub fn new(cfg: ScheduleConfig) -> Result<Self, ScheduleError> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0 })
    }

    pub fn current(&self) -> (f64, f64) {
        one_cycle(self.step.min(self.cfg.total_steps), &self.cfg).expect("clamped step")
    }

    pub fn advance(&mut self) {
        self.step = (self.step + 1).min(self.cfg.total_steps);
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// Something that can run one optimisation step at a given learning rate
/// and be rolled back afterwards.
pub trait LrProbe {
    type Snapshot;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
    /// One mini-batch update at `lr`; returns the mini-batch loss.
    fn train_step(&mut self, iteration: usize, lr: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrFindConfig {
    pub start_lr: f64,
    pub end_lr: f64,
    pub iterations: usize,
    pub smoothing: f64,
    pub divergence_factor: f64,
    /// Leading and trailing points ignored when picking the suggestion.
    pub skip_start: usize,
    pub skip_end: usize,
}

impl Default for LrFindConfig {
    fn default() -> Self {
        Self {
            start_lr: 1e-7,
            end_lr: 10.0,
            iterations: 100,
            smoothing: 0.98,
            divergence_factor: 4.0,
            skip_start: 10,
            skip_end: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrFindStatus {
    Ok,
    /// The smoothed loss never went down; no suggestion is made.
    NoValley,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrFindResult {
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
    pub smoothed_losses: Vec<f64>,
    pub suggestion: Option<f64>,
    pub status: LrFindStatus,
}

impl LrFindResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lr,loss,smoothed_loss\n");
        for ((lr, l), sm) in self.lrs.iter().zip(&self.losses).zip(&self.smoothed_losses) {
            s.push_str(&format!("{lr:e},{l:e},{sm:e}\n"));
        }
        s
    }
}

/// Exponential learning-rate sweep; the probe is restored before returning.
pub fn lr_find<P: LrProbe>(probe: &mut P, cfg: &LrFindConfig) -> Result<LrFindResult, ScheduleError> {
    if cfg.iterations < 50 {
        return Err(ScheduleError::Invalid(format!("lr_find budget {} < 50", cfg.iterations)));
    }
    if !(cfg.start_lr > 0.0 && cfg.end_lr > cfg.start_lr) {
        return Err(ScheduleError::Invalid("need 0 < start_lr < end_lr".into()));
    }
    let snapshot = probe.snapshot();
    let ratio = cfg.end_lr / cfg.start_lr;
    let mut lrs = Vec::new();
    let mut losses = Vec::new();
    let mut smoothed = Vec::new();
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    for i in 0..cfg.iterations {
        let lr = cfg.start_lr * ratio.powf(i as f64 / (cfg.iterations - 1) as f64);
        let loss = probe.train_step(i, lr);
        if !loss.is_finite() {
            break;
        }
        avg = cfg.smoothing * avg + (1.0 - cfg.smoothing) * loss;
        let sm = avg / (1.0 - cfg.smoothing.powi(i as i32 + 1));
        lrs.push(lr);
        losses.push(loss);
        smoothed.push(sm);
        if sm < best {
            best = sm;
        }
        if i > 0 && sm > cfg.divergence_factor * best {
            break;
        }
    }
    probe.restore(snapshot);

    // The first points are dominated by the smoother's warm-up and the last
    // by divergence; fall back to the whole curve when it is too short.
    let (lo, hi) = if lrs.len() >= cfg.skip_start + cfg.skip_end + 3 {
        (cfg.skip_start, lrs.len() - cfg.skip_end)
    } else {
        (0, lrs.len())
    };
    let (suggestion, status) = match steepest_descent_index(&lrs[lo..hi], &smoothed[lo..hi]).map(|i| i + lo) {
        Some(i) => (Some(lrs[i]), LrFindStatus::Ok),
        None => (None, LrFindStatus::NoValley),
    };
    Ok(LrFindResult { lrs, losses, smoothed_losses: smoothed, suggestion, status })
}

/// Index of the most negative forward slope of loss against log(lr),
/// restricted to points before the minimum of the curve.
fn steepest_descent_index(lrs: &[f64], smoothed: &[f64]) -> Option<usize> {
    if lrs.len() < 3 {
        return None;
    }
    let min_idx = smoothed
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v < smoothed[b] { i } else { b });
    let mut best: Option<(usize, f64)> = None;
    for i in 0..min_idx {
        let slope = (smoothed[i + 1] - smoothed[i]) / (lrs[i + 1].ln() - lrs[i].ln());
        if slope < 0.0 && best.is_none_or(|(_, s)| slope < s) {
            best = Some((i, slope));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig::new(0.01, 1000)
    }

    #[test]
    fn endpoints_are_exact() {
        let c = cfg();
        assert_eq!(one_cycle(0, &c).unwrap(), (c.max_lr / 25.0, 0.95));
        assert_eq!(one_cycle(250, &c).unwrap(), (0.01, 0.85));
        assert_eq!(one_cycle(1000, &c).unwrap(), (c.max_lr / 25.0 / 1e4, 0.95));
        let lin = ScheduleConfig { interpolation: Interpolation::Linear, ..c };
        assert_eq!(one_cycle(250, &lin).unwrap(), (0.01, 0.85));
        assert_eq!(one_cycle(1000, &lin).unwrap().0, lin.final_lr());
    }

    #[test]
    fn out_of_range_step() {
        assert_eq!(
            one_cycle(1001, &cfg()),
            Err(ScheduleError::StepOutOfRange { step: 1001, total: 1000 })
        );
    }

    #[test]
    fn linear_midpoint() {
        let c = ScheduleConfig { interpolation: Interpolation::Linear, total_steps: 100, ..cfg() };
        let (lr, m) = one_cycle(5, &c).unwrap();
        let l1 = c.start_lr();
        assert!((lr - (l1 + (c.max_lr - l1) * 0.2)).abs() < 1e-15);
        assert!((m - (0.95 - 0.1 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(cfg().validate().is_ok());
        assert!(ScheduleConfig { pct_ramp: 1.0, ..cfg() }.validate().is_err());
        assert!(ScheduleConfig { min_momentum: 0.99, ..cfg() }.validate().is_err());
        assert!(ScheduleConfig { total_steps: 1, ..cfg() }.validate().is_err());
    }

    #[test]
    fn state_clamps_at_end() {
        let mut s = ScheduleState::new(ScheduleConfig::new(0.1, 4)).unwrap();
        for _ in 0..10 {
            s.advance();
        }
        assert_eq!(s.step(), 4);
        assert_eq!(s.current().1, 0.95);
    }
}
