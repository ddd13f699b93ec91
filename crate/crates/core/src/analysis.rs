//! Post-hoc theory instruments: sufficient-decrease auditing, non-IID bias
//! decomposition, power-law memory weights, and stationarity reporting.
//! Everything here reads immutable trajectories; nothing feeds back into the
//! optimizers.

use crate::error::{Error, Result};
use crate::numerics::{gamma, lr_schedule, FracConfig};
use crate::objectives::{Objective, ParamVector};
use crate::optimizers::TrajectoryPoint;
use crate::partition::{ClientShard, Dataset};

/// Slack tolerance for the decrease inequality: ~100x accumulated rounding
/// at d <= 1e4 in 64-bit arithmetic.
pub const DECREASE_SLACK_TOL: f64 = 1e-9;

/// One step of the sufficient-decrease audit. `slack` is
/// `f_after - f_before + kappa_t * ||grad||^2`; nonpositive (up to tolerance)
/// when the step-size hypothesis holds.
#[derive(Debug, Clone, PartialEq)]
pub struct DecreaseAudit {
    pub t: u64,
    pub f_before: f64,
    pub f_after: f64,
    pub grad_norm_sq: f64,
    pub alpha_t: f64,
    pub kappa_t: f64,
    pub slack: f64,
    /// alpha_t exceeded 2/L.
    pub step_bound_violated: bool,
    /// slack above tolerance.
    pub decrease_violated: bool,
    /// recorded alpha_t disagrees with the independently recomputed
    /// mu_t (s+delta)^(1-alpha) / Gamma(2-alpha).
    pub step_size_inconsistent: bool,
}

impl DecreaseAudit {
    pub fn clean(&self) -> bool {
        !(self.step_bound_violated || self.decrease_violated || self.step_size_inconsistent)
    }
}

pub fn kappa(alpha_t: f64, l: f64) -> f64 {
    alpha_t * (1.0 - 0.5 * l * alpha_t)
}

/// Audit a full-batch trajectory against the sufficient-decrease inequality.
///
/// Only the fractional steps are audited: the decrease recursion starts at
/// the first post-bootstrap iterate (the telescoping sum begins at f of the
/// bootstrapped model), so the plain-SGD bootstrap step carries no step-size
/// hypothesis. The effective step of each audited point is re-derived from
/// the raw iterates (pow and Gamma evaluated inline, bypassing the
/// optimizer's factor code), so a corrupted factor shows up as
/// `step_size_inconsistent` even when the decrease inequality itself still
/// holds.
pub fn audit_decrease(
    trajectory: &[TrajectoryPoint],
    obj: &Objective,
    config: &FracConfig,
) -> Result<Vec<DecreaseAudit>> {
    let l = obj.smoothness_constant().ok_or_else(|| {
        Error::Unsupported(format!(
            "{} exposes no smoothness constant; audit requires one",
            obj.kind_name()
        ))
    })?;
    if trajectory.len() < 3 {
        return Ok(Vec::new());
    }
    let gamma_term = gamma(2.0 - config.alpha())?;
    let mut audits = Vec::with_capacity(trajectory.len() - 2);
    for i in 2..trajectory.len() {
        let before = &trajectory[i - 1];
        let after = &trajectory[i];
        let alpha_t = after
            .step_size
            .ok_or_else(|| Error::Usage(format!("trajectory point {i} carries no step size")))?;
        let grad_norm_sq = before.grad_norm * before.grad_norm;
        let kappa_t = kappa(alpha_t, l);
        let slack = after.loss - before.loss + kappa_t * grad_norm_sq;

        let s = trajectory[i - 1].theta.distance(&trajectory[i - 2].theta);
        let raw = lr_schedule(config.mu0(), (i - 1) as u64)
            * (s + config.delta()).powf(1.0 - config.alpha())
            / gamma_term;
        let expected = match config.cap() {
            Some(cap) if raw > cap => cap,
            _ => raw,
        };
        let step_size_inconsistent = (alpha_t - expected).abs() > 1e-9 * expected.abs().max(1.0);

        audits.push(DecreaseAudit {
            t: (i - 2) as u64,
            f_before: before.loss,
            f_after: after.loss,
            grad_norm_sq,
            alpha_t,
            kappa_t,
            slack,
            step_bound_violated: alpha_t > 2.0 / l + 1e-12,
            decrease_violated: slack > DECREASE_SLACK_TOL,
            step_size_inconsistent,
        });
    }
    Ok(audits)
}

/// Per-client decomposition of the update bias at a point: the alpha-scaled
/// non-IID gap plus the scaling mismatch term.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasProbe {
    pub client_id: usize,
    pub grad_local: ParamVector,
    pub grad_global: ParamVector,
    pub alpha_t: f64,
    /// alpha_t * (grad_local - grad_global)
    pub term_structural: ParamVector,
    /// (alpha_t - 1) * grad_global
    pub term_scaling: ParamVector,
}

impl BiasProbe {
    /// Full bias vector: alpha_t * grad_local - grad_global.
    pub fn bias(&self) -> Vec<f64> {
        self.grad_local
            .values()
            .iter()
            .zip(self.grad_global.values())
            .map(|(l, g)| self.alpha_t * l - g)
            .collect()
    }

    /// Max abs difference between the two-term sum and the full bias.
    pub fn reconstruction_error(&self) -> f64 {
        self.bias()
            .iter()
            .zip(
                self.term_structural
                    .values()
                    .iter()
                    .zip(self.term_scaling.values()),
            )
            .map(|(b, (s, c))| (b - (s + c)).abs())
            .fold(0.0, f64::max)
    }
}

/// Full-batch per-client gradients against the global gradient at `theta`.
pub fn bias_probe(
    shards: &[ClientShard],
    ds: &Dataset,
    theta: &ParamVector,
    obj: &Objective,
    alpha_t: f64,
) -> Result<Vec<BiasProbe>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let grad_global = obj.eval(theta, &all)?.grad;
    let mut probes = Vec::with_capacity(shards.len());
    for shard in shards {
        let grad_local = obj.eval(theta, shard.indices())?.grad;
        let term_structural = ParamVector::new(
            grad_local
                .values()
                .iter()
                .zip(grad_global.values())
                .map(|(l, g)| alpha_t * (l - g))
                .collect(),
        )?;
        let term_scaling = ParamVector::new(
            grad_global
                .values()
                .iter()
                .map(|g| (alpha_t - 1.0) * g)
                .collect(),
        )?;
        probes.push(BiasProbe {
            client_id: shard.client_id(),
            grad_local,
            grad_global: grad_global.clone(),
            alpha_t,
            term_structural,
            term_scaling,
        });
    }
    Ok(probes)
}

/// Normalized power-law weights `w_j ∝ (j+1)^{-(1+alpha)}`, j = 0..=horizon.
/// A display-only view of how the fractional update discounts history; the
/// optimizer itself never stores more than one previous iterate.
pub fn memory_weights(alpha: f64, horizon: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Usage(format!("alpha = {alpha} must lie in (0, 1]")));
    }
    if horizon < 1 {
        return Err(Error::Usage("horizon must be at least 1".into()));
    }
    let raw: Vec<f64> = (0..=horizon)
        .map(|j| ((j + 1) as f64).powf(-(1.0 + alpha)))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Running minimum of the gradient norm and the first step at which it fell
/// below each threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub running_min: Vec<f64>,
    /// (threshold, first index at or below it, None = not reached)
    pub first_below: Vec<(f64, Option<usize>)>,
}

pub const STATIONARITY_THRESHOLDS: [f64; 3] = [1e-1, 1e-2, 1e-3];

pub fn stationarity_report(grad_norms: &[f64]) -> StationarityReport {
    let mut running_min = Vec::with_capacity(grad_norms.len());
    let mut min_so_far = f64::INFINITY;
    for &g in grad_norms {
        min_so_far = min_so_far.min(g);
        running_min.push(min_so_far);
    }
    let first_below = STATIONARITY_THRESHOLDS
        .iter()
        .map(|&thr| (thr, grad_norms.iter().position(|&g| g < thr)))
        .collect();
    StationarityReport {
        running_min,
        first_below,
    }
}
