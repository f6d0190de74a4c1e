//! Group-relative policy optimization over [`Trajectory`] rollouts.
//!
//! Per group of N candidates sharing one conditioning input:
//! `A_i = (r_i - mean(r)) / std(r)` (population std), `d_i = π/π_old`, and
//! `J = 1/N Σ_i [min(d_i A_i, clip(d_i, 1-ε, 1+ε) A_i) - β KL_i]`.
//! With `kl_inside_min` the penalty moves into the clipped branch instead.

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{self, Conditioning, PolicyParams, Trajectory};

pub const RATIO_MIN: f64 = 1e-6;
pub const RATIO_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    pub clip: f64,
    pub kl_coeff: f64,
    pub group_size: usize,
    pub scores_per_trace: usize,
    pub learning_rate: f64,
    pub inner_epochs: usize,
    pub std_floor: f64,
    /// Subtract the KL penalty inside the clipped branch of the min rather
    /// than after it.
    pub kl_inside_min: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            clip: 0.2,
            kl_coeff: 0.04,
            group_size: 8,
            scores_per_trace: 4,
            learning_rate: 0.01,
            inner_epochs: 1,
            std_floor: 1e-8,
            kl_inside_min: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::invalid("grpo.clip must lie in (0,1)"));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(Error::invalid("grpo.kl_coeff must be non-negative"));
        }
        if self.group_size < 2 {
            return Err(Error::invalid("grpo.group_size must be at least 2"));
        }
        if self.scores_per_trace < 1 {
            return Err(Error::invalid("grpo.scores_per_trace must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("grpo.learning_rate must be non-negative"));
        }
        if !(self.std_floor >= 0.0 && self.std_floor.is_finite()) {
            return Err(Error::invalid("grpo.std_floor must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutCandidate {
    pub trajectory: Trajectory,
    pub reward: f64,
    pub logprob_current: f64,
    pub logprob_old: f64,
    pub logprob_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub conditioning: Conditioning,
    pub candidates: Vec<RolloutCandidate>,
    pub advantages: Option<Vec<f64>>,
    /// Scale of this group's objective in the combined update.
    pub weight: f64,
}

impl RolloutGroup {
    pub fn new(conditioning: Conditioning, candidates: Vec<RolloutCandidate>, weight: f64) -> Self {
        RolloutGroup {
            conditioning,
            candidates,
            advantages: None,
            weight,
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.reward).collect()
    }

    pub fn compute_advantages(&mut self, std_floor: f64) -> Result<&[f64]> {
        let a = advantages(&self.rewards(), std_floor)?;
        self.advantages = Some(a);
        Ok(self.advantages.as_deref().unwrap_or_default())
    }

    pub fn is_degenerate(&self) -> bool {
        self.advantages
            .as_ref()
            .is_some_and(|a| a.iter().all(|v| *v == 0.0))
    }
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group-normalized advantages. A group whose population std falls below
/// `std_floor` (identical rewards included) gets all-zero advantages.
pub fn advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!(
            "advantages need a group of at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    // offsets from the first reward make a common shift cancel before any rounding
    let offsets: Vec<f64> = rewards.iter().map(|r| r - rewards[0]).collect();
    let (mean, std) = mean_and_population_std(&offsets);
    let all_equal = rewards.iter().all(|r| *r == rewards[0]);
    if all_equal || std < std_floor || std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(offsets.iter().map(|d| (d - mean) / std).collect())
}

/// `exp(logp_current - logp_old)`, clamped to `[1e-6, 1e6]`.
pub fn ratio(logp_current: f64, logp_old: f64) -> f64 {
    let d = (logp_current - logp_old).exp();
    if !(RATIO_MIN..=RATIO_MAX).contains(&d) {
        warn!(
            "probability ratio {d:e} clamped (logp_current={logp_current}, logp_old={logp_old})"
        );
        return d.clamp(RATIO_MIN, RATIO_MAX);
    }
    d
}

pub fn clip_ratio(d: f64, eps: f64) -> f64 {
    d.clamp(1.0 - eps, 1.0 + eps)
}

pub fn clipped_term(d: f64, advantage: f64, eps: f64) -> f64 {
    (d * advantage).min(clip_ratio(d, eps) * advantage)
}

/// Whether the clipped branch is selected and flat in `d`.
pub fn clip_binds(d: f64, advantage: f64, eps: f64) -> bool {
    (advantage > 0.0 && d > 1.0 + eps) || (advantage < 0.0 && d < 1.0 - eps)
}

pub fn kl_penalty(
    p: &PolicyParams,
    reference: &PolicyParams,
    cond: &Conditioning,
    traj: &Trajectory,
) -> Result<f64> {
    policy::kl_divergence(p, reference, cond, traj)
}

/// Per-candidate term and the coefficients of its gradient:
/// `term`, `coef_logprob` (multiplies ∇ log π), `coef_kl` (multiplies ∇ KL).
fn candidate_term(d: f64, a: f64, kl: f64, cfg: &GrpoConfig) -> (f64, f64, f64) {
    let eps = cfg.clip;
    let unclipped = d * a;
    let clipped = clip_ratio(d, eps) * a;
    if cfg.kl_inside_min {
        let second = clipped - cfg.kl_coeff * kl;
        if unclipped <= second {
            (unclipped, d * a, 0.0)
        } else {
            let coef = if clip_binds(d, a, eps) { 0.0 } else { d * a };
            (second, coef, -cfg.kl_coeff)
        }
    } else {
        let coef = if clip_binds(d, a, eps) { 0.0 } else { d * a };
        (unclipped.min(clipped) - cfg.kl_coeff * kl, coef, -cfg.kl_coeff)
    }
}

/// Objective of one group from its stored current/old log-probabilities.
pub fn grpo_objective(group: &RolloutGroup, cfg: &GrpoConfig, kl_values: &[f64]) -> Result<f64> {
    let adv = group
        .advantages
        .as_ref()
        .ok_or_else(|| Error::invalid("advantages have not been computed"))?;
    let n = group.candidates.len();
    if adv.len() != n || kl_values.len() != n {
        return Err(Error::invalid(format!(
            "misaligned lengths: {n} candidates, {} advantages, {} kl values",
            adv.len(),
            kl_values.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("empty group"));
    }
    let total: f64 = group
        .candidates
        .iter()
        .zip(adv)
        .zip(kl_values)
        .map(|((c, &a), &kl)| {
            let d = ratio(c.logprob_current, c.logprob_old);
            candidate_term(d, a, kl, cfg).0
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateStats {
    /// Weighted objective at the parameters the update started from.
    pub objective: f64,
    pub mean_kl: f64,
    /// Fraction of candidates whose ratio left the clip band.
    pub clip_frac: f64,
    pub degenerate_groups: usize,
    pub groups: usize,
    /// Unweighted objective of each group, in input order.
    pub group_objectives: Vec<f64>,
}

struct GroupPass {
    objective: f64,
    kl_sum: f64,
    clipped: usize,
    grad: Option<PolicyParams>,
}

fn group_pass(
    p: &PolicyParams,
    reference: &PolicyParams,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
    with_grad: bool,
) -> Result<GroupPass> {
    let adv = group
        .advantages
        .as_ref()
        .ok_or_else(|| Error::invalid("advantages have not been computed"))?;
    if adv.len() != group.candidates.len() || adv.is_empty() {
        return Err(Error::invalid("advantages misaligned with candidates"));
    }
    let n = group.candidates.len() as f64;
    let mut grad: Option<PolicyParams> = None;
    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0;
    let cond = &group.conditioning;
    for (c, &a) in group.candidates.iter().zip(adv) {
        let need_kl_grad = with_grad && cfg.kl_coeff > 0.0;
        let (kl, g_kl) = if need_kl_grad {
            let (k, g) = policy::grad_kl_divergence(p, reference, cond, &c.trajectory)?;
            (k, Some(g))
        } else {
            (policy::kl_divergence(p, reference, cond, &c.trajectory)?, None)
        };
        let (logp, g_lp) = if with_grad && a != 0.0 {
            let (v, g) = policy::grad_trajectory_logprob(p, cond, &c.trajectory)?;
            (v, Some(g))
        } else {
            (policy::trajectory_logprob(p, cond, &c.trajectory)?, None)
        };
        let d = ratio(logp, c.logprob_old);
        if d < 1.0 - cfg.clip || d > 1.0 + cfg.clip {
            clipped += 1;
        }
        let (term, coef_lp, coef_kl) = candidate_term(d, a, kl, cfg);
        objective += term / n;
        kl_sum += kl;
        if with_grad {
            let acc = grad.get_or_insert_with(|| p.zeros_like());
            if let Some(g) = &g_lp {
                if coef_lp != 0.0 {
                    acc.add_scaled(g, coef_lp / n);
                }
            }
            if let Some(g) = &g_kl {
                if coef_kl != 0.0 {
                    acc.add_scaled(g, coef_kl / n);
                }
            }
        }
    }
    Ok(GroupPass {
        objective,
        kl_sum,
        clipped,
        grad,
    })
}

/// Weighted objective `Σ_g w_g J_g`, with ratios and KL recomputed at `p`.
pub fn evaluate_objective(
    p: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<f64> {
    let passes = groups
        .par_iter()
        .map(|g| group_pass(p, reference, g, cfg, false).map(|r| g.weight * r.objective))
        .collect::<Result<Vec<_>>>()?;
    Ok(passes.into_iter().sum())
}

/// One or more gradient-ascent steps on the weighted objective. Groups are
/// processed in parallel; their gradients are summed in group order.
pub fn grpo_update(
    p: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<(PolicyParams, UpdateStats)> {
    cfg.validate()?;
    let mut current = p.clone();
    let mut stats = UpdateStats {
        groups: groups.len(),
        degenerate_groups: groups.iter().filter(|g| g.is_degenerate()).count(),
        ..UpdateStats::default()
    };
    let candidates: usize = groups.iter().map(|g| g.candidates.len()).sum();
    for epoch in 0..cfg.inner_epochs.max(1) {
        let passes = groups
            .par_iter()
            .map(|g| {
                let skip = g.weight == 0.0 || (g.is_degenerate() && cfg.kl_coeff == 0.0);
                group_pass(&current, reference, g, cfg, !skip)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = current.zeros_like();
        let mut objective = 0.0;
        let mut kl_sum = 0.0;
        let mut clipped = 0;
        for (g, pass) in groups.iter().zip(&passes) {
            objective += g.weight * pass.objective;
            kl_sum += pass.kl_sum;
            clipped += pass.clipped;
            if let Some(grad) = &pass.grad {
                total.add_scaled(grad, g.weight);
            }
        }
        if !total.is_finite() || !objective.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient or objective at inner epoch {epoch} (objective={objective})"
            )));
        }
        if epoch == 0 {
            stats.objective = objective;
            stats.mean_kl = if candidates > 0 { kl_sum / candidates as f64 } else { 0.0 };
            stats.clip_frac = if candidates > 0 { clipped as f64 / candidates as f64 } else { 0.0 };
            stats.group_objectives = passes.iter().map(|p| p.objective).collect();
        }
        current.add_scaled(&total, cfg.learning_rate);
        if !current.is_finite() {
            return Err(Error::NonFinite(format!("parameters after inner epoch {epoch}")));
        }
    }
    Ok((current, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(advantages(&[1.0, 1.0, 1.0, 1.0], 1e-8).unwrap(), vec![0.0; 4]);
        assert_eq!(advantages(&[1.0, 0.0], 1e-8).unwrap(), vec![1.0, -1.0]);
        let a = advantages(&[2.0, 0.0, 1.0], 1e-8).unwrap();
        for (x, y) in a.iter().zip([1.2247, -1.2247, 0.0]) {
            assert!((x - y).abs() < 1e-4);
        }
        assert!(advantages(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(ratio(-3.0, -3.0), 1.0);
        assert!((ratio(2f64.ln() - 1.0, -1.0) - 2.0).abs() < 1e-12);
        assert!((ratio(-(4f64.ln()), 0.0) - 0.25).abs() < 1e-12);
        assert_eq!(ratio(100.0, 0.0), RATIO_MAX);
        assert_eq!(ratio(-100.0, 0.0), RATIO_MIN);
    }

    #[test]
    fn clipped_examples() {
        assert_eq!(clipped_term(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_term(1.0, -0.7, 0.2), -0.7);
        assert_eq!(clipped_term(0.5, -1.0, 0.2), -0.8);
    }

    fn two_candidate_group(kl: f64) -> (RolloutGroup, Vec<f64>) {
        let cand = |r: f64| RolloutCandidate {
            trajectory: Trajectory::Caption(Default::default()),
            reward: r,
            logprob_current: -1.0,
            logprob_old: -1.0,
            logprob_ref: -1.0,
        };
        let mut g = RolloutGroup::new(Conditioning::text_only(), vec![cand(1.0), cand(0.0)], 1.0);
        g.compute_advantages(1e-8).unwrap();
        (g, vec![kl, kl])
    }

    #[test]
    fn objective_examples() {
        let cfg = GrpoConfig {
            kl_coeff: 0.0,
            ..GrpoConfig::default()
        };
        let (g, kl) = two_candidate_group(0.0);
        assert_eq!(grpo_objective(&g, &cfg, &kl).unwrap(), 0.0);

        let cfg = GrpoConfig::default();
        let (g, kl) = two_candidate_group(0.5);
        assert!((grpo_objective(&g, &cfg, &kl).unwrap() + 0.02).abs() < 1e-15);

        assert!(grpo_objective(&g, &cfg, &[0.0]).is_err());
    }

    #[test]
    fn degenerate_group_objective_is_zero() {
        let cand = RolloutCandidate {
            trajectory: Trajectory::Caption(Default::default()),
            reward: 0.3,
            logprob_current: -2.0,
            logprob_old: -2.5,
            logprob_ref: -2.0,
        };
        let mut g = RolloutGroup::new(Conditioning::text_only(), vec![cand.clone(), cand], 1.0);
        g.compute_advantages(1e-8).unwrap();
        assert!(g.is_degenerate());
        let cfg = GrpoConfig {
            kl_coeff: 0.0,
            ..GrpoConfig::default()
        };
        assert_eq!(grpo_objective(&g, &cfg, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_inside_min_reading() {
        let cfg = GrpoConfig {
            kl_inside_min: true,
            ..GrpoConfig::default()
        };
        // d inside band, A=1: min(1, 1 - 0.04 * 0.5) = 0.98
        let (t, _, _) = candidate_term(1.0, 1.0, 0.5, &cfg);
        assert!((t - 0.98).abs() < 1e-15);
        // outside reading: min(1,1) - 0.02 = 0.98 as well; differs when clip binds
        let (t2, _, _) = candidate_term(1.5, 1.0, 0.5, &cfg);
        assert!((t2 - (1.2 - 0.02)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        assert!(GrpoConfig { clip: 1.0, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { group_size: 1, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { scores_per_trace: 0, ..Default::default() }.validate().is_err());
    }
}
