//! Instance-level adaptive KL-penalty control.
//!
//! For each preference pair, the policy that would have been trained under a
//! slightly perturbed penalty coefficient is estimated per token by
//! interpolating current-policy and reference logits (lambda = 1 + eps for
//! beta/(1+eps), lambda = 1 - eps for beta/(1-eps)). Strict monotonicity of
//! the resulting chosen-vs-rejected logits across the perturbation decides
//! whether this instance trains with a relaxed, tightened, or unchanged
//! coefficient, and the running coefficient follows the batch mean of those
//! decisions.
//!
//! The estimates reuse logits already computed for the loss, so the
//! criterion adds no model forward passes.

use crate::dpo::{logprob_from_cached, PreferenceTriplet, RefCache};
use crate::numerics::log_softmax;
use crate::policy::Policy;
use crate::{Error, Result};

/// Perturbation direction for the estimated policy.
/// `Minus` estimates the policy under beta/(1+eps) (lambda = 1 + eps);
/// `Plus` estimates the policy under beta/(1-eps) (lambda = 1 - eps).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbSign {
    Minus,
    Plus,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} outside (0, 1)")));
    }
    Ok(())
}

/// (beta/(1+eps), beta/(1-eps)).
pub fn perturbed_betas(beta: f64, eps: f64) -> Result<(f64, f64)> {
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    check_eps(eps)?;
    Ok((beta / (1.0 + eps), beta / (1.0 - eps)))
}

/// Element-wise lambda * f_theta + (1 - lambda) * f_ref.
pub fn interpolate_logits(f_theta: &[f64], f_ref: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if f_theta.len() != f_ref.len() {
        return Err(Error::InvalidArgument(format!(
            "logit length mismatch: {} vs {}",
            f_theta.len(),
            f_ref.len()
        )));
    }
    Ok(f_theta
        .iter()
        .zip(f_ref)
        .map(|(t, r)| lambda * t + (1.0 - lambda) * r)
        .collect())
}

/// Estimated sequence log-probability under the perturbed coefficient,
/// computed from cached per-position policy and reference logits.
pub fn estimated_perturbed_logprob(
    policy_logits: &[Vec<f64>],
    ref_logits: &[Vec<f64>],
    tokens: &[usize],
    eps: f64,
    sign: PerturbSign,
) -> Result<f64> {
    check_eps(eps)?;
    if policy_logits.len() != tokens.len() || ref_logits.len() != tokens.len() {
        return Err(Error::Internal("cached logits do not cover the sequence".into()));
    }
    let lambda = match sign {
        PerturbSign::Minus => 1.0 + eps,
        PerturbSign::Plus => 1.0 - eps,
    };
    let mut total = 0.0;
    for ((f_theta, f_ref), &tok) in policy_logits.iter().zip(ref_logits).zip(tokens) {
        let mixed = interpolate_logits(f_theta, f_ref, lambda)?;
        total += log_softmax(&mixed)?[tok];
    }
    Ok(total)
}

/// Estimated logits under (beta/(1+eps), beta, beta/(1-eps)).
/// `z_zero` is exactly the current policy's logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedEstimate {
    pub z_minus: f64,
    pub z_zero: f64,
    pub z_plus: f64,
}

/// Builds the three-point estimate from cached logits. `z_zero` is passed in
/// from the loss path so the estimate and the loss agree bit-for-bit.
pub fn perturbed_z_cached(
    policy_chosen: &[Vec<f64>],
    policy_rejected: &[Vec<f64>],
    refs: &RefCache,
    triplet: &PreferenceTriplet,
    z_zero: f64,
    eps: f64,
) -> Result<PerturbedEstimate> {
    let est = |sign| -> Result<f64> {
        Ok(
            estimated_perturbed_logprob(policy_chosen, &refs.chosen, &triplet.chosen, eps, sign)?
                - estimated_perturbed_logprob(
                    policy_rejected,
                    &refs.rejected,
                    &triplet.rejected,
                    eps,
                    sign,
                )?,
        )
    };
    Ok(PerturbedEstimate {
        z_minus: est(PerturbSign::Minus)?,
        z_zero,
        z_plus: est(PerturbSign::Plus)?,
    })
}

/// Convenience form that evaluates both policies directly (one forward pass
/// per position per policy). The training path uses the cached form instead.
pub fn perturbed_z(
    policy: &dyn Policy,
    reference: &dyn Policy,
    triplet: &PreferenceTriplet,
    eps: f64,
) -> Result<PerturbedEstimate> {
    let collect = |p: &dyn Policy, tokens: &[usize]| -> Result<Vec<Vec<f64>>> {
        (0..tokens.len()).map(|i| p.logits(triplet.prompt, &tokens[..i])).collect()
    };
    let policy_chosen = collect(policy, &triplet.chosen)?;
    let policy_rejected = collect(policy, &triplet.rejected)?;
    let refs = RefCache::build(reference, triplet)?;
    let z_zero = logprob_from_cached(&policy_chosen, &triplet.chosen)?
        - logprob_from_cached(&policy_rejected, &triplet.rejected)?;
    perturbed_z_cached(&policy_chosen, &policy_rejected, &refs, triplet, z_zero, eps)
}

/// Per-instance coefficient choice: the selected beta and the step
/// direction statistic (-1, 0, +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaDecision {
    pub beta_tilde: f64,
    pub direction: i8,
}

/// Three-branch selection on strict logit monotonicity. Exact floating
/// comparison, no tolerance band; any tie falls to the unchanged branch.
pub fn select_beta(est: &PerturbedEstimate, beta: f64, eps_s: f64) -> Result<BetaDecision> {
    let (beta_minus, beta_plus) = perturbed_betas(beta, eps_s)?;
    if est.z_minus > est.z_zero && est.z_zero > est.z_plus {
        Ok(BetaDecision { beta_tilde: beta_minus, direction: -1 })
    } else if est.z_minus < est.z_zero && est.z_zero < est.z_plus {
        Ok(BetaDecision { beta_tilde: beta_plus, direction: 1 })
    } else {
        Ok(BetaDecision { beta_tilde: beta, direction: 0 })
    }
}

/// Running coefficient state: current beta, the criterion and step
/// perturbation sizes, clamp rail, and cumulative decision counts.
#[derive(Debug, Clone)]
pub struct BetaController {
    beta: f64,
    pub eps_c: f64,
    pub eps_s: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Cumulative occurrences of directions (-1, 0, +1).
    pub counts: [u64; 3],
    /// Number of batch updates where the clamp rail engaged. The default
    /// rail is wide; bundled runs are expected to report zero.
    pub clamp_events: u64,
}

impl BetaController {
    pub fn new(beta0: f64, eps_c: f64, eps_s: f64) -> Result<Self> {
        if beta0 <= 0.0 {
            return Err(Error::InvalidArgument(format!("beta0 must be positive, got {beta0}")));
        }
        check_eps(eps_c)?;
        check_eps(eps_s)?;
        Ok(BetaController {
            beta: beta0,
            eps_c,
            eps_s,
            beta_min: beta0 / 10.0,
            beta_max: beta0 * 10.0,
            counts: [0; 3],
            clamp_events: 0,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn decide(&self, est: &PerturbedEstimate) -> Result<BetaDecision> {
        select_beta(est, self.beta, self.eps_s)
    }

    /// beta <- mean of beta_tilde over the full optimizer batch, clamped.
    /// Fixed summation order keeps the reduction deterministic.
    pub fn update_beta(&mut self, decisions: &[BetaDecision]) -> Result<f64> {
        if decisions.is_empty() {
            return Err(Error::InvalidArgument("empty decision batch".into()));
        }
        let mut sum = 0.0;
        for d in decisions {
            sum += d.beta_tilde;
            self.counts[(d.direction + 1) as usize] += 1;
        }
        // The mean of identical values is that value exactly; bypassing the
        // division keeps an all-unchanged batch bit-identical to static beta.
        let first = decisions[0].beta_tilde;
        let mean = if decisions.iter().all(|d| d.beta_tilde == first) {
            first
        } else {
            sum / decisions.len() as f64
        };
        let clamped = mean.clamp(self.beta_min, self.beta_max);
        if clamped != mean {
            self.clamp_events += 1;
        }
        self.beta = clamped;
        Ok(self.beta)
    }
}

/// Largest sampled epsilon below which the selection direction stays equal to
/// the direction at the smallest sampled epsilon. Reported as (down, up)
/// depending on that smallest-epsilon direction; both absent when it is 0.
pub fn epsilon_upper_bound(
    policy: &dyn Policy,
    reference: &dyn Policy,
    triplet: &PreferenceTriplet,
    eps_range: (f64, f64),
    n_points: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    if n_points < 2 {
        return Err(Error::InvalidArgument("need at least 2 sample points".into()));
    }
    let (lo, hi) = eps_range;
    check_eps(lo)?;
    check_eps(hi)?;
    if lo >= hi {
        return Err(Error::InvalidArgument("empty epsilon range".into()));
    }
    // Direction only depends on the ordering, so any positive beta works.
    let beta = 1.0;
    let grid: Vec<f64> = (0..n_points)
        .map(|i| lo + (hi - lo) * i as f64 / (n_points - 1) as f64)
        .collect();
    let mut base_dir = 0i8;
    let mut bound = None;
    for (i, &eps) in grid.iter().enumerate() {
        let est = perturbed_z(policy, reference, triplet, eps)?;
        let dir = select_beta(&est, beta, eps)?.direction;
        if i == 0 {
            base_dir = dir;
            if base_dir == 0 {
                return Ok((None, None));
            }
        }
        if dir != base_dir {
            break;
        }
        bound = Some(eps);
    }
    match base_dir {
        -1 => Ok((bound, None)),
        1 => Ok((None, bound)),
        _ => Ok((None, None)),
    }
}
