//! Comparator methods from the KL-relaxation family: trust-region reference
//! updates (hard interval and soft weight-merging) and a simplified
//! batch-level adaptive-beta comparator.

use crate::policy::{merge_parameters, Policy};
use crate::{Error, Result};

/// Reference-policy update schedule for trust-region DPO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrDpoMode {
    /// Replace the reference with a clone of the policy every `tau` steps.
    Hard { tau: u64 },
    /// Merge the policy into the reference every step with weight `alpha`.
    Soft { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrDpoConfig {
    pub mode: TrDpoMode,
}

impl TrDpoConfig {
    pub fn hard(tau: u64) -> Result<Self> {
        if tau == 0 {
            return Err(Error::Config("hard update interval tau must be positive".into()));
        }
        Ok(TrDpoConfig { mode: TrDpoMode::Hard { tau } })
    }

    pub fn soft(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
            return Err(Error::Config(format!("soft-merge weight must lie in (0, 1), got {alpha}")));
        }
        Ok(TrDpoConfig { mode: TrDpoMode::Soft { alpha } })
    }
}

/// Applies the trust-region reference update for training step `step`
/// (1-based). Returns true when the reference changed, in which case any
/// cached reference quantities (log-ratio offsets gamma) must be recomputed.
pub fn trdpo_maybe_update(
    policy: &dyn Policy,
    reference: &mut Box<dyn Policy>,
    step: u64,
    config: &TrDpoConfig,
) -> Result<bool> {
    if step == 0 {
        return Err(Error::InvalidArgument("trust-region steps are 1-based".into()));
    }
    match config.mode {
        TrDpoMode::Hard { tau } => {
            if step % tau == 0 {
                *reference = policy.clone_policy();
                Ok(true)
            } else {
                Ok(false)
            }
        }
        TrDpoMode::Soft { alpha } => {
            *reference = merge_parameters(policy, reference.as_ref(), alpha)?;
            Ok(true)
        }
    }
}

/// Simplified batch-level adaptive-beta comparator: beta tracks the gap
/// between the current batch's mean implicit-reward margin and a momentum
/// estimate of that mean. This is a labelled stand-in, not a faithful
/// reproduction of any published update rule; outputs carry that flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaDpoConfig {
    pub beta0: f64,
    /// Momentum of the running margin mean.
    pub momentum: f64,
    /// Gain applied to the margin disparity.
    pub sensitivity: f64,
}

/// Tag recorded in run metadata whenever this comparator is active.
pub const BETADPO_APPROXIMATION_NOTE: &str =
    "beta-dpo comparator is a simplified batch-level stand-in (momentum margin tracking)";

impl BetaDpoConfig {
    pub fn new(beta0: f64, momentum: f64, sensitivity: f64) -> Result<Self> {
        if beta0 <= 0.0 {
            return Err(Error::Config(format!("beta0 must be positive, got {beta0}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if sensitivity < 0.0 {
            return Err(Error::Config(format!("sensitivity must be >= 0, got {sensitivity}")));
        }
        Ok(BetaDpoConfig { beta0, momentum, sensitivity })
    }

    pub fn with_defaults(beta0: f64) -> Result<Self> {
        BetaDpoConfig::new(beta0, 0.9, 0.5)
    }
}

/// Running state of the comparator: the momentum estimate of the mean
/// implicit-reward margin, absent until the first batch seeds it.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BetaDpoState {
    pub margin_mean: Option<f64>,
}

/// One batch-level beta selection. Updates the momentum estimate first, then
/// sets beta from the disparity between the batch mean and the estimate,
/// clamped to [beta0/10, beta0*10]. The first batch seeds the estimate with
/// its own mean, so it always yields beta0.
pub fn betadpo_batch_beta(
    state: &mut BetaDpoState,
    config: &BetaDpoConfig,
    margins: &[f64],
) -> Result<f64> {
    if margins.is_empty() {
        return Err(Error::InvalidArgument("beta update needs a non-empty batch".into()));
    }
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(Error::InvalidArgument("non-finite margin in batch".into()));
    }
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    let prev = state.margin_mean.unwrap_or(mean);
    let updated = config.momentum * prev + (1.0 - config.momentum) * mean;
    state.margin_mean = Some(updated);
    let beta = config.beta0 * (1.0 + config.sensitivity * (mean - updated));
    Ok(beta.clamp(config.beta0 / 10.0, config.beta0 * 10.0))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::policy::{TabularPolicy, Vocab};

    fn random_tabular(seed: u64) -> TabularPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = TabularPolicy::new(1, Vocab::new(2).unwrap(), 2).unwrap();
        for v in p.params_mut().get_mut("table").unwrap().data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn hard_update_fires_only_on_the_interval() {
        let policy = random_tabular(1);
        let mut reference: Box<dyn Policy> = Box::new(random_tabular(2));
        let cfg = TrDpoConfig::hard(128).unwrap();
        let before = reference.params()["table"].data().to_vec();

        assert!(!trdpo_maybe_update(&policy, &mut reference, 127, &cfg).unwrap());
        assert_eq!(reference.params()["table"].data(), &before[..]);

        assert!(trdpo_maybe_update(&policy, &mut reference, 128, &cfg).unwrap());
        assert_eq!(reference.params()["table"].data(), policy.params()["table"].data());
    }

    #[test]
    fn soft_update_merges_every_step() {
        let mut policy = TabularPolicy::new(1, Vocab::new(2).unwrap(), 1).unwrap();
        policy.set_row(0, &[], &[1.0, 1.0]).unwrap();
        let mut reference: Box<dyn Policy> =
            Box::new(TabularPolicy::new(1, Vocab::new(2).unwrap(), 1).unwrap());
        let cfg = TrDpoConfig::soft(0.6).unwrap();

        assert!(trdpo_maybe_update(&policy, &mut reference, 1, &cfg).unwrap());
        for v in reference.params()["table"].data() {
            assert!((v - 0.6).abs() < 1e-15);
        }
        // Second merge with the policy frozen: 0.6 + 0.4 * 0.6 = 0.84.
        assert!(trdpo_maybe_update(&policy, &mut reference, 2, &cfg).unwrap());
        for v in reference.params()["table"].data() {
            assert!((v - 0.84).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrDpoConfig::hard(0).is_err());
        assert!(TrDpoConfig::soft(0.0).is_err());
        assert!(TrDpoConfig::soft(1.0).is_err());
        assert!(BetaDpoConfig::new(0.0, 0.9, 0.5).is_err());
        assert!(BetaDpoConfig::new(0.05, 1.0, 0.5).is_err());
        assert!(BetaDpoConfig::new(0.05, 0.9, -0.1).is_err());
    }

    #[test]
    fn zero_sensitivity_pins_beta() {
        let cfg = BetaDpoConfig::new(0.05, 0.9, 0.0).unwrap();
        let mut state = BetaDpoState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let margins: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let beta = betadpo_batch_beta(&mut state, &cfg, &margins).unwrap();
            assert_eq!(beta, 0.05);
        }
    }

    #[test]
    fn first_batch_yields_base_beta() {
        let cfg = BetaDpoConfig::with_defaults(0.05).unwrap();
        let mut state = BetaDpoState::default();
        let beta = betadpo_batch_beta(&mut state, &cfg, &[2.0, 4.0]).unwrap();
        assert!((beta - 0.05).abs() < 1e-15);
        assert!((state.margin_mean.unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn disparity_update_matches_hand_computation() {
        // momentum 0.9, running mean 0, batch mean 1, sensitivity 0.5,
        // beta0 0.05: running mean becomes 0.1, beta = 0.05 * 1.45 = 0.0725.
        let cfg = BetaDpoConfig::new(0.05, 0.9, 0.5).unwrap();
        let mut state = BetaDpoState { margin_mean: Some(0.0) };
        let beta = betadpo_batch_beta(&mut state, &cfg, &[1.0]).unwrap();
        assert!((state.margin_mean.unwrap() - 0.1).abs() < 1e-15);
        assert!((beta - 0.0725).abs() < 1e-15);
    }

    #[test]
    fn beta_is_clamped_to_the_safety_rail() {
        let cfg = BetaDpoConfig::new(0.05, 0.9, 100.0).unwrap();
        let mut state = BetaDpoState { margin_mean: Some(-50.0) };
        let beta = betadpo_batch_beta(&mut state, &cfg, &[50.0]).unwrap();
        assert_eq!(beta, 0.5); // beta0 * 10
        let mut state = BetaDpoState { margin_mean: Some(50.0) };
        let beta = betadpo_batch_beta(&mut state, &cfg, &[-50.0]).unwrap();
        assert_eq!(beta, 0.005); // beta0 / 10
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = BetaDpoConfig::with_defaults(0.05).unwrap();
        let mut state = BetaDpoState::default();
        assert!(betadpo_batch_beta(&mut state, &cfg, &[]).is_err());
    }
}
