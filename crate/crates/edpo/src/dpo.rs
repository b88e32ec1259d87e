//! The DPO objective and its classifier reparameterization.
//!
//! A preference triplet is scored by the log-likelihood ratio between chosen
//! and rejected under the policy (the logit `z`) and under the frozen
//! reference (the margin `gamma`); the preference probability is
//! `sigma(beta * (z - gamma))` and the loss is its negative log. Only margins
//! are ever materialized: the prompt-only normalizer in the implicit reward
//! cancels out of every quantity here.

use std::collections::BTreeMap;

use crate::numerics::{log_softmax, logsigmoid, sigmoid, Graph, NodeId};
use crate::policy::{seq_logprob, seq_logprob_node, Policy, Sequence};
use crate::{Error, Result};

/// (prompt, chosen, rejected) plus the probability that chosen wins
/// (1.0 = hard label).
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTriplet {
    pub prompt: usize,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub label: f64,
}

impl PreferenceTriplet {
    pub fn new(prompt: usize, chosen: Vec<usize>, rejected: Vec<usize>, label: f64) -> Result<Self> {
        if chosen == rejected {
            return Err(Error::InvalidArgument("chosen and rejected must differ".into()));
        }
        if !(0.0..=1.0).contains(&label) {
            return Err(Error::InvalidArgument(format!("label {label} outside [0, 1]")));
        }
        Ok(PreferenceTriplet { prompt, chosen, rejected, label })
    }

    pub fn chosen_seq(&self) -> Sequence {
        Sequence::new(self.prompt, self.chosen.clone())
    }

    pub fn rejected_seq(&self) -> Sequence {
        Sequence::new(self.prompt, self.rejected.clone())
    }
}

/// log pi(y_w | x) - log pi(y_l | x) under the policy.
pub fn logit_z(policy: &dyn Policy, triplet: &PreferenceTriplet) -> Result<f64> {
    Ok(seq_logprob(policy, &triplet.chosen_seq())? - seq_logprob(policy, &triplet.rejected_seq())?)
}

/// Same log-ratio under the frozen reference policy.
pub fn margin_gamma(reference: &dyn Policy, triplet: &PreferenceTriplet) -> Result<f64> {
    logit_z(reference, triplet)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// sigma(beta * (z - gamma)), the preference model's win probability.
pub fn preference_prob(z: f64, gamma: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(sigmoid(beta * (z - gamma)))
}

/// beta * (z - gamma); the prompt-only reward term cancels.
pub fn implicit_reward_margin(z: f64, gamma: f64, beta: f64) -> f64 {
    beta * (z - gamma)
}

/// Convenience form evaluating both policies directly.
pub fn implicit_reward_margin_of(
    policy: &dyn Policy,
    reference: &dyn Policy,
    triplet: &PreferenceTriplet,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    Ok(implicit_reward_margin(logit_z(policy, triplet)?, margin_gamma(reference, triplet)?, beta))
}

/// Scalar DPO loss. Hard labels give -log sigma(beta (z - gamma)); a soft
/// label p gives the symmetric cross-entropy in the margin.
pub fn dpo_loss_value(z: f64, gamma: f64, beta: f64, label: f64) -> Result<f64> {
    check_beta(beta)?;
    let m = beta * (z - gamma);
    Ok(label * -logsigmoid(m) + (1.0 - label) * -logsigmoid(-m))
}

/// Differentiable DPO loss. `z_node` carries the gradient; `gamma` enters as
/// a constant because the reference is frozen.
pub fn dpo_loss_node(
    graph: &mut Graph,
    z_node: NodeId,
    gamma: f64,
    beta: f64,
    label: f64,
) -> Result<NodeId> {
    check_beta(beta)?;
    let gamma_node = graph.scalar(gamma);
    let diff = graph.sub(z_node, gamma_node)?;
    let m = graph.scale(diff, beta);
    let pos = graph.logsigmoid(m)?;
    let pos = graph.neg(pos);
    if label >= 1.0 {
        return Ok(pos);
    }
    let neg_m = graph.neg(m);
    let neg = graph.logsigmoid(neg_m)?;
    let neg = graph.neg(neg);
    let a = graph.scale(pos, label);
    let b = graph.scale(neg, 1.0 - label);
    graph.add(a, b)
}

/// Frozen per-position reference logits for one triplet, computed once and
/// reused by both the loss margin and the perturbation estimates.
#[derive(Debug, Clone)]
pub struct RefCache {
    pub chosen: Vec<Vec<f64>>,
    pub rejected: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl RefCache {
    pub fn build(reference: &dyn Policy, triplet: &PreferenceTriplet) -> Result<Self> {
        let collect = |tokens: &[usize]| -> Result<Vec<Vec<f64>>> {
            (0..tokens.len())
                .map(|i| reference.logits(triplet.prompt, &tokens[..i]))
                .collect()
        };
        let chosen = collect(&triplet.chosen)?;
        let rejected = collect(&triplet.rejected)?;
        let gamma = logprob_from_cached(&chosen, &triplet.chosen)?
            - logprob_from_cached(&rejected, &triplet.rejected)?;
        Ok(RefCache { chosen, rejected, gamma })
    }
}

/// Sequence log-probability recomputed from cached per-position logits.
pub fn logprob_from_cached(per_pos: &[Vec<f64>], tokens: &[usize]) -> Result<f64> {
    if per_pos.len() != tokens.len() {
        return Err(Error::Internal("cached logits do not cover the sequence".into()));
    }
    let mut total = 0.0;
    for (logits, &tok) in per_pos.iter().zip(tokens) {
        total += log_softmax(logits)?[tok];
    }
    Ok(total)
}

/// One training instance's differentiable state: the z node in the graph plus
/// the numeric per-position policy logits extracted from the same nodes (no
/// second forward pass).
#[derive(Debug)]
pub struct GraphInstance {
    pub z_node: NodeId,
    pub z: f64,
    pub policy_chosen: Vec<Vec<f64>>,
    pub policy_rejected: Vec<Vec<f64>>,
}

/// Builds the differentiable logit `z` for a triplet and captures the policy
/// logit values for reuse by the perturbation estimates.
pub fn build_graph_instance(
    policy: &dyn Policy,
    graph: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    triplet: &PreferenceTriplet,
) -> Result<GraphInstance> {
    let (lp_w, nodes_w) = seq_logprob_node(policy, graph, bound, &triplet.chosen_seq())?;
    let (lp_l, nodes_l) = seq_logprob_node(policy, graph, bound, &triplet.rejected_seq())?;
    let z_node = graph.sub(lp_w, lp_l)?;
    let policy_chosen = nodes_w.iter().map(|&n| graph.value(n).to_vec()).collect();
    let policy_rejected = nodes_l.iter().map(|&n| graph.value(n).to_vec()).collect();
    Ok(GraphInstance { z_node, z: graph.scalar_value(z_node), policy_chosen, policy_rejected })
}
