//! Autoregressive policies over a small vocabulary.
//!
//! Tabular and tiny-neural variants share one interface: per-position logits,
//! sequence log-likelihoods, and ancestral sampling. Prompts are a finite
//! enumerated set and sequences have a fixed maximum length, which keeps
//! exhaustive enumeration oracles exact and cheap.

mod neural;
mod tabular;

pub use neural::NeuralPolicy;
pub use tabular::TabularPolicy;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::numerics::{
    log_softmax, read_checkpoint_str, write_checkpoint_str, Graph, NodeId, Tensor,
};
use crate::{Error, Result};

/// Token vocabulary. Desk scale keeps it between 2 and 64 symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if !(2..=64).contains(&size) {
            return Err(Error::InvalidArgument(format!("vocab size {size} outside [2, 64]")));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// A prompt id plus a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequence {
    pub prompt: usize,
    pub tokens: Vec<usize>,
}

impl Sequence {
    pub fn new(prompt: usize, tokens: Vec<usize>) -> Self {
        Sequence { prompt, tokens }
    }
}

/// Shared policy interface. `logits` is the pure evaluation path;
/// `logits_node` is the differentiable path through a [`Graph`] whose leaves
/// were bound from the policy parameters. Both count as one model forward
/// pass per call.
pub trait Policy {
    fn vocab_size(&self) -> usize;
    fn num_prompts(&self) -> usize;
    fn max_len(&self) -> usize;

    fn params(&self) -> &BTreeMap<String, Tensor>;
    fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor>;

    /// Architecture descriptor, stable across clones; policies with equal
    /// descriptors have parameter-for-parameter compatible shapes.
    fn arch_descriptor(&self) -> String;

    fn logits(&self, prompt: usize, prefix: &[usize]) -> Result<Vec<f64>>;

    fn logits_node(
        &self,
        graph: &mut Graph,
        bound: &BTreeMap<String, NodeId>,
        prompt: usize,
        prefix: &[usize],
    ) -> Result<NodeId>;

    fn forward_count(&self) -> u64;
    fn reset_forward_count(&self);

    fn clone_policy(&self) -> Box<dyn Policy>;
}

pub(crate) fn validate_query(p: &dyn Policy, prompt: usize, prefix: &[usize]) -> Result<()> {
    if prompt >= p.num_prompts() {
        return Err(Error::InvalidArgument(format!(
            "unknown prompt id {prompt} (have {})",
            p.num_prompts()
        )));
    }
    if prefix.len() >= p.max_len() {
        return Err(Error::InvalidArgument(format!(
            "prefix length {} not below max_len {}",
            prefix.len(),
            p.max_len()
        )));
    }
    if let Some(&t) = prefix.iter().find(|&&t| t >= p.vocab_size()) {
        return Err(Error::InvalidArgument(format!(
            "token {t} out of vocab {}",
            p.vocab_size()
        )));
    }
    Ok(())
}

/// Sum over positions of the token log-probability under the policy.
pub fn seq_logprob(policy: &dyn Policy, seq: &Sequence) -> Result<f64> {
    if seq.tokens.is_empty() || seq.tokens.len() > policy.max_len() {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} outside [1, {}]",
            seq.tokens.len(),
            policy.max_len()
        )));
    }
    let mut total = 0.0;
    for i in 0..seq.tokens.len() {
        let logits = policy.logits(seq.prompt, &seq.tokens[..i])?;
        let lp = log_softmax(&logits)?;
        total += lp[seq.tokens[i]];
    }
    Ok(total)
}

/// Differentiable counterpart of [`seq_logprob`]. Also returns the raw
/// per-position logit nodes so callers can reuse their values.
pub fn seq_logprob_node(
    policy: &dyn Policy,
    graph: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    seq: &Sequence,
) -> Result<(NodeId, Vec<NodeId>)> {
    if seq.tokens.is_empty() || seq.tokens.len() > policy.max_len() {
        return Err(Error::InvalidArgument("bad sequence length".into()));
    }
    let mut terms = Vec::with_capacity(seq.tokens.len());
    let mut logit_nodes = Vec::with_capacity(seq.tokens.len());
    for i in 0..seq.tokens.len() {
        let logits = policy.logits_node(graph, bound, seq.prompt, &seq.tokens[..i])?;
        logit_nodes.push(logits);
        let lp = graph.log_softmax(logits)?;
        terms.push(graph.index(lp, seq.tokens[i])?);
    }
    Ok((graph.sum_scalars(&terms)?, logit_nodes))
}

/// Ancestral sampling from the temperature-scaled softmax, fixed length.
pub fn sample<R: Rng>(
    policy: &dyn Policy,
    prompt: usize,
    rng: &mut R,
    max_len: usize,
    temperature: f64,
) -> Result<Sequence> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let mut tokens = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let logits = policy.logits(prompt, &tokens)?;
        let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
        let lp = log_softmax(&scaled)?;
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut pick = lp.len() - 1;
        for (i, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                pick = i;
                break;
            }
        }
        tokens.push(pick);
    }
    Ok(Sequence::new(prompt, tokens))
}

/// Deep copy of a policy's parameters into a fresh policy.
pub fn clone_parameters(policy: &dyn Policy) -> Box<dyn Policy> {
    policy.clone_policy()
}

/// New policy with theta = alpha * theta_a + (1 - alpha) * theta_b.
pub fn merge_parameters(a: &dyn Policy, b: &dyn Policy, alpha: f64) -> Result<Box<dyn Policy>> {
    if a.arch_descriptor() != b.arch_descriptor() {
        return Err(Error::InvalidArgument(format!(
            "architecture mismatch: {} vs {}",
            a.arch_descriptor(),
            b.arch_descriptor()
        )));
    }
    let mut out = a.clone_policy();
    let bp = b.params();
    for (name, t) in out.params_mut().iter_mut() {
        let other = bp
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        if other.shape() != t.shape() {
            return Err(Error::InvalidArgument(format!("shape mismatch for {name}")));
        }
        for (x, y) in t.data_mut().iter_mut().zip(other.data()) {
            *x = alpha * *x + (1.0 - alpha) * y;
        }
    }
    Ok(out)
}

/// All token sequences of exactly length `n`, lexicographic order.
pub fn all_token_seqs(vocab_size: usize, n: usize) -> Vec<Vec<usize>> {
    let total = vocab_size.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut seq = vec![0usize; n];
        for slot in (0..n).rev() {
            seq[slot] = idx % vocab_size;
            idx /= vocab_size;
        }
        out.push(seq);
    }
    out
}

const POLICY_MAGIC: &str = "edpo-policy v1";

/// Policy checkpoint: architecture descriptor block on top of the numerics
/// checkpoint container.
pub fn save_policy(path: &Path, policy: &dyn Policy) -> Result<()> {
    let text = format!(
        "{POLICY_MAGIC}\narch {}\n{}",
        policy.arch_descriptor(),
        write_checkpoint_str(policy.params())
    );
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<Box<dyn Policy>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.splitn(3, '\n');
    let magic = lines.next().unwrap_or("");
    if magic != POLICY_MAGIC {
        return Err(Error::Parse { line: 1, msg: format!("bad policy magic: {magic:?}") });
    }
    let arch = lines
        .next()
        .and_then(|l| l.strip_prefix("arch "))
        .ok_or_else(|| Error::Parse { line: 2, msg: "missing arch descriptor".into() })?
        .to_string();
    let rest = lines.next().unwrap_or("");
    let params = read_checkpoint_str(rest)?;
    let mut policy = policy_from_descriptor(&arch)?;
    for (name, t) in policy.params_mut().iter_mut() {
        let loaded = params
            .get(name)
            .ok_or_else(|| Error::Parse { line: 3, msg: format!("missing tensor {name}") })?;
        if loaded.shape() != t.shape() {
            return Err(Error::Parse { line: 3, msg: format!("shape mismatch for {name}") });
        }
        *t = loaded.clone();
    }
    Ok(policy)
}

fn policy_from_descriptor(desc: &str) -> Result<Box<dyn Policy>> {
    let fields: BTreeMap<&str, &str> = desc
        .split_whitespace()
        .skip(1)
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let get = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse { line: 2, msg: format!("bad descriptor field {k}") })
    };
    match desc.split_whitespace().next() {
        Some("tabular") => Ok(Box::new(TabularPolicy::new(
            get("prompts")?,
            Vocab::new(get("vocab")?)?,
            get("len")?,
        )?)),
        Some("neural") => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            Ok(Box::new(NeuralPolicy::new(
                get("prompts")?,
                Vocab::new(get("vocab")?)?,
                get("len")?,
                get("dim")?,
                get("hidden")?,
                &mut rng,
            )?))
        }
        other => Err(Error::Parse { line: 2, msg: format!("unknown architecture {other:?}") }),
    }
}
