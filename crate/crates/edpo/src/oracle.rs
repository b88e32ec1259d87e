//! Ground-truth machinery: tabular reward specs, exact closed-form optimal
//! policies and their rescalings, Bradley-Terry preference sampling, and
//! dataset persistence.
//!
//! Response spaces are kept enumerable (fixed sequence length over a small
//! vocabulary) so every quantity here is exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::dpo::PreferenceTriplet;
use crate::numerics::{logsumexp, sigmoid};
use crate::policy::{all_token_seqs, sample, seq_logprob, Policy, Sequence};
use crate::{Error, Result};

/// Ground-truth reward over the finite prompt x sequence space. Either a
/// full per-sequence table or a per-position token table composed additively
/// (which keeps larger spaces expressive but cheap to specify).
#[derive(Debug, Clone)]
pub struct RewardSpec {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    kind: RewardKind,
}

#[derive(Debug, Clone)]
enum RewardKind {
    /// [prompt][sequence index in lexicographic order]
    PerSequence(Vec<Vec<f64>>),
    /// [prompt * seq_len * vocab + position * vocab + token], summed per position
    PerToken(Vec<f64>),
}

impl RewardSpec {
    pub fn per_sequence(
        num_prompts: usize,
        vocab_size: usize,
        seq_len: usize,
        table: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = vocab_size.pow(seq_len as u32);
        if table.len() != num_prompts || table.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidArgument("reward table does not cover the space".into()));
        }
        if table.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite reward".into()));
        }
        Ok(RewardSpec { num_prompts, vocab_size, seq_len, kind: RewardKind::PerSequence(table) })
    }

    pub fn per_token(
        num_prompts: usize,
        vocab_size: usize,
        seq_len: usize,
        table: Vec<f64>,
    ) -> Result<Self> {
        if table.len() != num_prompts * seq_len * vocab_size {
            return Err(Error::InvalidArgument("per-token reward table size mismatch".into()));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite reward".into()));
        }
        Ok(RewardSpec { num_prompts, vocab_size, seq_len, kind: RewardKind::PerToken(table) })
    }

    pub fn random_per_token<R: Rng>(
        num_prompts: usize,
        vocab_size: usize,
        seq_len: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let table = (0..num_prompts * seq_len * vocab_size)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        RewardSpec { num_prompts, vocab_size, seq_len, kind: RewardKind::PerToken(table) }
    }

    fn seq_index(&self, tokens: &[usize]) -> usize {
        let mut idx = 0;
        for &t in tokens {
            idx = idx * self.vocab_size + t;
        }
        idx
    }

    pub fn reward(&self, prompt: usize, tokens: &[usize]) -> Result<f64> {
        if prompt >= self.num_prompts
            || tokens.len() != self.seq_len
            || tokens.iter().any(|&t| t >= self.vocab_size)
        {
            return Err(Error::InvalidArgument("reward query outside the enumerated space".into()));
        }
        Ok(match &self.kind {
            RewardKind::PerSequence(table) => table[prompt][self.seq_index(tokens)],
            RewardKind::PerToken(table) => tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    table[prompt * self.seq_len * self.vocab_size + i * self.vocab_size + t]
                })
                .sum(),
        })
    }
}

/// Explicit probability table for one policy over the enumerated sequence
/// space, with the stored log-normalizer per prompt.
#[derive(Debug, Clone)]
pub struct ExactPolicy {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// [prompt][sequence index], sums to 1 per prompt.
    pub probs: Vec<Vec<f64>>,
    /// log Z per prompt, from the construction that produced the table.
    pub log_z: Vec<f64>,
}

impl ExactPolicy {
    pub fn prob(&self, prompt: usize, tokens: &[usize]) -> f64 {
        let mut idx = 0;
        for &t in tokens {
            idx = idx * self.vocab_size + t;
        }
        self.probs[prompt][idx]
    }

    /// Log-probability vector over single tokens; the exact logits used by
    /// the interpolation bridge. Requires a single-token space.
    pub fn single_token_logits(&self, prompt: usize) -> Result<Vec<f64>> {
        if self.seq_len != 1 {
            return Err(Error::InvalidArgument("single-token logits need seq_len 1".into()));
        }
        Ok(self.probs[prompt].iter().map(|p| p.ln()).collect())
    }

    /// Total variation distance to another exact policy, averaged over prompts.
    pub fn total_variation(&self, other: &ExactPolicy) -> f64 {
        let mut tv = 0.0;
        for (a, b) in self.probs.iter().zip(&other.probs) {
            tv += 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
        tv / self.num_prompts as f64
    }
}

/// Enumerates any policy into an exact probability table.
pub fn enumerate_policy(policy: &dyn Policy, seq_len: usize) -> Result<ExactPolicy> {
    let v = policy.vocab_size();
    let seqs = all_token_seqs(v, seq_len);
    let mut probs = Vec::with_capacity(policy.num_prompts());
    for prompt in 0..policy.num_prompts() {
        let row: Vec<f64> = seqs
            .iter()
            .map(|toks| Ok(seq_logprob(policy, &Sequence::new(prompt, toks.clone()))?.exp()))
            .collect::<Result<_>>()?;
        probs.push(row);
    }
    Ok(ExactPolicy {
        num_prompts: policy.num_prompts(),
        vocab_size: v,
        seq_len,
        log_z: vec![0.0; policy.num_prompts()],
        probs,
    })
}

/// pi*_beta = (1/Z) pi_ref exp(r*/beta), computed exactly in log space.
pub fn closed_form_policy(
    reward: &RewardSpec,
    reference: &dyn Policy,
    beta: f64,
) -> Result<ExactPolicy> {
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let seqs = all_token_seqs(reward.vocab_size, reward.seq_len);
    let mut probs = Vec::with_capacity(reward.num_prompts);
    let mut log_z = Vec::with_capacity(reward.num_prompts);
    for prompt in 0..reward.num_prompts {
        let log_w: Vec<f64> = seqs
            .iter()
            .map(|toks| {
                let lp = seq_logprob(reference, &Sequence::new(prompt, toks.clone()))?;
                Ok(lp + reward.reward(prompt, toks)? / beta)
            })
            .collect::<Result<_>>()?;
        let lse = logsumexp(&log_w);
        probs.push(log_w.iter().map(|w| (w - lse).exp()).collect());
        log_z.push(lse);
    }
    Ok(ExactPolicy {
        num_prompts: reward.num_prompts,
        vocab_size: reward.vocab_size,
        seq_len: reward.seq_len,
        probs,
        log_z,
    })
}

/// Geometric-mean rescaling: pi*_{beta/lambda} = (1/Z) pi*_beta^lambda
/// pi_ref^(1-lambda), renormalized exactly.
pub fn exact_rescaled_policy(
    optimal: &ExactPolicy,
    reference: &dyn Policy,
    lambda: f64,
) -> Result<ExactPolicy> {
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let seqs = all_token_seqs(optimal.vocab_size, optimal.seq_len);
    let mut probs = Vec::with_capacity(optimal.num_prompts);
    let mut log_z = Vec::with_capacity(optimal.num_prompts);
    for prompt in 0..optimal.num_prompts {
        let log_w: Vec<f64> = seqs
            .iter()
            .enumerate()
            .map(|(i, toks)| {
                let p_opt = optimal.probs[prompt][i];
                let lp_ref = seq_logprob(reference, &Sequence::new(prompt, toks.clone()))?;
                if p_opt <= 0.0 || !lp_ref.is_finite() {
                    return Err(Error::InvalidArgument(
                        "zero-probability support mismatch in rescaling".into(),
                    ));
                }
                Ok(lambda * p_opt.ln() + (1.0 - lambda) * lp_ref)
            })
            .collect::<Result<_>>()?;
        let lse = logsumexp(&log_w);
        probs.push(log_w.iter().map(|w| (w - lse).exp()).collect());
        log_z.push(lse);
    }
    Ok(ExactPolicy {
        num_prompts: optimal.num_prompts,
        vocab_size: optimal.vocab_size,
        seq_len: optimal.seq_len,
        probs,
        log_z,
    })
}

/// How a preference label is produced from the ground-truth reward gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Chosen is the higher-reward response, label 1.
    Hard,
    /// Label sigma(reward gap), chosen is the more-preferred response.
    Soft,
    /// A Bernoulli draw on sigma(reward gap) decides chosen (label noise).
    Sampled,
}

impl LabelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelMode::Hard => "hard",
            LabelMode::Soft => "soft",
            LabelMode::Sampled => "sampled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(LabelMode::Hard),
            "soft" => Ok(LabelMode::Soft),
            "sampled" => Ok(LabelMode::Sampled),
            other => Err(Error::Config(format!("unknown label mode {other:?}"))),
        }
    }
}

const PAIR_RETRIES: usize = 100;

/// Draws preference triplets under the Bradley-Terry model
/// P(a > b) = sigma(r*(a) - r*(b)), with responses from `sampler`.
/// Prompts cycle round-robin so every prompt is covered.
pub fn sample_preferences<R: Rng>(
    reward: &RewardSpec,
    sampler: &dyn Policy,
    n_pairs: usize,
    mode: LabelMode,
    rng: &mut R,
) -> Result<Vec<PreferenceTriplet>> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let prompt = i % reward.num_prompts;
        let a = sample(sampler, prompt, rng, reward.seq_len, 1.0)?;
        let mut b = sample(sampler, prompt, rng, reward.seq_len, 1.0)?;
        let mut tries = 0;
        while b.tokens == a.tokens {
            tries += 1;
            if tries > PAIR_RETRIES {
                return Err(Error::Runtime(format!(
                    "could not draw distinct responses for prompt {prompt} after {PAIR_RETRIES} retries"
                )));
            }
            b = sample(sampler, prompt, rng, reward.seq_len, 1.0)?;
        }
        out.push(label_pair(reward, prompt, a.tokens, b.tokens, mode, rng)?);
    }
    Ok(out)
}

fn label_pair<R: Rng>(
    reward: &RewardSpec,
    prompt: usize,
    a: Vec<usize>,
    b: Vec<usize>,
    mode: LabelMode,
    rng: &mut R,
) -> Result<PreferenceTriplet> {
    let ra = reward.reward(prompt, &a)?;
    let rb = reward.reward(prompt, &b)?;
    let p_a = sigmoid(ra - rb);
    match mode {
        LabelMode::Hard => {
            if ra >= rb {
                PreferenceTriplet::new(prompt, a, b, 1.0)
            } else {
                PreferenceTriplet::new(prompt, b, a, 1.0)
            }
        }
        LabelMode::Soft => {
            if p_a >= 0.5 {
                PreferenceTriplet::new(prompt, a, b, p_a)
            } else {
                PreferenceTriplet::new(prompt, b, a, 1.0 - p_a)
            }
        }
        LabelMode::Sampled => {
            if rng.random_range(0.0..1.0) < p_a {
                PreferenceTriplet::new(prompt, a, b, 1.0)
            } else {
                PreferenceTriplet::new(prompt, b, a, 1.0)
            }
        }
    }
}

/// All unordered response pairs per prompt, deterministically ordered.
/// Used for the exact DPO-convergence oracle, where exhaustive coverage with
/// soft labels makes the closed-form optimum the unique minimizer.
pub fn exhaustive_preferences(reward: &RewardSpec, mode: LabelMode) -> Result<Vec<PreferenceTriplet>> {
    let seqs = all_token_seqs(reward.vocab_size, reward.seq_len);
    let mut out = Vec::new();
    // Label noise makes no sense for the exhaustive oracle; treat sampled as soft.
    let mode = if mode == LabelMode::Sampled { LabelMode::Soft } else { mode };
    let mut dummy = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for prompt in 0..reward.num_prompts {
        for i in 0..seqs.len() {
            for j in (i + 1)..seqs.len() {
                out.push(label_pair(
                    reward,
                    prompt,
                    seqs[i].clone(),
                    seqs[j].clone(),
                    mode,
                    &mut dummy,
                )?);
            }
        }
    }
    Ok(out)
}

use rand::SeedableRng as _;

/// Preference dataset plus the space it lives in and per-triplet generator
/// metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub triplets: Vec<PreferenceTriplet>,
    pub meta: Vec<String>,
}

impl Dataset {
    pub fn new(
        num_prompts: usize,
        vocab_size: usize,
        seq_len: usize,
        triplets: Vec<PreferenceTriplet>,
        meta_tag: &str,
    ) -> Self {
        let meta = vec![meta_tag.to_string(); triplets.len()];
        Dataset { num_prompts, vocab_size, seq_len, triplets, meta }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

const DATASET_MAGIC: &str = "edpo-dataset v1";

/// Line-delimited text format, one triplet per line:
/// `prompt<TAB>chosen,csv<TAB>rejected,csv<TAB>label<TAB>meta`.
/// Round-trips bit-exactly.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, dataset_to_string(dataset))?;
    Ok(())
}

pub fn dataset_to_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{DATASET_MAGIC} prompts={} vocab={} len={}",
        dataset.num_prompts, dataset.vocab_size, dataset.seq_len
    )
    .unwrap();
    for (t, meta) in dataset.triplets.iter().zip(&dataset.meta) {
        let fmt = |toks: &[usize]| {
            toks.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
        };
        writeln!(out, "{}\t{}\t{}\t{}\t{}", t.prompt, fmt(&t.chosen), fmt(&t.rejected), t.label, meta)
            .unwrap();
    }
    out
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_string(&std::fs::read_to_string(path)?)
}

pub fn dataset_from_string(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty dataset file".into() })?;
    let rest = header
        .strip_prefix(DATASET_MAGIC)
        .ok_or_else(|| Error::Parse { line: 1, msg: format!("bad header: {header:?}") })?;
    let mut fields = std::collections::BTreeMap::new();
    for kv in rest.split_whitespace() {
        if let Some((k, v)) = kv.split_once('=') {
            fields.insert(k, v);
        }
    }
    let dim = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse { line: 1, msg: format!("missing header field {k}") })
    };
    let (num_prompts, vocab_size, seq_len) = (dim("prompts")?, dim("vocab")?, dim("len")?);

    let mut triplets = Vec::new();
    let mut meta = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(Error::Parse { line: lineno, msg: format!("expected 5 fields, got {}", parts.len()) });
        }
        let prompt: usize = parts[0]
            .parse()
            .map_err(|_| Error::Parse { line: lineno, msg: "bad prompt id".into() })?;
        if prompt >= num_prompts {
            return Err(Error::Parse { line: lineno, msg: format!("prompt {prompt} >= {num_prompts}") });
        }
        let toks = |s: &str| -> Result<Vec<usize>> {
            s.split(',')
                .map(|x| {
                    let t: usize = x
                        .parse()
                        .map_err(|_| Error::Parse { line: lineno, msg: format!("bad token {x:?}") })?;
                    if t >= vocab_size {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("token {t} >= vocab size {vocab_size}"),
                        });
                    }
                    Ok(t)
                })
                .collect()
        };
        let chosen = toks(parts[1])?;
        let rejected = toks(parts[2])?;
        if chosen.len() > seq_len || rejected.len() > seq_len {
            return Err(Error::Parse { line: lineno, msg: "sequence longer than declared len".into() });
        }
        let label: f64 = parts[3]
            .parse()
            .map_err(|_| Error::Parse { line: lineno, msg: "bad label".into() })?;
        triplets.push(
            PreferenceTriplet::new(prompt, chosen, rejected, label)
                .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?,
        );
        meta.push(parts[4].to_string());
    }
    Ok(Dataset { num_prompts, vocab_size, seq_len, triplets, meta })
}
