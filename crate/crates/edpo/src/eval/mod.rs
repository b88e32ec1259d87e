//! Evaluation and analysis: forward KL (exact enumeration and Monte Carlo),
//! ground-truth-judged win rate, margin-by-monotonicity analysis, epsilon
//! upper-bound sweeps, and Pareto exports. Every artifact embeds the config
//! hash and seed of the run it describes.

use std::fmt::Write as _;

use rand::Rng;

use crate::dpo::{implicit_reward_margin, logit_z, margin_gamma, PreferenceTriplet};
use crate::epsilon::{epsilon_upper_bound, perturbed_z, select_beta};
use crate::oracle::{Dataset, RewardSpec};
use crate::policy::{all_token_seqs, sample, seq_logprob, Policy, Sequence};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlMode {
    /// Full enumeration of the sequence space; exact and non-negative.
    Exact,
    /// Seeded Monte Carlo over draws from the reference.
    Mc,
}

/// Forward KL D(pi_ref || pi_theta), averaged over prompts. Exact mode
/// enumerates every sequence; a policy assigning vanishing probability where
/// the reference does not yields +infinity, reported explicitly rather than
/// as an error.
pub fn forward_kl<R: Rng>(
    reference: &dyn Policy,
    policy: &dyn Policy,
    seq_len: usize,
    mode: KlMode,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if reference.vocab_size() != policy.vocab_size()
        || reference.num_prompts() != policy.num_prompts()
    {
        return Err(Error::InvalidArgument("policies live on different spaces".into()));
    }
    let prompts = reference.num_prompts();
    match mode {
        KlMode::Exact => {
            let seqs = all_token_seqs(reference.vocab_size(), seq_len);
            let mut total = 0.0;
            for prompt in 0..prompts {
                for toks in &seqs {
                    let seq = Sequence::new(prompt, toks.clone());
                    let lp_ref = seq_logprob(reference, &seq)?;
                    let lp_pol = seq_logprob(policy, &seq)?;
                    let p_ref = lp_ref.exp();
                    if p_ref == 0.0 {
                        continue;
                    }
                    if lp_pol == f64::NEG_INFINITY || lp_pol.exp() == 0.0 {
                        return Ok(f64::INFINITY);
                    }
                    total += p_ref * (lp_ref - lp_pol);
                }
            }
            Ok(total / prompts as f64)
        }
        KlMode::Mc => {
            if n_samples == 0 {
                return Err(Error::InvalidArgument("mc mode needs n_samples >= 1".into()));
            }
            let mut total = 0.0;
            for i in 0..n_samples {
                let prompt = i % prompts;
                let seq = sample(reference, prompt, rng, seq_len, 1.0)?;
                total += seq_logprob(reference, &seq)? - seq_logprob(policy, &seq)?;
            }
            Ok(total / n_samples as f64)
        }
    }
}

/// Win rate of `policy` against fixed baseline responses, judged by the
/// ground-truth reward. One policy sample per baseline response at the same
/// prompt; exact reward ties count one half.
pub fn win_rate<R: Rng>(
    policy: &dyn Policy,
    baseline: &[Sequence],
    reward: &RewardSpec,
    rng: &mut R,
) -> Result<f64> {
    if baseline.is_empty() {
        return Err(Error::InvalidArgument("win rate needs at least one baseline response".into()));
    }
    let mut score = 0.0;
    for b in baseline {
        let ours = sample(policy, b.prompt, rng, reward.seq_len, 1.0)?;
        let r_ours = reward.reward(ours.prompt, &ours.tokens)?;
        let r_base = reward.reward(b.prompt, &b.tokens)?;
        score += if r_ours > r_base {
            1.0
        } else if r_ours == r_base {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / baseline.len() as f64)
}

/// Draws `n` baseline responses by cycling prompts and sampling the given
/// policy (typically the reference).
pub fn sample_baseline_responses<R: Rng>(
    policy: &dyn Policy,
    seq_len: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Sequence>> {
    (0..n).map(|i| sample(policy, i % policy.num_prompts(), rng, seq_len, 1.0)).collect()
}

/// Summary statistics of implicit reward margins for one monotonicity class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub count: usize,
    pub mean: f64,
    /// 95% normal-approximation interval: mean +- 1.96 * sd / sqrt(n).
    pub ci_low: f64,
    pub ci_high: f64,
}

fn class_stats(values: &[f64]) -> Option<ClassStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let half = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Some(ClassStats { count: values.len(), mean, ci_low: mean - half, ci_high: mean + half })
}

/// Dataset partitioned by the per-instance coefficient direction, with
/// implicit-reward-margin statistics per class. Empty classes are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub minus: Option<ClassStats>,
    pub zero: Option<ClassStats>,
    pub plus: Option<ClassStats>,
}

impl MonotonicityReport {
    pub fn total_count(&self) -> usize {
        [self.minus, self.zero, self.plus].iter().flatten().map(|c| c.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,count,mean_margin,ci_low,ci_high\n");
        for (name, class) in [("-1", self.minus), ("0", self.zero), ("1", self.plus)] {
            if let Some(c) = class {
                writeln!(out, "{},{},{},{},{}", name, c.count, c.mean, c.ci_low, c.ci_high)
                    .unwrap();
            }
        }
        out
    }
}

/// Partitions the dataset by the selection direction at perturbation `eps`
/// and reports implicit reward margins (at coefficient `beta`) per class.
pub fn margin_by_monotonicity(
    policy: &dyn Policy,
    reference: &dyn Policy,
    triplets: &[PreferenceTriplet],
    eps: f64,
    beta: f64,
) -> Result<MonotonicityReport> {
    let mut classes: [Vec<f64>; 3] = [vec![], vec![], vec![]];
    for t in triplets {
        let est = perturbed_z(policy, reference, t, eps)?;
        let d = select_beta(&est, beta, eps)?.direction;
        let margin =
            implicit_reward_margin(logit_z(policy, t)?, margin_gamma(reference, t)?, beta);
        classes[(d + 1) as usize].push(margin);
    }
    Ok(MonotonicityReport {
        minus: class_stats(&classes[0]),
        zero: class_stats(&classes[1]),
        plus: class_stats(&classes[2]),
    })
}

/// Mean selection-stability bounds over a dataset: for each instance, the
/// largest sampled epsilon preserving the smallest-epsilon direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonBoundSummary {
    pub n_down: usize,
    pub n_up: usize,
    pub n_neither: usize,
    pub mean_down: Option<f64>,
    pub mean_up: Option<f64>,
}

pub fn epsilon_bound_summary(
    policy: &dyn Policy,
    reference: &dyn Policy,
    triplets: &[PreferenceTriplet],
    eps_range: (f64, f64),
    n_points: usize,
) -> Result<EpsilonBoundSummary> {
    let mut down = Vec::new();
    let mut up = Vec::new();
    let mut neither = 0usize;
    for t in triplets {
        let (d, u) = epsilon_upper_bound(policy, reference, t, eps_range, n_points)?;
        match (d, u) {
            (Some(v), _) => down.push(v),
            (_, Some(v)) => up.push(v),
            (None, None) => neither += 1,
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EpsilonBoundSummary {
        n_down: down.len(),
        n_up: up.len(),
        n_neither: neither,
        mean_down: mean(&down),
        mean_up: mean(&up),
    })
}

/// One run's position in the KL / win-rate plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub method: String,
    pub beta0: f64,
    pub eps: f64,
    pub seed: u64,
    pub kl: f64,
    pub win_rate: f64,
}

/// True when `b` is at least as good on both axes (lower KL, higher win
/// rate) and strictly better on one.
fn dominates(b: &ParetoPoint, a: &ParetoPoint) -> bool {
    b.kl <= a.kl && b.win_rate >= a.win_rate && (b.kl < a.kl || b.win_rate > a.win_rate)
}

pub fn dominated_flags(points: &[ParetoPoint]) -> Vec<bool> {
    points
        .iter()
        .map(|a| points.iter().any(|b| !std::ptr::eq(a, b) && dominates(b, a)))
        .collect()
}

/// CSV + minimal SVG scatter of the KL / win-rate plane. Points are sorted
/// before writing so aggregation order never shows in the output.
pub fn pareto_export(points: &[ParetoPoint]) -> Result<(String, String)> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("pareto export needs at least one point".into()));
    }
    if points.iter().any(|p| !p.kl.is_finite() || !p.win_rate.is_finite()) {
        return Err(Error::InvalidArgument("non-finite pareto point".into()));
    }
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.method, a.seed)
            .cmp(&(&b.method, b.seed))
            .then(a.beta0.total_cmp(&b.beta0))
            .then(a.eps.total_cmp(&b.eps))
    });
    let owned: Vec<ParetoPoint> = sorted.iter().map(|p| (*p).clone()).collect();
    let flags = dominated_flags(&owned);

    let mut csv = String::from("method,beta0,eps,seed,kl,win_rate,dominated\n");
    for (p, dominated) in owned.iter().zip(&flags) {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            p.method, p.beta0, p.eps, p.seed, p.kl, p.win_rate, dominated
        )
        .unwrap();
    }
    Ok((csv, pareto_svg(&owned, &flags)))
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn pareto_svg(points: &[ParetoPoint], flags: &[bool]) -> String {
    let min_max = |f: fn(&ParetoPoint) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (kl_lo, kl_hi) = min_max(|p| p.kl);
    let (wr_lo, wr_hi) = min_max(|p| p.win_rate);
    let x = |kl: f64| MARGIN + (kl - kl_lo) / (kl_hi - kl_lo) * (SVG_W - 2.0 * MARGIN);
    let y = |wr: f64| SVG_H - MARGIN - (wr - wr_lo) / (wr_hi - wr_lo) * (SVG_H - 2.0 * MARGIN);

    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];
    let mut methods: Vec<&str> = points.iter().map(|p| p.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{yb}\" stroke=\"black\"/>\n\
         <text x=\"{xc}\" y=\"{ylab}\" text-anchor=\"middle\" font-size=\"12\">forward KL</text>\n\
         <text x=\"14\" y=\"{yc}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {yc})\">win rate</text>\n",
        m = MARGIN,
        yb = SVG_H - MARGIN,
        xr = SVG_W - MARGIN,
        xc = SVG_W / 2.0,
        ylab = SVG_H - 12.0,
        yc = SVG_H / 2.0,
    );
    for (i, name) in methods.iter().enumerate() {
        let color = palette[i % palette.len()];
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            SVG_W - MARGIN - 90.0,
            MARGIN + 14.0 * i as f64,
        )
        .unwrap();
    }
    for (p, dominated) in points.iter().zip(flags) {
        let idx = methods.iter().position(|m| *m == p.method).unwrap();
        let color = palette[idx % palette.len()];
        let opacity = if *dominated { 0.35 } else { 1.0 };
        writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"{opacity}\"/>",
            x(p.kl),
            y(p.win_rate),
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Everything a single finished run reports, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub config_hash: String,
    pub seed: u64,
    pub beta_final: f64,
    pub beta_mean: f64,
    pub forward_kl_exact: f64,
    pub forward_kl_mc: f64,
    pub win_rate: f64,
    pub margin_mean: f64,
    pub frac_minus: f64,
    pub frac_zero: f64,
    pub frac_plus: f64,
    /// Non-empty when the method carries approximation caveats.
    pub note: String,
}

pub const EVAL_HEADER: &str = "method,config_hash,seed,beta_final,beta_mean,forward_kl_exact,forward_kl_mc,win_rate,margin_mean,frac_minus,frac_zero,frac_plus,note";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{EVAL_HEADER}\n{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.method,
            self.config_hash,
            self.seed,
            self.beta_final,
            self.beta_mean,
            self.forward_kl_exact,
            self.forward_kl_mc,
            self.win_rate,
            self.margin_mean,
            self.frac_minus,
            self.frac_zero,
            self.frac_plus,
            self.note,
        )
    }
}

/// Rebuilds the reward table a config describes; data generation, training
/// analyses, and the win-rate judge all share it.
pub fn reward_from_config(config: &crate::config::ExperimentConfig) -> RewardSpec {
    use rand::SeedableRng;
    let m = &config.model;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.data.reward_seed);
    RewardSpec::random_per_token(m.prompts, m.vocab, m.seq_len, config.data.reward_scale, &mut rng)
}

/// Regenerates the dataset a config describes, deterministically.
pub fn dataset_from_config(config: &crate::config::ExperimentConfig) -> Result<Dataset> {
    use rand::SeedableRng;
    let reward = reward_from_config(config);
    let sampler = crate::trainer::build_policy(&config.model)?;
    let mode = crate::oracle::LabelMode::parse(&config.data.label_mode)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.data.data_seed);
    let triplets =
        crate::oracle::sample_preferences(&reward, sampler.as_ref(), config.data.n_pairs, mode, &mut rng)?;
    Ok(Dataset::new(
        config.model.prompts,
        config.model.vocab,
        config.model.seq_len,
        triplets,
        &format!("gen={};reward_seed={};data_seed={}", config.data.label_mode, config.data.reward_seed, config.data.data_seed),
    ))
}
