//! End-to-end training loop: batch sampling, per-instance coefficient
//! decisions, loss and optimizer step, reference-policy management, and
//! metrics/checkpoint emission. One run is single-threaded and fully
//! deterministic given (config, seed, dataset).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{
    betadpo_batch_beta, trdpo_maybe_update, BetaDpoConfig, BetaDpoState, TrDpoConfig,
};
use crate::config::{ExperimentConfig, Method, ModelConfig, ModelKind};
use crate::dpo::{build_graph_instance, dpo_loss_node, dpo_loss_value, PreferenceTriplet, RefCache};
use crate::epsilon::{perturbed_z_cached, BetaController};
use crate::numerics::{AdamConfig, Graph, Optimizer};
use crate::oracle::Dataset;
use crate::policy::{save_policy, NeuralPolicy, Policy, TabularPolicy, Vocab};
use crate::{Error, Result};

/// Per-step training record; one CSV row per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Batch-level coefficient after this step's update.
    pub beta: f64,
    /// Mean implicit reward margin over the batch, using each instance's
    /// selected coefficient.
    pub margin_mean: f64,
    pub frac_minus: f64,
    pub frac_zero: f64,
    pub frac_plus: f64,
    pub fwd_passes_policy: u64,
    pub fwd_passes_ref: u64,
    /// Zero unless timing mode is enabled; wall-clock output would break
    /// byte-identical reruns.
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str =
    "step,loss,beta,margin_mean,frac_minus,frac_zero,frac_plus,fwd_passes_policy,fwd_passes_ref,wall_ms";

pub fn metrics_to_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.loss,
            r.beta,
            r.margin_mean,
            r.frac_minus,
            r.frac_zero,
            r.frac_plus,
            r.fwd_passes_policy,
            r.fwd_passes_ref,
            r.wall_ms
        ));
    }
    out
}

/// Parses a metrics CSV produced by [`metrics_to_csv`].
pub fn metrics_from_csv(text: &str) -> Result<Vec<StepMetrics>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: "bad metrics header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        let f = |idx: usize| -> Result<f64> {
            fields[idx]
                .parse()
                .map_err(|_| Error::Parse { line: lineno, msg: format!("bad number {:?}", fields[idx]) })
        };
        let u = |idx: usize| -> Result<u64> {
            fields[idx]
                .parse()
                .map_err(|_| Error::Parse { line: lineno, msg: format!("bad count {:?}", fields[idx]) })
        };
        rows.push(StepMetrics {
            step: u(0)?,
            loss: f(1)?,
            beta: f(2)?,
            margin_mean: f(3)?,
            frac_minus: f(4)?,
            frac_zero: f(5)?,
            frac_plus: f(6)?,
            fwd_passes_policy: u(7)?,
            fwd_passes_ref: u(8)?,
            wall_ms: f(9)?,
        });
    }
    Ok(rows)
}

/// Per-method mutable state carried across steps.
#[derive(Debug)]
pub enum MethodState {
    Dpo { beta0: f64 },
    EpsilonDpo { controller: BetaController },
    TrDpo { beta0: f64, config: TrDpoConfig },
    BetaDpo { config: BetaDpoConfig, state: BetaDpoState },
}

impl MethodState {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let beta0 = config.train.beta0;
        Ok(match config.train.method {
            Method::Dpo => MethodState::Dpo { beta0 },
            Method::EpsilonDpo => {
                let (eps_c, eps_s) = config.epsilon_pair()?;
                MethodState::EpsilonDpo { controller: BetaController::new(beta0, eps_c, eps_s)? }
            }
            Method::TrDpo => MethodState::TrDpo { beta0, config: config.trdpo_config()? },
            Method::BetaDpo => MethodState::BetaDpo {
                config: config.betadpo_config()?,
                state: BetaDpoState::default(),
            },
        })
    }

    pub fn controller(&self) -> Option<&BetaController> {
        match self {
            MethodState::EpsilonDpo { controller } => Some(controller),
            _ => None,
        }
    }
}

/// One optimizer step over a batch. Logits are computed once per response
/// and cached; the perturbation criterion consumes the cache only, so the
/// forward-pass counters match vanilla DPO by construction.
pub fn train_step(
    batch: &[PreferenceTriplet],
    policy: &mut Box<dyn Policy>,
    reference: &mut Box<dyn Policy>,
    state: &mut MethodState,
    optimizer: &mut Optimizer,
    lr_scale: f64,
    step: u64,
    timing: bool,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let t0 = timing.then(Instant::now);
    policy.reset_forward_count();
    reference.reset_forward_count();

    let mut graph = Graph::new();
    let bound: BTreeMap<String, _> =
        policy.params().iter().map(|(k, t)| (k.clone(), graph.leaf(t))).collect();

    let mut instances = Vec::with_capacity(batch.len());
    let mut ref_caches = Vec::with_capacity(batch.len());
    for triplet in batch {
        instances.push(build_graph_instance(policy.as_ref(), &mut graph, &bound, triplet)?);
        ref_caches.push(RefCache::build(reference.as_ref(), triplet)?);
    }

    // Per-instance coefficients and, for the adaptive method, decisions.
    let mut betas = Vec::with_capacity(batch.len());
    let mut decisions = Vec::new();
    match state {
        MethodState::Dpo { beta0 } | MethodState::TrDpo { beta0, .. } => {
            betas.resize(batch.len(), *beta0);
        }
        MethodState::EpsilonDpo { controller } => {
            for ((inst, refs), triplet) in instances.iter().zip(&ref_caches).zip(batch) {
                let est = perturbed_z_cached(
                    &inst.policy_chosen,
                    &inst.policy_rejected,
                    refs,
                    triplet,
                    inst.z,
                    controller.eps_c,
                )?;
                let d = controller.decide(&est)?;
                betas.push(d.beta_tilde);
                decisions.push(d);
            }
        }
        MethodState::BetaDpo { config, state } => {
            // Margins measured at the base coefficient feed the batch-level
            // selection; the selected beta then scales every instance.
            let margins: Vec<f64> = instances
                .iter()
                .zip(&ref_caches)
                .map(|(inst, refs)| config.beta0 * (inst.z - refs.gamma))
                .collect();
            let beta = betadpo_batch_beta(state, config, &margins)?;
            betas.resize(batch.len(), beta);
        }
    }

    // Mean loss over the batch, each instance at its own coefficient.
    let mut loss_nodes = Vec::with_capacity(batch.len());
    for ((inst, refs), (triplet, beta)) in
        instances.iter().zip(&ref_caches).zip(batch.iter().zip(&betas))
    {
        loss_nodes.push(dpo_loss_node(&mut graph, inst.z_node, refs.gamma, *beta, triplet.label)?);
    }
    let total = graph.sum_scalars(&loss_nodes)?;
    let loss_node = graph.scale(total, 1.0 / batch.len() as f64);
    let loss = graph.scalar_value(loss_node);
    if !loss.is_finite() {
        let culprit = instances
            .iter()
            .zip(&ref_caches)
            .zip(&betas)
            .enumerate()
            .find(|(_, ((inst, refs), beta))| {
                !dpo_loss_value(inst.z, refs.gamma, **beta, 1.0).is_ok_and(f64::is_finite)
            });
        let detail = culprit
            .map(|(i, ((inst, refs), beta))| {
                format!("instance {i}: z {} gamma {} beta {beta}", inst.z, refs.gamma)
            })
            .unwrap_or_else(|| "no single instance isolates the failure".into());
        return Err(Error::Runtime(format!("non-finite loss at step {step}; {detail}")));
    }

    graph.backward(loss_node)?;
    {
        let grads: Vec<(String, Vec<f64>)> =
            bound.iter().map(|(k, &n)| (k.clone(), graph.grad(n).to_vec())).collect();
        let params = policy.params_mut();
        for (name, g) in &grads {
            let t = params
                .get_mut(name)
                .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))?;
            t.zero_grad();
            t.accumulate_grad(g)?;
        }
        let mut named: Vec<(String, &mut crate::numerics::Tensor)> =
            params.iter_mut().map(|(k, t)| (k.clone(), t)).collect();
        optimizer.step(&mut named, lr_scale)?;
    }

    // Margins reported with the coefficients actually used in the loss.
    let margin_mean = instances
        .iter()
        .zip(&ref_caches)
        .zip(&betas)
        .map(|((inst, refs), beta)| beta * (inst.z - refs.gamma))
        .sum::<f64>()
        / batch.len() as f64;

    let (beta_out, fracs) = match state {
        MethodState::Dpo { beta0 } => (*beta0, [0.0, 1.0, 0.0]),
        MethodState::EpsilonDpo { controller } => {
            let beta = controller.update_beta(&decisions)?;
            let n = decisions.len() as f64;
            let count = |d: i8| decisions.iter().filter(|x| x.direction == d).count() as f64 / n;
            (beta, [count(-1), count(0), count(1)])
        }
        MethodState::TrDpo { beta0, config } => {
            trdpo_maybe_update(policy.as_ref(), reference, step, config)?;
            (*beta0, [0.0, 1.0, 0.0])
        }
        MethodState::BetaDpo { .. } => (betas[0], [0.0, 1.0, 0.0]),
    };

    Ok(StepMetrics {
        step,
        loss,
        beta: beta_out,
        margin_mean,
        frac_minus: fracs[0],
        frac_zero: fracs[1],
        frac_plus: fracs[2],
        fwd_passes_policy: policy.forward_count(),
        fwd_passes_ref: reference.forward_count(),
        wall_ms: t0.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3),
    })
}

/// Builds the initial policy from the model section. Tabular starts uniform;
/// neural draws a seeded random init. The reference is always a frozen clone
/// of the initial policy.
pub fn build_policy(model: &ModelConfig) -> Result<Box<dyn Policy>> {
    let vocab = Vocab::new(model.vocab)?;
    Ok(match model.kind {
        ModelKind::Tabular => Box::new(TabularPolicy::new(model.prompts, vocab, model.seq_len)?),
        ModelKind::Neural => {
            let embed = model
                .embed_dim
                .ok_or_else(|| Error::Config("neural model needs embed_dim".into()))?;
            let hidden =
                model.hidden.ok_or_else(|| Error::Config("neural model needs hidden".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(model.init_seed);
            Box::new(NeuralPolicy::new(model.prompts, vocab, model.seq_len, embed, hidden, &mut rng)?)
        }
    })
}

/// Cosine learning-rate schedule with linear warm-up over the first
/// `warmup_ratio` of total steps. Returns a multiplier in (0, 1].
pub fn lr_schedule(step: u64, total_steps: u64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as u64;
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return 1.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Everything a finished run hands back: metrics, the trained policy, the
/// final reference, and (for the adaptive method) the coefficient controller
/// with its occurrence counters.
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub policy: Box<dyn Policy>,
    pub reference: Box<dyn Policy>,
    pub state: MethodState,
}

/// Full training run: seeded shuffle per epoch, cosine schedule, optional
/// checkpoints at the configured cadence (fractions of an epoch included),
/// and a metrics row per step. When `out_dir` is given, writes
/// `metrics.csv` and `checkpoints/step_<n>.ckpt` plus `final.ckpt`.
pub fn run_training(
    config: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if dataset.num_prompts > config.model.prompts
        || dataset.vocab_size != config.model.vocab
        || dataset.seq_len > config.model.seq_len
    {
        return Err(Error::Config(format!(
            "dataset space (prompts {}, vocab {}, len {}) does not fit the model (prompts {}, vocab {}, len {})",
            dataset.num_prompts,
            dataset.vocab_size,
            dataset.seq_len,
            config.model.prompts,
            config.model.vocab,
            config.model.seq_len
        )));
    }

    let mut policy = build_policy(&config.model)?;
    let mut reference = policy.clone_policy();
    let mut state = MethodState::from_config(config)?;
    let mut optimizer = Optimizer::new(AdamConfig {
        lr: config.train.learning_rate,
        ..AdamConfig::default()
    })?;

    let n = dataset.len();
    let b = config.train.batch_size;
    let steps_per_epoch = n.div_ceil(b) as u64;
    let total_steps = steps_per_epoch * config.train.epochs as u64;
    let ckpt_every =
        ((config.train.checkpoint_every * steps_per_epoch as f64).round() as u64).max(1);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(total_steps as usize);
    let mut step = 0u64;
    for _epoch in 0..config.train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(b) {
            step += 1;
            let batch: Vec<PreferenceTriplet> =
                chunk.iter().map(|&i| dataset.triplets[i].clone()).collect();
            let scale = lr_schedule(step - 1, total_steps, config.train.warmup_ratio);
            let row = train_step(
                &batch,
                &mut policy,
                &mut reference,
                &mut state,
                &mut optimizer,
                scale,
                step,
                config.train.timing,
            )?;
            metrics.push(row);
            if let Some(dir) = out_dir {
                if step % ckpt_every == 0 {
                    save_policy(&dir.join("checkpoints").join(format!("step_{step}.ckpt")), policy.as_ref())?;
                }
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), metrics_to_csv(&metrics))?;
        save_policy(&dir.join("checkpoints").join("final.ckpt"), policy.as_ref())?;
    }

    Ok(TrainOutcome { metrics, policy, reference, state })
}
