//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see them all). Tolerances are
//! pinned in code; a failing criterion fails its test.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use edpo::config::{ExperimentConfig, Method};
use edpo::dpo::{
    build_graph_instance, dpo_loss_node, dpo_loss_value, logit_z, margin_gamma, PreferenceTriplet,
    RefCache,
};
use edpo::epsilon::{
    estimated_perturbed_logprob, select_beta, BetaDecision, PerturbSign, PerturbedEstimate,
};
use edpo::eval::{
    dataset_from_config, dominated_flags, forward_kl, margin_by_monotonicity, pareto_export,
    reward_from_config, sample_baseline_responses, win_rate, KlMode, ParetoPoint,
};
use edpo::numerics::Graph;
use edpo::oracle::{
    closed_form_policy, enumerate_policy, exact_rescaled_policy, exhaustive_preferences, Dataset,
    LabelMode, RewardSpec,
};
use edpo::policy::{seq_logprob, Policy, Sequence, TabularPolicy, Vocab};
use edpo::trainer::{build_policy, metrics_to_csv, run_training};

fn report(criterion: &str, pass: bool, detail: &str) -> bool {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {status} — {detail}");
    pass
}

fn benchmark_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/benchmark.toml");
    ExperimentConfig::from_path(&path).expect("bundled benchmark config parses")
}

fn neural_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/benchmark-neural.toml");
    ExperimentConfig::from_path(&path).expect("bundled neural config parses")
}

fn random_tabular(prompts: usize, vocab: usize, len: usize, rng: &mut ChaCha8Rng) -> TabularPolicy {
    let mut p = TabularPolicy::new(prompts, Vocab::new(vocab).unwrap(), len).unwrap();
    for v in p.params_mut().get_mut("table").unwrap().data_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    p
}

/// Criterion 1: single-token perturbed log-prob estimates built from the
/// exact optimal policy's logits reproduce the closed form at the rescaled
/// coefficient within 1e-10, across 20 random reward specs with |V| <= 16.
#[test]
fn acceptance_1_interpolation_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let vocab = rng.random_range(2..=16);
        let reference = random_tabular(1, vocab, 1, &mut rng);
        let table: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let reward = RewardSpec::per_sequence(1, vocab, 1, vec![table]).unwrap();
        let beta = rng.random_range(0.02..0.5);
        let eps = rng.random_range(0.003..0.05);

        let optimal = closed_form_policy(&reward, &reference, beta).unwrap();
        let f_theta = optimal.single_token_logits(0).unwrap();
        let f_ref = reference.logits(0, &[]).unwrap();
        for (sign, lambda) in [(PerturbSign::Minus, 1.0 + eps), (PerturbSign::Plus, 1.0 - eps)] {
            let target = closed_form_policy(&reward, &reference, beta / lambda).unwrap();
            for y in 0..vocab {
                let est = estimated_perturbed_logprob(
                    std::slice::from_ref(&f_theta),
                    std::slice::from_ref(&f_ref),
                    &[y],
                    eps,
                    sign,
                )
                .unwrap();
                worst = worst.max((est - target.prob(0, &[y]).ln()).abs());
            }
        }
    }
    let pass = worst <= 1e-10 && start.elapsed().as_secs_f64() < 5.0;
    assert!(report(
        "1 (interpolation exactness)",
        pass,
        &format!("max |error| {worst:.3e} (tol 1e-10), {:.2}s", start.elapsed().as_secs_f64())
    ));
}

/// Criterion 2: geometric-mean rescaling equals the closed form at
/// beta/lambda within 1e-12 over 50 random (reward, beta, lambda) draws.
#[test]
fn acceptance_2_rescaling_oracle_consistency() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let vocab = rng.random_range(2..=4);
        let len = rng.random_range(1..=2);
        let reference = random_tabular(1, vocab, len, &mut rng);
        let reward = RewardSpec::random_per_token(1, vocab, len, 1.5, &mut rng);
        let beta = rng.random_range(0.02..0.5);
        let lambda = rng.random_range(0.4..2.5);
        let optimal = closed_form_policy(&reward, &reference, beta).unwrap();
        let rescaled = exact_rescaled_policy(&optimal, &reference, lambda).unwrap();
        let direct = closed_form_policy(&reward, &reference, beta / lambda).unwrap();
        worst = worst.max(rescaled.total_variation(&direct));
    }
    let pass = worst <= 1e-12 && start.elapsed().as_secs_f64() < 5.0;
    assert!(report(
        "2 (rescaling oracle)",
        pass,
        &format!("max TV {worst:.3e} (tol 1e-12), {:.2}s", start.elapsed().as_secs_f64())
    ));
}

/// Criterion 3: reverse-mode gradient of the preference loss matches central
/// finite differences (step 1e-5) with relative error <= 1e-4 on 100 random
/// small instances.
#[test]
fn acceptance_3_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let vocab = rng.random_range(2..=4);
        let len = rng.random_range(1..=2);
        let mut policy = random_tabular(1, vocab, len, &mut rng);
        let reference = random_tabular(1, vocab, len, &mut rng);
        let beta = rng.random_range(0.02..0.5);
        let label = if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { rng.random_range(0.5..1.0) };
        let n = rng.random_range(1..=len);
        let chosen: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let mut rejected: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        while rejected == chosen {
            rejected = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        }
        let triplet = PreferenceTriplet::new(0, chosen, rejected, label).unwrap();
        let gamma = margin_gamma(&reference, &triplet).unwrap();

        // Reverse-mode gradient of the scalar loss w.r.t. the logit table.
        let mut graph = Graph::new();
        let bound: BTreeMap<String, _> =
            policy.params().iter().map(|(k, t)| (k.clone(), graph.leaf(t))).collect();
        let inst = build_graph_instance(&policy, &mut graph, &bound, &triplet).unwrap();
        let loss = dpo_loss_node(&mut graph, inst.z_node, gamma, beta, label).unwrap();
        graph.backward(loss).unwrap();
        let autodiff = graph.grad(bound["table"]).to_vec();

        // Central finite differences through the full loss computation.
        let h = 1e-5;
        let mut fd = vec![0.0; autodiff.len()];
        for i in 0..fd.len() {
            let mut eval = |delta: f64| {
                policy.params_mut().get_mut("table").unwrap().data_mut()[i] += delta;
                let z = logit_z(&policy, &triplet).unwrap();
                policy.params_mut().get_mut("table").unwrap().data_mut()[i] -= delta;
                dpo_loss_value(z, gamma, beta, label).unwrap()
            };
            fd[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff: f64 = autodiff.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff / scale);
    }
    let pass = worst <= 1e-4 && start.elapsed().as_secs_f64() < 30.0;
    assert!(report(
        "3 (gradient vs finite differences)",
        pass,
        &format!("max relative error {worst:.3e} (tol 1e-4), {:.2}s", start.elapsed().as_secs_f64())
    ));
}

/// Criterion 4: on a 4-arm single-token bandit with exhaustive soft labels,
/// training converges to the closed-form optimum within total variation
/// 1e-3 at beta in {0.05, 0.1}.
#[test]
fn acceptance_4_dpo_optimum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let table: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let reward = RewardSpec::per_sequence(1, 4, 1, vec![table]).unwrap();
    let triplets = exhaustive_preferences(&reward, LabelMode::Soft).unwrap();
    let dataset = Dataset::new(1, 4, 1, triplets, "exhaustive-soft");

    let mut all_pass = true;
    for beta in [0.05, 0.1] {
        let start = Instant::now();
        let mut config = benchmark_config();
        config.model.prompts = 1;
        config.model.vocab = 4;
        config.model.seq_len = 1;
        config.train.method = Method::Dpo;
        config.train.beta0 = beta;
        config.train.batch_size = dataset.len();
        config.train.epochs = 4000;
        config.train.learning_rate = 0.05;
        let outcome = run_training(&config, &dataset, None).unwrap();

        let trained = enumerate_policy(outcome.policy.as_ref(), 1).unwrap();
        let reference = build_policy(&config.model).unwrap();
        let optimal = closed_form_policy(&reward, reference.as_ref(), beta).unwrap();
        let tv = trained.total_variation(&optimal);
        let elapsed = start.elapsed().as_secs_f64();
        let pass = tv <= 1e-3 && elapsed < 60.0;
        all_pass &= report(
            "4 (convergence to closed form)",
            pass,
            &format!("beta {beta}: TV {tv:.3e} (tol 1e-3), {elapsed:.1}s"),
        );
    }
    assert!(all_pass);
}

/// Independent three-branch oracle for the selection rule.
fn selection_oracle(z_minus: f64, z_zero: f64, z_plus: f64, beta: f64, eps: f64) -> (f64, i8) {
    let decreasing = z_minus > z_zero && z_zero > z_plus;
    let increasing = z_minus < z_zero && z_zero < z_plus;
    if decreasing {
        (beta / (1.0 + eps), -1)
    } else if increasing {
        (beta / (1.0 - eps), 1)
    } else {
        (beta, 0)
    }
}

/// Criterion 5: the selection rule matches the brute-force oracle on all 13
/// order types of three reals (including ties) and on 10k random triples.
#[test]
fn acceptance_5_selection_rule_equivalence() {
    let start = Instant::now();
    let beta = 0.05;
    let eps = 0.01;
    let check = |a: f64, b: f64, c: f64| -> bool {
        let est = PerturbedEstimate { z_minus: a, z_zero: b, z_plus: c };
        let got = select_beta(&est, beta, eps).unwrap();
        let (want_beta, want_dir) = selection_oracle(a, b, c, beta, eps);
        got.beta_tilde == want_beta && got.direction == want_dir
    };

    // All 13 order types: every assignment of three slots to the value
    // levels {1, 2, 3} that uses a contiguous prefix of levels.
    let mut order_types = 0usize;
    let mut seen = std::collections::BTreeSet::new();
    let mut all_ok = true;
    for a in 1..=3u8 {
        for b in 1..=3u8 {
            for c in 1..=3u8 {
                // Normalize to an order type: rank pattern of (a, b, c).
                let mut levels = [a, b, c];
                levels.sort_unstable();
                let rank = |v: u8| levels.iter().position(|&x| x == v).unwrap();
                let key = (rank(a), rank(b), rank(c));
                if seen.insert(key) {
                    order_types += 1;
                }
                all_ok &= check(a as f64, b as f64, c as f64);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for _ in 0..10_000 {
        let mut vals = [0.0f64; 3];
        for v in &mut vals {
            *v = rng.random_range(-5.0..5.0);
        }
        // Inject exact ties in a third of the draws.
        match rng.random_range(0..6) {
            0 => vals[1] = vals[0],
            1 => vals[2] = vals[1],
            _ => {}
        }
        all_ok &= check(vals[0], vals[1], vals[2]);
    }
    let pass = all_ok && order_types == 13 && start.elapsed().as_secs_f64() < 1.0;
    assert!(report(
        "5 (selection rule vs oracle)",
        pass,
        &format!("{order_types} order types + 10k random triples, {:.2}s", start.elapsed().as_secs_f64())
    ));
}

/// Criterion 6: on a dataset where no instance ever fires the monotonicity
/// criterion, the adaptive run's metrics CSV is bit-identical to vanilla
/// DPO at the same seed.
#[test]
fn acceptance_6_reduction_to_dpo() {
    let start = Instant::now();
    let mut config = benchmark_config();
    // Symmetric soft labels hold the policy exactly at the reference, so
    // every perturbed estimate ties for the whole run.
    let mut dataset = dataset_from_config(&config).unwrap();
    for t in &mut dataset.triplets {
        t.label = 0.5;
    }
    let adaptive = run_training(&config, &dataset, None).unwrap();
    config.train.method = Method::Dpo;
    let vanilla = run_training(&config, &dataset, None).unwrap();
    let a = metrics_to_csv(&adaptive.metrics);
    let b = metrics_to_csv(&vanilla.metrics);
    let pass = a == b && start.elapsed().as_secs_f64() < 30.0;
    assert!(report(
        "6 (reduction to DPO)",
        pass,
        &format!("metrics byte-identical: {}, {:.1}s", a == b, start.elapsed().as_secs_f64())
    ));
}

/// Criterion 7: the adaptive method adds no policy or reference forward
/// passes over a full bundled run, and its measured step-time overhead
/// stays below 20%.
#[test]
fn acceptance_7_forward_pass_accounting_and_overhead() {
    let config = benchmark_config();
    let dataset = dataset_from_config(&config).unwrap();
    let adaptive = run_training(&config, &dataset, None).unwrap();
    let mut dpo_config = config.clone();
    dpo_config.train.method = Method::Dpo;
    let vanilla = run_training(&dpo_config, &dataset, None).unwrap();
    let counts_equal = adaptive
        .metrics
        .iter()
        .zip(&vanilla.metrics)
        .all(|(a, b)| a.fwd_passes_policy == b.fwd_passes_policy && a.fwd_passes_ref == b.fwd_passes_ref);

    // Wall-clock comparison on the bundled neural run, where model forward
    // passes carry realistic weight relative to the estimation arithmetic.
    // Minimum total step time over repeats is the most noise-robust
    // location statistic for a lower-bounded timer.
    let neural = neural_config();
    let neural_data = dataset_from_config(&neural).unwrap();
    let time_run = |cfg: &ExperimentConfig| -> f64 {
        let mut timed = cfg.clone();
        timed.train.timing = true;
        (0..15)
            .map(|_| {
                let out = run_training(&timed, &neural_data, None).unwrap();
                out.metrics.iter().map(|m| m.wall_ms).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut neural_dpo = neural.clone();
    neural_dpo.train.method = Method::Dpo;
    let t_dpo = time_run(&neural_dpo);
    let t_eps = time_run(&neural);
    let overhead = (t_eps - t_dpo) / t_dpo;
    // Analytic reference: the estimation arithmetic adds O(vocab) work per
    // token against a model of vocab * prompts * slots parameters, so the
    // toy ratio is far above the ~1e-4 reported for billion-parameter runs.
    let pass = counts_equal && overhead < 0.20;
    assert!(report(
        "7 (zero extra forward passes)",
        pass,
        &format!(
            "counters equal: {counts_equal}; overhead {:.1}% (dpo {t_dpo:.2} ms, adaptive {t_eps:.2} ms, bound 20%)",
            overhead * 100.0
        )
    ));
}

/// Criterion 8: exact forward KL matches independently computed values on
/// 10 fixtures within 1e-9, and the seeded MC estimator lands within 0.05
/// of each exact value at 10k samples.
#[test]
fn acceptance_8_kl_evaluation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst_exact = 0.0f64;
    let mut worst_mc = 0.0f64;
    for fixture in 0..10 {
        let vocab = 2 + (fixture % 3);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let raw: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        };
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        let expected: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum();

        let mut ref_policy = TabularPolicy::new(1, Vocab::new(vocab).unwrap(), 1).unwrap();
        let logits: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        ref_policy.set_row(0, &[], &logits).unwrap();
        let mut policy = TabularPolicy::new(1, Vocab::new(vocab).unwrap(), 1).unwrap();
        let logits: Vec<f64> = q.iter().map(|x| x.ln()).collect();
        policy.set_row(0, &[], &logits).unwrap();

        let mut kl_rng = ChaCha8Rng::seed_from_u64(900 + fixture as u64);
        let exact = forward_kl(&ref_policy, &policy, 1, KlMode::Exact, 0, &mut kl_rng).unwrap();
        let mc = forward_kl(&ref_policy, &policy, 1, KlMode::Mc, 10_000, &mut kl_rng).unwrap();
        worst_exact = worst_exact.max((exact - expected).abs());
        worst_mc = worst_mc.max((mc - exact).abs());
    }
    let pass = worst_exact <= 1e-9 && worst_mc <= 0.05 && start.elapsed().as_secs_f64() < 10.0;
    assert!(report(
        "8 (KL evaluation)",
        pass,
        &format!(
            "exact error {worst_exact:.3e} (tol 1e-9), MC error {worst_mc:.3e} (tol 0.05), {:.1}s",
            start.elapsed().as_secs_f64()
        )
    ));
}

/// Criterion 9a: on the bundled benchmark, pairs classified as monotone
/// increasing (direction +1) show a lower mean implicit reward margin than
/// monotone decreasing pairs (direction -1).
#[test]
fn acceptance_9a_margin_by_monotonicity_ordering() {
    let config = benchmark_config();
    let dataset = dataset_from_config(&config).unwrap();
    let outcome = run_training(&config, &dataset, None).unwrap();
    let reference = build_policy(&config.model).unwrap();
    let beta = outcome.metrics.last().unwrap().beta;
    let (eps_c, _) = config.epsilon_pair().unwrap();
    let report_mm = margin_by_monotonicity(
        outcome.policy.as_ref(),
        reference.as_ref(),
        &dataset.triplets,
        eps_c,
        beta,
    )
    .unwrap();
    let (pass, detail) = match (report_mm.minus, report_mm.plus) {
        (Some(minus), Some(plus)) => (
            plus.mean < minus.mean,
            format!("mean margin: direction +1 {:.4} < direction -1 {:.4}", plus.mean, minus.mean),
        ),
        _ => (false, "a monotonicity class is empty on the bundled benchmark".into()),
    };
    assert!(report("9a (margin ordering)", pass, &detail));
}

/// Criterion 9b: occurrence ratios of the perturbed coefficients increase
/// with epsilon across {0.005, 0.01, 0.02} on the bundled benchmark.
#[test]
fn acceptance_9b_occurrence_ratio_grows_with_epsilon() {
    let start = Instant::now();
    let mut fired = Vec::new();
    for eps in [0.005, 0.01, 0.02] {
        let mut config = benchmark_config();
        config.train.eps = Some(eps);
        let dataset = dataset_from_config(&config).unwrap();
        let outcome = run_training(&config, &dataset, None).unwrap();
        let n = outcome.metrics.len() as f64;
        let mean_fired = outcome
            .metrics
            .iter()
            .map(|m| m.frac_minus + m.frac_plus)
            .sum::<f64>()
            / n;
        fired.push(mean_fired);
    }
    let pass = fired[0] < fired[1] && fired[1] < fired[2] && start.elapsed().as_secs_f64() < 900.0;
    assert!(report(
        "9b (occurrence ratio vs epsilon)",
        pass,
        &format!(
            "mean fired fraction at eps 0.005/0.01/0.02: {:.4}/{:.4}/{:.4} (strict increase required)",
            fired[0], fired[1], fired[2]
        )
    ));
}

/// Criterion 9c: over the bundled beta grid, the adaptive method's Pareto
/// frontier in the (KL, win-rate) plane is not dominated by vanilla DPO's.
#[test]
fn acceptance_9c_pareto_frontier_not_dominated() {
    let start = Instant::now();
    let base = benchmark_config();
    let dataset = dataset_from_config(&base).unwrap();
    let reward = reward_from_config(&base);
    let reference = build_policy(&base.model).unwrap();

    let mut points = Vec::new();
    for method in [Method::Dpo, Method::EpsilonDpo] {
        for beta0 in [0.01, 0.05, 0.1, 0.5] {
            let mut config = base.clone();
            config.train.method = method;
            config.train.beta0 = beta0;
            let outcome = run_training(&config, &dataset, None).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(777);
            let kl = forward_kl(
                reference.as_ref(),
                outcome.policy.as_ref(),
                base.model.seq_len,
                KlMode::Exact,
                0,
                &mut rng,
            )
            .unwrap();
            let baseline =
                sample_baseline_responses(reference.as_ref(), base.model.seq_len, 2000, &mut rng)
                    .unwrap();
            let wr = win_rate(outcome.policy.as_ref(), &baseline, &reward, &mut rng).unwrap();
            points.push(ParetoPoint {
                method: method.as_str().into(),
                beta0,
                eps: 0.01,
                seed: config.train.seed,
                kl,
                win_rate: wr,
            });
        }
    }
    let (csv, _svg) = pareto_export(&points).unwrap();
    let flags = dominated_flags(&points);
    // The adaptive frontier survives if some adaptive point is dominated by
    // no DPO point (frontier membership checked on the combined set).
    let adaptive_on_frontier = points
        .iter()
        .zip(&flags)
        .any(|(p, dominated)| p.method == "epsilon-dpo" && !dominated);
    let pass = adaptive_on_frontier && start.elapsed().as_secs_f64() < 900.0;
    assert!(report(
        "9c (Pareto frontier)",
        pass,
        &format!(
            "adaptive point on the combined frontier: {adaptive_on_frontier}; {} rows exported, {:.1}s",
            csv.lines().count() - 1,
            start.elapsed().as_secs_f64()
        )
    ));
}

/// Criterion 10: rerunning any bundled config at the same seed yields a
/// byte-identical metrics CSV.
#[test]
fn acceptance_10_determinism() {
    let start = Instant::now();
    let mut all_equal = true;
    for config in [benchmark_config(), neural_config()] {
        let dataset = dataset_from_config(&config).unwrap();
        let a = run_training(&config, &dataset, None).unwrap();
        let b = run_training(&config, &dataset, None).unwrap();
        all_equal &= metrics_to_csv(&a.metrics) == metrics_to_csv(&b.metrics);
    }
    assert!(report(
        "10 (determinism)",
        all_equal,
        &format!("bundled configs rerun byte-identical: {all_equal}, {:.1}s", start.elapsed().as_secs_f64())
    ));
}

/// Ties in the selection rule fall to the unchanged branch; exercised here
/// so the acceptance target also covers the exact-equality edge the random
/// sweep of criterion 5 can miss.
#[test]
fn selection_tie_sanity() {
    let est = PerturbedEstimate { z_minus: 1.0, z_zero: 1.0, z_plus: 1.0 };
    let d: BetaDecision = select_beta(&est, 0.05, 0.01).unwrap();
    assert_eq!(d.direction, 0);
    assert_eq!(d.beta_tilde, 0.05);
}

/// The soft-label construction used by criterion 6 really does pin the
/// policy at the reference: loss gradient is identically zero there.
#[test]
fn half_label_fixed_point_sanity() {
    let config = benchmark_config();
    let mut dataset = dataset_from_config(&config).unwrap();
    for t in &mut dataset.triplets {
        t.label = 0.5;
    }
    let outcome = run_training(&config, &dataset, None).unwrap();
    let reference = build_policy(&config.model).unwrap();
    for t in dataset.triplets.iter().take(8) {
        let z = logit_z(outcome.policy.as_ref(), t).unwrap();
        let gamma = margin_gamma(reference.as_ref(), t).unwrap();
        assert_eq!(z, gamma);
    }
    let _ = (seq_logprob(reference.as_ref(), &Sequence::new(0, vec![0, 0])).unwrap(), RefCache::build(reference.as_ref(), &dataset.triplets[0]).unwrap());
}
