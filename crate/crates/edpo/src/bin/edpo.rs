//! Command-line experiment runner: dataset generation, training, evaluation,
//! grid sweeps, and post-hoc analyses. Every artifact embeds the config hash
//! and seed it was produced under.
//!
//! Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use edpo::baselines::BETADPO_APPROXIMATION_NOTE;
use edpo::config::{ExperimentConfig, Method};
use edpo::eval::{
    dataset_from_config, epsilon_bound_summary, forward_kl, margin_by_monotonicity, pareto_export,
    reward_from_config, sample_baseline_responses, win_rate, EvalReport, KlMode, ParetoPoint,
};
use edpo::oracle::{read_dataset, write_dataset, Dataset};
use edpo::policy::{load_policy, Policy};
use edpo::trainer::{build_policy, metrics_from_csv, run_training, StepMetrics};
use edpo::{Error, Result};

#[derive(Parser)]
#[command(name = "edpo", version, about = "Preference-optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preference dataset from a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run; writes metrics.csv, checkpoints, and the resolved
    /// config + dataset into the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Optional pre-generated dataset; defaults to regenerating from the
        /// config's data section.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a finished run directory; writes eval.csv.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Monte Carlo sample count for the KL estimate.
        #[arg(long, default_value_t = 10_000)]
        mc_samples: usize,
        /// Seed for evaluation-time sampling (baseline responses, MC KL).
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Grid of runs over beta0 x epsilon x method x seed, with a manifest.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Root directory for the run grid.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.1, 0.5])]
        beta0: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.005, 0.01, 0.02])]
        eps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec!["dpo".to_string(), "epsilon-dpo".to_string()])]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0])]
        seeds: Vec<u64>,
    },
    /// Post-hoc analyses over existing runs: margin-by-monotonicity,
    /// epsilon upper bounds, occurrence ratios, and a Pareto export.
    Analyze {
        /// Directory containing run subdirectories (or a single run).
        #[arg(long)]
        runs: PathBuf,
        /// Grid for the epsilon upper-bound scan.
        #[arg(long, default_value_t = 0.001)]
        eps_min: f64,
        #[arg(long, default_value_t = 0.5)]
        eps_max: f64,
        #[arg(long, default_value_t = 32)]
        eps_points: usize,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) => 1,
                Error::Config(_) | Error::Parse { .. } => 2,
                Error::Internal(_) | Error::Runtime(_) | Error::Io(_) => 3,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let config = ExperimentConfig::from_path(&config)?;
            let dataset = dataset_from_config(&config)?;
            write_dataset(&out, &dataset)?;
            println!(
                "wrote {} triplets to {} (config {})",
                dataset.len(),
                out.display(),
                config.hash()
            );
            Ok(())
        }
        Command::Train { config, out, data } => {
            let config = ExperimentConfig::from_path(&config)?;
            let dataset = match data {
                Some(path) => read_dataset(&path)?,
                None => dataset_from_config(&config)?,
            };
            train_into(&config, &dataset, &out)?;
            println!("run complete: {} (config {})", out.display(), config.hash());
            Ok(())
        }
        Command::Eval { run, mc_samples, eval_seed } => {
            let report = evaluate_run(&run, mc_samples, eval_seed)?;
            std::fs::write(run.join("eval.csv"), report.to_csv())?;
            println!("{}", report.to_csv().trim_end());
            Ok(())
        }
        Command::Sweep { config, out, beta0, eps, methods, seeds } => {
            sweep(&config, &out, &beta0, &eps, &methods, &seeds)
        }
        Command::Analyze { runs, eps_min, eps_max, eps_points } => {
            analyze(&runs, (eps_min, eps_max), eps_points)
        }
    }
}

/// Trains into a run directory, leaving it self-contained: resolved config,
/// the exact dataset used, metrics, and checkpoints.
fn train_into(config: &ExperimentConfig, dataset: &Dataset, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let serialized = toml::to_string(config)
        .map_err(|e| Error::Internal(format!("config serialization: {e}")))?;
    std::fs::write(out.join("config.toml"), serialized)?;
    write_dataset(&out.join("data.tsv"), dataset)?;
    run_training(config, dataset, Some(out))?;
    Ok(())
}

/// Loads the pieces of a finished run directory.
fn load_run(run: &Path) -> Result<(ExperimentConfig, Dataset, Vec<StepMetrics>, Box<dyn Policy>)> {
    let config_path = run.join("config.toml");
    if !config_path.exists() {
        return Err(Error::Runtime(format!("no run found at {} (missing config.toml)", run.display())));
    }
    let config = ExperimentConfig::from_path(&config_path)?;
    let dataset = read_dataset(&run.join("data.tsv"))?;
    let metrics = metrics_from_csv(&std::fs::read_to_string(run.join("metrics.csv"))?)?;
    let policy = load_policy(&run.join("checkpoints").join("final.ckpt"))?;
    Ok((config, dataset, metrics, policy))
}

fn evaluate_run(run: &Path, mc_samples: usize, eval_seed: u64) -> Result<EvalReport> {
    let (config, dataset, metrics, policy) = load_run(run)?;
    if metrics.is_empty() {
        return Err(Error::Runtime("run has no recorded steps".into()));
    }
    let reference = build_policy(&config.model)?;
    let reward = reward_from_config(&config);
    let seq_len = config.model.seq_len;

    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let kl_exact =
        forward_kl(reference.as_ref(), policy.as_ref(), seq_len, KlMode::Exact, 0, &mut rng)?;
    let kl_mc =
        forward_kl(reference.as_ref(), policy.as_ref(), seq_len, KlMode::Mc, mc_samples, &mut rng)?;
    let baseline =
        sample_baseline_responses(reference.as_ref(), seq_len, dataset.len().max(200), &mut rng)?;
    let wr = win_rate(policy.as_ref(), &baseline, &reward, &mut rng)?;

    let n = metrics.len() as f64;
    let beta_final = metrics.last().unwrap().beta;
    let mean = |f: fn(&StepMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    let margin_mean = {
        let mut total = 0.0;
        for t in &dataset.triplets {
            total += edpo::dpo::implicit_reward_margin_of(
                policy.as_ref(),
                reference.as_ref(),
                t,
                beta_final,
            )?;
        }
        total / dataset.len() as f64
    };

    Ok(EvalReport {
        method: config.train.method.as_str().into(),
        config_hash: config.hash(),
        seed: config.train.seed,
        beta_final,
        beta_mean: mean(|m| m.beta),
        forward_kl_exact: kl_exact,
        forward_kl_mc: kl_mc,
        win_rate: wr,
        margin_mean,
        frac_minus: mean(|m| m.frac_minus),
        frac_zero: mean(|m| m.frac_zero),
        frac_plus: mean(|m| m.frac_plus),
        note: if config.train.method == Method::BetaDpo {
            BETADPO_APPROXIMATION_NOTE.into()
        } else {
            String::new()
        },
    })
}

fn sweep(
    config_path: &Path,
    out: &Path,
    beta0s: &[f64],
    epsilons: &[f64],
    methods: &[String],
    seeds: &[u64],
) -> Result<()> {
    let base = ExperimentConfig::from_path(config_path)?;
    if beta0s.is_empty() || methods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
    }
    std::fs::create_dir_all(out)?;

    // One job per grid point; epsilon only varies for the adaptive method.
    let mut jobs = Vec::new();
    for method_name in methods {
        let method = Method::parse(method_name)?;
        let eps_grid: Vec<Option<f64>> = if method == Method::EpsilonDpo {
            if epsilons.is_empty() {
                return Err(Error::InvalidArgument("epsilon grid must be non-empty".into()));
            }
            epsilons.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        for &beta0 in beta0s {
            for &seed in seeds {
                for &eps in &eps_grid {
                    let mut cfg = base.clone();
                    cfg.train.method = method;
                    cfg.train.beta0 = beta0;
                    cfg.train.seed = seed;
                    if let Some(e) = eps {
                        cfg.train.eps = Some(e);
                        cfg.train.eps_c = None;
                        cfg.train.eps_s = None;
                    }
                    cfg.validate()?;
                    let name = match eps {
                        Some(e) => format!("{}_b{}_e{}_s{}", method.as_str(), beta0, e, seed),
                        None => format!("{}_b{}_s{}", method.as_str(), beta0, seed),
                    };
                    jobs.push((name, cfg));
                }
            }
        }
    }

    // Runs are independent; failures are isolated per run and reported in
    // the manifest instead of aborting the sweep.
    let rows: Mutex<Vec<String>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for (name, cfg) in &jobs {
            let rows = &rows;
            let dir = out.join(name);
            scope.spawn(move || {
                let result = dataset_from_config(cfg)
                    .and_then(|dataset| train_into(cfg, &dataset, &dir))
                    .and_then(|_| evaluate_run(&dir, 2000, cfg.train.seed))
                    .and_then(|report| {
                        std::fs::write(dir.join("eval.csv"), report.to_csv())?;
                        Ok(())
                    });
                let status = match result {
                    Ok(()) => "ok".to_string(),
                    Err(e) => format!("failed: {e}").replace(',', ";"),
                };
                let eps_field =
                    cfg.epsilon_pair().map(|(c, _)| c.to_string()).unwrap_or_default();
                rows.lock().unwrap().push(format!(
                    "{name},{},{},{eps_field},{},{},{status}",
                    cfg.train.method.as_str(),
                    cfg.train.beta0,
                    cfg.train.seed,
                    cfg.hash(),
                ));
            });
        }
    });

    let mut rows = rows.into_inner().unwrap();
    rows.sort_unstable();
    let mut manifest = String::from("run,method,beta0,eps,seed,config_hash,status\n");
    for row in &rows {
        manifest.push_str(row);
        manifest.push('\n');
    }
    std::fs::write(out.join("manifest.csv"), &manifest)?;
    let failures = rows.iter().filter(|r| r.contains("failed:")).count();
    println!("sweep complete: {} runs, {failures} failed, manifest at {}", rows.len(), out.join("manifest.csv").display());
    if failures == rows.len() {
        return Err(Error::Runtime("every sweep run failed".into()));
    }
    Ok(())
}

fn analyze(runs_root: &Path, eps_range: (f64, f64), eps_points: usize) -> Result<()> {
    // Accept either a directory of runs or a single run directory.
    let mut run_dirs: Vec<PathBuf> = if runs_root.join("config.toml").exists() {
        vec![runs_root.to_path_buf()]
    } else {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(runs_root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("config.toml").exists())
            .collect();
        dirs.sort();
        dirs
    };
    if run_dirs.is_empty() {
        return Err(Error::Runtime(format!("no runs found under {}", runs_root.display())));
    }
    run_dirs.retain(|d| d.join("metrics.csv").exists());
    if run_dirs.is_empty() {
        return Err(Error::Runtime(format!(
            "no finished runs (with metrics.csv) under {}",
            runs_root.display()
        )));
    }

    let mut pareto_points = Vec::new();
    for dir in &run_dirs {
        let (config, dataset, metrics, policy) = load_run(dir)?;
        let reference = build_policy(&config.model)?;
        let beta_final = metrics.last().map(|m| m.beta).unwrap_or(config.train.beta0);
        let eps_c = config.epsilon_pair().map(|(c, _)| c).unwrap_or(0.01);

        let report = margin_by_monotonicity(
            policy.as_ref(),
            reference.as_ref(),
            &dataset.triplets,
            eps_c,
            beta_final,
        )?;
        std::fs::write(dir.join("monotonicity.csv"), report.to_csv())?;

        let bounds = epsilon_bound_summary(
            policy.as_ref(),
            reference.as_ref(),
            &dataset.triplets,
            eps_range,
            eps_points,
        )?;
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        std::fs::write(
            dir.join("eps_bounds.csv"),
            format!(
                "n_down,n_up,n_neither,mean_down,mean_up,config_hash,seed\n{},{},{},{},{},{},{}\n",
                bounds.n_down,
                bounds.n_up,
                bounds.n_neither,
                fmt_opt(bounds.mean_down),
                fmt_opt(bounds.mean_up),
                config.hash(),
                config.train.seed,
            ),
        )?;

        let mut occurrence =
            String::from("step,frac_minus,frac_zero,frac_plus,config_hash,seed\n");
        for m in &metrics {
            occurrence.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.step,
                m.frac_minus,
                m.frac_zero,
                m.frac_plus,
                config.hash(),
                config.train.seed
            ));
        }
        std::fs::write(dir.join("occurrence.csv"), occurrence)?;

        let eval_path = dir.join("eval.csv");
        let report = if eval_path.exists() {
            parse_eval_csv(&std::fs::read_to_string(&eval_path)?)?
        } else {
            let report = evaluate_run(dir, 2000, config.train.seed)?;
            std::fs::write(&eval_path, report.to_csv())?;
            report
        };
        pareto_points.push(ParetoPoint {
            method: report.method.clone(),
            beta0: config.train.beta0,
            eps: config.epsilon_pair().map(|(c, _)| c).unwrap_or(0.0),
            seed: config.train.seed,
            kl: report.forward_kl_exact,
            win_rate: report.win_rate,
        });
    }

    let (csv, svg) = pareto_export(&pareto_points)?;
    let pareto_dir = if run_dirs.len() == 1 { run_dirs[0].clone() } else { runs_root.to_path_buf() };
    std::fs::write(pareto_dir.join("pareto.csv"), csv)?;
    std::fs::write(pareto_dir.join("pareto.svg"), svg)?;
    println!("analyzed {} runs; pareto outputs in {}", run_dirs.len(), pareto_dir.display());
    Ok(())
}

/// Reads back the single-row eval CSV emitted by `EvalReport::to_csv`.
fn parse_eval_csv(text: &str) -> Result<EvalReport> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != edpo::eval::EVAL_HEADER {
        return Err(Error::Parse { line: 1, msg: "bad eval header".into() });
    }
    let row = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 2, msg: "missing eval row".into() })?;
    let fields: Vec<&str> = row.splitn(13, ',').collect();
    if fields.len() != 13 {
        return Err(Error::Parse { line: 2, msg: format!("expected 13 fields, got {}", fields.len()) });
    }
    let f = |i: usize| -> Result<f64> {
        fields[i]
            .parse()
            .map_err(|_| Error::Parse { line: 2, msg: format!("bad number {:?}", fields[i]) })
    };
    Ok(EvalReport {
        method: fields[0].into(),
        config_hash: fields[1].into(),
        seed: fields[2]
            .parse()
            .map_err(|_| Error::Parse { line: 2, msg: "bad seed".into() })?,
        beta_final: f(3)?,
        beta_mean: f(4)?,
        forward_kl_exact: f(5)?,
        forward_kl_mc: f(6)?,
        win_rate: f(7)?,
        margin_mean: f(8)?,
        frac_minus: f(9)?,
        frac_zero: f(10)?,
        frac_plus: f(11)?,
        note: fields[12].into(),
    })
}
