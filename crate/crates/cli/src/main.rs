//! `brac`: collect datasets, clone behavior, train, sweep grids, evaluate
//! and report.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use brac_core::checks;
use brac_core::critics::QEnsemble;
use brac_core::data::{collect, NoiseConfig, OfflineDataset};
use brac_core::envs::{ActionSelector, EnvName, ReferenceController, UniformRandom};
use brac_core::harness::{
    clamp_score, emit_report, evaluate_policy, load_records, run_grid, select_best, EvalProtocol, GridDataset,
    GridSpec, ReportFormat,
};
use brac_core::policies::{clone_behavior, CloneConfig, TanhGaussianPolicy};
use brac_core::pretrain::{pretrain_online, PretrainConfig};
use brac_core::rng::{derive_seed, seeded};
use brac_core::trainer::{train_offline, Algo, TrainerConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{output_path, ConfigFile};

#[derive(Parser)]
#[command(name = "brac", version, about = "Behavior regularized offline RL experiments")]
struct Cli {
    /// TOML file with trainer, cloning and pretraining settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a partially trained policy online with SAC.
    Pretrain {
        #[arg(long)]
        env: EnvName,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Roll out a policy with injected noise and save the transitions.
    Collect {
        #[arg(long)]
        env: EnvName,
        /// Policy checkpoint, or `controller` / `random`.
        #[arg(long)]
        policy: String,
        /// `none`, `eps:P` or `gauss:S`.
        #[arg(long)]
        noise: NoiseConfig,
        #[arg(long, default_value_t = 50_000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the behavior policy to a dataset by maximum likelihood.
    Clone {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one offline agent and write its run record.
    Train(TrainArgs),
    /// Sweep policy learning rate × regularization strength.
    Grid {
        #[arg(long)]
        algo: Algo,
        #[arg(long)]
        env: EnvName,
        /// Directory of `*.ds` datasets; behavior checkpoints `*.pol` next to
        /// them are cloned when missing.
        #[arg(long)]
        datasets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        strengths: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a saved policy with max-Q action selection.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        critic: PathBuf,
        #[arg(long)]
        env: EnvName,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate grid records into tables.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Defaults to `<runs>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an oracle suite.
    Check {
        #[arg(long)]
        suite: Suite,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    algo: Algo,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    behavior: PathBuf,
    #[arg(long, group = "strength")]
    alpha: Option<f64>,
    #[arg(long, group = "strength")]
    epsilon: Option<f64>,
    #[arg(long, group = "strength")]
    phi: Option<f64>,
    #[arg(long)]
    policy_lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also save the final policy checkpoint.
    #[arg(long)]
    policy_out: Option<PathBuf>,
    /// Also save the final critic ensemble.
    #[arg(long)]
    critic_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Grad,
    Divergence,
    Combiner,
    SacEquiv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::Pretrain { env, out, seed } => {
            let mut cfg = file.pretrain.clone().unwrap_or_default();
            cfg.seed = file.seed(seed)?;
            pretrain(env, &cfg, &output_path(&out))
        }
        Command::Collect {
            env,
            policy,
            noise,
            n,
            out,
            seed,
        } => {
            let e = env.build();
            let selector: Box<dyn ActionSelector> = match policy.as_str() {
                "controller" => Box::new(ReferenceController::new(env)),
                "random" => Box::new(UniformRandom::for_env(e.as_ref())),
                path => Box::new(TanhGaussianPolicy::load(Path::new(path))?),
            };
            let mut rng = seeded(file.seed(seed)?);
            let ds = collect(e.as_ref(), selector.as_ref(), noise, n, &mut rng)?;
            let out = output_path(&out);
            ensure_parent(&out)?;
            ds.save(&out)?;
            println!(
                "{} transitions ({}) -> {}; average episode return {:.4}",
                ds.len(),
                ds.noise_tag(),
                out.display(),
                ds.average_episode_return(e.horizon())
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Clone { data, out, steps, seed } => {
            let ds = OfflineDataset::load(&data)?;
            let mut cfg = CloneConfig::default();
            file.clone.apply(&mut cfg);
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let mut rng = seeded(file.seed(seed)?);
            let cloned = clone_behavior(&ds, &cfg, &mut rng)?;
            let out = output_path(&out);
            ensure_parent(&out)?;
            cloned.policy.save(&out)?;
            println!("log-likelihood {:.6} -> {}", cloned.log_likelihood, out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => train(&file, args),
        Command::Grid {
            algo,
            env,
            datasets,
            out,
            parallel,
            seeds,
            lrs,
            strengths,
            seed,
        } => {
            let e = env.build();
            let mut base = TrainerConfig::preset(algo, algo.strength_grid()[0], e.action_dim());
            file.trainer.apply(&mut base);
            let mut grid = GridSpec::standard(algo);
            grid.seeds = seeds;
            grid.base_seed = file.seed(seed)?;
            if let Some(l) = lrs {
                grid.learning_rates = l;
            }
            if let Some(s) = strengths {
                grid.strengths = s;
            }
            let sets = grid_datasets(&datasets, env, &file)?;
            let out = output_path(&out);
            let outcome = run_grid(&grid, &base, &sets, e.as_ref(), parallel, Some(&out))?;
            let (lr, s) = select_best(&outcome.records)?;
            println!(
                "{} records ({} trained now) in {}; best policy_lr {lr}, strength {s}",
                outcome.records.len(),
                outcome.executed,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            policy,
            critic,
            env,
            episodes,
            seed,
        } => {
            let p = TanhGaussianPolicy::load(&policy)?;
            let q = QEnsemble::load(&critic)?;
            let protocol = EvalProtocol {
                episodes,
                ..EvalProtocol::default()
            };
            let raw = evaluate_policy(&p, &q, env.build().as_ref(), &protocol, file.seed(seed)?)?;
            println!("raw {raw}\nreported {}", clamp_score(raw));
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs, format, out } => {
            let format: ReportFormat = format.parse()?;
            let records = load_records(&runs)?;
            let out = out.unwrap_or_else(|| runs.join("report"));
            for p in emit_report(&records, format, &output_path(&out))? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { suite } => check(suite),
    }
}

fn pretrain(env: EnvName, cfg: &PretrainConfig, out: &Path) -> Result<ExitCode> {
    let res = pretrain_online(env, cfg)?;
    ensure_parent(out)?;
    res.policy.save(out)?;
    println!(
        "{} env steps; return {:.4} (random {:.4}, controller {:.4}); normalized {:.4}{} -> {}",
        res.env_steps,
        res.policy_return,
        res.random_return,
        res.controller_return,
        res.normalized,
        if res.in_band { "" } else { " (outside target band)" },
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(file: &ConfigFile, a: TrainArgs) -> Result<ExitCode> {
    let ds = OfflineDataset::load(&a.data)?;
    let behavior = TanhGaussianPolicy::load(&a.behavior)?;
    let env = ds.env()?.build();
    let strength = match (a.algo.strength_name(), a.alpha, a.epsilon, a.phi) {
        (None, None, None, None) => 0.0,
        (None, ..) => bail!("{} takes no strength flag", a.algo),
        (Some("alpha"), Some(v), None, None) | (Some("epsilon"), None, Some(v), None) | (Some("phi"), None, None, Some(v)) => v,
        (Some(name), ..) => bail!("{} needs --{name}", a.algo),
    };
    let mut cfg = TrainerConfig::preset(a.algo, strength, env.action_dim());
    file.trainer.apply(&mut cfg);
    if let Some(lr) = a.policy_lr {
        cfg.policy_lr = lr;
    }
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    cfg.seed = file.seed(a.seed)?;
    let run = train_offline(cfg, &ds, &behavior, env.as_ref())?;
    let out = output_path(&a.out);
    write_json(&out, &run.record)?;
    if let Some(p) = a.policy_out {
        let p = output_path(&p);
        ensure_parent(&p)?;
        run.trainer.policy().save(&p)?;
    }
    if let Some(p) = a.critic_out {
        let p = output_path(&p);
        ensure_parent(&p)?;
        run.trainer.critic().save(&p)?;
    }
    let r = &run.record;
    println!(
        "{} on {}: final score {:.4} (reported {:.4}){} -> {}",
        a.algo,
        r.dataset,
        r.final_score,
        r.reported_score(),
        r.failure.as_deref().map(|f| format!(", failed: {f}")).unwrap_or_default(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn grid_datasets(dir: &Path, env: EnvName, file: &ConfigFile) -> Result<Vec<GridDataset>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "ds"));
    paths.sort();
    if paths.is_empty() {
        bail!("no *.ds datasets in {}", dir.display());
    }
    let mut out = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let data = OfflineDataset::load(path)?;
        if data.env()? != env {
            bail!("{} was collected on {}, not {env}", path.display(), data.env_name());
        }
        let pol = path.with_extension("pol");
        let behavior = if pol.exists() {
            TanhGaussianPolicy::load(&pol)?
        } else {
            let mut cfg = CloneConfig::default();
            file.clone.apply(&mut cfg);
            let mut rng = seeded(derive_seed(file.seed(None)?, &[i as u64]));
            let b = clone_behavior(&data, &cfg, &mut rng)?.policy;
            b.save(&pol)?;
            b
        };
        out.push(GridDataset {
            tag: data.noise_tag().to_string(),
            data,
            behavior,
        });
    }
    Ok(out)
}

fn check(suite: Suite) -> Result<ExitCode> {
    let mut results = Vec::new();
    let mut line = |name: &str, passed: bool, detail: String| {
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        results.push(passed);
    };
    match suite {
        Suite::Grad => {
            let err = checks::gradient_check(100, 300, 5, 0)?;
            line("autodiff vs central differences", err < 1e-4, format!("max relative error {err:.3e}"));
        }
        Suite::Divergence => {
            let (err, zero) = checks::mmd_check(1000, 0);
            line("mmd vs double loop", err < 1e-12, format!("max abs error {err:.3e}"));
            line("mmd(X, X) == 0", zero, String::new());
            let kl = checks::kl_primal_estimate(10_000, 0)?;
            line("kl primal N(0,1) vs N(1,1)", (kl - 0.5).abs() <= 0.05, format!("{kl:.4} (analytic 0.5)"));
            let kd = checks::kl_dual_gaussians(2000, 0)?;
            line("kl dual N(0,1) vs N(1,1)", (kd - 0.5).abs() <= 0.15, format!("{kd:.4} (analytic 0.5)"));
            let w = checks::wasserstein_point_masses(2000, 0)?;
            line("wasserstein dual, unit-separated masses", (0.7..=1.1).contains(&w), format!("{w:.4}"));
        }
        Suite::Combiner => {
            for c in checks::combiner_check()? {
                line(&c.name, c.passed, c.detail);
            }
        }
        Suite::SacEquiv => {
            let d = checks::sac_equivalence(5, 0)?;
            line("entropy value penalty vs reference SAC", d <= 1e-10, format!("max parameter difference {d:.3e}"));
        }
    }
    Ok(if results.iter().all(|&p| p) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
