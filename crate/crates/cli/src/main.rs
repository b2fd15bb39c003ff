use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use veattack_core::attack::{parse_budget, SweepAxis};
use veattack_core::toolkit::config::*;
use veattack_core::toolkit::runner::{replay, run, REPORT_FILE};
use veattack_core::{Objective, Precision};

/// Gray-box attacks on vision-encoder patch tokens, with verifiers for the
/// propagation bounds.
#[derive(Parser)]
#[command(name = "veattack", version)]
struct Cli {
    /// Storage precision for weights, images and outputs (verify always uses f64).
    #[arg(long, global = true)]
    precision: Option<Precision>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct AttackFlags {
    /// L∞ budget, decimal or `k/255`.
    #[arg(long, value_parser = budget)]
    eps: Option<f64>,
    /// Step size, decimal or `k/255`.
    #[arg(long, value_parser = budget)]
    alpha: Option<f64>,
    /// PGD iterations.
    #[arg(long)]
    steps: Option<usize>,
    /// Attack objective, e.g. `cos-patch`, `cos-cls`, `kl-patch`.
    #[arg(long)]
    objective: Option<Objective>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw encoder and alignment weights into a bundle.
    GenWeights {
        #[command(flatten)]
        common: Common,
        /// Spectral norm of every value projection.
        #[arg(long)]
        spectral_cap: Option<f64>,
    },
    /// Attack a batch of images.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackFlags,
        /// Weight bundle; weights are drawn from the seed when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Image tensor files.
        #[arg(long, num_args = 1.., conflicts_with = "synthetic")]
        images: Vec<PathBuf>,
        /// Attack N synthetic images instead.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Also write PPM previews.
        #[arg(long)]
        ppm: bool,
    },
    /// Check one of the bounds over random trials; exits nonzero on a violation.
    Verify {
        #[command(flatten)]
        common: Common,
        /// 1 or 2.
        #[arg(long)]
        prop: Option<Proposition>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        trials: Option<u64>,
        /// Token count for the aligned-feature trials.
        #[arg(long)]
        n_v: Option<usize>,
        #[arg(long)]
        spectral_cap: Option<f64>,
    },
    /// Compare attack targets or loss metrics on the proxy task.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackFlags,
        /// `targets` (which tokens to attack) or `losses` (which distance).
        #[arg(long, value_parser = ablate_mode)]
        mode: Option<AblateMode>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Sweep the step count or the budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackFlags,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        synthetic: Option<usize>,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',', conflicts_with = "eps_list")]
        steps_list: Vec<usize>,
        /// Comma-separated budgets.
        #[arg(long, value_delimiter = ',', value_parser = budget)]
        eps_list: Vec<f64>,
        /// With --eps-list, also tabulate deviation trends for these objectives.
        #[arg(long, value_delimiter = ',')]
        trends: Vec<Objective>,
    },
    /// Transfer matrix between encoders.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackFlags,
        /// `NAME=PATH` weight bundles; replaces the configured models.
        #[arg(long = "model", value_parser = named_model)]
        models: Vec<(String, PathBuf)>,
    },
    /// Adversarially finetune an encoder and compare it with the original.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackFlags,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Inner attack budget, decimal or `k/255`.
        #[arg(long, value_parser = budget)]
        inner_eps: Option<f64>,
    },
    /// Clean and adversarial accuracy on the proxy task.
    TaskEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackFlags,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Re-run a report's embedded config and compare metrics bit for bit.
    Replay {
        report: PathBuf,
        /// Scratch directory for the re-run.
        #[arg(long)]
        out: PathBuf,
    },
}

fn budget(s: &str) -> Result<f64, String> {
    parse_budget(s).map_err(|e| e.to_string())
}

fn ablate_mode(s: &str) -> Result<AblateMode, String> {
    match s {
        "targets" => Ok(AblateMode::Targets),
        "losses" => Ok(AblateMode::Losses),
        _ => Err(format!("unknown mode `{s}`; expected targets or losses")),
    }
}

fn named_model(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn base(common: &Common, default: Command) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let cfg = RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
            if cfg.command.name() != default.name() {
                bail!(
                    "{} holds a `{}` config, not `{}`",
                    path.display(),
                    cfg.command.name(),
                    default.name()
                );
            }
            cfg
        }
        None => RunConfig::new(format!("out/{}", default.name()), default),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn apply_attack(a: &mut veattack_core::AttackConfig, f: &AttackFlags, seed: Option<u64>) {
    if let Some(e) = f.eps {
        a.epsilon = e;
        // keep the default step size legal for small budgets
        if f.alpha.is_none() {
            a.alpha = a.alpha.min(e);
        }
    }
    if let Some(v) = f.alpha {
        a.alpha = v;
    }
    if let Some(v) = f.steps {
        a.steps = v;
    }
    if let Some(v) = f.objective {
        a.objective = v;
    }
    if let Some(s) = seed {
        a.seed = s;
    }
}

fn apply_model(m: &mut ModelSpec, weights: &Option<PathBuf>, seed: Option<u64>) {
    if let Some(w) = weights {
        m.weights = Some(w.clone());
    }
    if let Some(s) = seed {
        m.seed = s;
    }
}

fn synthetic(src: &mut ImageSource, count: Option<usize>, seed: Option<u64>) {
    if let Some(n) = count {
        *src = ImageSource::Synthetic {
            count: n,
            seed: 0,
            spec: Default::default(),
        };
    }
    if let (ImageSource::Synthetic { seed: s, .. }, Some(v)) = (src, seed) {
        *s = v;
    }
}

fn build(cmd: Cmd) -> anyhow::Result<RunConfig> {
    Ok(match cmd {
        Cmd::GenWeights { common, spectral_cap } => {
            let mut cfg = base(&common, Command::GenWeights(Default::default()))?;
            if let Command::GenWeights(p) = &mut cfg.command {
                apply_model(&mut p.model, &None, common.seed);
                if let Some(c) = spectral_cap {
                    p.model.spectral_cap = c;
                }
            }
            cfg
        }
        Cmd::Attack {
            common,
            attack,
            weights,
            images,
            synthetic: n,
            ppm,
        } => {
            let mut cfg = base(&common, Command::Attack(Default::default()))?;
            if let Command::Attack(p) = &mut cfg.command {
                apply_model(&mut p.model, &weights, common.seed);
                apply_attack(&mut p.attack, &attack, common.seed);
                if !images.is_empty() {
                    p.images = ImageSource::Files(images);
                }
                synthetic(&mut p.images, n, common.seed);
                p.ppm |= ppm;
            }
            cfg
        }
        Cmd::Verify {
            common,
            prop,
            trials,
            n_v,
            spectral_cap,
        } => {
            let mut cfg = base(&common, Command::Verify(Default::default()))?;
            if let Command::Verify(p) = &mut cfg.command {
                if let Some(v) = prop {
                    p.prop = v;
                }
                if let Some(t) = trials {
                    p.trials = t as usize;
                }
                if let Some(s) = common.seed {
                    p.seed = s;
                }
                if let Some(n) = n_v {
                    p.n_v = n;
                }
                if let Some(c) = spectral_cap {
                    p.spectral_cap = c;
                }
            }
            cfg
        }
        Cmd::Ablate {
            common,
            attack,
            mode,
            weights,
        } => {
            let mut cfg = base(&common, Command::Ablate(Default::default()))?;
            if let Command::Ablate(p) = &mut cfg.command {
                apply_model(&mut p.model, &weights, common.seed);
                apply_attack(&mut p.attack, &attack, common.seed);
                if let Some(m) = mode {
                    p.mode = m;
                }
                if let Some(s) = common.seed {
                    p.task.seed = s;
                }
            }
            cfg
        }
        Cmd::Sweep {
            common,
            attack,
            weights,
            synthetic: n,
            steps_list,
            eps_list,
            trends,
        } => {
            let mut cfg = base(&common, Command::Sweep(Default::default()))?;
            if let Command::Sweep(p) = &mut cfg.command {
                apply_model(&mut p.model, &weights, common.seed);
                apply_attack(&mut p.attack, &attack, common.seed);
                synthetic(&mut p.images, n, common.seed);
                if !steps_list.is_empty() {
                    p.axis = SweepAxis::Steps(steps_list);
                }
                if !eps_list.is_empty() {
                    p.axis = SweepAxis::Epsilon(eps_list);
                }
                if !trends.is_empty() {
                    p.trend_objectives = trends;
                }
            }
            cfg
        }
        Cmd::Transfer { common, attack, models } => {
            let mut cfg = base(&common, Command::Transfer(Default::default()))?;
            if let Command::Transfer(p) = &mut cfg.command {
                apply_attack(&mut p.attack, &attack, common.seed);
                if !models.is_empty() {
                    p.models = models
                        .into_iter()
                        .map(|(name, path)| NamedModel {
                            name,
                            model: ModelSpec {
                                weights: Some(path),
                                ..Default::default()
                            },
                            finetune: None,
                        })
                        .collect();
                    let known = |n: &str| p.models.iter().any(|m| m.name == n);
                    if p.mobius.as_ref().is_some_and(|m| !known(&m.robust) || !known(&m.standard)) {
                        p.mobius = None;
                    }
                }
                if let Some(s) = common.seed {
                    p.task.seed = s;
                    for m in &mut p.models {
                        m.model.seed = s;
                        if let Some(f) = &mut m.finetune {
                            f.seed = s;
                        }
                    }
                }
            }
            cfg
        }
        Cmd::Finetune {
            common,
            attack,
            weights,
            epochs,
            inner_eps,
        } => {
            let mut cfg = base(&common, Command::Finetune(Default::default()))?;
            if let Command::Finetune(p) = &mut cfg.command {
                apply_model(&mut p.model, &weights, common.seed);
                apply_attack(&mut p.attack, &attack, common.seed);
                if let Some(e) = epochs {
                    p.fare.epochs = e;
                }
                if let Some(e) = inner_eps {
                    p.fare.inner_eps = e;
                    p.fare.inner_alpha = p.fare.inner_alpha.min(e);
                }
                if let Some(s) = common.seed {
                    p.fare.seed = s;
                    p.task.seed = s;
                }
            }
            cfg
        }
        Cmd::TaskEval {
            common,
            attack,
            weights,
        } => {
            let mut cfg = base(&common, Command::TaskEval(Default::default()))?;
            if let Command::TaskEval(p) = &mut cfg.command {
                apply_model(&mut p.model, &weights, common.seed);
                apply_attack(&mut p.attack, &attack, common.seed);
                if let Some(s) = common.seed {
                    p.task.seed = s;
                }
            }
            cfg
        }
        Cmd::Replay { .. } => unreachable!("handled before building a config"),
    })
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("VEATTACK_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("VEATTACK_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main(cli: Cli) -> anyhow::Result<ExitCode> {
    init_threads()?;
    if let Cmd::Replay { report, out } = &cli.command {
        let diffs = replay(report, out)?;
        if diffs.is_empty() {
            println!("replay matches {}", report.display());
            return Ok(ExitCode::SUCCESS);
        }
        println!("replay differs in: {}", diffs.join(", "));
        return Ok(ExitCode::from(1));
    }
    let mut cfg = build(cli.command)?;
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    let report = run(&cfg)?;
    for c in &report.checks {
        let tag = match (c.asserted, c.holds) {
            (_, true) => "ok",
            (true, false) => "FAILED",
            (false, false) => "not observed",
        };
        println!("[{tag}] {} {}", c.name, c.detail);
    }
    println!("report: {}", cfg.out_dir.join(REPORT_FILE).display());
    Ok(if report.all_hold() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
