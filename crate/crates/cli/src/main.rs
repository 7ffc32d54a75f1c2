use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use symcode::checkpoint::load_model;
use symcode::config::TrainConfig;
use symcode::decomposition::DecompositionMode;
use symcode::env::{collect_rl_quads, sample_observations, EnvSpec};
use symcode::eval::{
    angle_velocity_probe, export_embeddings, fit_transition, invariance_eval, preservation_eval, rank_eval,
    read_embeddings, sample_references, transitions_from, EvalBatches, TransitionConfig, REFERENCE_COUNT,
};
use symcode::gradients::{check_losses, parse_losses, DEFAULT_INSTANCES, TOLERANCE};
use symcode::objectives::{verify_induced_action, ActionTable};
use symcode::trainer::{resume, train, MODEL_FILE, RECORD_FILE};
use symcode::{Error, Result};

/// Learn equivariant embeddings from observed transformations.
#[derive(Parser)]
#[command(name = "symcode", version)]
struct Cli {
    /// Emit one JSON document per output line.
    #[arg(long, global = true)]
    json: bool,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file, or the name of a bundled preset.
    #[arg(long)]
    config: String,
    /// Dotted override such as `encoder.hidden=[64,64]`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write the run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Preservation residuals (and invariance scores for active runs) on held-out batches.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Evaluation seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8)]
        batches: usize,
    },
    /// Fit a latent transition model and report H@1 and MRR.
    Rank {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 2000)]
        transition_steps: u64,
    },
    /// Compare analytic and finite-difference gradients of the losses.
    Gradcheck {
        /// Comma-separated loss names, or `all`.
        #[arg(long, default_value = "all")]
        losses: String,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check that an embedding table induces a latent group action.
    VerifyAction {
        /// Order of the cyclic group for a random table.
        #[arg(long, default_value_t = 8)]
        order: usize,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one entry of the action table.
        #[arg(long)]
        fault: bool,
        /// Embed the cyclic shifts of a double-bump config with this model instead.
        #[arg(long, requires = "config")]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<String>,
    },
    /// Write embeddings and ground-truth states of fresh observations as CSV.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a bundled end-to-end recipe.
    Demo {
        recipe: Recipe,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "demo-pendulum")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Recipe {
    Pendulum,
}

struct Output {
    json: bool,
}

impl Output {
    /// A closed stdout (for example a pipe into `head`) is not an error.
    fn emit(&self, value: Value, text: impl FnOnce() -> String) {
        let line = if self.json { value.to_string() } else { text() };
        let _ = writeln!(std::io::stdout().lock(), "{line}");
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } => 2,
        Error::Io(_) | Error::Checksum(_) | Error::Csv(_) | Error::Json(_) => 3,
        _ => 1,
    }
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut set = args.set.clone();
    if let Some(s) = seed {
        set.push(format!("seed={s}"));
    }
    TrainConfig::load(&args.config, &set)
}

fn echo_config(out: &Output, config: &TrainConfig) {
    out.emit(
        json!({"event": "config", "hash": config.content_hash(), "config": config}),
        || config.to_pretty_json(),
    );
}

fn run_train(out: &Output, config: &TrainConfig, dir: &Path, from: Option<&Path>) -> Result<()> {
    echo_config(out, config);
    let outcome = match from {
        Some(ckpt) => resume(config, ckpt, Some(dir))?,
        None => train(config, Some(dir))?,
    };
    let steps = outcome.record.steps();
    let last = steps.last();
    out.emit(
        json!({
            "event": "trained",
            "steps": config.steps,
            "final_total": last.map(|s| s.total),
            "record": dir.join(RECORD_FILE),
            "model": dir.join(MODEL_FILE),
        }),
        || match last {
            Some(s) => format!(
                "trained {} steps: total {:.6e} (symmetry {:.6e}, barrier {:.6e}); model at {}",
                config.steps,
                s.total,
                s.symmetry,
                s.barrier,
                dir.join(MODEL_FILE).display()
            ),
            None => format!("nothing to train; model at {}", dir.join(MODEL_FILE).display()),
        },
    );
    Ok(())
}

fn run_eval(out: &Output, config: &TrainConfig, model: &Path, seed: u64, batches: usize) -> Result<()> {
    let model = load_model(model)?;
    let env = config.env.build()?;
    let opts = EvalBatches {
        batches,
        batch_size: config.batch_size,
        transforms: config.transforms,
        seed,
    };
    let ranges = config
        .decomposition
        .as_ref()
        .map(|d| d.ranges())
        .unwrap_or_default();
    let reports = preservation_eval(&model, env.as_ref(), &opts, &ranges)?;
    for (i, r) in reports.iter().enumerate() {
        out.emit(json!({"event": "preservation", "block": i, "report": r}), || {
            format!(
                "block {i}: distance median {:.4e} p90 {:.4e} max {:.4e} | inner median {:.4e} | cosine median {:.4e}",
                r.distance.median, r.distance.p90, r.distance.max, r.inner_product.median, r.cosine.median
            )
        });
    }
    if let Some(dec) = config
        .decomposition
        .as_ref()
        .filter(|d| d.mode == DecompositionMode::Active)
    {
        let scores = invariance_eval(&model, env.as_ref(), dec, &opts)?;
        out.emit(json!({"event": "invariance_score", "scores": scores}), || {
            let rows: Vec<String> = scores
                .iter()
                .enumerate()
                .map(|(i, r)| format!("block {i}: {r:.4?}"))
                .collect();
            format!(
                "invariance score (rows: blocks, columns: subgroups)\n{}",
                rows.join("\n")
            )
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_rank(
    out: &Output,
    config: &TrainConfig,
    model: &Path,
    seed: u64,
    episodes: usize,
    steps: usize,
    transition_steps: u64,
) -> Result<()> {
    let encoder = load_model(model)?;
    let env = config.env.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_set = transitions_from(&collect_rl_quads(env.as_ref(), &mut rng, episodes, steps)?);
    let test_set = transitions_from(&collect_rl_quads(
        env.as_ref(),
        &mut rng,
        episodes.div_ceil(4),
        steps,
    )?);
    let actions = env.actions().map_or(0, |a| a.len());
    let tconfig = TransitionConfig {
        steps: transition_steps,
        seed,
        ..Default::default()
    };
    let transition = fit_transition(&encoder, &train_set, actions, &tconfig)?;
    let refs = sample_references(&test_set, REFERENCE_COUNT, &mut rng);
    let report = rank_eval(&transition, &encoder, &test_set, &refs)?;
    out.emit(json!({"event": "ranking", "report": report}), || {
        format!(
            "H@1 {:.4}  MRR {:.4}  ({} queries, {} references, {} ties)",
            report.hits_at_1, report.mrr, report.queries, report.reference_size, report.tie_policy
        )
    });
    Ok(())
}

fn run_gradcheck(out: &Output, losses: &str, instances: usize, seed: u64) -> Result<bool> {
    let results = check_losses(&parse_losses(losses)?, instances, seed)?;
    for r in &results {
        out.emit(
            json!({"event": "gradcheck", "loss": r.loss, "instances": r.instances,
                   "max_relative_error": r.max_relative_error, "passed": r.passed()}),
            || {
                format!(
                    "{:<18} {:>3} instances  max rel err {:.3e}  {}",
                    r.loss.name(),
                    r.instances,
                    r.max_relative_error,
                    if r.passed() { "ok" } else { "FAIL" }
                )
            },
        );
    }
    let ok = results.iter().all(|r| r.passed());
    if !out.json {
        let _ = writeln!(
            std::io::stdout().lock(),
            "tolerance {TOLERANCE:e}: {}",
            if ok { "all passed" } else { "FAILED" }
        );
    }
    Ok(ok)
}

fn embedding_table(
    order: usize,
    dim: usize,
    seed: u64,
    model: Option<&Path>,
    config: Option<&str>,
) -> Result<(Vec<Vec<f64>>, ActionTable)> {
    let (Some(model), Some(config)) = (model, config) else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..order)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        return Ok((table, ActionTable::cyclic(order)));
    };
    let config = TrainConfig::load(config, &[])?;
    let EnvSpec::DoubleBump { length, .. } = config.env else {
        return Err(Error::Config(
            "verify-action with a model needs a double_bump config".into(),
        ));
    };
    let env = config.env.build()?;
    let encoder = load_model(model)?;
    // shifts of the rectangle with the triangle held at 0
    let mut data = Vec::with_capacity(length * env.obs_dim());
    for s in 0..length {
        data.extend(env.observe(&[s as f64, 0.0]));
    }
    let z = encoder.forward(&symcode::autodiff::Tensor::new(
        vec![length, env.obs_dim()],
        data,
    )?)?;
    let table = (0..length).map(|i| z.row(i).to_vec()).collect();
    Ok((table, ActionTable::cyclic(length)))
}

fn run_verify(
    out: &Output,
    order: usize,
    dim: usize,
    seed: u64,
    fault: bool,
    model: Option<&Path>,
    config: Option<&str>,
) -> Result<bool> {
    if order < 2 {
        return Err(Error::Config("the group needs at least two elements".into()));
    }
    let (table, mut action) = embedding_table(order, dim, seed, model, config)?;
    if fault {
        let n = action.action.len();
        action.action[1][0] = (action.action[1][0] + 1) % n;
    }
    let report = verify_induced_action(&table, &action)?;
    out.emit(
        json!({"event": "verify_action", "report": report, "is_action": report.is_action()}),
        || {
            format!(
                "{} points, group of order {}: {} checks, {} violations{}",
                report.points,
                report.group_order,
                report.checks,
                report.violations.len(),
                report
                    .violations
                    .first()
                    .map(|v| format!(" (first: {v:?})"))
                    .unwrap_or_default()
            )
        },
    );
    Ok(report.is_action())
}

fn run_export(
    out: &Output,
    config: &TrainConfig,
    model: &Path,
    seed: u64,
    count: usize,
    path: &Path,
) -> Result<()> {
    let encoder = load_model(model)?;
    let env = config.env.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(symcode::eval::EVAL_STREAM);
    let (obs, states) = sample_observations(env.as_ref(), &mut rng, count)?;
    let names = env.state_names();
    export_embeddings(
        &encoder,
        &obs,
        &states,
        &names,
        BufWriter::new(File::create(path)?),
    )?;
    out.emit(json!({"event": "export", "rows": count, "path": path}), || {
        format!("wrote {count} rows to {}", path.display())
    });
    Ok(())
}

fn run_demo(out: &Output, set: &[String], seed: Option<u64>, dir: &Path) -> Result<()> {
    let args = ConfigArgs {
        config: "pendulum".into(),
        set: set.to_vec(),
    };
    let config = load_config(&args, seed)?;
    run_train(out, &config, dir, None)?;
    let model = dir.join(MODEL_FILE);
    run_eval(out, &config, &model, config.seed, 8)?;
    let csv = dir.join("embeddings.csv");
    run_export(out, &config, &model, config.seed, 2000, &csv)?;

    // 1-NN probe: the export is the reference set, queries come from a
    // stream the export never touched
    let table = read_embeddings(File::open(&csv)?)?;
    let n = table.header.iter().filter(|h| h.starts_with('z')).count();
    let reference: Vec<Vec<f64>> = table.rows.iter().map(|r| r[..n].to_vec()).collect();
    let reference_states: Vec<Vec<f64>> = table.rows.iter().map(|r| r[n..].to_vec()).collect();
    let encoder = load_model(&model)?;
    let env = config.env.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(symcode::eval::EVAL_STREAM + 1);
    let (obs, states) = sample_observations(env.as_ref(), &mut rng, 500)?;
    let z = encoder.forward(&obs)?;
    let queries: Vec<Vec<f64>> = (0..states.len()).map(|i| z.row(i).to_vec()).collect();
    let probe = angle_velocity_probe(&reference, &reference_states, &queries, &states)?;
    out.emit(json!({"event": "probe", "report": probe}), || {
        format!(
            "1-NN probe: theta circular MAE {:.4} rad, omega sign accuracy {:.1}%",
            probe.theta_circular_mae,
            100.0 * probe.omega_sign_accuracy
        )
    });
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let out = Output { json: cli.json };
    match cli.command {
        Command::Train {
            config,
            seed,
            out: dir,
            resume,
        } => {
            let c = load_config(&config, seed)?;
            run_train(&out, &c, &dir, resume.as_deref())?;
        }
        Command::Eval {
            config,
            model,
            seed,
            batches,
        } => {
            let c = load_config(&config, None)?;
            run_eval(&out, &c, &model, seed.unwrap_or(c.seed), batches)?;
        }
        Command::Rank {
            config,
            model,
            seed,
            episodes,
            steps,
            transition_steps,
        } => {
            let c = load_config(&config, None)?;
            run_rank(
                &out,
                &c,
                &model,
                seed.unwrap_or(c.seed),
                episodes,
                steps,
                transition_steps,
            )?;
        }
        Command::Gradcheck {
            losses,
            instances,
            seed,
        } => return run_gradcheck(&out, &losses, instances, seed),
        Command::VerifyAction {
            order,
            dim,
            seed,
            fault,
            model,
            config,
        } => return run_verify(&out, order, dim, seed, fault, model.as_deref(), config.as_deref()),
        Command::Export {
            config,
            model,
            seed,
            count,
            out: path,
        } => {
            let c = load_config(&config, None)?;
            run_export(&out, &c, &model, seed.unwrap_or(c.seed), count, &path)?;
        }
        Command::Demo {
            recipe: Recipe::Pendulum,
            set,
            seed,
            out: dir,
        } => run_demo(&out, &set, seed, &dir)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    let json = cli.json;
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let code = exit_code(&e);
            if json {
                eprintln!(
                    "{}",
                    json!({"event": "error", "code": code, "message": e.to_string()})
                );
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}
