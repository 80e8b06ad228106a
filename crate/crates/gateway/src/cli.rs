//! Command line entry points for every pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use unitac::baselines::{Knn, DEFAULT_K};
use unitac::contact_sim::{perturb_instance, synthesize_dataset, CollectionProtocol, GenerationRecord};
use unitac::dataset::{load_dataset, save_dataset, split, Dataset};
use unitac::eval::{
    compare_methods, evaluate, evaluate_cross_instance, threshold_sweep, EvalReport, KnnLocalizer, KnnMode, Localizer,
    DEFAULT_EPSILON_CM,
};
use unitac::kinematics::Robot;
use unitac::live::bench_throughput;
use unitac::model::{fit, load_model, model_to_json, Head, TrainConfig};
use unitac::phri::RuleSet;

use crate::session::{Shared, DEFAULT_TICK_HZ};

#[derive(Debug, Parser)]
#[command(name = "unitac", version, about = "Proprioceptive touch localization toolkit")]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Preset name or path to a chain file.
    #[arg(long, global = true, default_value = "spotlike")]
    pub robot: String,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mlp,
    KnnRegressor,
    KnnClassifier,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a touch dataset.
    Gen {
        #[arg(long)]
        configs: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        no_contact_fraction: Option<f64>,
        /// Torque noise in N·m; defaults to the robot's resolved level.
        #[arg(long)]
        noise_torque: Option<f64>,
        #[arg(long)]
        noise_position: Option<f64>,
        /// Record from a perturbed instance of the robot.
        #[arg(long, default_value_t = 0.0)]
        instance_scale: f64,
        #[arg(long, default_value_t = 1)]
        instance_seed: u64,
    },
    /// Train a localizer.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = HeadArg::Regression)]
        head: HeadArg,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Score localizers on the held-out split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Train and score all four methods.
        #[arg(long)]
        all: bool,
        #[arg(long, value_enum, default_value_t = MethodArg::Mlp)]
        method: MethodArg,
        #[arg(long, default_value_t = DEFAULT_EPSILON_CM)]
        epsilon: f64,
        /// Threshold grid `start:stop:step` in centimetres.
        #[arg(long)]
        sweep: Option<String>,
        /// Also score on an instance perturbed at this scale.
        #[arg(long)]
        cross_instance: Option<f64>,
        #[arg(long, default_value_t = 1)]
        instance_seed: u64,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Measure sustained filtered inference rate.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
    },
    /// Run the live session server.
    Serve {
        #[arg(long)]
        model: PathBuf,
        /// Rule preset; defaults to the robot's.
        #[arg(long)]
        rules: Option<String>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = DEFAULT_TICK_HZ)]
        tick_hz: f64,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct Hyper {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub split: Option<f64>,
}

impl Hyper {
    fn config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            split_ratio: self.split.unwrap_or(d.split_ratio),
            seed,
            ..d
        }
    }
}

pub fn load_robot(name: &str) -> anyhow::Result<Robot<f64>> {
    if name.ends_with(".json") {
        let text = fs::read_to_string(name).with_context(|| format!("reading {name}"))?;
        Ok(Robot::from_json(&text)?)
    } else {
        Ok(Robot::preset(name)?)
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn head_for(arg: HeadArg, data: &Dataset) -> Head {
    match arg {
        HeadArg::Regression => Head::Regression,
        HeadArg::Classification => Head::Classification { n_points: data.n_points() },
    }
}

pub fn parse_grid(spec: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<f64> = spec.split(':').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().context("sweep grid")?;
    let [start, stop, step] = parts[..] else { bail!("sweep grid must be start:stop:step") };
    if !(step > 0.0 && stop >= start) {
        bail!("sweep grid needs step > 0 and stop >= start");
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

fn with_grid(mut r: EvalReport, grid: Option<&[f64]>) -> anyhow::Result<EvalReport> {
    if let Some(g) = grid {
        r.sweep = threshold_sweep(&r.distances_cm, g)?;
    }
    Ok(r)
}

/// Runs a command and returns the summary printed on stdout.
pub fn run(cli: Cli) -> anyhow::Result<String> {
    let robot = load_robot(&cli.robot)?;
    match cli.command {
        Command::Gen { configs, reps, no_contact_fraction, noise_torque, noise_position, instance_scale, instance_seed } => {
            let d = CollectionProtocol::for_robot(robot.name());
            let proto = CollectionProtocol {
                n_configs: configs.unwrap_or(d.n_configs),
                reps_per_point: reps.unwrap_or(d.reps_per_point),
                no_contact_fraction: no_contact_fraction.unwrap_or(d.no_contact_fraction),
                noise_sigma_torque: noise_torque.or(d.noise_sigma_torque),
                noise_sigma_position: noise_position.unwrap_or(d.noise_sigma_position),
                seed: cli.seed,
                ..d
            };
            let instance = perturb_instance(&robot.chain, instance_scale, instance_seed);
            let data = synthesize_dataset(&robot, &proto, &instance)?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from(format!("{}.ndjson", robot.name())));
            save_dataset(&data, &out)?;
            Ok(format!(
                "{} samples ({} contact, {} no-contact) -> {}",
                data.len(),
                data.contact_count(),
                data.len() - data.contact_count(),
                out.display()
            ))
        }
        Command::Train { data, head, hyper } => {
            let data = load_dataset(&data)?;
            if data.dof != robot.chain.dof() {
                bail!("dataset has {} joints, robot {} has {}", data.dof, robot.name(), robot.chain.dof());
            }
            let config = hyper.config(cli.seed);
            let (train_set, val_set) = split(&data, config.split_ratio, config.seed)?;
            let (model, history, initial_loss) = fit(&train_set, Some(&val_set), head_for(head, &data), &config)?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from("model.json"));
            write(&out, &model_to_json(&model))?;
            let hist_path = out.with_extension("history.json");
            let hist = json!({ "config": config_json(&config), "initial_loss": initial_loss, "epochs": history });
            write(&hist_path, &serde_json::to_string_pretty(&hist)?)?;
            let last = history.last().map(|e| e.train_loss).unwrap_or(initial_loss);
            Ok(format!(
                "trained {:?} head, widths {:?}, final train loss {last:.6} -> {}",
                head,
                model.widths(),
                out.display()
            ))
        }
        Command::Eval { data, model, all, method, epsilon, sweep, cross_instance, instance_seed, hyper } => {
            let data = load_dataset(&data)?;
            let config = hyper.config(cli.seed);
            let grid = sweep.as_deref().map(parse_grid).transpose()?;
            let grid = grid.as_deref();
            let body = if all {
                let reports = compare_methods(&robot, &data, &config, epsilon)?;
                let reports = reports.into_iter().map(|r| with_grid(r, grid)).collect::<anyhow::Result<Vec<_>>>()?;
                serde_json::to_value(reports)?
            } else {
                let (train_set, val_set) = split(&data, config.split_ratio, config.seed)?;
                let localizer: Box<dyn Localizer> = match method {
                    MethodArg::Mlp => Box::new(match &model {
                        Some(path) => load_model(path)?,
                        None => bail!("--method mlp needs --model"),
                    }),
                    MethodArg::KnnRegressor => Box::new(KnnLocalizer { knn: Knn::fit(&train_set, DEFAULT_K)?, mode: KnnMode::Regressor }),
                    MethodArg::KnnClassifier => Box::new(KnnLocalizer { knn: Knn::fit(&train_set, DEFAULT_K)?, mode: KnnMode::Classifier }),
                };
                match cross_instance {
                    Some(scale) => {
                        let unseen = unseen_instance(&robot, &data, scale, instance_seed)?;
                        let (seen, unseen) = evaluate_cross_instance(localizer.as_ref(), &robot, &val_set, &unseen, epsilon)?;
                        json!({ "seen": with_grid(seen, grid)?, "unseen": with_grid(unseen, grid)? })
                    }
                    None => serde_json::to_value(with_grid(evaluate(localizer.as_ref(), &robot, &val_set, epsilon)?, grid)?)?,
                }
            };
            let text = serde_json::to_string_pretty(&body)?;
            if let Some(out) = &cli.out {
                write(out, &text)?;
            }
            Ok(text)
        }
        Command::Bench { model, duration } => {
            let model = load_model(&model)?;
            let report = bench_throughput(&model, &robot, duration, cli.seed)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(out) = &cli.out {
                write(out, &text)?;
            }
            let echo = json!({ "robot": robot.name(), "widths": model.widths(), "duration_s": duration, "seed": cli.seed });
            Ok(format!("{echo}\n{text}"))
        }
        Command::Serve { model, rules, addr, tick_hz } => {
            let model = load_model(&model)?;
            let rules = RuleSet::preset(rules.as_deref().unwrap_or(robot.name()))?;
            let shared = Arc::new(Shared::new(robot, model, rules, tick_hz)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                eprintln!("listening on ws://{}/ws", listener.local_addr()?);
                crate::server::serve(listener, shared, cli.seed).await
            })?;
            Ok(String::new())
        }
    }
}

fn config_json(c: &TrainConfig) -> serde_json::Value {
    json!({
        "learning_rate": c.learning_rate,
        "epochs": c.epochs,
        "batch_size": c.batch_size,
        "seed": c.seed,
        "split_ratio": c.split_ratio,
    })
}

/// Re-records the dataset's protocol on a perturbed instance.
pub fn unseen_instance(robot: &Robot<f64>, data: &Dataset, scale: f64, seed: u64) -> anyhow::Result<Dataset> {
    let record = GenerationRecord::from_dataset(data).context("dataset header carries no generation record")?;
    let instance = perturb_instance(&robot.chain, scale, seed);
    if instance == record.instance {
        bail!("unseen instance equals the recorded one");
    }
    Ok(synthesize_dataset(robot, &record.protocol, &instance)?)
}
