mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use darp_core::agent::Agent;
use darp_core::embedder::{initial_embedder, train_embedder, EmbedderConfig, EmbeddingTable};
use darp_core::metrics::{emit_csv, summarize, write_summary};
use darp_core::numeric::Checkpoint;
use darp_core::sketchgen::{generate_dataset, Dataset, GenConfig, ImageFileFormat, SplitSelector};
use darp_core::trainer::{evaluate, metrics_csv, TrainConfig, Trainer};
use darp_core::verify::{check_component, CheckOptions, Component, TOLERANCE};
use darp_core::Error;
use darp_service::{AppState, ModelOptions, RetrievalModel, ServiceConfig};

#[derive(Parser)]
#[command(
    name = "darp",
    version,
    about = "Partial-sketch image retrieval with a reinforced attention agent"
)]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, env = "DARP_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file mirroring the configuration field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override applied after the file, e.g. `reward.gamma=0.8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic sketch/image dataset.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        noise_prob: Option<f64>,
        #[arg(long, default_value = "png")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the image embedder and freeze the gallery embeddings.
    TrainEmbedder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the attention agent against frozen embeddings.
    TrainAgent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Output directory for the checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an agent checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Greedy retrieval evaluation of an agent checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    GradCheck {
        /// Components to check (default: all).
        #[arg(long = "component")]
        components: Vec<String>,
        #[arg(long, default_value_t = darp_core::verify::SEEDS)]
        seeds: u64,
        /// Corrupt one analytic gradient to confirm the check fails.
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Serve on-the-fly retrieval sessions over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 10)]
        top_q: usize,
        #[arg(long, default_value_t = 900)]
        ttl_secs: u64,
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

enum Failure {
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 3,
            Failure::Core(Error::Config(_) | Error::Json(_)) => 2,
            Failure::Core(Error::Oracle(_)) => 3,
            Failure::Core(_) => 1,
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::GenData {
            classes,
            per_class,
            noise_prob,
            format,
            out,
            cfg,
        } => {
            let mut c: GenConfig = config::load(cfg.config.as_deref(), &cfg.overrides)?;
            if let Some(v) = classes {
                c.n_classes = v;
            }
            if let Some(v) = per_class {
                c.items_per_class = v;
            }
            if let Some(v) = noise_prob {
                c.noise_prob = v;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            let fmt = match format.as_str() {
                "png" => ImageFileFormat::Png,
                "pgm" => ImageFileFormat::Pgm,
                other => {
                    return Err(Error::Config(format!("unknown image format `{other}`")).into())
                }
            };
            let data = generate_dataset(&c)?;
            data.write(&out, fmt)?;
            println!("{} items", data.items.len());
            Ok(())
        }
        Cmd::TrainEmbedder {
            data,
            epochs,
            margin,
            out,
            cfg,
        } => {
            let mut c: EmbedderConfig = config::load(cfg.config.as_deref(), &cfg.overrides)?;
            if let Some(v) = epochs {
                c.epochs = v;
            }
            if let Some(v) = margin {
                c.margin = v;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            let data = Dataset::load(&data)?;
            let run = if c.epochs == 0 {
                initial_embedder(&data, c.seed)?
            } else {
                train_embedder(&data, &c)?
            };
            for (e, l) in run.losses.iter().enumerate() {
                log::info!("epoch {} triplet loss {l:.6}", e + 1);
            }
            let mut ck = run.to_checkpoint(c.margin)?;
            ck.set_meta("embedder_config", serde_json::to_string(&c)?);
            write_checkpoint(&ck, &out)?;
            println!(
                "{} embeddings written to {}",
                run.table.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::TrainAgent {
            data,
            embeddings,
            out,
            resume,
            cfg,
        } => {
            let mut c: TrainConfig = config::load(cfg.config.as_deref(), &cfg.overrides)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            let data = Dataset::load(&data)?;
            let table = EmbeddingTable::read_from(&Checkpoint::load(&embeddings)?)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut trainer = match &resume {
                Some(p) => Trainer::resume(&data, &table, c, &Checkpoint::load(p)?)?,
                None => Trainer::new(&data, &table, c)?,
            };
            log::info!(
                "training from cycle {} (episode round {})",
                trainer.cycle,
                trainer.episode
            );
            let dir = out.clone();
            trainer.run(|ck, cycle| {
                write_checkpoint(ck, &dir.join(format!("checkpoint_{cycle:06}.ckpt")))
            })?;
            if let Some(last) = trainer.metrics.last() {
                log::info!(
                    "cycle {} reward {:.4} loss {:.4} val auir {:.3} acc@5 {:.3}",
                    last.cycle,
                    last.mean_reward,
                    last.supervised_loss,
                    last.val_auir,
                    last.val_acc5
                );
            }
            write_checkpoint(&trainer.checkpoint()?, &out.join("agent.ckpt"))?;
            let metrics = out.join("metrics.csv");
            std::fs::write(&metrics, metrics_csv(&trainer.metrics))
                .map_err(|e| Error::io(&metrics, e))?;
            println!(
                "{} cycles; checkpoint at {}",
                trainer.cycle,
                out.join("agent.ckpt").display()
            );
            Ok(())
        }
        Cmd::Eval {
            data,
            checkpoint,
            split,
            out,
        } => {
            let which: SplitSelector = split.parse()?;
            let data = Dataset::load(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let agent = Agent::read_from(&ck)?;
            let table = EmbeddingTable::read_from(&ck)?;
            let dilation = match ck.meta("train_config") {
                Some(s) => serde_json::from_str::<TrainConfig>(s)?.dilation,
                None => darp_core::sketchgen::DEFAULT_DILATION,
            };
            let items = data.select(which);
            let results = evaluate(&agent, &items, &table, dilation)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            emit_csv(&results, &out.join("eval.csv"))?;
            let summary = summarize(&results);
            write_summary(&summary, &out.join("summary.json"))?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(())
        }
        Cmd::GradCheck {
            components,
            seeds,
            inject_bug,
        } => {
            let list: Vec<Component> = if components.is_empty() {
                Component::ALL.to_vec()
            } else {
                components
                    .iter()
                    .map(|c| c.parse())
                    .collect::<darp_core::Result<_>>()?
            };
            let opts = CheckOptions {
                seeds,
                inject_bug,
                ..Default::default()
            };
            let mut worst: Option<(f64, String)> = None;
            for c in list {
                let r = check_component(c, &opts)?;
                let kinks: usize = r.per_seed.iter().map(|s| s.kinks_skipped).sum();
                println!(
                    "{:<9} max relative error {:.3e} ({}), {kinks} kinks skipped",
                    c.name(),
                    r.max_relative_error,
                    r.worst_param.as_deref().unwrap_or("-")
                );
                if !r.passed()
                    && worst
                        .as_ref()
                        .is_none_or(|(e, _)| r.max_relative_error > *e)
                {
                    worst = Some((r.max_relative_error, r.worst_param.unwrap_or_default()));
                }
            }
            match worst {
                None => Ok(()),
                Some((e, name)) => Err(Failure::Verification(format!(
                    "worst parameter `{name}` at relative error {e:.3e} > {TOLERANCE:e}"
                ))),
            }
        }
        Cmd::Serve {
            checkpoint,
            data,
            port,
            host,
            split,
            top_q,
            ttl_secs,
            cors_origin,
        } => {
            let which: SplitSelector = split.parse()?;
            let model = RetrievalModel::from_files(
                &checkpoint,
                &data,
                which,
                ModelOptions {
                    top_q,
                    ..Default::default()
                },
            )?;
            let state = AppState::new(
                model,
                ServiceConfig {
                    ttl: std::time::Duration::from_secs(ttl_secs),
                    seed: seed.unwrap_or(0),
                    cors_origin,
                },
            );
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(async move {
                let addr = format!("{host}:{port}");
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .map_err(|e| Error::io(&addr, e))?;
                let local = listener.local_addr().map_err(|e| Error::io(&addr, e))?;
                println!("listening on http://{local}");
                let _ = std::io::stdout().flush();
                darp_service::serve(listener, state, darp_service::shutdown_signal())
                    .await
                    .map_err(|e| Error::io(&addr, e))
            })?;
            Ok(())
        }
    }
}

fn write_checkpoint(ck: &Checkpoint, path: &Path) -> darp_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ck.save(path)
}
