mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::{info, LevelFilter};
use pod_core::annotations::{read_json, write_json, Detection};
use pod_core::config::RunConfig;
use pod_core::error::Error;
use pod_core::geometry::BBox;
use pod_core::model::{ContextMode, Stage};
use pod_core::neighbors::NeighborGraph;
use pod_core::page::load_page;
use pod_core::pipeline::{self, Overlay};
use pod_core::synth::{generate_corpus, LayoutSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Exit codes, one per failure family.
pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const MISSING_INPUT: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const INVALID_INPUT: u8 = 5;
    pub const TRAINING: u8 = 6;
    pub const OUTPUT: u8 = 7;
}

#[derive(Debug)]
pub enum CliError {
    Missing(PathBuf),
    Config(String),
    Io(PathBuf, std::io::Error),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Missing(p) => write!(f, "missing input `{}`", p.display()),
            Self::Config(m) => write!(f, "configuration error: {m}"),
            Self::Io(p, e) => write!(f, "`{}`: {e}", p.display()),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Read { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::Missing(path)
            }
            Error::Config(m) | Error::InfeasibleLayout(m) => Self::Config(m),
            e => Self::Core(e),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Missing(_) => exit::MISSING_INPUT,
            Self::Config(_) => exit::CONFIG,
            Self::Io(..) => exit::FAILURE,
            Self::Core(e) => match e {
                Error::Write { .. } => exit::OUTPUT,
                Error::NoTrainingPairs | Error::EmptyTrainingSet => exit::TRAINING,
                Error::UnknownClass(_) => exit::CONFIG,
                Error::Read { .. }
                | Error::Decode { .. }
                | Error::UnsupportedImage { .. }
                | Error::Json { .. }
                | Error::InvalidPage(_)
                | Error::Checkpoint(_)
                | Error::DimensionMismatch(_)
                | Error::Geometry(_) => exit::INVALID_INPUT,
                _ => exit::FAILURE,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Page object detection: grid proposals, attentive region classification,
/// rule-based cleanup and evaluation.
#[derive(Parser)]
#[command(name = "pod", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Neighbor expansion radius in pixels.
    #[arg(long)]
    delta_neighbor: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: images, annotations, tokens, layouts and a manifest.
    Synth {
        /// TOML layout spec overlaid on the defaults (or on the context-pair preset).
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        /// Number of pages.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Start from the caption-look context-pair preset.
        #[arg(long)]
        context_pairs: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Grid proposals for one page image.
    Propose {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Include the neighbor graph as adjacency lists.
        #[arg(long)]
        with_neighbors: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain backbone and region embeddings on neighbor pairs.
    PretrainEmbed {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Keep the convolutional backbone fixed.
        #[arg(long)]
        freeze_backbone: bool,
        /// Write per-epoch losses here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the attentive classifier.
    Train {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Pretrained embedding checkpoint (required unless --from-scratch).
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Start every parameter from a fresh initialization.
        #[arg(long, conflicts_with = "pretrained")]
        from_scratch: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace the attended context with zeros.
        #[arg(long)]
        no_context: bool,
        #[arg(long)]
        out: PathBuf,
        /// Write per-epoch statistics here.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Classify every proposal of one image, or of every corpus page.
    Detect {
        #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
        image: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// Detections file for --image, directory for --corpus.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Caption relabeling and figure/table merging, on a file or a directory.
    Postprocess {
        #[arg(long)]
        detections: PathBuf,
        /// Token sidecar (file or directory); caption rules are skipped without it.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a detections directory against an annotations directory.
    Eval {
        #[arg(long, value_name = "DIR")]
        detections: PathBuf,
        #[arg(long, value_name = "DIR")]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Count detections that overlap no ground truth as false positives.
        #[arg(long)]
        strict_fp: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw detections or proposals over a page.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(
            long,
            required_unless_present = "proposals",
            conflicts_with = "proposals"
        )]
        detections: Option<PathBuf>,
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Serialize, Deserialize)]
struct ProposalsFile {
    page: [u32; 2],
    proposals: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neighbors: Option<Vec<Vec<usize>>>,
}

fn require(paths: &[&Path]) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(CliError::Missing(p.to_path_buf())),
        None => Ok(()),
    }
}

fn run_config(args: &ConfigArgs, typed: &[(&str, Value)]) -> Result<RunConfig> {
    let mut all: Vec<(&str, Value)> = typed.to_vec();
    if let Some(d) = args.delta_neighbor {
        all.push(("delta_neighbor", Value::from(d)));
    }
    config::load_run_config(args.config.as_deref(), &args.sets, &all)
}

fn seed_override(seed: Option<u64>) -> Vec<(&'static str, Value)> {
    seed.map(|s| ("seed", Value::from(s))).into_iter().collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            spec,
            n,
            seed,
            out,
            context_pairs,
            cfg,
        } => {
            let run = run_config(&cfg, &seed_override(seed))?;
            let base = if context_pairs {
                LayoutSpec::context_pairs()
            } else {
                run.synth.clone()
            };
            let layout = config::load_layout_spec(&base, spec.as_deref())?;
            let manifest = generate_corpus(&layout, n, run.seed, &out)?;
            info!("wrote {} pages to {}", manifest.pages.len(), out.display());
        }
        Command::Propose {
            image,
            out,
            with_neighbors,
            cfg,
        } => {
            require(&[&image])?;
            let run = run_config(&cfg, &[])?;
            let page = load_page(&image)?;
            let set = pipeline::proposals(&page, &run);
            let neighbors = with_neighbors.then(|| {
                let g = NeighborGraph::build(&set.proposals, set.page, run.delta_neighbor);
                (0..g.len()).map(|i| g.neighbors(i).to_vec()).collect()
            });
            write_json(
                &out,
                &ProposalsFile {
                    page: set.page,
                    proposals: set.proposals,
                    neighbors,
                },
            )?;
        }
        Command::PretrainEmbed {
            corpus,
            epochs,
            seed,
            out,
            freeze_backbone,
            report,
            cfg,
        } => {
            require(&[&corpus])?;
            let mut typed = seed_override(seed);
            typed.extend(epochs.map(|e| ("pretrain.epochs", Value::from(e))));
            if freeze_backbone {
                typed.push(("pretrain.freeze_backbone", Value::from(true)));
            }
            let run = run_config(&cfg, &typed)?;
            let pages = pipeline::labeled_pages(&pipeline::load_corpus(&corpus)?, &run)?;
            let (params, rep) = pipeline::run_pretrain(&pages, &run)?;
            pipeline::save_model(&out, &params, Stage::Pretrained, &run)?;
            if let Some(path) = report {
                write_json(&path, &rep)?;
            }
        }
        Command::Train {
            corpus,
            pretrained,
            from_scratch,
            epochs,
            seed,
            no_context,
            out,
            history,
            cfg,
        } => {
            require(&[&corpus])?;
            let pretrained = match (pretrained, from_scratch) {
                (Some(p), _) => Some(p),
                (None, true) => None,
                (None, false) => {
                    return Err(CliError::Config(
                        "train needs --pretrained <checkpoint> or --from-scratch".into(),
                    ))
                }
            };
            if let Some(p) = &pretrained {
                require(&[p])?;
            }
            let mut typed = seed_override(seed);
            typed.extend(epochs.map(|e| ("train.epochs", Value::from(e))));
            if no_context {
                typed.push((
                    "train.context",
                    serde_json::to_value(ContextMode::Zeroed).expect("enum"),
                ));
            }
            let run = run_config(&cfg, &typed)?;
            let init = match &pretrained {
                Some(p) => {
                    let (params, meta) = pipeline::load_model(p, Stage::Pretrained)?;
                    if meta.model != run.model {
                        return Err(CliError::Config(format!(
                            "{} was pretrained with a different model configuration",
                            p.display()
                        )));
                    }
                    Some(params)
                }
                None => None,
            };
            let pages = pipeline::labeled_pages(&pipeline::load_corpus(&corpus)?, &run)?;
            let (params, stats) = pipeline::run_train(&pages, init.as_ref(), &run)?;
            pipeline::save_model(&out, &params, Stage::Trained, &run)?;
            if let Some(path) = history {
                write_json(&path, &stats)?;
            }
        }
        Command::Detect {
            image,
            corpus,
            model,
            out,
            cfg,
        } => {
            let input = image
                .as_deref()
                .or(corpus.as_deref())
                .expect("clap requires one");
            require(&[&model, input])?;
            let run = run_config(&cfg, &[])?;
            let (params, meta) = pipeline::load_model(&model, Stage::Trained)?;
            match (&image, &corpus) {
                (Some(img), _) => {
                    let dets = pipeline::detect_image(&load_page(img)?, &params, &meta, &run)?;
                    write_json(&out, &dets)?;
                }
                (None, Some(dir)) => {
                    pipeline::detect_corpus(dir, &params, &meta, &run, &out)?;
                }
                (None, None) => unreachable!("clap requires one"),
            }
        }
        Command::Postprocess {
            detections,
            tokens,
            out,
        } => {
            require(&[&detections])?;
            if let Some(t) = &tokens {
                require(&[t])?;
            }
            if detections.is_dir() {
                pipeline::postprocess_dir(&detections, tokens.as_deref(), &out)?;
            } else {
                pipeline::postprocess_file(&detections, tokens.as_deref(), &out)?;
            }
        }
        Command::Eval {
            detections,
            annotations,
            out,
            strict_fp,
            cfg,
        } => {
            require(&[&detections, &annotations])?;
            let typed: Vec<(&str, Value)> = if strict_fp {
                vec![("eval.strict_fp", Value::from(true))]
            } else {
                vec![]
            };
            let run = run_config(&cfg, &typed)?;
            let report = pipeline::evaluate_dirs(&detections, &annotations, &run)?;
            write_json(&out, &report)?;
            info!("mAP {:?}, F1 {:.4}", report.map, report.total.f1);
        }
        Command::Render {
            image,
            detections,
            proposals,
            out,
            cfg,
        } => {
            let boxes = detections
                .as_deref()
                .or(proposals.as_deref())
                .expect("clap requires one");
            require(&[&image, boxes])?;
            let run = run_config(&cfg, &[])?;
            let page = load_page(&image)?;
            let overlays: Vec<Overlay> = if detections.is_some() {
                read_json::<Vec<Detection>>(boxes)?
                    .iter()
                    .map(Overlay::from)
                    .collect()
            } else {
                let file: ProposalsFile = read_json(boxes)?;
                if file.page != [page.width(), page.height()] {
                    return Err(CliError::Core(Error::InvalidPage(format!(
                        "proposals are for a {}×{} page, image is {}×{}",
                        file.page[0],
                        file.page[1],
                        page.width(),
                        page.height()
                    ))));
                }
                file.proposals.iter().map(Overlay::from).collect()
            };
            pipeline::save_rgb(&pipeline::render(&page, &overlays, &run)?, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = config::defaults_help();
    let command = Cli::command().mut_subcommands(|s| s.after_long_help(help.clone()));
    let cli = match command
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
