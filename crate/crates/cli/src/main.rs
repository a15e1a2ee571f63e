//! `xmodal`: batch front end for data generation, source training, transfer,
//! evaluation and ablation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use xmodal::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use xmodal::metrics::MetricsRecorder;
use xmodal::model::SourceModel;
use xmodal::nn::Mode;
use xmodal::synth::{generate, load_corpus, save_corpus, GeneratedCorpus};
use xmodal::transfer::{
    ablate, accuracy, evaluate, train_source, transfer, ExperimentConfig, LabeledBatchSource,
};
use xmodal::{Error, ErrorCategory, Result};

const RUN_MANIFEST: &str = "run.toml";

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Source-free cross-modal transfer on synthetic data")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Corpus directory.
    #[arg(long, env = "XMODAL_DATA_ROOT")]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as TOML.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one source model on a source-modality domain.
    TrainSource {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Source domain index.
        #[arg(long, default_value_t = 0)]
        domain: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt source checkpoints to the target modality.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Score a checkpoint on the labeled target split.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// Appends the result to `eval.csv` here and writes a run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        checkpoint: PathBuf,
    },
    /// Run the four loss ablation arms.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
}

#[derive(Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

/// Written as `run.toml` into every output directory.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    seed: Option<u64>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
    /// Absent for commands that take no configuration.
    config: Option<ExperimentConfig>,
}

struct Run {
    command: &'static str,
    started: u128,
    inputs: Vec<InputHash>,
    outputs: Vec<PathBuf>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Run {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: now_ms(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records the content hash of an input file. A corpus is identified by
    /// its manifest, which lists the hashes of every array file.
    fn input(&mut self, path: &Path) -> Result<()> {
        let file = if path.is_dir() {
            path.join("manifest.toml")
        } else {
            path.to_path_buf()
        };
        let bytes = fs::read(&file).map_err(|e| io_err(&file, e))?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn finish(self, out_dir: &Path, config: Option<(&ExperimentConfig, u64)>) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            seed: config.map(|c| c.1),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            config: config.map(|c| c.0.clone()),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Contract(e.to_string()))?;
        let path = out_dir.join(RUN_MANIFEST);
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

fn load_config(common: &Common, data_seed: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        if data_seed {
            cfg.data.seed = seed;
        } else {
            cfg.transfer.seed = seed;
        }
    }
    for w in cfg.transfer.warnings() {
        warn!("{w}");
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_sources(paths: &[PathBuf], corpus: &GeneratedCorpus, run: &mut Run) -> Result<Vec<SourceModel>> {
    let mut models = Vec::new();
    for p in paths {
        run.input(p)?;
        models.push(load_checkpoint(p)?.into_source()?);
    }
    xmodal::model::check_compatible(&models)?;
    check_against_corpus(&models, corpus)?;
    Ok(models)
}

fn check_against_corpus(models: &[SourceModel], corpus: &GeneratedCorpus) -> Result<()> {
    let classes = corpus.spec.num_tr_classes;
    let dim = corpus.spec.input_dim;
    for m in models {
        if m.num_classes != classes || m.spec.input_dim != dim {
            return Err(Error::Contract(format!(
                "checkpoint has {} classes over {} inputs, corpus has {classes} over {dim}",
                m.num_classes, m.spec.input_dim
            )));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrintConfig { common } => {
            let cfg = load_config(&common, false)?;
            print!("{}", cfg.to_toml());
        }
        Command::GenData { common, out } => {
            let cfg = load_config(&common, true)?;
            let mut run = Run::new("gen-data");
            if let Some(p) = &common.config {
                run.input(p)?;
            }
            let corpus = generate(&cfg.data)?;
            save_corpus(&corpus, &out)?;
            info!(
                "wrote corpus to {}: {} domains, {} target rows, {} paired rows",
                out.display(),
                corpus.source_domains.len(),
                corpus.target.len(),
                corpus.ti.len()
            );
            run.outputs.push(out.join("manifest.toml"));
            run.finish(&out, Some((&cfg, cfg.data.seed)))?;
        }
        Command::TrainSource {
            common,
            data,
            domain,
            out,
        } => {
            let cfg = load_config(&common, false)?;
            let mut run = Run::new("train-source");
            run.input(&data.data)?;
            let corpus = load_corpus(&data.data)?;
            let d = corpus.source_domains.get(domain).ok_or_else(|| {
                Error::Config(format!(
                    "domain {domain} out of range; corpus has {} source domains",
                    corpus.source_domains.len()
                ))
            })?;
            let x = d.inputs();
            let model = train_source(
                LabeledBatchSource {
                    inputs: &x,
                    labels: &d.labels,
                },
                cfg.model.clone(),
                corpus.spec.num_tr_classes,
                &cfg.transfer,
            )?;
            create_dir(&out)?;
            let path = out.join("source.ckpt");
            save_checkpoint(&Checkpoint::source(model.clone(), cfg.hash()), &path)?;
            let probs = model.predict(&corpus.source_eval.inputs(), Mode::Eval)?;
            let same = accuracy(&probs, &corpus.source_eval.labels)?;
            info!("source domain {domain}: held-out source-modality accuracy {same:.4}");
            run.outputs.push(path);
            run.finish(&out, Some((&cfg, cfg.transfer.seed)))?;
        }
        Command::Transfer {
            common,
            data,
            out,
            checkpoints,
        } => {
            let cfg = load_config(&common, false)?;
            let mut run = Run::new("transfer");
            run.input(&data.data)?;
            let corpus = load_corpus(&data.data)?;
            let sources = load_sources(&checkpoints, &corpus, &mut run)?;
            create_dir(&out)?;
            let mut rec = MetricsRecorder::create(&out, sources.len(), &corpus.target)?;
            let outcome = transfer(&sources, &corpus.target.unlabeled(), &corpus.ti, &cfg.transfer, &mut rec)?;
            rec.losses.finish()?;
            rec.accuracy.finish()?;
            let acc = evaluate(&outcome.model, &corpus.target)?;
            info!("target accuracy {acc:.4}, zeta {:?}", outcome.model.zeta.projected);
            let path = out.join("fused.ckpt");
            save_checkpoint(&Checkpoint::fused(outcome.model, cfg.hash()), &path)?;
            run.outputs.extend([path, out.join("metrics.csv"), out.join("accuracy.csv")]);
            run.finish(&out, Some((&cfg, cfg.transfer.seed)))?;
        }
        Command::Eval {
            data,
            out,
            checkpoint,
        } => {
            let mut run = Run::new("eval");
            run.input(&data.data)?;
            run.input(&checkpoint)?;
            let corpus = load_corpus(&data.data)?;
            let model = load_checkpoint(&checkpoint)?.into_fused()?;
            check_against_corpus(&model.models, &corpus)?;
            let acc = evaluate(&model, &corpus.target)?;
            println!("{acc}");
            if let Some(out) = out {
                create_dir(&out)?;
                let path = out.join("eval.csv");
                let fresh = !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| io_err(&path, e))?;
                let mut line = String::new();
                if fresh {
                    line.push_str("checkpoint,accuracy\n");
                }
                line.push_str(&format!("{},{acc}\n", checkpoint.display()));
                f.write_all(line.as_bytes()).map_err(|e| io_err(&path, e))?;
                run.outputs.push(path);
                run.finish(&out, None)?;
            }
        }
        Command::Ablate {
            common,
            data,
            out,
            checkpoints,
        } => {
            let cfg = load_config(&common, false)?;
            let mut run = Run::new("ablate");
            run.input(&data.data)?;
            let corpus = load_corpus(&data.data)?;
            let sources = load_sources(&checkpoints, &corpus, &mut run)?;
            create_dir(&out)?;
            let rows = ablate(&sources, &corpus.target.unlabeled(), &corpus.target, &corpus.ti, &cfg.transfer)?;
            let mut text = String::from("arm,accuracy");
            for k in 0..sources.len() {
                text.push_str(&format!(",zeta_{k}"));
            }
            text.push('\n');
            for r in &rows {
                info!("{:<8} {:.4}", r.arm.name(), r.accuracy);
                text.push_str(&format!("{},{}", r.arm.name(), r.accuracy));
                for z in &r.zeta {
                    text.push_str(&format!(",{z}"));
                }
                text.push('\n');
            }
            let path = out.join("ablation_table.csv");
            fs::write(&path, text).map_err(|e| io_err(&path, e))?;
            run.outputs.push(path);
            run.finish(&out, Some((&cfg, cfg.transfer.seed)))?;
        }
    }
    Ok(())
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Version => 4,
        ErrorCategory::Contract => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", category.as_str());
            ExitCode::from(exit_code(category))
        }
    }
}
