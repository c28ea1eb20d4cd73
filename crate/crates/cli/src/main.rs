use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssformer_core::complexity::analyze_config;
use ssformer_core::data::{load_dataset, netpbm, LabelMap};
use ssformer_core::model::{ModelConfig, Profile};
use ssformer_core::train::{self, Checkpoint, LogEvent, RunConfig, SynthConfig};
use ssformer_core::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "ssformer", version, about = "Shifted-window transformer segmentation: analysis, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and multiply-accumulate counts for a profile.
    Analyze {
        #[arg(long, default_value = "ade20k")]
        profile: String,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Also write the report to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train a model; writes a checkpoint and a JSON-lines metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory, or `synth` for generated scenes.
        #[arg(long)]
        data: String,
        /// Held-out dataset directory (defaults to the synthetic held-out
        /// split when training on `synth`).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log path; defaults to `metrics.jsonl` next to `--out`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes mIoU, pixel accuracy and per-class IoU.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory, or `synth` for the synthetic held-out split.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Run file the checkpoint must have been trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split the samples into this many independently evaluated shards.
        #[arg(long, default_value_t = 1)]
        shards: usize,
    },
    /// Write the argmax class map of one image as a graymap.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suites and print one line per check.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Analyze {
            profile,
            height,
            width,
            json,
        } => {
            let p = Profile::parse(&profile)?;
            let (dh, dw) = p.default_resolution();
            let (h, w) = (height.unwrap_or(dh), width.unwrap_or(dw));
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("image size {h}x{w} must be positive")));
            }
            let report = analyze_config(p.name(), &p.model_config(), h, w);
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(path) = json {
                write_file(&path, text.as_bytes())?;
            }
            println!("{text}");
        }
        Command::Train {
            config,
            data,
            eval_data,
            out,
            metrics,
        } => {
            let cfg = RunConfig::from_json(&read_text(&config)?)?;
            let (train_set, held_out) = if data == "synth" {
                train::synth_splits(&cfg.synth, cfg.decoder.num_classes)?
            } else {
                let held = match &eval_data {
                    Some(dir) => load_dataset(dir)?,
                    None => Vec::new(),
                };
                (load_dataset(Path::new(&data))?, held)
            };
            let metrics = metrics.unwrap_or_else(|| out.with_file_name("metrics.jsonl"));
            let mut log = BufWriter::new(File::create(&metrics).map_err(|e| io_err(&metrics, e))?);
            let outcome = train::train(&cfg, &train_set, &held_out, |event| {
                let line = serde_json::to_string(event).expect("event serializes");
                writeln!(log, "{line}").map_err(|e| io_err(&metrics, e))?;
                if let LogEvent::Eval { iter, miou, pixel_acc } = event {
                    eprintln!("iter {iter}: mIoU {miou:.4}, pixel accuracy {pixel_acc:.4}");
                }
                Ok(())
            })?;
            log.flush().map_err(|e| io_err(&metrics, e))?;
            Checkpoint::from_model(&outcome.model, Some(&outcome.optimizer)).save(&out)?;
            eprintln!("wrote {} and {}", out.display(), metrics.display());
        }
        Command::Eval {
            ckpt,
            data,
            out,
            config,
            shards,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let run_cfg = config.map(|p| read_text(&p).and_then(|t| RunConfig::from_json(&t))).transpose()?;
            let expected: Option<ModelConfig> = run_cfg.as_ref().map(RunConfig::model);
            let model = ck.to_model(expected.as_ref())?;
            let samples = if data == "synth" {
                let synth = run_cfg.map(|c| c.synth).unwrap_or_else(SynthConfig::default);
                train::synth_splits(&synth, model.config.decoder.num_classes)?.1
            } else {
                load_dataset(Path::new(&data))?
            };
            if samples.is_empty() {
                return Err(Error::Data("no samples to evaluate".into()));
            }
            let m = train::evaluate_sharded(&model, &samples, shards)?;
            let text = serde_json::to_string_pretty(&m).expect("metrics serialize");
            write_file(&out, text.as_bytes())?;
            println!("{text}");
        }
        Command::Predict { ckpt, image, out } => {
            let model = Checkpoint::load(&ckpt)?.to_model(None)?;
            let img = netpbm::read_image(&image)?;
            let s = img.shape().to_vec();
            let pred = model.predict(&img)?;
            let labels = LabelMap::new(s[0], s[1], pred)?;
            netpbm::write_labels(&out, &labels)?;
        }
        Command::Selftest { seed } => {
            let outcomes = selftest::run_all(seed);
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            for o in &outcomes {
                let status = if o.passed { "PASS" } else { "FAIL" };
                println!("{status} [{}] {}: {}", o.suite, o.name, o.detail);
            }
            println!("{} checks, {failed} failed", outcomes.len());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read_text(path: &Path) -> Result<String> {
    // an unreadable run file is a configuration problem, not a data one
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}
