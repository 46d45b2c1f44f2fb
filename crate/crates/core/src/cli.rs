//! Command-line front end. Every subcommand that writes files also writes a
//! run manifest recording its arguments, seeds, file digests and wall time.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::audio::{canonicalize, frame_grid, load_wav};
use crate::dataset::{make_split, Corpus, Partition, Split};
use crate::error::{Error, Result};
use crate::features::{compute_features, load_external_features, write_atomic, FeatureKind};
use crate::metrics::{format_segments, to_segments};
use crate::nn::{Arch, Checkpoint, Mode, ModelConfig};
use crate::pipeline::{annotate_corpus, featurize_corpus, prep_dir};
use crate::synth::{synth, SynthConfig};
use crate::train::{resume, train, TrainConfig};
use crate::transfer::{evaluate_checkpoint, file_digest, transfer_eval, TransferJob};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "apesed", version, about = "Frame-level animal call detection and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert WAVs to 16 kHz mono float.
    Prep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-clip feature files for a corpus manifest.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides and rewrites the manifest's feature kind.
        #[arg(long)]
        kind: Option<FeatureKind>,
    },
    /// Rasterize an annotation table into per-clip label files.
    Annotate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Seeded 80/10/10 train/validation/test split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Train(TrainArgs),
    /// Frame-level report for one partition.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "test")]
        partition: Partition,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detected call segments for one recording.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Exported feature file, required for external-feature models.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        min_dur: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot binary evaluation on another corpus.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "test")]
        partition: Partition,
        /// Binary call / non-call mapping, the only supported mode.
        #[arg(long, default_value_t = true)]
        binary: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        clips: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value = "spectrogram")]
        feature: FeatureKind,
        /// Maximum annotation boundary shift in seconds.
        #[arg(long, default_value_t = 0.0)]
        boundary_noise: f64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value = "ar_lstm")]
    arch: Arch,
    /// Must match the corpus feature kind when given.
    #[arg(long)]
    feature: Option<FeatureKind>,
    #[arg(long)]
    binary: bool,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.4)]
    dropout: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1024)]
    hidden: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Use unit class weights instead of reciprocal frequencies.
    #[arg(long)]
    no_balance: bool,
    #[arg(long)]
    no_positional_encoding: bool,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct FileDigest {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    seeds: serde_json::Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    wall_time_seconds: f64,
}

struct Outcome {
    command: &'static str,
    seeds: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest_path: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Failures print one JSON line to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            report_error(2, "UsageError", first);
            return 2;
        }
    };
    configure_threads();
    let start = Instant::now();
    match execute(cli.command).and_then(|o| write_run_manifest(&argv, o, start)) {
        Ok(()) => 0,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> i32 {
    let mut message = e.to_string();
    if let Error::MissingFile { path, .. } = e {
        if path.extension().is_some_and(|x| x == "apef") {
            let dir = path.parent().unwrap_or(Path::new("."));
            message.push_str(&format!(
                "; export external features first: export_wav2vec --in <canonical wav dir> --out {}",
                dir.display()
            ));
        }
    }
    report_error(e.exit_code(), e.kind(), &message);
    e.exit_code()
}

fn report_error(code: i32, kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "code": code, "kind": kind, "message": message } });
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn configure_threads() {
    if let Some(n) = std::env::var("APESED_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // a pool may already exist when called more than once per process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn write_run_manifest(argv: &[OsString], o: Outcome, start: Instant) -> Result<()> {
    let digests = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
        paths
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.clone(),
                    sha256: file_digest(p)?,
                })
            })
            .collect()
    };
    let manifest = RunManifest {
        command: o.command.to_string(),
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        version: VERSION,
        seeds: o.seeds,
        inputs: digests(&o.inputs)?,
        outputs: digests(&o.outputs)?,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("run manifest serializes");
    text.push('\n');
    write_atomic(&o.manifest_path, text.as_bytes())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    path.with_file_name(name)
}

fn dir_of(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    let dir = dir_of(path);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn no_seeds() -> serde_json::Value {
    serde_json::json!({})
}

fn execute(command: Command) -> Result<Outcome> {
    let outcome = match command {
        Command::Prep { input, out } => {
            let outputs = prep_dir(&input, &out)?;
            Outcome {
                command: "prep",
                seeds: no_seeds(),
                inputs: Vec::new(),
                outputs,
                manifest_path: out.join("prep.run.json"),
            }
        }
        Command::Featurize { manifest, kind } => {
            let outputs = featurize_corpus(&manifest, kind)?;
            Outcome {
                command: "featurize",
                seeds: no_seeds(),
                inputs: vec![manifest.clone()],
                outputs,
                manifest_path: dir_of(&manifest).join("featurize.run.json"),
            }
        }
        Command::Annotate { manifest, annotations } => {
            let outputs = annotate_corpus(&manifest, &annotations)?;
            Outcome {
                command: "annotate",
                seeds: no_seeds(),
                inputs: vec![manifest.clone(), annotations],
                outputs,
                manifest_path: dir_of(&manifest).join("annotate.run.json"),
            }
        }
        Command::Split { manifest, seed, out } => {
            let corpus = Corpus::load(&manifest)?;
            let split = make_split(&corpus, seed)?;
            ensure_parent(&out)?;
            split.save(&out)?;
            Outcome {
                command: "split",
                seeds: serde_json::json!({ "split": seed }),
                inputs: vec![manifest],
                outputs: vec![out.clone()],
                manifest_path: sidecar(&out),
            }
        }
        Command::Train(args) => run_train(args)?,
        Command::Eval {
            ckpt,
            manifest,
            split,
            partition,
            out,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let corpus = Corpus::load(&manifest)?;
            let s = Split::load(&split)?;
            let report = evaluate_checkpoint(&checkpoint, &corpus, s.ids(partition), checkpoint.meta.binary)?;
            ensure_parent(&out)?;
            report.save(&out)?;
            Outcome {
                command: "eval",
                seeds: serde_json::json!({ "split": s.seed }),
                inputs: vec![ckpt, manifest, split],
                outputs: vec![out.clone()],
                manifest_path: sidecar(&out),
            }
        }
        Command::Predict {
            ckpt,
            wav,
            features,
            min_dur,
            out,
        } => {
            if !(min_dur >= 0.0 && min_dur.is_finite()) {
                return Err(Error::InvalidArgument(format!("min-dur must be non-negative, got {min_dur}")));
            }
            let checkpoint = Checkpoint::load(&ckpt)?;
            let clip = canonicalize(&load_wav(&wav)?)?;
            let grid = frame_grid(&clip)?;
            let kind = checkpoint.meta.feature_kind;
            let m = match (kind, &features) {
                (FeatureKind::External, Some(f)) => load_external_features(f, &grid)?,
                (FeatureKind::External, None) => {
                    return Err(Error::InvalidArgument(format!(
                        "model uses external features; export them with `export_wav2vec --in {} --out <dir>` and pass --features",
                        dir_of(&wav).display()
                    )))
                }
                _ => compute_features(&clip, &grid, kind)?,
            };
            let posteriors = checkpoint.model.forward(&m, Mode::Eval)?;
            let segments = to_segments(&clip.clip_id, &posteriors, min_dur);
            let vocab = &checkpoint.meta.vocab;
            let text = format_segments(&segments, |k| vocab.name(k).to_string());
            ensure_parent(&out)?;
            write_atomic(&out, text.as_bytes())?;
            let mut inputs = vec![ckpt, wav];
            inputs.extend(features);
            Outcome {
                command: "predict",
                seeds: no_seeds(),
                inputs,
                outputs: vec![out.clone()],
                manifest_path: sidecar(&out),
            }
        }
        Command::Transfer {
            ckpt,
            manifest,
            split,
            partition,
            binary,
            out,
        } => {
            if !binary {
                return Err(Error::InvalidArgument("only binary transfer is supported".into()));
            }
            let s = Split::load(&split)?;
            let job = TransferJob {
                checkpoint: ckpt.clone(),
                corpus: Corpus::load(&manifest)?,
                split: s.clone(),
                partition,
            };
            let report = transfer_eval(&job)?;
            ensure_parent(&out)?;
            report.save(&out)?;
            Outcome {
                command: "transfer",
                seeds: serde_json::json!({ "split": s.seed }),
                inputs: vec![ckpt, manifest, split],
                outputs: vec![out.clone()],
                manifest_path: sidecar(&out),
            }
        }
        Command::Synth {
            out,
            seed,
            clips,
            classes,
            feature,
            boundary_noise,
        } => {
            let cfg = SynthConfig {
                feature_kind: feature,
                boundary_noise,
                ..SynthConfig::new(seed, clips, classes)
            };
            let corpus = synth(&out, &cfg)?;
            let mut outputs: Vec<PathBuf> = (0..clips).map(|i| out.join("wav").join(format!("clip{i:03}.wav"))).collect();
            outputs.extend([corpus.annotations, out.join("vocab.json"), corpus.manifest]);
            Outcome {
                command: "synth",
                seeds: serde_json::json!({ "synth": seed }),
                inputs: Vec::new(),
                outputs,
                manifest_path: out.join("synth.run.json"),
            }
        }
    };
    Ok(outcome)
}

fn run_train(a: TrainArgs) -> Result<Outcome> {
    let corpus = Corpus::load(&a.manifest)?;
    if let Some(k) = a.feature {
        if k != corpus.feature_kind {
            return Err(Error::FeatureKindMismatch {
                checkpoint: k.to_string(),
                corpus: corpus.feature_kind.to_string(),
            });
        }
    }
    let split = Split::load(&a.split)?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        dropout: a.dropout,
        max_epochs: a.epochs,
        patience: a.patience,
        learning_rate: a.lr,
        seed: a.seed,
        balance_weights: !a.no_balance,
        binary: a.binary,
    };
    let num_class = if a.binary { 2 } else { corpus.vocab.num_classes() };
    let model = ModelConfig {
        hidden_size: a.hidden,
        heads: a.heads,
        layers: a.layers,
        positional_encoding: !a.no_positional_encoding,
        ..ModelConfig::new(a.arch, corpus.feature_kind.dim(), num_class)
    };
    let mut inputs = vec![a.manifest.clone(), a.split.clone()];
    let outcome = match &a.resume {
        Some(ck) => {
            inputs.push(ck.clone());
            resume(ck, &corpus, &split, &cfg)?
        }
        None => train(&corpus, &split, &model, &cfg)?,
    };
    outcome.save(&a.out)?;
    Ok(Outcome {
        command: "train",
        seeds: serde_json::json!({ "train": a.seed, "split": split.seed }),
        inputs,
        outputs: vec![a.out.join("model.ckpt"), a.out.join("trainlog.jsonl")],
        manifest_path: a.out.join("run.json"),
    })
}
