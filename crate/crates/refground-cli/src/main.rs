//! Command-line pipeline for the single-stage referring-expression grounder.
//!
//! Every subcommand resolves a [`RunConfig`] (file + `--section.key value`
//! overrides), writes the resolved config, its hash, and the seed into the
//! run directory, and then drives the corresponding library operation.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numerical
//! failure.

use clap::{Args, Parser, Subcommand};
use refground::config::RunConfig;
use refground::data::{self, DatasetManifest, Split};
use refground::evaluation;
use refground::geometry::BoxXYWH;
use refground::grounder::{GroundingModel, ModelDims};
use refground::interactor;
use refground::text::encode_expression;
use refground::training::{self, Checkpoint, GradCheckFixture, PreparedDataset};
use refground::vision;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;

#[derive(Parser)]
#[command(
    name = "refground",
    about = "Single-stage referring-expression grounding: synthetic data, training, evaluation, inference",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (flat `section.key = value` text). Defaults to the desk profile.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run directory (default: $REFGROUND_RUNS/<command>-<config-hash>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset manifest
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a manifest
    Train {
        #[command(flatten)]
        common: Common,
        /// Manifest path (default: <out>/manifest.jsonl)
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a manifest
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score: train, val, or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Export per-sample attention heat maps (PNG + numeric grid)
        #[arg(long)]
        heatmaps: bool,
    },
    /// Ground one expression in one image
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 8-bit RGB PNG input
        #[arg(long)]
        image: PathBuf,
        /// Referring expression
        #[arg(long)]
        expr: String,
        /// Also write the attention heat map PNG
        #[arg(long)]
        heatmap: bool,
    },
    /// Measure per-referent grounding latency
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Warmup iterations (default from config)
        #[arg(long)]
        warmup: Option<usize>,
        /// Measured iterations (default from config)
        #[arg(long)]
        n: Option<usize>,
    },
    /// Verify analytic gradients against central finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Check every n-th coordinate
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Use the configured model dimensions instead of the micro config
        #[arg(long)]
        use_config_dims: bool,
    },
    /// Train the four loss-weight configurations and tabulate accuracy
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Validate and ingest an annotation file in the manifest schema
    ImportRefcoco {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let (clap_args, overrides) = match split_overrides(raw) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(clap_args) {
        Ok(c) => c,
        Err(e) => {
            // help/version arrive through the error path but are not errors
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

enum CliError {
    Usage(String),
    Lib(refground::Error),
}

impl From<refground::Error> for CliError {
    fn from(e: refground::Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = Result<T, CliError>;

type KeyValue = (String, String);

/// Pull `--section.key value` pairs out of the raw args before clap sees
/// them; a flag whose name contains a dot (or is a bare top-level config
/// key) addresses the config.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<KeyValue>), String> {
    let mut clap_args = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if let Some(key) = arg.strip_prefix("--") {
            if key.split('=').next().is_some_and(|k| k.contains('.')) || is_top_level_key(key) {
                if let Some((k, v)) = key.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                    continue;
                }
                let value = it
                    .next()
                    .ok_or_else(|| format!("override --{key} needs a value"))?;
                overrides.push((key.to_string(), value));
                continue;
            }
        }
        clap_args.push(arg);
    }
    Ok((clap_args, overrides))
}

/// Top-level config keys usable as overrides without a section prefix.
fn is_top_level_key(key: &str) -> bool {
    matches!(
        key.split('=').next().unwrap_or(key),
        "seed" | "deterministic" | "threads"
    )
}

fn resolve_config(common: &Common, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|e| CliError::Usage(format!("{e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Create the run directory and record the resolved config, its hash, and
/// the seed.
fn init_run_dir(common: &Common, cfg: &RunConfig, command: &str) -> CliResult<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var("REFGROUND_RUNS").unwrap_or_else(|_| "runs".to_string());
            Path::new(&root).join(format!("{command}-{}", &cfg.hash()[..8]))
        }
    };
    std::fs::create_dir_all(&dir).map_err(refground::Error::from)?;
    std::fs::write(dir.join("resolved.cfg"), cfg.to_canonical_string())
        .map_err(refground::Error::from)?;
    std::fs::write(dir.join("config_hash.txt"), format!("{}\n", cfg.hash()))
        .map_err(refground::Error::from)?;
    Ok(dir)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> CliResult<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve_config(&common, overrides)?;
            let dir = init_run_dir(&common, &cfg, "gen-data")?;
            let manifest =
                data::generate_manifest(cfg.seed, &cfg.gen_config(), &cfg.scene_counts())?;
            let path = dir.join("manifest.jsonl");
            manifest.save_jsonl(&path)?;
            println!(
                "wrote {} samples ({} train / {} val / {} test scenes) to {}",
                manifest.samples.len(),
                cfg.train_scenes,
                cfg.val_scenes,
                cfg.test_scenes,
                path.display()
            );
            Ok(())
        }

        Command::Train { common, manifest } => {
            let cfg = resolve_config(&common, overrides)?;
            let dir = init_run_dir(&common, &cfg, "train")?;
            let manifest_path = manifest.unwrap_or_else(|| dir.join("manifest.jsonl"));
            let manifest = DatasetManifest::load_jsonl(&manifest_path)?;
            let splits = training::prepare_splits(
                &manifest,
                cfg.n_attr,
                cfg.t_max,
                cfg.image_size,
                manifest_path.parent(),
            )?;

            let mut dims = cfg.model_dims(splits.vocab.len());
            dims.n_attr = splits.attr_vocab.len();
            let mut model = GroundingModel::new(dims, cfg.seed)?;
            let fit_cfg = cfg.fit_config();
            let log_path = dir.join("train_log.csv");
            let report = training::fit_with(
                &mut model,
                &splits.train,
                &splits.val,
                &splits.attr_vocab.weights,
                &fit_cfg,
                |row| {
                    println!(
                        "epoch {:>3}  lr {:.2e}  loss {:>8.4}  val acc {:.4}",
                        row.epoch, row.lr, row.loss.total, row.val_acc
                    );
                },
            )?;

            std::fs::write(&log_path, training::log_to_csv(&report.log))
                .map_err(refground::Error::from)?;
            splits.vocab.save(&dir.join("vocab.txt"))?;
            let ckpt = Checkpoint {
                config_hash: cfg.hash(),
                vocab: splits.vocab,
                attr_vocab: splits.attr_vocab,
                model,
            };
            ckpt.save(&dir.join("checkpoint.json"))?;
            let report_json =
                serde_json::to_string_pretty(&report).map_err(refground::Error::from)?;
            std::fs::write(dir.join("fit_report.json"), report_json)
                .map_err(refground::Error::from)?;
            println!(
                "trained {} epochs (best val acc {:.4} at epoch {}); checkpoint at {}",
                report.log.len(),
                report.best_val_acc,
                report.best_epoch,
                dir.join("checkpoint.json").display()
            );
            Ok(())
        }

        Command::Eval {
            common,
            manifest,
            checkpoint,
            split,
            heatmaps,
        } => {
            let cfg = resolve_config(&common, overrides)?;
            let dir = init_run_dir(&common, &cfg, "eval")?;
            let split = parse_split(&split)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = load_split(&manifest, &ckpt, split)?;
            if ds.is_empty() {
                return Err(refground::Error::Data(format!(
                    "manifest has no '{}' samples",
                    split.tag()
                ))
                .into());
            }

            let preds = evaluation::ground_dataset_parallel(&ckpt.model, &ds, cfg.threads)?;
            let boxes: Vec<BoxXYWH> = preds.iter().map(|(b, _)| *b).collect();
            let gts: Vec<BoxXYWH> = ds.samples.iter().map(|s| s.gt).collect();
            let report = evaluation::accuracy_at_iou(&boxes, &gts, cfg.eta, split.tag())?;

            write_prediction_records(&dir, &ckpt, &ds, &preds, heatmaps)?;
            let json = serde_json::to_string_pretty(&report).map_err(refground::Error::from)?;
            std::fs::write(dir.join(format!("eval_{}.json", split.tag())), json)
                .map_err(refground::Error::from)?;
            print!("{}", evaluation::render_eval_report(&report));
            Ok(())
        }

        Command::Predict {
            common,
            checkpoint,
            image,
            expr,
            heatmap,
        } => {
            let cfg = resolve_config(&common, overrides)?;
            let dir = init_run_dir(&common, &cfg, "predict")?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dims = &ckpt.model.dims;
            let img = vision::load_png(&image, dims.image_size)?;
            let seq = encode_expression(&ckpt.vocab, &expr, dims.t_max);
            let (boxp, conf, alpha) = ckpt.model.ground_with_attention(&img, &seq)?;
            let probs = ckpt.model.predict_attributes(&img, &seq)?;

            let heatmap_path = if heatmap {
                let path = dir.join("heatmap.png");
                interactor::export_heatmap(&alpha, ckpt.model.grid.s, &path)?;
                Some(path.display().to_string())
            } else {
                None
            };
            let record = PredictionRecord {
                id: image.display().to_string(),
                expression: Some(expr),
                bbox: [boxp.x, boxp.y, boxp.w, boxp.h],
                confidence: conf,
                iou: None,
                heatmap: heatmap_path,
                attention: heatmap.then(|| interactor::heatmap_grid(&alpha, ckpt.model.grid.s)),
                attributes: Some(top_attributes(&ckpt, &probs, 5)),
            };
            let line = serde_json::to_string(&record).map_err(refground::Error::from)?;
            println!("{line}");
            std::fs::write(dir.join("predictions.jsonl"), format!("{line}\n"))
                .map_err(refground::Error::from)?;
            Ok(())
        }

        Command::Bench {
            common,
            manifest,
            checkpoint,
            warmup,
            n,
        } => {
            let cfg = resolve_config(&common, overrides)?;
            let dir = init_run_dir(&common, &cfg, "bench")?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut ds = load_split(&manifest, &ckpt, Split::Test)?;
            if ds.is_empty() {
                ds = load_split(&manifest, &ckpt, Split::Train)?;
            }
            let report = evaluation::latency_bench(
                &ckpt.model,
                &ds,
                warmup.unwrap_or(cfg.bench_warmup),
                n.unwrap_or(cfg.bench_n),
            )?;
            let json = serde_json::to_string_pretty(&report).map_err(refground::Error::from)?;
            std::fs::write(dir.join("bench.json"), json).map_err(refground::Error::from)?;
            println!("{}", report.headline());
            Ok(())
        }

        Command::Gradcheck {
            common,
            eps,
            stride,
            use_config_dims,
        } => {
            let cfg = resolve_config(&common, overrides)?;
            let dir = init_run_dir(&common, &cfg, "gradcheck")?;
            let dims = if use_config_dims {
                cfg.model_dims(12)
            } else {
                micro_dims()
            };
            let mut model = GroundingModel::new(dims.clone(), cfg.seed)?;
            let fixture = GradCheckFixture::random(&dims, cfg.seed ^ 0x9E37);
            let report =
                training::grad_check_model(&mut model, &fixture, &cfg.loss, cfg.eta, eps, stride)?;
            let json = serde_json::to_string_pretty(&report).map_err(refground::Error::from)?;
            std::fs::write(dir.join("gradcheck.json"), json).map_err(refground::Error::from)?;
            println!(
                "checked {} coordinates: max relative error {:.3e} ({})",
                report.checked, report.max_rel_err, report.worst
            );
            if report.max_rel_err >= 1e-4 {
                return Err(refground::Error::GradCheck {
                    max_rel_err: report.max_rel_err,
                    worst: report.worst,
                }
                .into());
            }
            Ok(())
        }

        Command::Ablate { common, manifest } => {
            let cfg = resolve_config(&common, overrides)?;
            let dir = init_run_dir(&common, &cfg, "ablate")?;
            let manifest = DatasetManifest::load_jsonl(&manifest)?;
            let splits =
                training::prepare_splits(&manifest, cfg.n_attr, cfg.t_max, cfg.image_size, None)?;
            let mut dims = cfg.model_dims(splits.vocab.len());
            dims.n_attr = splits.attr_vocab.len();
            let rows = evaluation::ablation_table(&dims, &splits, &cfg.fit_config())?;
            let json = serde_json::to_string_pretty(&rows).map_err(refground::Error::from)?;
            std::fs::write(dir.join("ablation.json"), json).map_err(refground::Error::from)?;
            let table = evaluation::render_ablation_table(&rows);
            std::fs::write(dir.join("ablation.txt"), &table).map_err(refground::Error::from)?;
            print!("{table}");
            Ok(())
        }

        Command::ImportRefcoco { common, input } => {
            let cfg = resolve_config(&common, overrides)?;
            let dir = init_run_dir(&common, &cfg, "import-refcoco")?;
            let (manifest, rejected) = data::import_refcoco_style(&input)?;
            let path = dir.join("manifest.jsonl");
            manifest.save_jsonl(&path)?;
            println!(
                "imported {} samples ({} rejected for out-of-bounds boxes) to {}",
                manifest.samples.len(),
                rejected,
                path.display()
            );
            Ok(())
        }
    }
}

/// Micro configuration used by the gradient-check subcommand.
fn micro_dims() -> ModelDims {
    ModelDims {
        image_size: 6,
        image_channels: 3,
        coord_channels: true,
        backbone_channels: vec![8],
        d_w: 6,
        hidden: 4,
        d_a: 6,
        n_attr: 5,
        t_max: 5,
        vocab_size: 12,
    }
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!(
            "unknown split '{other}' (expected train, val, or test)"
        ))),
    }
}

fn load_split(manifest_path: &Path, ckpt: &Checkpoint, split: Split) -> CliResult<PreparedDataset> {
    let manifest = DatasetManifest::load_jsonl(manifest_path)?;
    let dims = &ckpt.model.dims;
    Ok(training::prepare_dataset(
        &manifest.split(split),
        &ckpt.vocab,
        &ckpt.attr_vocab,
        dims.t_max,
        dims.image_size,
        manifest_path.parent(),
    )?)
}

/// Per-sample output record (JSON lines).
#[derive(Serialize)]
struct PredictionRecord {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    expression: Option<String>,
    bbox: [f64; 4],
    confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heatmap: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attributes: Option<Vec<(String, f64)>>,
}

fn top_attributes(ckpt: &Checkpoint, probs: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = ckpt
        .attr_vocab
        .words
        .iter()
        .cloned()
        .zip(probs.iter().cloned())
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

fn write_prediction_records(
    dir: &Path,
    ckpt: &Checkpoint,
    ds: &PreparedDataset,
    preds: &[(BoxXYWH, f64)],
    heatmaps: bool,
) -> CliResult<()> {
    use std::io::Write;
    let heat_dir = dir.join("heatmaps");
    if heatmaps {
        std::fs::create_dir_all(&heat_dir).map_err(refground::Error::from)?;
    }
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(dir.join("predictions.jsonl")).map_err(refground::Error::from)?,
    );
    for (i, (s, (b, conf))) in ds.samples.iter().zip(preds).enumerate() {
        let (heatmap, attention) = if heatmaps {
            let img = ds.image_tensor(s.image_idx);
            let (_, _, alpha) = ckpt.model.ground_with_attention(&img, &s.seq)?;
            let path = heat_dir.join(format!("{i:05}.png"));
            interactor::export_heatmap(&alpha, ckpt.model.grid.s, &path)?;
            (
                Some(path.display().to_string()),
                Some(interactor::heatmap_grid(&alpha, ckpt.model.grid.s)),
            )
        } else {
            (None, None)
        };
        let record = PredictionRecord {
            id: s.id.clone(),
            expression: None,
            bbox: [b.x, b.y, b.w, b.h],
            confidence: *conf,
            iou: Some(refground::geometry::iou(b, &s.gt)),
            heatmap,
            attention,
            attributes: None,
        };
        writeln!(
            f,
            "{}",
            serde_json::to_string(&record).map_err(refground::Error::from)?
        )
        .map_err(refground::Error::from)?;
    }
    Ok(())
}
