//! Command-line workflow: dataset generation, training, evaluation,
//! prediction with image outputs, query/attention visualization, latency
//! benchmarking, and the oracle/gradient self-test runners.
//!
//! Exit codes: 0 success, 1 runtime error, 2 malformed config (message
//! carries the key path), 3 missing checkpoint.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::bench::benchmark_latency;
use crate::checkpoint;
use crate::config::{load_config, parse_set_arg, RunConfig};
use crate::error::{Error, Result};
use crate::model::FastInst;
use crate::scenes::{
    dataset_digest, generate_dataset, load_dataset, rle_encode, save_dataset, SceneSample,
};
use crate::selftest;
use crate::train::{evaluate_model, infer_detections, train_loop};
use crate::viz;

#[derive(Parser)]
#[command(
    name = "fastinst",
    about = "Query-based instance segmentation on synthetic shape scenes (CPU)"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file; defaults apply for absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted key overrides, e.g. --set query.na=16 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[(String, String)]) -> Result<RunConfig> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        for s in &self.set {
            overrides.push(parse_set_arg(s)?);
        }
        overrides.extend_from_slice(extra);
        load_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (manifest + PPM images).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --set dataset.seed=N.
        #[arg(long)]
        seed: Option<u64>,
        /// Shorthand for --set dataset.num_images=N.
        #[arg(long)]
        num_images: Option<usize>,
    },
    /// Train on a dataset directory; writes checkpoints and a JSONL log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --set train.total_iters=N.
        #[arg(long)]
        iters: Option<usize>,
        /// Shorthand for --set train.seed=N.
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate on the training set every --set train.eval_every iters.
        #[arg(long)]
        eval_train: bool,
        /// Resume parameters and optimizer state from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset; prints the AP table.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run inference and write mask overlays (PPM) plus detections JSON.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Process only the first N images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Dot selected IA-query locations onto images.
    VizQueries {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write per-auxiliary-query attention heatmaps of the last layer.
    VizAuxAttn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Latency of one inference at batch size 1.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Load parameters (and config) from a checkpoint instead.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Square input size in pixels (must be divisible by 32).
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
    /// Finite-difference audit of the full training objective.
    Gradcheck {
        /// Fewer probes per parameter group.
        #[arg(long)]
        quick: bool,
    },
    /// All oracle suites plus the gradient audit.
    Selftest {
        #[arg(long)]
        quick: bool,
    },
}

/// Parse argv and run; the binary maps the error to an exit code.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let ok = !e.use_stderr(); // --help / --version
            e.print().ok();
            return if ok {
                Ok(())
            } else {
                Err(Error::invalid("argument parsing failed"))
            };
        }
    };
    match cli.command {
        Command::GenData {
            cfg,
            out,
            seed,
            num_images,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = seed {
                extra.push(("dataset.seed".to_string(), s.to_string()));
            }
            if let Some(n) = num_images {
                extra.push(("dataset.num_images".to_string(), n.to_string()));
            }
            let cfg = cfg.load(&extra)?;
            let samples = generate_dataset(&cfg.dataset)?;
            save_dataset(&out, &cfg.dataset, &samples)?;
            let digest = dataset_digest(&out)?;
            println!(
                "{}",
                json!({
                    "dataset": out.display().to_string(),
                    "images": samples.len(),
                    "digest": format!("{digest:016x}"),
                    "config_digest": cfg.digest(),
                })
            );
            Ok(())
        }
        Command::Train {
            cfg,
            data,
            out,
            iters,
            seed,
            eval_train,
            resume,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = iters {
                extra.push(("train.total_iters".to_string(), n.to_string()));
            }
            if let Some(s) = seed {
                extra.push(("train.seed".to_string(), s.to_string()));
            }
            let mut cfg = cfg.load(&extra)?;
            let (spec, samples) = load_dataset(&data)?;
            // the dataset on disk is the source of truth for its own shape
            cfg.dataset = spec;
            cfg.validate()?;
            let model = FastInst::<f32>::new(&cfg, cfg.train.seed)?;
            if let Some(path) = &resume {
                checkpoint::load_into(path, &model, None)?;
            }
            let eval_set: Option<&[SceneSample]> = eval_train.then_some(&samples[..]);
            let outcome = train_loop(&model, &samples, &cfg, &out, eval_set)?;
            println!(
                "{}",
                json!({
                    "final_checkpoint": outcome.final_checkpoint.display().to_string(),
                    "log": outcome.log_path.display().to_string(),
                    "last_loss": outcome.last_loss,
                    "config_digest": cfg.digest(),
                })
            );
            Ok(())
        }
        Command::Eval { data, ckpt } => {
            let cfg = checkpoint::read_config(&ckpt)?;
            let model = FastInst::<f32>::new(&cfg, cfg.train.seed)?;
            checkpoint::load_into(&ckpt, &model, None)?;
            let (_, samples) = load_dataset(&data)?;
            let metrics = evaluate_model(&model, &samples)?;
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.3}"),
                None => "  n/a".to_string(),
            };
            println!("      AP   AP50   AP75    APS    APM    APL  AR@100");
            println!(
                "   {} {} {} {} {} {} {}",
                fmt(metrics.ap),
                fmt(metrics.ap50),
                fmt(metrics.ap75),
                fmt(metrics.ap_s),
                fmt(metrics.ap_m),
                fmt(metrics.ap_l),
                fmt(metrics.ar100)
            );
            println!(
                "{}",
                json!({"eval": serde_json::to_value(&metrics)?, "config_digest": cfg.digest()})
            );
            Ok(())
        }
        Command::Predict {
            data,
            ckpt,
            out,
            limit,
        } => {
            let cfg = checkpoint::read_config(&ckpt)?;
            let model = FastInst::<f32>::new(&cfg, cfg.train.seed)?;
            checkpoint::load_into(&ckpt, &model, None)?;
            let (_, samples) = load_dataset(&data)?;
            let samples = truncate(samples, limit);
            std::fs::create_dir_all(&out)?;
            let detections = infer_detections(&model, &samples)?;
            let mut records = Vec::new();
            for (sample, dets) in samples.iter().zip(&detections) {
                let overlay = out.join(format!("pred_{:06}.ppm", sample.image_id));
                viz::write_detection_overlay(sample, dets, &overlay)?;
                records.push(json!({
                    "image_id": sample.image_id,
                    "detections": dets.iter().map(|d| json!({
                        "class_id": d.class_id,
                        "score": d.score,
                        "rle": rle_encode(&d.mask),
                    })).collect::<Vec<_>>(),
                }));
            }
            let payload = json!({"config_digest": cfg.digest(), "images": records});
            std::fs::write(
                out.join("detections.json"),
                serde_json::to_string_pretty(&payload)?,
            )?;
            println!(
                "{}",
                json!({"out": out.display().to_string(), "images": samples.len()})
            );
            Ok(())
        }
        Command::VizQueries {
            data,
            ckpt,
            out,
            limit,
        } => {
            let cfg = checkpoint::read_config(&ckpt)?;
            let model = FastInst::<f32>::new(&cfg, cfg.train.seed)?;
            checkpoint::load_into(&ckpt, &model, None)?;
            let (_, samples) = load_dataset(&data)?;
            let samples = truncate(samples, limit);
            std::fs::create_dir_all(&out)?;
            for sample in &samples {
                let image = model.image_tensor(sample)?;
                let outputs =
                    crate::tensor::with_no_grad(|| model.forward(&image, None))?;
                let path = out.join(format!("queries_{:06}.ppm", sample.image_id));
                viz::write_query_dots(&model, sample, &outputs, &path)?;
            }
            println!(
                "{}",
                json!({"out": out.display().to_string(), "images": samples.len()})
            );
            Ok(())
        }
        Command::VizAuxAttn {
            data,
            ckpt,
            out,
            limit,
        } => {
            let cfg = checkpoint::read_config(&ckpt)?;
            if cfg.decoder.d == 0 {
                return Err(Error::invalid(
                    "viz-aux-attn needs at least one decoder layer (decoder.d >= 1)",
                ));
            }
            let model = FastInst::<f32>::new(&cfg, cfg.train.seed)?;
            checkpoint::load_into(&ckpt, &model, None)?;
            let (_, samples) = load_dataset(&data)?;
            let samples = truncate(samples, limit);
            std::fs::create_dir_all(&out)?;
            let mut written = 0usize;
            for sample in &samples {
                let image = model.image_tensor(sample)?;
                let outputs =
                    crate::tensor::with_no_grad(|| model.forward(&image, None))?;
                let stem = format!("attn_{:06}", sample.image_id);
                written += viz::write_aux_attention_maps(&model, sample, &outputs, &out, &stem)?
                    .len();
            }
            println!(
                "{}",
                json!({"out": out.display().to_string(), "heatmaps": written})
            );
            Ok(())
        }
        Command::Bench {
            cfg,
            ckpt,
            size,
            warmup,
            iters,
        } => {
            let (run_cfg, model) = match &ckpt {
                Some(path) => {
                    let c = checkpoint::read_config(path)?;
                    let m = FastInst::<f32>::new(&c, c.train.seed)?;
                    checkpoint::load_into(path, &m, None)?;
                    (c, m)
                }
                None => {
                    let c = cfg.load(&[])?;
                    let m = FastInst::<f32>::new(&c, c.train.seed)?;
                    (c, m)
                }
            };
            if size % 32 != 0 {
                return Err(Error::Config {
                    path: "size".into(),
                    msg: format!("{size} must be divisible by 32"),
                });
            }
            let report = benchmark_latency(&model, (size, size), warmup, iters, 0)?;
            println!("{}", serde_json::to_string(&report)?);
            let _ = run_cfg;
            Ok(())
        }
        Command::Gradcheck { quick } => {
            let outcomes = selftest::run_gradcheck_suite(quick)?;
            print_outcomes(&outcomes)
        }
        Command::Selftest { quick } => {
            let outcomes = selftest::run_all(quick)?;
            print_outcomes(&outcomes)
        }
    }
}

fn truncate(samples: Vec<SceneSample>, limit: Option<usize>) -> Vec<SceneSample> {
    match limit {
        Some(n) => samples.into_iter().take(n).collect(),
        None => samples,
    }
}

fn print_outcomes(outcomes: &[selftest::CheckOutcome]) -> Result<()> {
    for o in outcomes {
        println!(
            "{} {} — {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    if selftest::all_passed(outcomes) {
        Ok(())
    } else {
        Err(Error::SelfTest(format!(
            "{} of {} checks failed",
            outcomes.iter().filter(|o| !o.passed).count(),
            outcomes.len()
        )))
    }
}

