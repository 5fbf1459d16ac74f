//! The `ras` command line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ras_core::data::SyntheticSpec;
use ras_core::gradcheck;
use ras_core::metrics::CurveMode;
use ras_core::network::Backbone;

use crate::config::{Precision, RunConfig};
use crate::dataset::{evaluate_dataset, write_synthetic};
use crate::error::{Error, Result};
use crate::pipeline::{self, side_map_names, write, AnyModel};
use crate::pnm;
use crate::report::{pr_csv, report_json};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ras", version, about = "Reverse-attention saliency: data, training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shape-segmentation dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its weights and loss log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root with images/ and masks/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log path; defaults to the weight path with a .loss.csv suffix.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Predict saliency maps for an image or a directory of images.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// A .ppm file, or a directory (or dataset root) of them.
        #[arg(long)]
        image: PathBuf,
        /// Output .pgm file, or directory when --image is a directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write every side output and the global map, upsampled.
        #[arg(long)]
        dump_sides: Option<PathBuf>,
        /// Reflect-pad sides that are not multiples of 32, then crop back.
        #[arg(long)]
        pad: bool,
    },
    /// Score predicted maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Directory of mask .pgm files, or a dataset root.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        pr: Option<PathBuf>,
        #[arg(long, default_value_t = ras_core::metrics::DEFAULT_BETA2)]
        beta2: f64,
        /// Average per-image PR curves instead of summing counts.
        #[arg(long)]
        per_image: bool,
    },
    /// Compare analytic gradients with finite differences for every op.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Print the number of parameters and the float32 model size.
    ParamCount {
        #[arg(long, conflicts_with = "backbone")]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_backbone)]
        backbone: Option<Backbone>,
    },
    /// Train and evaluate with and without reverse attention.
    Ablation {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A config file plus overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Disable reverse attention.
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(Backbone::Toy),
        };
        if self.no_attention {
            cfg.network.attention_enabled = false;
        }
        if let Some(n) = self.iterations {
            cfg.train.max_iterations = n;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_backbone(s: &str) -> std::result::Result<Backbone, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown backbone {s:?} (vgg16 or toy)"))
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, count, size, seed } => {
            let spec = SyntheticSpec::new(count, size, seed);
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            write_synthetic(&spec, &out)?;
            println!("wrote {count} pairs to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            loss_csv,
        } => {
            let cfg = config.resolve()?;
            let loss_csv = loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
            let t = Instant::now();
            let summary = pipeline::train_run(&cfg, &data, &out, &loss_csv)?;
            let last = summary.log.last().map_or(f64::NAN, |e| e.loss);
            println!(
                "trained {} steps on {} samples in {:.1?}; last loss {last:.4}; weights {}",
                summary.log.len(),
                summary.samples,
                t.elapsed(),
                out.display()
            );
        }
        Command::Predict {
            model,
            image,
            out,
            dump_sides,
            pad,
        } => {
            let model = AnyModel::load(&model)?;
            if image.is_dir() {
                if dump_sides.is_some() {
                    return Err(Error::Config("--dump-sides needs a single --image".into()));
                }
                let stems = pipeline::predict_dir(&model, &image, &out, pad)?;
                println!("wrote {} maps to {}", stems.len(), out.display());
            } else {
                predict_file(&model, &image, &out, dump_sides.as_deref(), pad)?;
            }
        }
        Command::Eval {
            pred,
            gt,
            report,
            pr,
            beta2,
            per_image,
        } => {
            if !(beta2 > 0.0 && beta2.is_finite()) {
                return Err(Error::Config(format!("--beta2 must be positive, got {beta2}")));
            }
            let mode = if per_image { CurveMode::PerImage } else { CurveMode::Aggregate };
            let r = evaluate_dataset(&pred, &gt, beta2, mode)?;
            write(&report, report_json(&r))?;
            if let Some(pr) = pr {
                write(&pr, pr_csv(&r))?;
            }
            println!(
                "{} images: max F {:.4} at threshold {}, MAE {:.4}",
                r.num_images, r.max_f_measure, r.argmax_threshold, r.mae
            );
            if !r.curve.excluded.is_empty() {
                eprintln!("warning: {} masks without positives left out of the PR curve", r.curve.excluded.len());
            }
        }
        Command::GradCheck { seeds } => {
            let t = Instant::now();
            let results = gradcheck::suite(seeds)?;
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<20} max rel error {:.3e}  (tol {:.0e}, {} seeds)  {verdict}",
                    r.name, r.max_rel_error, r.tolerance, r.seeds
                );
                failed += usize::from(!r.passed());
            }
            println!("{:.1?}", t.elapsed());
            if failed > 0 {
                return Err(Error::Failed(format!("{failed} gradient checks failed")));
            }
        }
        Command::ParamCount { config, backbone } => {
            let cfg = match (config, backbone) {
                (Some(path), _) => RunConfig::load(&path)?,
                (None, b) => RunConfig::preset(b.unwrap_or(Backbone::Toy)),
            };
            cfg.validate()?;
            let n = cfg.network.param_count();
            println!("parameters: {n}");
            println!("size: {:.2} MB (float32)", n as f64 * 4.0 / f64::from(1 << 20));
        }
        Command::Ablation {
            config,
            train,
            test,
            out,
        } => {
            let cfg = config.resolve()?;
            let (_, _, report) = pipeline::ablation(&cfg, &train, &test, &out)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn predict_file(model: &AnyModel, image: &Path, out: &Path, dump_sides: Option<&Path>, pad: bool) -> Result<()> {
    let img = pnm::read_ppm(image)?;
    let maps = model.predict(&img, pad, dump_sides.is_some())?;
    pnm::write_pgm(out, &maps.saliency)?;
    if let Some(dir) = dump_sides {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let stem = image.file_stem().unwrap_or_default().to_string_lossy();
        for (name, map) in side_map_names(&stem).iter().zip(&maps.sides) {
            pnm::write_pgm(&dir.join(name), map)?;
        }
    }
    Ok(())
}
