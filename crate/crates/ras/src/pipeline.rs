//! End-to-end workflows shared by the command-line tool and the tests:
//! training to a weight file, predicting a directory, and the attention
//! ablation.

use std::path::{Path, PathBuf};

use ras_core::data::{augment_with_flips, check_divisible, crop, normalize, pad_reflect, RgbImage, Sample};
use ras_core::metrics::EvalReport;
use ras_core::network::GLOBAL_STRIDE;
use ras_core::training::{loss_log_csv, train, LogEntry};
use ras_core::{Model, Real, Tensor};

use crate::config::{Precision, RunConfig};
use crate::dataset::{self, evaluate_dataset, IMAGES};
use crate::error::{Error, Result};
use crate::pnm::{self, to_gray_bytes, GrayImage};
use crate::report::AblationReport;
use crate::weights;

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub samples: usize,
    pub log: Vec<LogEntry>,
}

impl TrainSummary {
    /// Mean logged loss over the first `n` steps.
    pub fn initial_loss(&self, n: usize) -> f64 {
        mean(self.log.iter().take(n).map(|e| e.loss))
    }

    /// Mean logged loss over the last `n` steps.
    pub fn final_loss(&self, n: usize) -> f64 {
        mean(self.log.iter().rev().take(n).map(|e| e.loss))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

/// Where checkpoint `iteration` of a run writing `out` is stored.
pub fn checkpoint_path(out: &Path, iteration: u64) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}.iter{iteration}.rasw"))
}

/// Trains on the dataset at `data` (doubled by horizontal flips) and writes
/// the final weights to `out` and the per-step loss log to `loss_csv`.
pub fn train_run(cfg: &RunConfig, data: &Path, out: &Path, loss_csv: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, data, out, loss_csv),
        Precision::F64 => train_typed::<f64>(cfg, data, out, loss_csv),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, data: &Path, out: &Path, loss_csv: &Path) -> Result<TrainSummary> {
    let samples: Vec<Sample<T>> = dataset::load_dataset(data)?;
    let samples = augment_with_flips(&samples);
    let mut model = Model::<T>::new(cfg.network.clone(), cfg.train.seed)?;
    let mut io_error = None;
    let log = train(&mut model, &samples, &cfg.train, |it, m| {
        if io_error.is_none() {
            io_error = weights::save(&checkpoint_path(out, it), m).err();
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    weights::save(out, &model)?;
    std::fs::write(loss_csv, loss_log_csv(&log)).map_err(Error::io(loss_csv))?;
    Ok(TrainSummary {
        samples: samples.len(),
        log,
    })
}

/// Full-resolution probability maps of one image: the final saliency map,
/// plus the six side maps when `sides` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMaps {
    pub saliency: GrayImage,
    pub sides: Vec<GrayImage>,
}

fn to_gray<T: Real>(t: &Tensor<T>) -> GrayImage {
    let s = t.shape();
    GrayImage {
        width: s.w,
        height: s.h,
        pixels: to_gray_bytes(t.data().iter().map(|v| v.to_f64())),
    }
}

/// Runs the model on one image. With `pad`, sides that are not multiples
/// of 32 are reflect-padded and the maps cropped back; without it such
/// images are rejected.
pub fn predict_image<T: Real>(model: &Model<T>, image: &RgbImage, pad: bool, sides: bool) -> Result<PredictedMaps> {
    let (h, w) = (image.height, image.width);
    let mut x: Tensor<T> = normalize(image);
    if pad {
        x = pad_reflect(&x, GLOBAL_STRIDE);
    } else {
        check_divisible(h, w)?;
    }
    let p = model.predict(&x)?;
    let saliency = to_gray(&crop(&p.saliency(), h, w));
    let sides = if sides {
        p.side_maps().iter().map(|m| to_gray(&crop(m, h, w))).collect()
    } else {
        Vec::new()
    };
    Ok(PredictedMaps { saliency, sides })
}

/// File names of the maps written by `--dump-sides`.
pub fn side_map_names(stem: &str) -> Vec<String> {
    (1..=5)
        .map(|i| format!("{stem}_side{i}.pgm"))
        .chain(std::iter::once(format!("{stem}_global.pgm")))
        .collect()
}

/// A weight file decoded at whichever precision it was stored in.
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        let (_, dtype) = weights::peek(&bytes)?;
        Ok(if dtype == <f32 as Real>::DTYPE {
            AnyModel::F32(weights::decode(&bytes)?)
        } else {
            AnyModel::F64(weights::decode(&bytes)?)
        })
    }

    pub fn predict(&self, image: &RgbImage, pad: bool, sides: bool) -> Result<PredictedMaps> {
        match self {
            AnyModel::F32(m) => predict_image(m, image, pad, sides),
            AnyModel::F64(m) => predict_image(m, image, pad, sides),
        }
    }
}

/// Predicts every `<stem>.ppm` in `images` (or `images/images` for a
/// dataset root) into `<out>/<stem>.pgm`. Returns the stems written.
pub fn predict_dir(model: &AnyModel, images: &Path, out: &Path, pad: bool) -> Result<Vec<String>> {
    let nested = images.join(IMAGES);
    let images = if nested.is_dir() { nested } else { images.to_path_buf() };
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let stems = dataset::stems(&images, "ppm")?;
    if stems.is_empty() {
        return Err(Error::Dataset(format!("no .ppm images in {}", images.display())));
    }
    for s in &stems {
        let img = pnm::read_ppm(&images.join(format!("{s}.ppm")))?;
        let maps = model.predict(&img, pad, false)?;
        pnm::write_pgm(&out.join(format!("{s}.pgm")), &maps.saliency)?;
    }
    Ok(stems)
}

/// Results of one train → predict → evaluate run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: TrainSummary,
    pub report: EvalReport,
}

/// Trains on `train_data`, predicts `test_data` and evaluates it, writing
/// `weights.rasw`, `loss.csv`, `pred/`, `report.json` and `pr.csv` under
/// `out`.
pub fn full_run(cfg: &RunConfig, train_data: &Path, test_data: &Path, out: &Path) -> Result<RunResult> {
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let weights_path = out.join("weights.rasw");
    let summary = train_run(cfg, train_data, &weights_path, &out.join("loss.csv"))?;
    let model = AnyModel::load(&weights_path)?;
    let pred = out.join("pred");
    predict_dir(&model, test_data, &pred, false)?;
    let report = evaluate_dataset(&pred, test_data, cfg.eval.beta2, cfg.eval.mode())?;
    write(&out.join("report.json"), crate::report::report_json(&report))?;
    write(&out.join("pr.csv"), crate::report::pr_csv(&report))?;
    Ok(RunResult { summary, report })
}

/// Runs [`full_run`] with and without attention under the same seed, into
/// `out/attention` and `out/no_attention`, and writes `out/ablation.json`.
pub fn ablation(cfg: &RunConfig, train_data: &Path, test_data: &Path, out: &Path) -> Result<(RunResult, RunResult, AblationReport)> {
    let mut with = cfg.clone();
    with.network.attention_enabled = true;
    let mut without = cfg.clone();
    without.network.attention_enabled = false;
    let a = full_run(&with, train_data, test_data, &out.join("attention"))?;
    let b = full_run(&without, train_data, test_data, &out.join("no_attention"))?;
    let report = AblationReport::new(&a.report, &b.report);
    write(&out.join("ablation.json"), report.to_json())?;
    Ok((a, b, report))
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(Error::io(path))
}
