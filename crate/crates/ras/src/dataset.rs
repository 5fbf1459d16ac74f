//! Dataset directories: `<root>/images/<stem>.ppm` with
//! `<root>/masks/<stem>.pgm`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ras_core::data::{generate_sample, Sample, SyntheticSpec};
use ras_core::metrics::{evaluate, CurveMode, EvalReport, GroundTruthMask, SaliencyMap};
use ras_core::Real;

use crate::error::{Error, Result};
use crate::pnm::{self, GrayImage};

pub const IMAGES: &str = "images";
pub const MASKS: &str = "masks";

/// Reads one image/mask pair. The mask is binarized at 128 and both must
/// have sides divisible by 32.
pub fn load_sample<T: Real>(image_path: &Path, mask_path: &Path) -> Result<Sample<T>> {
    let image = pnm::read_ppm(image_path)?;
    let mask = read_mask(mask_path)?;
    let stem = image_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    Sample::new(stem, &image, mask).map_err(|e| Error::Pnm {
        path: image_path.into(),
        msg: e.to_string(),
    })
}

pub fn read_mask(path: &Path) -> Result<GroundTruthMask> {
    let gray = pnm::read_pgm(path)?;
    Ok(GroundTruthMask::from_gray(gray.width, gray.height, &gray.pixels)?)
}

/// Sorted stems of the files in `dir` with extension `ext`.
pub fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.extension().is_some_and(|e| e == ext) && path.is_file() {
            out.push(path.file_stem().unwrap().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// Stems present in both listings, or an error naming the first orphan.
fn match_stems(left: (&Path, Vec<String>), right: (&Path, Vec<String>)) -> Result<Vec<String>> {
    let a: BTreeSet<_> = left.1.iter().collect();
    let b: BTreeSet<_> = right.1.iter().collect();
    if let Some(orphan) = a.difference(&b).next() {
        return Err(Error::Dataset(format!(
            "{} has {orphan:?} with no counterpart in {}",
            left.0.display(),
            right.0.display()
        )));
    }
    if let Some(orphan) = b.difference(&a).next() {
        return Err(Error::Dataset(format!(
            "{} has {orphan:?} with no counterpart in {}",
            right.0.display(),
            left.0.display()
        )));
    }
    if left.1.is_empty() {
        return Err(Error::Dataset(format!(
            "no matching stems between {} and {}",
            left.0.display(),
            right.0.display()
        )));
    }
    Ok(left.1)
}

/// Every pair of a dataset directory, in sorted stem order.
pub fn load_dataset<T: Real>(root: &Path) -> Result<Vec<Sample<T>>> {
    let images = root.join(IMAGES);
    let masks = root.join(MASKS);
    let names = match_stems((&images, stems(&images, "ppm")?), (&masks, stems(&masks, "pgm")?))?;
    names
        .iter()
        .map(|s| load_sample(&images.join(format!("{s}.ppm")), &masks.join(format!("{s}.pgm"))))
        .collect()
}

/// Writes `spec.count` synthetic pairs under `out`.
pub fn write_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let images = out.join(IMAGES);
    let masks = out.join(MASKS);
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    for i in 0..spec.count {
        let s = generate_sample(spec, i)?;
        pnm::write_ppm(&images.join(format!("{}.ppm", s.stem)), &s.image)?;
        let mask = GrayImage {
            width: s.mask.width(),
            height: s.mask.height(),
            pixels: s.mask.to_gray(),
        };
        pnm::write_pgm(&masks.join(format!("{}.pgm", s.stem)), &mask)?;
    }
    Ok(())
}

/// Directory holding ground-truth PGMs: `dir/masks` for a dataset root,
/// otherwise `dir` itself.
pub fn mask_dir(dir: &Path) -> PathBuf {
    let nested = dir.join(MASKS);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Evaluates every `<stem>.pgm` prediction in `pred_dir` against the
/// same-named mask, in sorted stem order.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, beta2: f64, mode: CurveMode) -> Result<EvalReport> {
    let gt_dir = mask_dir(gt_dir);
    let names = match_stems((pred_dir, stems(pred_dir, "pgm")?), (&gt_dir, stems(&gt_dir, "pgm")?))?;
    let mut pairs = Vec::with_capacity(names.len());
    for s in &names {
        let pred_path = pred_dir.join(format!("{s}.pgm"));
        let pred = pnm::read_pgm(&pred_path)?;
        let mask = read_mask(&gt_dir.join(format!("{s}.pgm")))?;
        if (pred.width, pred.height) != (mask.width(), mask.height()) {
            return Err(Error::Dataset(format!(
                "{s}: prediction is {}x{}, mask is {}x{}",
                pred.width,
                pred.height,
                mask.width(),
                mask.height()
            )));
        }
        pairs.push((SaliencyMap::from_gray(pred.width, pred.height, &pred.pixels)?, mask));
    }
    Ok(evaluate(&pairs, beta2, mode)?)
}
