//! Corpus loading, backbone input preprocessing and stratified splitting.
//!
//! Expected layout:
//!
//! ```text
//! <root>/spiral/healthy/*.png
//! <root>/spiral/parkinson/*.png
//! <root>/wave/healthy/*.png
//! <root>/wave/parkinson/*.png
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, RgbImage};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ClassLabel, DrawingType, Norm};
use crate::error::{Error, Result};
use crate::exec::ExecMode;

pub const MIN_SIDE: u32 = 32;
pub const INPUT_SIZES: [usize; 3] = [96, 160, 224];
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One drawing with its labels. Pixels are shared so splits and augmented
/// sets can hold the originals without copying rasters.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub pixels: Arc<RgbImage>,
    pub drawing_type: DrawingType,
    pub label: ClassLabel,
    pub source_id: String,
}

impl LabeledImage {
    pub fn new(
        pixels: RgbImage,
        drawing_type: DrawingType,
        label: ClassLabel,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let (w, h) = pixels.dimensions();
        if w < MIN_SIDE || h < MIN_SIDE {
            return Err(Error::Input(format!(
                "image {w}x{h} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        Ok(Self {
            pixels: Arc::new(pixels),
            drawing_type,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub drawing_type: DrawingType,
    pub count_healthy: usize,
    pub count_parkinson: usize,
    pub total: usize,
    pub skipped: usize,
    #[serde(skip)]
    pub skipped_files: Vec<String>,
}

impl DatasetSummary {
    pub fn count(&self, label: ClassLabel) -> usize {
        match label {
            ClassLabel::Healthy => self.count_healthy,
            ClassLabel::Parkinson => self.count_parkinson,
        }
    }
}

/// Flatten any decoded image to RGB, compositing transparency onto white.
pub fn to_rgb_on_white(img: DynamicImage) -> RgbImage {
    if !img.color().has_alpha() {
        return img.into_rgb8();
    }
    let rgba = img.into_rgba8();
    let (w, h) = rgba.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let p = rgba.get_pixel(x, y).0;
        let a = p[3] as u32;
        let blend = |c: u8| ((c as u32 * a + 255 * (255 - a) + 127) / 255) as u8;
        image::Rgb([blend(p[0]), blend(p[1]), blend(p[2])])
    })
}

/// Decode PNG/JPEG bytes into an RGB raster.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes)?;
    Ok(to_rgb_on_white(img))
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    Ok(files)
}

/// Load every image of one drawing type, ordered by `source_id`.
pub fn load_dataset(
    root: impl AsRef<Path>,
    drawing_type: DrawingType,
) -> Result<(Vec<LabeledImage>, DatasetSummary)> {
    load_dataset_with(root, drawing_type, ExecMode::default())
}

pub fn load_dataset_with(
    root: impl AsRef<Path>,
    drawing_type: DrawingType,
    mode: ExecMode,
) -> Result<(Vec<LabeledImage>, DatasetSummary)> {
    let root = root.as_ref();
    let type_dir = root.join(drawing_type.as_str());
    if !type_dir.is_dir() {
        return Err(Error::MissingDirectory(type_dir));
    }

    let mut candidates = Vec::new();
    for label in ClassLabel::ALL {
        let dir = type_dir.join(label.as_str());
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir));
        }
        for path in list_images(&dir)? {
            let name = path.file_name().unwrap().to_string_lossy();
            let source_id = format!("{}/{}/{}", drawing_type, label, name);
            candidates.push((source_id, label, path));
        }
    }
    candidates.sort_by(|a, b| a.0.cmp(&b.0));

    let decoded = mode.map_slice(&candidates, |(source_id, label, path)| {
        std::fs::read(path)
            .map_err(Error::from)
            .and_then(|bytes| decode_image(&bytes))
            .and_then(|px| LabeledImage::new(px, drawing_type, *label, source_id.clone()))
    });

    let mut images = Vec::with_capacity(decoded.len());
    let mut skipped_files = Vec::new();
    for ((source_id, _, _), result) in candidates.iter().zip(decoded) {
        match result {
            Ok(img) => images.push(img),
            Err(e) => {
                log::warn!("skipping {source_id}: {e}");
                skipped_files.push(source_id.clone());
            }
        }
    }

    let count = |l: ClassLabel| images.iter().filter(|i| i.label == l).count();
    let summary = DatasetSummary {
        drawing_type,
        count_healthy: count(ClassLabel::Healthy),
        count_parkinson: count(ClassLabel::Parkinson),
        total: images.len(),
        skipped: skipped_files.len(),
        skipped_files,
    };
    for label in ClassLabel::ALL {
        if summary.count(label) == 0 {
            return Err(Error::EmptyClass {
                class: label.to_string(),
                dir: type_dir.join(label.as_str()),
            });
        }
    }
    Ok((images, summary))
}

pub fn check_input_size(input_size: usize) -> Result<()> {
    if INPUT_SIZES.contains(&input_size) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "input size {input_size} not supported (expected one of {INPUT_SIZES:?})"
        )))
    }
}

/// Triangle-filter (bilinear) resampling weights for one axis. When shrinking,
/// the kernel widens with the scale so thin strokes are averaged, not dropped.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let stretch = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - stretch).floor() as isize).max(0) as usize;
            let hi = ((center + stretch).ceil() as usize).min(src);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| {
                    let t = ((j as f64 + 0.5 - center) / stretch).abs();
                    (1.0 - t).max(0.0)
                })
                .collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            (lo, w)
        })
        .collect()
}

/// Pad to a white square, resize to `input_size`, and normalize.
///
/// Output layout is `[row, col, channel]`.
pub fn preprocess(image: &RgbImage, input_size: usize, norm: Norm) -> Result<Array3<f32>> {
    check_input_size(input_size)?;
    Ok(preprocess_unchecked(image, input_size, norm))
}

pub(crate) fn preprocess_unchecked(image: &RgbImage, input_size: usize, norm: Norm) -> Array3<f32> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let side = w.max(h);
    let (x0, y0) = ((side - w) / 2, (side - h) / 2);
    let sample = |row: usize, col: usize, c: usize| -> f64 {
        if row < y0 || row >= y0 + h || col < x0 || col >= x0 + w {
            255.0
        } else {
            image.get_pixel((col - x0) as u32, (row - y0) as u32).0[c] as f64
        }
    };

    let weights = axis_weights(side, input_size);

    // rows of the padded square, columns already resampled
    let mut tmp = vec![0f64; side * input_size * 3];
    for row in 0..side {
        for (ox, (lo, ws)) in weights.iter().enumerate() {
            for c in 0..3 {
                let acc: f64 = ws.iter().enumerate().map(|(k, wk)| wk * sample(row, lo + k, c)).sum();
                tmp[(row * input_size + ox) * 3 + c] = acc;
            }
        }
    }

    let mut out = Array3::<f32>::zeros((input_size, input_size, 3));
    for (oy, (lo, ws)) in weights.iter().enumerate() {
        for ox in 0..input_size {
            for c in 0..3 {
                let acc: f64 = ws
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * tmp[((lo + k) * input_size + ox) * 3 + c])
                    .sum();
                out[[oy, ox, c]] = norm.apply(acc.clamp(0.0, 255.0) as f32);
            }
        }
    }
    out
}

/// Preprocess a batch of images.
pub fn preprocess_batch(
    images: &[LabeledImage],
    input_size: usize,
    norm: Norm,
    mode: ExecMode,
) -> Result<Vec<Array3<f32>>> {
    check_input_size(input_size)?;
    Ok(mode.map_slice(images, |img| preprocess_unchecked(&img.pixels, input_size, norm)))
}

#[derive(Clone, Debug)]
pub struct SplitPair {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitPair {
    pub fn train_ids(&self) -> HashSet<&str> {
        self.train.iter().map(|i| i.source_id.as_str()).collect()
    }

    pub fn validation_ids(&self) -> HashSet<&str> {
        self.validation.iter().map(|i| i.source_id.as_str()).collect()
    }
}

/// Number of items of a class that go to the training side.
pub fn train_quota(class_count: usize, ratio: f64) -> usize {
    // guard against 0.29 * 100 = 28.999999999999996
    ((ratio * class_count as f64) + 1e-9).floor() as usize
}

/// Per-class shuffled split: `floor(ratio * n_class)` to train, the rest to
/// validation. Both sides keep the input order.
pub fn stratified_split(images: &[LabeledImage], ratio: f64, seed: u64) -> Result<SplitPair> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut in_train = vec![false; images.len()];
    for label in ClassLabel::ALL {
        let mut idx: Vec<usize> = (0..images.len()).filter(|&i| images[i].label == label).collect();
        if idx.is_empty() {
            let present = ClassLabel::ALL
                .into_iter()
                .find(|&l| l != label)
                .map(|l| l.to_string())
                .unwrap_or_default();
            return Err(Error::Stratification(present));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.index() as u64);
        idx.shuffle(&mut rng);
        for &i in &idx[..train_quota(idx.len(), ratio)] {
            in_train[i] = true;
        }
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (img, t) in images.iter().zip(in_train) {
        if t {
            train.push(img.clone());
        } else {
            validation.push(img.clone());
        }
    }
    Ok(SplitPair {
        train,
        validation,
        ratio,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn blank(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    fn labeled(n_h: usize, n_p: usize) -> Vec<LabeledImage> {
        let mut v = Vec::new();
        for i in 0..n_h {
            v.push(LabeledImage::new(blank(32, 32, 255), DrawingType::Spiral, ClassLabel::Healthy, format!("h{i:03}")).unwrap());
        }
        for i in 0..n_p {
            v.push(LabeledImage::new(blank(32, 32, 0), DrawingType::Spiral, ClassLabel::Parkinson, format!("p{i:03}")).unwrap());
        }
        v
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(LabeledImage::new(blank(31, 64, 0), DrawingType::Wave, ClassLabel::Healthy, "x").is_err());
    }

    #[test]
    fn identity_geometry() {
        let img = RgbImage::from_fn(224, 224, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x * y) % 256) as u8]));
        let out = preprocess(&img, 224, Norm::UnitInterval).unwrap();
        assert_eq!(out.shape(), &[224, 224, 3]);
        for y in 0..224 {
            for x in 0..224 {
                let p = img.get_pixel(x, y).0;
                for c in 0..3 {
                    assert_eq!(out[[y as usize, x as usize, c]], p[c] as f32 / 255.0);
                }
            }
        }
    }

    #[test]
    fn white_padding_gives_all_ones() {
        let out = preprocess(&blank(100, 300, 255), 224, Norm::UnitInterval).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transposed_input_gives_transposed_output() {
        let img = RgbImage::from_fn(300, 100, |x, y| {
            let v = ((x * 7 + y * 13) % 251) as u8;
            Rgb([v, v / 2, 255 - v])
        });
        let tr = RgbImage::from_fn(100, 300, |x, y| *img.get_pixel(y, x));
        for size in INPUT_SIZES {
            let a = preprocess(&img, size, Norm::SignedUnit).unwrap();
            let b = preprocess(&tr, size, Norm::SignedUnit).unwrap();
            let bt = b.permuted_axes([1, 0, 2]);
            let max = a.iter().zip(bt.iter()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            assert!(max <= 1e-6, "size {size}: max deviation {max}");
        }
    }

    #[test]
    fn rejects_bad_input_size() {
        assert!(matches!(preprocess(&blank(64, 64, 0), 128, Norm::UnitInterval), Err(Error::Config(_))));
    }

    #[test]
    fn downscale_keeps_thin_strokes() {
        // a 1px black line in a 600px image must still darken the 96px output
        let mut img = blank(600, 600, 255);
        for x in 0..600 {
            img.put_pixel(x, 300, Rgb([0, 0, 0]));
        }
        let out = preprocess(&img, 96, Norm::UnitInterval).unwrap();
        let darkest = out.iter().cloned().fold(1.0f32, f32::min);
        assert!(darkest < 0.95, "line vanished: {darkest}");
    }

    #[test]
    fn split_corpus_sized_counts() {
        let imgs = labeled(500, 500);
        let s = stratified_split(&imgs, 0.8, 7).unwrap();
        let count = |v: &[LabeledImage], l| v.iter().filter(|i| i.label == l).count();
        assert_eq!(count(&s.train, ClassLabel::Healthy), 400);
        assert_eq!(count(&s.train, ClassLabel::Parkinson), 400);
        assert_eq!(count(&s.validation, ClassLabel::Healthy), 100);
        assert_eq!(count(&s.validation, ClassLabel::Parkinson), 100);
    }

    #[test]
    fn split_floor_rule() {
        let s = stratified_split(&labeled(5, 5), 0.8, 1).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.validation.len(), 2);
    }

    #[test]
    fn split_deterministic() {
        let imgs = labeled(30, 17);
        let a = stratified_split(&imgs, 0.8, 3).unwrap();
        let b = stratified_split(&imgs, 0.8, 3).unwrap();
        assert_eq!(a.train_ids(), b.train_ids());
        assert_eq!(a.validation_ids(), b.validation_ids());
        let c = stratified_split(&imgs, 0.8, 4).unwrap();
        assert_ne!(a.train_ids(), c.train_ids());
    }

    #[test]
    fn split_single_class_fails() {
        assert!(matches!(stratified_split(&labeled(4, 0), 0.8, 1), Err(Error::Stratification(_))));
        assert!(matches!(stratified_split(&labeled(4, 4), 1.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn quota_guards_float_error() {
        assert_eq!(train_quota(100, 0.29), 29);
        assert_eq!(train_quota(5, 0.8), 4);
    }

    #[test]
    fn transparent_pixels_become_white() {
        let rgba = image::RgbaImage::from_pixel(4, 4, image::Rgba([0, 0, 0, 0]));
        let rgb = to_rgb_on_white(DynamicImage::ImageRgba8(rgba));
        assert!(rgb.pixels().all(|p| p.0 == [255, 255, 255]));
    }
}
