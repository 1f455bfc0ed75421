//! Label-preserving geometric augmentation: rotation, zoom in/out and
//! horizontal/vertical flips, with white fill for exposed regions.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::LabeledImage;
use crate::domain::{ClassLabel, DrawingType};
use crate::error::{Error, Result};
use crate::exec::ExecMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Rotation is drawn from `[-rotation_degrees, +rotation_degrees]`.
    pub rotation_degrees: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    pub allow_hflip: bool,
    pub allow_vflip: bool,
    pub target_count: usize,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            rotation_degrees: 25.0,
            zoom_min: 0.85,
            zoom_max: 1.15,
            allow_hflip: true,
            allow_vflip: true,
            target_count: 1000,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl AugmentationSpec {
    /// A spec that leaves every image untouched.
    pub fn identity(target_count: usize, seed: u64) -> Self {
        Self {
            rotation_degrees: 0.0,
            zoom_min: 1.0,
            zoom_max: 1.0,
            allow_hflip: false,
            allow_vflip: false,
            target_count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees.is_finite()) {
            return Err(Error::Config(format!(
                "rotation range must be >= 0, got {}",
                self.rotation_degrees
            )));
        }
        if !(self.zoom_min > 0.0 && self.zoom_min <= 1.0 && self.zoom_max >= 1.0 && self.zoom_max.is_finite()) {
            return Err(Error::Config(format!(
                "zoom range [{}, {}] must satisfy 0 < lo <= 1 <= hi",
                self.zoom_min, self.zoom_max
            )));
        }
        Ok(())
    }
}

/// Concrete parameters of one transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub rotation_degrees: f64,
    pub zoom: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        rotation_degrees: 0.0,
        zoom: 1.0,
        hflip: false,
        vflip: false,
    };

    /// Draw parameters from the ranges in `spec`. Each component is independent.
    pub fn sample<R: Rng + ?Sized>(spec: &AugmentationSpec, rng: &mut R) -> Self {
        let r = spec.rotation_degrees;
        let rotation_degrees = if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let zoom = if spec.zoom_max > spec.zoom_min {
            rng.gen_range(spec.zoom_min..=spec.zoom_max)
        } else {
            spec.zoom_min
        };
        let hflip = spec.allow_hflip && rng.gen_bool(0.5);
        let vflip = spec.allow_vflip && rng.gen_bool(0.5);
        Self {
            rotation_degrees,
            zoom,
            hflip,
            vflip,
        }
    }

    fn describe(&self) -> String {
        format!(
            "rot={:+.3},zoom={:.4},hflip={},vflip={}",
            self.rotation_degrees, self.zoom, self.hflip as u8, self.vflip as u8
        )
    }
}

fn flip(img: &RgbImage, h: bool, v: bool) -> RgbImage {
    let (w, ht) = img.dimensions();
    RgbImage::from_fn(w, ht, |x, y| {
        let sx = if h { w - 1 - x } else { x };
        let sy = if v { ht - 1 - y } else { y };
        *img.get_pixel(sx, sy)
    })
}

fn bilinear_white(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |xi: i64, yi: i64| -> [f64; 3] {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            [255.0; 3]
        } else {
            let p = img.get_pixel(xi as u32, yi as u32).0;
            [p[0] as f64, p[1] as f64, p[2] as f64]
        }
    };
    let (a, b, c, d) = (px(x0, y0), px(x0 + 1, y0), px(x0, y0 + 1), px(x0 + 1, y0 + 1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - fx) + b[k] * fx;
        let bot = c[k] * (1.0 - fx) + d[k] * fx;
        out[k] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Apply fixed transform parameters. Flips are exact permutations; rotation
/// and zoom act about the image centre with bilinear sampling.
pub fn apply_transform(img: &RgbImage, p: &TransformParams) -> RgbImage {
    let flipped = if p.hflip || p.vflip {
        flip(img, p.hflip, p.vflip)
    } else {
        img.clone()
    };
    if p.rotation_degrees == 0.0 && p.zoom == 1.0 {
        return flipped;
    }
    let (w, h) = flipped.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let theta = p.rotation_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    RgbImage::from_fn(w, h, |x, y| {
        // inverse map: undo zoom, then undo rotation
        let dx = (x as f64 - cx) / p.zoom;
        let dy = (y as f64 - cy) / p.zoom;
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let v = bilinear_white(&flipped, sx, sy);
        Rgb([
            v[0].round().clamp(0.0, 255.0) as u8,
            v[1].round().clamp(0.0, 255.0) as u8,
            v[2].round().clamp(0.0, 255.0) as u8,
        ])
    })
}

/// Sample a transform from `spec` using `rng` only and apply it.
pub fn random_transform<R: Rng + ?Sized>(
    image: &LabeledImage,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<LabeledImage> {
    spec.validate()?;
    let params = TransformParams::sample(spec, rng);
    Ok(transformed(image, &params, &params.describe()))
}

fn transformed(image: &LabeledImage, params: &TransformParams, tag: &str) -> LabeledImage {
    LabeledImage {
        pixels: std::sync::Arc::new(apply_transform(&image.pixels, params)),
        drawing_type: image.drawing_type,
        label: image.label,
        source_id: format!("{}~{}", image.source_id, tag),
    }
}

/// Origin of one augmented output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub source_id: String,
    pub parent: String,
    pub label: ClassLabel,
    /// `None` for originals carried over unchanged.
    pub transform: Option<TransformParams>,
}

#[derive(Clone, Debug)]
pub struct AugmentedSet {
    pub images: Vec<LabeledImage>,
    pub records: Vec<AugmentRecord>,
}

/// Split `target` across classes in proportion to their input counts; the
/// leftover from flooring is handed out one by one in class order.
pub fn class_quotas(counts: &[usize], target: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let mut quotas: Vec<usize> = counts.iter().map(|&c| target * c / total).collect();
    let mut left = target - quotas.iter().sum::<usize>();
    let mut k = 0;
    while left > 0 {
        if counts[k % counts.len()] > 0 {
            quotas[k % counts.len()] += 1;
            left -= 1;
        }
        k += 1;
    }
    quotas
}

#[derive(Clone, Copy)]
enum Slot<'a> {
    Original(&'a LabeledImage),
    Generated(&'a LabeledImage),
}

/// Grow a single-type corpus to exactly `spec.target_count` images. Originals
/// are kept; new images cycle through the parents of each class.
pub fn augment_set(images: &[LabeledImage], spec: &AugmentationSpec) -> Result<Vec<LabeledImage>> {
    augment_set_with(images, spec, ExecMode::default()).map(|s| s.images)
}

pub fn augment_set_with(images: &[LabeledImage], spec: &AugmentationSpec, mode: ExecMode) -> Result<AugmentedSet> {
    spec.validate()?;
    let first = images
        .first()
        .ok_or_else(|| Error::Input("cannot augment an empty image set".into()))?;
    let drawing_type = first.drawing_type;
    if images.iter().any(|i| i.drawing_type != drawing_type) {
        return Err(Error::Input("augmentation input mixes drawing types".into()));
    }
    if spec.target_count < images.len() {
        return Err(Error::Config(format!(
            "target count {} is smaller than the input ({})",
            spec.target_count,
            images.len()
        )));
    }

    let by_class: Vec<Vec<&LabeledImage>> = ClassLabel::ALL
        .iter()
        .map(|&l| images.iter().filter(|i| i.label == l).collect())
        .collect();
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = class_quotas(&counts, spec.target_count);

    let mut slots: Vec<Slot> = Vec::with_capacity(spec.target_count);
    for (parents, &quota) in by_class.iter().zip(&quotas) {
        slots.extend(parents.iter().map(|p| Slot::Original(p)));
        for j in 0..quota - parents.len() {
            slots.push(Slot::Generated(parents[j % parents.len()]));
        }
    }

    // every output index owns its own rng stream, so results do not depend
    // on execution order
    let (images_out, records_out): (Vec<_>, Vec<_>) = mode
        .map_indexed(slots.len(), |index| match slots[index] {
            Slot::Original(p) => {
                let rec = AugmentRecord {
                    source_id: p.source_id.clone(),
                    parent: p.source_id.clone(),
                    label: p.label,
                    transform: None,
                };
                (p.clone(), rec)
            }
            Slot::Generated(parent) => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(index as u64);
                let params = TransformParams::sample(spec, &mut rng);
                let img = transformed(parent, &params, &format!("aug{index:05}[{}]", params.describe()));
                let rec = AugmentRecord {
                    source_id: img.source_id.clone(),
                    parent: parent.source_id.clone(),
                    label: img.label,
                    transform: Some(params),
                };
                (img, rec)
            }
        })
        .into_iter()
        .unzip();

    check_labels(images, &images_out, &records_out)?;
    Ok(AugmentedSet {
        images: images_out,
        records: records_out,
    })
}

fn check_labels(inputs: &[LabeledImage], outputs: &[LabeledImage], records: &[AugmentRecord]) -> Result<()> {
    let parent_label: std::collections::HashMap<&str, ClassLabel> =
        inputs.iter().map(|i| (i.source_id.as_str(), i.label)).collect();
    for (img, rec) in outputs.iter().zip(records) {
        if parent_label.get(rec.parent.as_str()) != Some(&img.label) {
            return Err(Error::Input(format!("label drift on augmented image {}", img.source_id)));
        }
    }
    Ok(())
}

/// Digest over ids, labels and pixel bytes, in order.
pub fn set_digest(images: &[LabeledImage]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update(img.source_id.as_bytes());
        h.update([img.label as u8, img.drawing_type as u8]);
        h.update(img.width().to_le_bytes());
        h.update(img.height().to_le_bytes());
        h.update(img.pixels.as_raw());
    }
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    source_id: String,
    parent: String,
    label: ClassLabel,
    transform: Option<TransformParams>,
}

#[derive(Serialize, Deserialize)]
struct AugmentManifest {
    drawing_type: DrawingType,
    spec: AugmentationSpec,
    count: usize,
    outputs: Vec<ManifestEntry>,
}

/// Write an augmented set as `<out>/<type>/<class>/NNNNN.png` plus
/// `<out>/<type>/manifest.json`. The output tree is loadable by
/// [`crate::dataset::load_dataset`].
pub fn write_augmented(out: &Path, set: &AugmentedSet, spec: &AugmentationSpec) -> Result<()> {
    let drawing_type = set
        .images
        .first()
        .map(|i| i.drawing_type)
        .ok_or_else(|| Error::Input("nothing to write".into()))?;
    let type_dir = out.join(drawing_type.as_str());
    for l in ClassLabel::ALL {
        std::fs::create_dir_all(type_dir.join(l.as_str()))?;
    }
    let mut outputs = Vec::with_capacity(set.images.len());
    for (i, (img, rec)) in set.images.iter().zip(&set.records).enumerate() {
        let file = format!("{}/{i:05}.png", img.label);
        img.pixels.save(type_dir.join(&file))?;
        outputs.push(ManifestEntry {
            file,
            source_id: rec.source_id.clone(),
            parent: rec.parent.clone(),
            label: rec.label,
            transform: rec.transform,
        });
    }
    let manifest = AugmentManifest {
        drawing_type,
        spec: spec.clone(),
        count: outputs.len(),
        outputs,
    };
    std::fs::write(type_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{render_drawing, SynthParams};

    fn sample_image(seed: u64, label: ClassLabel) -> LabeledImage {
        let params = SynthParams::default_for(DrawingType::Spiral, label);
        let px = render_drawing(DrawingType::Spiral, &params, 128, seed);
        LabeledImage::new(px, DrawingType::Spiral, label, format!("spiral/{label}/{seed:03}.png")).unwrap()
    }

    #[test]
    fn identity_spec_is_pixel_identical() {
        let img = sample_image(1, ClassLabel::Healthy);
        let spec = AugmentationSpec::identity(10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = random_transform(&img, &spec, &mut rng).unwrap();
        assert_eq!(out.pixels.as_raw(), img.pixels.as_raw());
        assert_eq!(out.label, img.label);
        assert_eq!(out.drawing_type, img.drawing_type);
    }

    #[test]
    fn double_hflip_is_identity() {
        let img = sample_image(2, ClassLabel::Parkinson);
        let p = TransformParams {
            hflip: true,
            ..TransformParams::IDENTITY
        };
        let twice = apply_transform(&apply_transform(&img.pixels, &p), &p);
        assert_eq!(twice.as_raw(), img.pixels.as_raw());
        let once = apply_transform(&img.pixels, &p);
        assert_ne!(once.as_raw(), img.pixels.as_raw());
    }

    #[test]
    fn full_turn_rotation_matches_input() {
        for seed in 0..10 {
            let img = sample_image(seed, ClassLabel::ALL[seed as usize % 2]);
            let p = TransformParams {
                rotation_degrees: 360.0,
                ..TransformParams::IDENTITY
            };
            let out = apply_transform(&img.pixels, &p);
            let max = out
                .as_raw()
                .iter()
                .zip(img.pixels.as_raw())
                .map(|(a, b)| (*a as i32 - *b as i32).abs())
                .max()
                .unwrap();
            assert!(max <= 2, "seed {seed}: deviation {max}/255");
        }
    }

    #[test]
    fn geometry_preserved() {
        let img = LabeledImage::new(RgbImage::new(64, 40), DrawingType::Wave, ClassLabel::Healthy, "w").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = random_transform(&img, &AugmentationSpec::default(), &mut rng).unwrap();
        assert_eq!(out.pixels.dimensions(), (64, 40));
    }

    #[test]
    fn exposed_corners_are_white() {
        let img = LabeledImage::new(RgbImage::new(64, 64), DrawingType::Wave, ClassLabel::Healthy, "w").unwrap();
        let p = TransformParams {
            rotation_degrees: 45.0,
            ..TransformParams::IDENTITY
        };
        let out = apply_transform(&img.pixels, &p);
        assert_eq!(out.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(out.get_pixel(32, 32).0, [0, 0, 0]);
        let p = TransformParams {
            zoom: 0.5,
            ..TransformParams::IDENTITY
        };
        let out = apply_transform(&img.pixels, &p);
        assert_eq!(out.get_pixel(2, 2).0, [255, 255, 255]);
    }

    #[test]
    fn quotas() {
        assert_eq!(class_quotas(&[51, 51], 1000), vec![500, 500]);
        assert_eq!(class_quotas(&[3, 2], 11), vec![7, 4]);
        assert_eq!(class_quotas(&[1, 2], 3), vec![1, 2]);
    }

    #[test]
    fn invalid_specs() {
        let mut s = AugmentationSpec::default();
        s.rotation_degrees = -1.0;
        assert!(s.validate().is_err());
        let mut s = AugmentationSpec::default();
        s.zoom_min = 1.1;
        assert!(s.validate().is_err());
        let mut s = AugmentationSpec::default();
        s.zoom_max = 0.9;
        assert!(s.validate().is_err());
    }

    #[test]
    fn mixed_types_rejected() {
        let a = sample_image(1, ClassLabel::Healthy);
        let mut b = sample_image(2, ClassLabel::Parkinson);
        b.drawing_type = DrawingType::Wave;
        assert!(matches!(augment_set(&[a, b], &AugmentationSpec::default()), Err(Error::Input(_))));
        assert!(matches!(augment_set(&[], &AugmentationSpec::default()), Err(Error::Input(_))));
    }
}
