//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spiralscreen::augmentation::{augment_set_with, set_digest, AugmentationSpec};
use spiralscreen::backbone::{random_graph, Backbone, BackboneId, RandomGraphSpec};
use spiralscreen::dataset::{stratified_split, LabeledImage};
use spiralscreen::inference::{fuse, Prediction};
use spiralscreen::synthetic::{render_drawing, SynthParams};
use spiralscreen::training::early_stop_check;
use spiralscreen::{ClassLabel, DrawingType, ExecMode};

pub fn synth_image(t: DrawingType, label: ClassLabel, size: u32, seed: u64) -> LabeledImage {
    let px = render_drawing(t, &SynthParams::default_for(t, label), size, seed);
    LabeledImage::new(px, t, label, format!("{t}/{label}/{seed:05}.png")).unwrap()
}

pub fn synth_set(t: DrawingType, healthy: usize, parkinson: usize, size: u32, seed: u64) -> Vec<LabeledImage> {
    let mut out = Vec::new();
    for i in 0..healthy {
        out.push(synth_image(t, ClassLabel::Healthy, size, seed * 10_000 + i as u64));
    }
    for i in 0..parkinson {
        out.push(synth_image(t, ClassLabel::Parkinson, size, seed * 10_000 + 5_000 + i as u64));
    }
    out
}

/// Held-out fixture for export parity: 50 drawings of mixed type, class and
/// aspect ratio.
pub fn parity_fixture() -> Vec<LabeledImage> {
    (0..50u64)
        .map(|i| {
            let t = DrawingType::ALL[(i % 2) as usize];
            let label = ClassLabel::ALL[((i / 2) % 2) as usize];
            let square = render_drawing(t, &SynthParams::default_for(t, label), 200, 90_000 + i);
            // crop some to non-square so padding is exercised
            let (w, h) = match i % 3 {
                0 => (200, 200),
                1 => (200, 150),
                _ => (140, 200),
            };
            let px = image::imageops::crop_imm(&square, (200 - w) / 2, (200 - h) / 2, w, h).to_image();
            LabeledImage::new(px, t, label, format!("fixture/{i:02}")).unwrap()
        })
        .collect()
}

pub fn standin(id: BackboneId, input_size: usize, seed: u64) -> Backbone {
    Backbone::from_onnx(id, random_graph(&RandomGraphSpec::variant_for(id, seed)), input_size).unwrap()
}

/// Fusion by explicit enumeration: list every provided score, keep all that
/// equal the maximum, prefer parkinson among them, then spiral.
pub fn fusion_oracle(
    spiral: Option<(f64, f64)>,
    wave: Option<(f64, f64)>,
) -> (ClassLabel, f64, DrawingType) {
    let mut scores = Vec::new();
    for (src, p) in [(DrawingType::Spiral, spiral), (DrawingType::Wave, wave)] {
        if let Some((h, k)) = p {
            scores.push((h, ClassLabel::Healthy, src));
            scores.push((k, ClassLabel::Parkinson, src));
        }
    }
    let max = scores.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<_> = scores.iter().filter(|s| s.0 == max).collect();
    let label = if winners.iter().any(|w| w.1 == ClassLabel::Parkinson) {
        ClassLabel::Parkinson
    } else {
        ClassLabel::Healthy
    };
    let source = if winners.iter().any(|w| w.1 == label && w.2 == DrawingType::Spiral) {
        DrawingType::Spiral
    } else {
        DrawingType::Wave
    };
    (label, max, source)
}

pub fn grid() -> Vec<(f64, f64)> {
    let steps: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    steps.iter().flat_map(|&h| steps.iter().map(move |&k| (h, k))).collect()
}

fn check_fusion_case(s: Option<(f64, f64)>, w: Option<(f64, f64)>) -> Result<(), String> {
    let sp = s.map(|(h, k)| Prediction::new(DrawingType::Spiral, h, k));
    let wp = w.map(|(h, k)| Prediction::new(DrawingType::Wave, h, k));
    let got = fuse(sp.as_ref(), wp.as_ref()).map_err(|e| e.to_string())?;
    let want = fusion_oracle(s, w);
    if (got.label, got.confidence, got.winning_source) != want {
        return Err(format!("fuse({s:?}, {w:?}) = {got:?}, oracle {want:?}"));
    }
    if got.spiral != sp || got.wave != wp {
        return Err(format!("fuse({s:?}, {w:?}) did not echo its inputs"));
    }
    Ok(())
}

/// Exhaustive 0.05-grid comparison against the oracle, both-present and
/// single-input cases. Returns the number of cases checked.
pub fn check_fusion_grid() -> Result<usize, String> {
    let g = grid();
    let mut n = 0;
    for &s in &g {
        for &w in &g {
            check_fusion_case(Some(s), Some(w))?;
            n += 1;
        }
        check_fusion_case(Some(s), None)?;
        check_fusion_case(None, Some(s))?;
        n += 2;
    }
    Ok(n)
}

/// Agreement monotonicity and single-input consistency on normalized grid
/// predictions.
pub fn check_fusion_consistency() -> Result<usize, String> {
    let g: Vec<(f64, f64)> = (0..=20).map(|i| (1.0 - i as f64 * 0.05, i as f64 * 0.05)).collect();
    let mut n = 0;
    for &(sh, sk) in &g {
        let sp = Prediction::new(DrawingType::Spiral, sh, sk);
        let single = fuse(Some(&sp), None).unwrap();
        let argmax = if sk >= sh { ClassLabel::Parkinson } else { ClassLabel::Healthy };
        // ties in a single prediction resolve to parkinson under the fusion rule
        if single.label != argmax || single.winning_source != DrawingType::Spiral {
            return Err(format!("single spiral {sp:?} fused to {single:?}"));
        }
        for &(wh, wk) in &g {
            let wp = Prediction::new(DrawingType::Wave, wh, wk);
            let r = fuse(Some(&sp), Some(&wp)).unwrap();
            let (ls, lw) = (sk > sh, wk > wh);
            if sh != sk && wh != wk && ls == lw {
                let agreed = if ls { ClassLabel::Parkinson } else { ClassLabel::Healthy };
                if r.label != agreed {
                    return Err(format!("{sp:?} and {wp:?} agree on {agreed} but fused to {:?}", r.label));
                }
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Split invariants for one instance.
pub fn check_split(images: &[LabeledImage], ratio: f64, seed: u64) -> Result<(), String> {
    let split = stratified_split(images, ratio, seed).map_err(|e| e.to_string())?;
    let (tr, va) = (split.train_ids(), split.validation_ids());
    if !tr.is_disjoint(&va) {
        return Err("train and validation share ids".into());
    }
    let all: HashSet<&str> = images.iter().map(|i| i.source_id.as_str()).collect();
    let union: HashSet<&str> = tr.union(&va).copied().collect();
    if union != all || split.train.len() + split.validation.len() != images.len() {
        return Err("split does not partition the input".into());
    }
    for l in ClassLabel::ALL {
        let n = images.iter().filter(|i| i.label == l).count() as f64;
        let t = split.train.iter().filter(|i| i.label == l).count() as f64;
        if (t - ratio * n).abs() >= 1.0 {
            return Err(format!("class {l}: {t} of {n} in train at ratio {ratio}"));
        }
    }
    let again = stratified_split(images, ratio, seed).map_err(|e| e.to_string())?;
    if again.train_ids() != tr {
        return Err("split is not deterministic".into());
    }
    Ok(())
}

/// Random labelled set with unique ids. Pixels are shared; only ids and
/// labels matter to the split.
pub fn random_labelled(rng: &mut ChaCha8Rng, n_healthy: usize, n_parkinson: usize) -> Vec<LabeledImage> {
    let px = image::RgbImage::from_pixel(32, 32, image::Rgb([255, 255, 255]));
    let base = LabeledImage::new(px, DrawingType::Spiral, ClassLabel::Healthy, "x").unwrap();
    let mut labels: Vec<ClassLabel> = std::iter::repeat_n(ClassLabel::Healthy, n_healthy)
        .chain(std::iter::repeat_n(ClassLabel::Parkinson, n_parkinson))
        .collect();
    // interleave classes in random order
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| LabeledImage {
            label,
            source_id: format!("spiral/{label}/{i:05}.png"),
            ..base.clone()
        })
        .collect()
}

/// Count, label and determinism invariants of `augment_set`.
pub fn check_augmentation(images: &[LabeledImage], spec: &AugmentationSpec) -> Result<(), String> {
    let a = augment_set_with(images, spec, ExecMode::Parallel).map_err(|e| e.to_string())?;
    if a.images.len() != spec.target_count {
        return Err(format!("{} outputs for target {}", a.images.len(), spec.target_count));
    }
    let parents: BTreeMap<&str, ClassLabel> = images.iter().map(|i| (i.source_id.as_str(), i.label)).collect();
    for (img, rec) in a.images.iter().zip(&a.records) {
        if parents.get(rec.parent.as_str()) != Some(&img.label) || rec.label != img.label {
            return Err(format!("{} lost its parent's label", img.source_id));
        }
        if img.pixels.dimensions() != parents_dims(images, &rec.parent) {
            return Err(format!("{} changed geometry", img.source_id));
        }
        if !img.source_id.starts_with(&rec.parent) {
            return Err(format!("{} does not record its parent", img.source_id));
        }
    }
    let total = images.len();
    for l in ClassLabel::ALL {
        let n = images.iter().filter(|i| i.label == l).count();
        let got = a.images.iter().filter(|i| i.label == l).count();
        let floor = spec.target_count * n / total;
        if got < floor || got > floor + 1 {
            return Err(format!("class {l}: {got} outputs, proportional share {floor}"));
        }
    }
    let b = augment_set_with(images, spec, ExecMode::Sequential).map_err(|e| e.to_string())?;
    if set_digest(&a.images) != set_digest(&b.images) {
        return Err("output depends on execution mode or is not deterministic".into());
    }
    Ok(())
}

fn parents_dims(images: &[LabeledImage], id: &str) -> (u32, u32) {
    images
        .iter()
        .find(|i| i.source_id == id)
        .map(|i| i.pixels.dimensions())
        .unwrap_or((0, 0))
}

/// First prefix length at which the stop rule fires, if any.
pub fn replay_stop(val_accuracies: &[f64], patience: usize) -> Option<usize> {
    (1..=val_accuracies.len()).find(|&k| early_stop_check(&val_accuracies[..k], patience))
}

/// Epochs since the last strict improvement of the running maximum.
pub fn stalled_epochs(val_accuracies: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut since = 0;
    for &v in val_accuracies {
        if v > best {
            best = v;
            since = 0;
        } else {
            since += 1;
        }
    }
    since
}

/// Patience-counter formulation of the stop rule, written independently of
/// `early_stop_check`: count epochs since the last strict improvement.
pub fn counter_stop(val_accuracies: &[f64], patience: usize) -> Option<usize> {
    let mut best = f64::NEG_INFINITY;
    let mut since = 0;
    for (i, &v) in val_accuracies.iter().enumerate() {
        if v > best {
            best = v;
            since = 0;
        } else {
            since += 1;
            if since >= patience && i + 1 > patience {
                return Some(i + 1);
            }
        }
    }
    None
}
