mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spiralscreen::augmentation::AugmentationSpec;
use spiralscreen::dataset::{preprocess, LabeledImage};
use spiralscreen::training::{early_stop_check, softmax};
use spiralscreen::{ClassLabel, DrawingType, Norm};

use common::*;

#[test]
fn fusion_matches_oracle_on_grid() {
    let n = check_fusion_grid().unwrap();
    assert_eq!(n, 441 * 441 + 2 * 441);
}

#[test]
fn fusion_agreement_and_single_input() {
    check_fusion_consistency().unwrap();
}

#[test]
fn early_stop_hand_traces() {
    // patience counter: 0.6 at epoch 2, then three epochs without a strict gain
    let v = [0.5, 0.6, 0.6, 0.6, 0.6];
    assert_eq!(replay_stop(&v, 3), Some(5));
    assert_eq!(counter_stop(&v, 3), Some(5));
    assert_eq!(replay_stop(&[0.5, 0.6, 0.7], 3), None);
    assert_eq!(replay_stop(&[0.7, 0.6, 0.65, 0.69, 0.8, 0.8], 3), Some(4));
    assert_eq!(replay_stop(&[0.7], 1), None);
    assert_eq!(replay_stop(&[0.7, 0.7], 1), Some(2));
}

fn tiny_image(seed: u8) -> image::RgbImage {
    image::RgbImage::from_fn(32 + seed as u32 % 7, 32 + seed as u32 % 5, |x, y| {
        let v = ((x * 7 + y * 13 + seed as u32 * 31) % 256) as u8;
        image::Rgb([v, v.wrapping_add(40), 255 - v])
    })
}

fn tiny_corpus(n_healthy: usize, n_parkinson: usize) -> Vec<LabeledImage> {
    (0..n_healthy + n_parkinson)
        .map(|i| {
            let label = if i < n_healthy { ClassLabel::Healthy } else { ClassLabel::Parkinson };
            LabeledImage::new(tiny_image(i as u8), DrawingType::Wave, label, format!("wave/{label}/{i:04}.png")).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn split_invariants(n_h in 1usize..120, n_p in 1usize..120, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = random_labelled(&mut rng, n_h, n_p);
        prop_assert_eq!(check_split(&images, ratio, seed), Ok(()));
    }

    #[test]
    fn softmax_normalized(logits in prop::collection::vec(-700.0f64..700.0, 2..8)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn early_stop_matches_counter(
        vals in prop::collection::vec(prop::sample::select(vec![0.5, 0.6, 0.7, 0.75, 0.8, 0.9, 1.0]), 0..40),
        patience in 1usize..6,
    ) {
        prop_assert_eq!(replay_stop(&vals, patience), counter_stop(&vals, patience));
        prop_assert_eq!(early_stop_check(&vals, patience), stalled_epochs(&vals) >= patience);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn augmentation_invariants(
        n_h in 1usize..8,
        n_p in 1usize..8,
        extra in 0usize..1990,
        seed in any::<u64>(),
    ) {
        let images = tiny_corpus(n_h, n_p);
        let target = (images.len() + extra).clamp(10.max(images.len()), 2000);
        let spec = AugmentationSpec { target_count: target, seed, ..AugmentationSpec::default() };
        prop_assert_eq!(check_augmentation(&images, &spec), Ok(()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn preprocess_shape_and_range(
        w in 32u32..160,
        h in 32u32..160,
        seed in any::<u8>(),
        size in prop::sample::select(vec![96usize, 160, 224]),
        signed in any::<bool>(),
    ) {
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 31 + y * 17 + seed as u32 * 7) % 256) as u8;
            image::Rgb([v, 255 - v, v / 2])
        });
        let norm = if signed { Norm::SignedUnit } else { Norm::UnitInterval };
        let (lo, hi) = if signed { (-1.0, 1.0) } else { (0.0, 1.0) };
        let x = preprocess(&img, size, norm).unwrap();
        prop_assert_eq!(x.shape(), &[size, size, 3]);
        prop_assert!(x.iter().all(|&v| v >= lo && v <= hi));
    }
}
