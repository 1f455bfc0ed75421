//! End-to-end training run: augment, split, extract features, train, export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_set_with, AugmentationSpec};
use crate::backbone::Backbone;
use crate::dataset::{stratified_split, LabeledImage};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::inference::{bundle_file_name, export_bundle, ExportFields, ModelBundle};
use crate::training::{evaluate_features, run_id, train, Classifier, RunManifest, Stopwatch, TrainingConfig, TrainingHistory};

/// Order of augmentation and splitting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Augment the whole corpus, then split. Augmented siblings of training
    /// images can land in validation.
    #[default]
    AugmentThenSplit,
    /// Split the originals first and augment only the training side to
    /// `split_ratio * target_count`; validation holds originals only.
    SplitThenAugment,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub history: TrainingHistory,
    pub classifier: Classifier,
    pub manifest: RunManifest,
    pub validation: Vec<LabeledImage>,
    /// Accuracy and loss of the returned classifier on the validation set.
    pub final_val: (f64, f64),
}

/// Run one backbone on one single-type corpus.
pub fn run_training(
    images: &[LabeledImage],
    backbone: Backbone,
    config: &TrainingConfig,
    augmentation: &AugmentationSpec,
    protocol: Protocol,
    mode: ExecMode,
) -> Result<RunOutcome> {
    config.validate()?;
    if backbone.id() != config.backbone || backbone.input_size() != config.input_size {
        return Err(Error::Config(format!(
            "backbone {} at {} px does not match config {} at {} px",
            backbone.id(),
            backbone.input_size(),
            config.backbone,
            config.input_size
        )));
    }
    if images.iter().any(|i| i.drawing_type != config.drawing_type) {
        return Err(Error::Input(format!("corpus is not all {}", config.drawing_type)));
    }
    let clock = Stopwatch::start();

    let (train_images, val_images) = match protocol {
        Protocol::AugmentThenSplit => {
            let augmented = augment_set_with(images, augmentation, mode)?;
            let split = stratified_split(&augmented.images, config.split_ratio, config.seed)?;
            (split.train, split.validation)
        }
        Protocol::SplitThenAugment => {
            let split = stratified_split(images, config.split_ratio, config.seed)?;
            let target = ((augmentation.target_count as f64 * config.split_ratio).round() as usize).max(split.train.len());
            let spec = AugmentationSpec {
                target_count: target,
                ..augmentation.clone()
            };
            (augment_set_with(&split.train, &spec, mode)?.images, split.validation)
        }
    };
    log::info!(
        "{} {}: {} train / {} validation images",
        config.backbone,
        config.drawing_type,
        train_images.len(),
        val_images.len()
    );

    let model = Classifier::new(backbone, config.seed);
    let train_set = model.featurize(&train_images, mode)?;
    let val_set = model.featurize(&val_images, mode)?;
    let (history, classifier) = train(&model, &train_set, &val_set, config)?;
    let final_val = evaluate_features(classifier.head(), &val_set)?;

    let backbone_digest = classifier.backbone().current_digest();
    let manifest = RunManifest {
        run_id: run_id(config, &backbone_digest, &train_set.ids, &val_set.ids)?,
        stop_epoch: history.epochs_run(),
        wall_time_secs: clock.secs(),
        backbone_digest,
        feature_dim: classifier.backbone().feature_dim(),
        trainable_params: classifier.trainable_param_count(),
        train_count: train_set.len(),
        val_count: val_set.len(),
        split_before_augment: protocol == Protocol::SplitThenAugment,
        history: history.clone(),
    };
    Ok(RunOutcome {
        history,
        classifier,
        manifest,
        validation: val_images,
        final_val,
    })
}

/// Paths written by [`save_run`].
#[derive(Clone, Debug)]
pub struct SavedRun {
    pub dir: PathBuf,
    pub history_csv: PathBuf,
    pub run_json: PathBuf,
    pub head_json: PathBuf,
    pub bundle: PathBuf,
    pub validation_dir: PathBuf,
    pub loaded_bundle: ModelBundle,
}

/// Write `history.csv`, `run.json`, `head.json`, the bundle and the
/// validation images (as a `<type>/<class>/` tree) into `dir`.
pub fn save_run(outcome: &RunOutcome, dir: &Path) -> Result<SavedRun> {
    std::fs::create_dir_all(dir)?;
    let cfg = &outcome.history.config;
    let history_csv = dir.join("history.csv");
    outcome.history.write_csv(&history_csv)?;
    let run_json = dir.join("run.json");
    outcome.manifest.save(&run_json)?;
    let head_json = dir.join("head.json");
    std::fs::write(&head_json, serde_json::to_vec(outcome.classifier.head())?)?;

    let bundle = dir.join(bundle_file_name(cfg.backbone, cfg.drawing_type));
    let fields = ExportFields {
        drawing_type: Some(cfg.drawing_type),
        training_run_id: Some(outcome.manifest.run_id.clone()),
    };
    let loaded_bundle = export_bundle(&outcome.classifier, &fields, &bundle)?;

    let validation_dir = dir.join("validation");
    for img in &outcome.validation {
        let class_dir = validation_dir.join(img.drawing_type.as_str()).join(img.label.as_str());
        std::fs::create_dir_all(&class_dir)?;
        let name = img.source_id.replace(['/', '~', '[', ']', ' ', ','], "_");
        img.pixels.save(class_dir.join(format!("{name}.png")))?;
    }
    Ok(SavedRun {
        dir: dir.to_path_buf(),
        history_csv,
        run_json,
        head_json,
        bundle,
        validation_dir,
        loaded_bundle,
    })
}
