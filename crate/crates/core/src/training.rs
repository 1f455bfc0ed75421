//! Frozen-backbone classifiers and the head training loop.
//!
//! The classifier is `backbone -> global average pooling -> dropout -> dense(2)
//! -> softmax`. Only the dense layer has trainable parameters. Because the
//! backbone is frozen and dropout sits after pooling, pooled features are
//! computed once per image and the epoch loop runs on cached vectors; this is
//! the same computation as pushing every image through the full network each
//! epoch.

use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneId};
use crate::dataset::{preprocess_unchecked, LabeledImage};
use crate::digest::f32_digest;
use crate::domain::{ClassLabel, DrawingType, Norm};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::report::format_metric;

pub const HEAD_DROPOUT: f64 = 0.3;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-7;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub backbone: BackboneId,
    pub drawing_type: DrawingType,
    pub epochs: usize,
    pub patience: usize,
    pub input_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub split_ratio: f64,
    pub seed: u64,
    pub early_stop_enabled: bool,
}

impl TrainingConfig {
    /// 100 epochs, patience 3, 224 px, batch 32, Adam at 1e-3, 80/20 split.
    pub fn new(backbone: BackboneId, drawing_type: DrawingType) -> Self {
        Self {
            backbone,
            drawing_type,
            epochs: 100,
            patience: 3,
            input_size: 224,
            batch_size: 32,
            learning_rate: 1e-3,
            split_ratio: 0.8,
            seed: crate::DEFAULT_SEED,
            early_stop_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split ratio {} not in (0, 1)", self.split_ratio));
        }
        self.backbone.check_input_size(self.input_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub config: TrainingConfig,
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// 1-based epoch with the highest validation accuracy, earliest on ties.
    /// 0 while no epoch has completed.
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn new(config: TrainingConfig) -> Self {
        Self {
            config,
            records: Vec::new(),
            stopped_early: false,
            best_epoch: 0,
        }
    }

    pub fn val_accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_accuracy).collect()
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.best_epoch.checked_sub(1).and_then(|i| self.records.get(i))
    }

    pub fn epochs_run(&self) -> usize {
        self.records.len()
    }

    fn push(&mut self, rec: EpochRecord) {
        let improves = self.best_record().is_none_or(|b| rec.val_accuracy > b.val_accuracy);
        self.records.push(rec);
        if improves {
            self.best_epoch = rec.epoch;
        }
    }

    /// `epoch,train_acc,train_loss,val_acc,val_loss`, metrics at six
    /// significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_acc", "train_loss", "val_acc", "val_loss"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format_metric(r.train_accuracy),
                format_metric(r.train_loss),
                format_metric(r.val_accuracy),
                format_metric(r.val_loss),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochRecord>> {
        #[derive(Deserialize)]
        struct Row {
            epoch: usize,
            train_acc: f64,
            train_loss: f64,
            val_acc: f64,
            val_loss: f64,
        }
        let mut rdr = csv::Reader::from_path(path)?;
        rdr.deserialize::<Row>()
            .map(|row| {
                let r = row?;
                Ok(EpochRecord {
                    epoch: r.epoch,
                    train_accuracy: r.train_acc,
                    train_loss: r.train_loss,
                    val_accuracy: r.val_acc,
                    val_loss: r.val_loss,
                })
            })
            .collect()
    }
}

/// Stop when none of the last `patience` values strictly exceeds the best
/// value seen before them.
pub fn early_stop_check(val_accuracies: &[f64], patience: usize) -> bool {
    let patience = patience.max(1);
    if val_accuracies.len() <= patience {
        return false;
    }
    let (before, tail) = val_accuracies.split_at(val_accuracies.len() - patience);
    let best = before.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    tail.iter().all(|&v| v.partial_cmp(&best) != Some(std::cmp::Ordering::Greater))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let p = softmax(&z);
    [p[0], p[1]]
}

/// `-ln p[label]`, with `p` floored at 1e-12. NaN stays NaN.
pub fn cross_entropy(probs: [f64; 2], label: ClassLabel) -> f64 {
    let p = probs[label.index()];
    if p.is_nan() {
        return f64::NAN;
    }
    -p.max(PROB_FLOOR).ln()
}

/// Index of the larger probability; ties go to class 0.
pub fn argmax2(probs: [f64; 2]) -> ClassLabel {
    if probs[1] > probs[0] {
        ClassLabel::Parkinson
    } else {
        ClassLabel::Healthy
    }
}

/// Accuracy and mean cross-entropy of probability vectors against labels.
pub fn score(probs: &[[f64; 2]], labels: &[ClassLabel]) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let n = probs.len() as f64;
    let correct = probs.iter().zip(labels).filter(|(p, &l)| argmax2(**p) == l).count();
    let loss: f64 = probs.iter().zip(labels).map(|(p, &l)| cross_entropy(*p, l)).sum();
    Ok((correct as f64 / n, loss / n))
}

/// Trainable dense layer, weights stored as `[class][feature]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseHead {
    pub in_dim: usize,
    pub weights: Vec<f32>,
    pub bias: [f32; 2],
}

impl DenseHead {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / (in_dim + 2) as f64).sqrt();
        let weights = (0..2 * in_dim).map(|_| rng.gen_range(-limit..limit) as f32).collect();
        Self {
            in_dim,
            weights,
            bias: [0.0; 2],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn digest(&self) -> String {
        f32_digest(self.weights.iter().chain(&self.bias))
    }

    pub fn logits(&self, features: &[f32]) -> [f64; 2] {
        let mut z = [self.bias[0] as f64, self.bias[1] as f64];
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &self.weights[c * self.in_dim..(c + 1) * self.in_dim];
            *zc += row.iter().zip(features).map(|(&w, &f)| w as f64 * f as f64).sum::<f64>();
        }
        z
    }

    pub fn probabilities(&self, features: &[f32]) -> [f64; 2] {
        softmax2(self.logits(features))
    }
}

/// Pooled backbone features for a labelled set.
#[derive(Clone, Debug, Default)]
pub struct FeatureSet {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<ClassLabel>,
    pub ids: Vec<String>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A frozen backbone with its trainable head.
#[derive(Clone, Debug)]
pub struct Classifier {
    backbone: Backbone,
    head: DenseHead,
    norm: Norm,
    head_seed: u64,
}

/// Load the pretrained backbone from `weights_dir` and attach a fresh head.
pub fn build_classifier(
    backbone: BackboneId,
    weights_dir: &Path,
    input_size: usize,
    seed: u64,
) -> Result<Classifier> {
    Ok(Classifier::new(Backbone::load(backbone, weights_dir, input_size)?, seed))
}

impl Classifier {
    pub fn new(backbone: Backbone, seed: u64) -> Self {
        let head = DenseHead::glorot(backbone.feature_dim(), seed);
        let norm = backbone.id().default_norm();
        Self {
            backbone,
            head,
            norm,
            head_seed: seed,
        }
    }

    pub fn with_head(backbone: Backbone, head: DenseHead) -> Result<Self> {
        if head.in_dim != backbone.feature_dim() || head.weights.len() != 2 * head.in_dim {
            return Err(Error::Config(format!(
                "head expects {} features, backbone produces {}",
                head.in_dim,
                backbone.feature_dim()
            )));
        }
        let norm = backbone.id().default_norm();
        Ok(Self {
            backbone,
            head,
            norm,
            head_seed: 0,
        })
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &DenseHead {
        &self.head
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size()
    }

    pub fn head_seed(&self) -> u64 {
        self.head_seed
    }

    pub fn output_dim(&self) -> usize {
        2
    }

    pub fn trainable_param_count(&self) -> usize {
        self.head.param_count()
    }

    pub fn features(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let x = preprocess_unchecked(image, self.input_size(), self.norm);
        self.backbone.extract(&x)
    }

    pub fn featurize(&self, images: &[LabeledImage], mode: ExecMode) -> Result<FeatureSet> {
        let features = mode.try_map_slice(images, |img| self.features(&img.pixels))?;
        Ok(FeatureSet {
            features,
            labels: images.iter().map(|i| i.label).collect(),
            ids: images.iter().map(|i| i.source_id.clone()).collect(),
        })
    }

    pub fn predict_proba(&self, image: &RgbImage) -> Result<[f64; 2]> {
        Ok(self.head.probabilities(&self.features(image)?))
    }
}

/// Accuracy and mean cross-entropy of a classifier on raw images.
pub fn evaluate(model: &Classifier, dataset: &[LabeledImage], mode: ExecMode) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    evaluate_features(model.head(), &model.featurize(dataset, mode)?)
}

pub fn evaluate_features(head: &DenseHead, set: &FeatureSet) -> Result<(f64, f64)> {
    let probs: Vec<[f64; 2]> = set.features.iter().map(|f| head.probabilities(f)).collect();
    score(&probs, &set.labels)
}

/// Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let lr_t = self.lr * (1.0 - ADAM_BETA2.powi(self.t)).sqrt() / (1.0 - ADAM_BETA1.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            params[i] -= lr_t * self.m[i] / (self.v[i].sqrt() + ADAM_EPSILON);
        }
    }
}

/// Adam on the head, parameters kept in f64 while optimising:
/// `[w_healthy.., w_parkinson.., b0, b1]`.
pub struct HeadOptimizer {
    in_dim: usize,
    params: Vec<f64>,
    adam: Adam,
}

impl HeadOptimizer {
    pub fn new(head: &DenseHead, lr: f64) -> Self {
        let mut params: Vec<f64> = head.weights.iter().map(|&w| w as f64).collect();
        params.extend(head.bias.iter().map(|&b| b as f64));
        let n = params.len();
        Self {
            in_dim: head.in_dim,
            params,
            adam: Adam::new(n, lr),
        }
    }

    pub fn head(&self) -> DenseHead {
        let d = self.in_dim;
        DenseHead {
            in_dim: d,
            weights: self.params[..2 * d].iter().map(|&w| w as f32).collect(),
            bias: [self.params[2 * d] as f32, self.params[2 * d + 1] as f32],
        }
    }

    fn logits(&self, x: &[f64]) -> [f64; 2] {
        let d = self.in_dim;
        let mut z = [self.params[2 * d], self.params[2 * d + 1]];
        for (c, zc) in z.iter_mut().enumerate() {
            *zc += self.params[c * d..(c + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        z
    }

    /// One optimisation step on a (dropout-masked) batch. Returns the batch
    /// loss sum and correct count, both measured before the update.
    pub fn step(&mut self, batch: &[(Vec<f64>, ClassLabel)]) -> (f64, usize) {
        let d = self.in_dim;
        let n = batch.len() as f64;
        let mut grads = vec![0.0; self.params.len()];
        let (mut loss, mut correct) = (0.0, 0);
        for (x, label) in batch {
            let p = softmax2(self.logits(x));
            loss += cross_entropy(p, *label);
            correct += usize::from(argmax2(p) == *label);
            for c in 0..2 {
                let delta = (p[c] - f64::from(u8::from(c == label.index()))) / n;
                for (g, v) in grads[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += delta * v;
                }
                grads[2 * d + c] += delta;
            }
        }
        self.adam.step(&mut self.params, &grads);
        (loss, correct)
    }
}

fn dropout_batch(set: &FeatureSet, idx: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, ClassLabel)> {
    let keep = 1.0 - rate;
    idx.iter()
        .map(|&i| {
            let x = set.features[i]
                .iter()
                .map(|&v| if rng.gen_bool(keep) { v as f64 / keep } else { 0.0 })
                .collect();
            (x, set.labels[i])
        })
        .collect()
}

/// Fit the head on cached features.
///
/// One record per completed epoch. Train metrics are running averages over
/// the epoch's batches with dropout active; validation metrics use the head
/// as it stands at the end of the epoch. With early stopping enabled the
/// returned head is the one from the best epoch, otherwise the last one.
pub fn train(
    model: &Classifier,
    train_set: &FeatureSet,
    val_set: &FeatureSet,
    config: &TrainingConfig,
) -> Result<(TrainingHistory, Classifier)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input("training and validation sets must be nonempty".into()));
    }
    let dim = model.backbone.feature_dim();
    if train_set.features.iter().chain(&val_set.features).any(|f| f.len() != dim) {
        return Err(Error::Input(format!("features must have length {dim}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut trainer = HeadOptimizer::new(&model.head, config.learning_rate);
    let mut history = TrainingHistory::new(config.clone());
    let mut best_head = model.head.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch = dropout_batch(train_set, chunk, HEAD_DROPOUT, &mut rng);
            let (l, c) = trainer.step(&batch);
            loss_sum += l;
            correct += c;
        }
        let head = trainer.head();
        let n = train_set.len() as f64;
        let train_loss = loss_sum / n;
        let (val_accuracy, val_loss) = evaluate_features(&head, val_set)?;
        let rec = EpochRecord {
            epoch,
            train_accuracy: correct as f64 / n,
            train_loss,
            val_accuracy,
            val_loss,
        };
        let finite = [rec.train_loss, rec.val_loss].iter().all(|v| v.is_finite())
            && trainer.params.iter().all(|v| v.is_finite());
        if !finite {
            history.records.push(rec);
            return Err(Error::Diverged {
                epoch,
                history: Box::new(history),
            });
        }
        history.push(rec);
        if history.best_epoch == epoch {
            best_head = head.clone();
        }
        log::debug!(
            "{} {} epoch {epoch}: acc {:.4} loss {:.4} val_acc {:.4} val_loss {:.4}",
            config.backbone,
            config.drawing_type,
            rec.train_accuracy,
            rec.train_loss,
            rec.val_accuracy,
            rec.val_loss
        );
        if config.early_stop_enabled && early_stop_check(&history.val_accuracies(), config.patience) {
            history.stopped_early = true;
            break;
        }
    }

    let head = if config.early_stop_enabled { best_head } else { trainer.head() };
    let trained = Classifier {
        head,
        ..model.clone()
    };
    Ok((history, trained))
}

/// Everything a finished run records next to its history CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub history: TrainingHistory,
    pub stop_epoch: usize,
    pub wall_time_secs: f64,
    pub backbone_digest: String,
    pub feature_dim: usize,
    pub trainable_params: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub split_before_augment: bool,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Deterministic id of a run: config, backbone bytes and the exact training
/// and validation membership.
pub fn run_id(config: &TrainingConfig, backbone_digest: &str, train_ids: &[String], val_ids: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(backbone_digest.as_bytes());
    for id in train_ids {
        h.update(b"t");
        h.update(id.as_bytes());
    }
    for id in val_ids {
        h.update(b"v");
        h.update(id.as_bytes());
    }
    Ok(format!(
        "{}-{}-{}",
        config.backbone,
        config.drawing_type,
        &hex::encode(h.finalize())[..16]
    ))
}

/// Wall-clock timer for run manifests.
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
