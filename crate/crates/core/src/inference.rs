//! Model bundles, single-drawing prediction and spiral/wave fusion.
//!
//! A bundle is a tar archive with two entries:
//!
//! * `manifest.json`: backbone, drawing type, input size, class order,
//!   normalisation, format version, training run id, input layout and the
//!   SHA-256 of the model graph.
//! * `model.onnx`: the complete classifier (frozen backbone, pooling, dense
//!   layer and softmax) as one ONNX graph whose single output is
//!   `probabilities`, shape `[1, 2]`, in class order.
//!
//! A bundle needs no training artifacts; any ONNX runtime can execute it.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use tract_onnx::pb::StringStringEntryProto;
use tract_onnx::prelude::*;

use crate::backbone::{compile, inspect_input, to_tensor, BackboneId, FeatureOutput, Layout};
use crate::dataset::{decode_image, preprocess, LabeledImage};
use crate::digest::sha256_hex;
use crate::domain::{ClassLabel, DrawingType, Norm};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::onnx::{self, Attr, Dim};
use crate::training::{argmax2, Classifier};

pub const BUNDLE_VERSION: &str = "1.0";
pub const MANIFEST_ENTRY: &str = "manifest.json";
pub const MODEL_ENTRY: &str = "model.onnx";
pub const OUTPUT_NAME: &str = "probabilities";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub backbone: BackboneId,
    pub drawing_type: DrawingType,
    pub input_size: usize,
    pub class_order: Vec<ClassLabel>,
    pub norm: Norm,
    pub training_run_id: String,
    pub input_layout: Layout,
    pub model_sha256: String,
}

/// Caller-supplied manifest fields for [`export_bundle`]; the rest come
/// from the classifier.
#[derive(Clone, Debug, Default)]
pub struct ExportFields {
    pub drawing_type: Option<DrawingType>,
    pub training_run_id: Option<String>,
}

pub fn bundle_file_name(backbone: BackboneId, drawing_type: DrawingType) -> String {
    format!("{backbone}_{drawing_type}.bundle")
}

fn parse_version(v: &str) -> Option<(u32, u32)> {
    let (major, minor) = v.split_once('.')?;
    Some((major.parse().ok()?, minor.parse().ok()?))
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let found = parse_version(&self.version)
            .ok_or_else(|| Error::Format(format!("unreadable bundle version `{}`", self.version)))?;
        let supported = parse_version(BUNDLE_VERSION).expect("constant is well formed");
        if found > supported {
            return Err(Error::UnsupportedVersion {
                found: self.version.clone(),
                supported: BUNDLE_VERSION.into(),
            });
        }
        if self.class_order != ClassLabel::ALL {
            return Err(Error::Format(format!(
                "class_order must be [healthy, parkinson], got {:?}",
                self.class_order
            )));
        }
        if self.training_run_id.is_empty() {
            return Err(Error::Format("manifest has an empty training_run_id".into()));
        }
        self.backbone
            .check_input_size(self.input_size)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

/// Append pooling, the dense layer and softmax to the backbone graph.
fn classifier_graph(model: &Classifier) -> Result<Vec<u8>> {
    let backbone = model.backbone();
    let head = model.head();
    let mut proto = onnx::decode(backbone.graph_bytes()).map_err(|e| Error::Export(e.to_string()))?;
    let graph = proto
        .graph
        .as_mut()
        .ok_or_else(|| Error::Export("backbone has no graph".into()))?;
    let [out] = graph.output.as_slice() else {
        return Err(Error::Export(format!("backbone has {} outputs, expected 1", graph.output.len())));
    };
    let mut current = out.name.clone();
    let mut push = |op: &str, name: &str, extra: &[&str], attrs: Vec<Attr>| {
        let mut inputs = vec![current.as_str()];
        inputs.extend_from_slice(extra);
        let node = onnx::node(op, name, &inputs, &[name], attrs);
        graph.node.push(node);
        current = name.to_string();
    };
    if backbone.output() == FeatureOutput::Map {
        if backbone.layout() == Layout::Nhwc {
            push("Transpose", "head/to_nchw", &[], vec![Attr::Ints("perm", &[0, 3, 1, 2])]);
        }
        push("GlobalAveragePool", "head/gap", &[], vec![]);
    }
    push("Flatten", "head/flatten", &[], vec![Attr::Int("axis", 1)]);
    push("Gemm", "head/dense", &["head/w", "head/b"], vec![Attr::Int("transB", 1)]);
    push("Softmax", OUTPUT_NAME, &[], vec![Attr::Int("axis", 1)]);

    let dim = head.in_dim as i64;
    graph.initializer.push(onnx::tensor_f32("head/w", &[2, dim], &head.weights));
    graph.initializer.push(onnx::tensor_f32("head/b", &[2], &head.bias));
    graph.output = vec![onnx::value_info(OUTPUT_NAME, &[Dim::Fixed(1), Dim::Fixed(2)])];
    proto.metadata_props.push(StringStringEntryProto {
        key: "spiralscreen.class_order".into(),
        value: "healthy,parkinson".into(),
    });
    Ok(onnx::encode(&proto))
}

/// A loaded, validated bundle ready for prediction.
#[derive(Clone)]
pub struct ModelBundle {
    manifest: Manifest,
    model: Arc<[u8]>,
    plan: TypedRunnableModel<TypedModel>,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle").field("manifest", &self.manifest).finish()
    }
}

impl ModelBundle {
    /// Validate a manifest against the graph bytes and compile the graph.
    pub fn from_parts(manifest: Manifest, model: Vec<u8>) -> Result<Self> {
        manifest.validate()?;
        if sha256_hex(&model) != manifest.model_sha256 {
            return Err(Error::Format("model.onnx does not match the manifest digest".into()));
        }
        let proto = onnx::decode(&model)?;
        let graph = proto
            .graph
            .as_ref()
            .ok_or_else(|| Error::Format("model.onnx has no graph".into()))?;
        let layout = inspect_input(graph, manifest.input_size).map_err(|e| Error::Format(e.to_string()))?;
        if layout != manifest.input_layout {
            return Err(Error::Format(format!(
                "manifest says {:?} input, graph is {layout:?}",
                manifest.input_layout
            )));
        }
        let (plan, shape) = compile(&proto, layout, manifest.input_size).map_err(|e| Error::Format(e.to_string()))?;
        if shape.as_slice() != [1, 2] {
            return Err(Error::Format(format!("model output shape {shape:?}, expected [1, 2]")));
        }
        Ok(Self {
            manifest,
            model: model.into(),
            plan,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut archive = tar::Archive::new(Cursor::new(bytes));
        let corrupt = |e: std::io::Error| Error::Format(format!("truncated or corrupt bundle archive: {e}"));
        for entry in archive.entries().map_err(corrupt)? {
            let mut entry = entry.map_err(corrupt)?;
            let name = entry.path().map_err(corrupt)?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(corrupt)?;
            entries.insert(name, data);
        }
        let mut take = |name: &str| {
            entries
                .remove(name)
                .ok_or_else(|| Error::Format(format!("bundle has no {name}")))
        };
        let manifest: Manifest = serde_json::from_slice(&take(MANIFEST_ENTRY)?)
            .map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
        let model = take(MODEL_ENTRY)?;
        Self::from_parts(manifest, model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut builder = tar::Builder::new(Vec::new());
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        for (name, data) in [(MANIFEST_ENTRY, manifest.as_slice()), (MODEL_ENTRY, &self.model[..])] {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder.append_data(&mut header, name, data)?;
        }
        Ok(builder.into_inner()?)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn model_bytes(&self) -> &[u8] {
        &self.model
    }

    /// Version string reported to clients: the training run id.
    pub fn model_version(&self) -> &str {
        &self.manifest.training_run_id
    }

    pub fn probabilities(&self, image: &RgbImage) -> Result<[f64; 2]> {
        let x = preprocess(image, self.manifest.input_size, self.manifest.norm)?;
        let out = self
            .plan
            .run(tvec!(to_tensor(&x, self.manifest.input_layout).into()))
            .map_err(Error::runtime)?;
        let p = out[0].as_slice::<f32>().map_err(Error::runtime)?;
        let (h, k) = (p[0] as f64, p[1] as f64);
        let total = h + k;
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Runtime(format!("model produced invalid probabilities {p:?}")));
        }
        Ok([h / total, k / total])
    }

    pub fn predict_image(&self, image: &RgbImage) -> Result<Prediction> {
        let [p_healthy, p_parkinson] = self.probabilities(image)?;
        Ok(Prediction {
            drawing_type: self.manifest.drawing_type,
            p_healthy,
            p_parkinson,
        })
    }

    /// Decode PNG/JPEG bytes and predict.
    pub fn predict(&self, image_bytes: &[u8]) -> Result<Prediction> {
        let img = decode_image(image_bytes).map_err(|e| Error::Input(format!("cannot decode image: {e}")))?;
        self.predict_image(&img)
    }
}

/// Write `model` as a bundle at `path` and return the loaded bundle.
pub fn export_bundle(model: &Classifier, fields: &ExportFields, path: &Path) -> Result<ModelBundle> {
    let drawing_type = fields
        .drawing_type
        .ok_or_else(|| Error::Export("manifest field `drawing_type` is missing".into()))?;
    let training_run_id = fields
        .training_run_id
        .clone()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Export("manifest field `training_run_id` is missing".into()))?;
    let graph = classifier_graph(model)?;
    let manifest = Manifest {
        version: BUNDLE_VERSION.into(),
        backbone: model.backbone().id(),
        drawing_type,
        input_size: model.input_size(),
        class_order: ClassLabel::ALL.to_vec(),
        norm: model.norm(),
        training_run_id,
        input_layout: model.backbone().layout(),
        model_sha256: sha256_hex(&graph),
    };
    let bundle = ModelBundle::from_parts(manifest, graph).map_err(|e| Error::Export(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bundle.to_bytes()?)?;
    Ok(bundle)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    ModelBundle::from_bytes(&std::fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub drawing_type: DrawingType,
    pub p_healthy: f64,
    pub p_parkinson: f64,
}

impl Prediction {
    pub fn new(drawing_type: DrawingType, p_healthy: f64, p_parkinson: f64) -> Self {
        Self {
            drawing_type,
            p_healthy,
            p_parkinson,
        }
    }

    pub fn probability(&self, label: ClassLabel) -> f64 {
        match label {
            ClassLabel::Healthy => self.p_healthy,
            ClassLabel::Parkinson => self.p_parkinson,
        }
    }

    /// Argmax class, ties to healthy.
    pub fn label(&self) -> ClassLabel {
        argmax2([self.p_healthy, self.p_parkinson])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub label: ClassLabel,
    pub confidence: f64,
    pub winning_source: DrawingType,
    pub spiral: Option<Prediction>,
    pub wave: Option<Prediction>,
}

/// Highest class probability over every provided prediction wins. Exact ties
/// prefer parkinson over healthy, then spiral over wave.
pub fn fuse(spiral: Option<&Prediction>, wave: Option<&Prediction>) -> Result<FusionResult> {
    if spiral.is_none() && wave.is_none() {
        return Err(Error::Input("fusion needs at least one prediction".into()));
    }
    // scanned in tie-break priority order; only a strictly larger score
    // replaces the current winner
    let candidates = [
        (spiral, ClassLabel::Parkinson, DrawingType::Spiral),
        (wave, ClassLabel::Parkinson, DrawingType::Wave),
        (spiral, ClassLabel::Healthy, DrawingType::Spiral),
        (wave, ClassLabel::Healthy, DrawingType::Wave),
    ];
    let mut best: Option<(f64, ClassLabel, DrawingType)> = None;
    for (pred, label, source) in candidates {
        let Some(p) = pred else { continue };
        let score = p.probability(label);
        if best.is_none_or(|(s, _, _)| score > s) {
            best = Some((score, label, source));
        }
    }
    let (confidence, label, winning_source) = best.expect("at least one prediction");
    Ok(FusionResult {
        label,
        confidence,
        winning_source,
        spiral: spiral.copied(),
        wave: wave.copied(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub source_id: String,
    pub native_healthy: f64,
    pub native_parkinson: f64,
    pub bundle_healthy: f64,
    pub bundle_parkinson: f64,
    pub max_abs_deviation: f64,
}

/// Compare the in-process classifier with its exported bundle image by image.
pub fn parity_report(
    native: &Classifier,
    bundle: &ModelBundle,
    images: &[LabeledImage],
    mode: ExecMode,
) -> Result<Vec<ParityRow>> {
    mode.try_map_slice(images, |img| {
        let a = native.predict_proba(&img.pixels)?;
        let b = bundle.probabilities(&img.pixels)?;
        Ok(ParityRow {
            source_id: img.source_id.clone(),
            native_healthy: a[0],
            native_parkinson: a[1],
            bundle_healthy: b[0],
            bundle_parkinson: b[1],
            max_abs_deviation: (a[0] - b[0]).abs().max((a[1] - b[1]).abs()),
        })
    })
}

pub fn write_parity_csv(rows: &[ParityRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy of a bundle on labelled images (argmax, ties to healthy).
pub fn bundle_accuracy(bundle: &ModelBundle, images: &[LabeledImage], mode: ExecMode) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let hits = mode.try_map_slice(images, |img| {
        Ok::<_, Error>(argmax2(bundle.probabilities(&img.pixels)?) == img.label)
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / images.len() as f64)
}
