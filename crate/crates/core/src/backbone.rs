//! Frozen convolutional feature extractors.
//!
//! A backbone is a headless ONNX graph (`<weights_dir>/<backbone>.onnx`) that
//! maps one preprocessed image to either a feature map (`[1,C,h,w]` or
//! `[1,h,w,C]`, following the input layout) or an already pooled `[1,C]`
//! vector. The graph bytes are held immutably; nothing in this crate can
//! update backbone weights.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tract_onnx::pb::{GraphProto, StringStringEntryProto};
use tract_onnx::prelude::*;

use crate::dataset::check_input_size;
use crate::digest::sha256_hex;
use crate::domain::Norm;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::onnx::{self, Attr, Dim};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    MobilenetV2,
    NasnetMobile,
    EfficientnetB0,
    Resnet50,
    InceptionV3,
}

impl BackboneId {
    pub const ALL: [BackboneId; 5] = [
        BackboneId::MobilenetV2,
        BackboneId::NasnetMobile,
        BackboneId::EfficientnetB0,
        BackboneId::Resnet50,
        BackboneId::InceptionV3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneId::MobilenetV2 => "mobilenet_v2",
            BackboneId::NasnetMobile => "nasnet_mobile",
            BackboneId::EfficientnetB0 => "efficientnet_b0",
            BackboneId::Resnet50 => "resnet50",
            BackboneId::InceptionV3 => "inception_v3",
        }
    }

    /// Input scaling the exported graph expects.
    pub fn default_norm(self) -> Norm {
        match self {
            BackboneId::MobilenetV2 | BackboneId::NasnetMobile | BackboneId::InceptionV3 => Norm::SignedUnit,
            BackboneId::EfficientnetB0 | BackboneId::Resnet50 => Norm::UnitInterval,
        }
    }

    /// Channel width of the final feature map of the reference architecture.
    pub fn reference_feature_dim(self) -> usize {
        match self {
            BackboneId::MobilenetV2 | BackboneId::EfficientnetB0 => 1280,
            BackboneId::NasnetMobile => 1056,
            BackboneId::Resnet50 | BackboneId::InceptionV3 => 2048,
        }
    }

    /// Pretrained NASNetMobile weights only exist for 224x224 inputs.
    pub fn check_input_size(self, input_size: usize) -> Result<()> {
        check_input_size(input_size)?;
        if self == BackboneId::NasnetMobile && input_size != 224 {
            return Err(Error::Config(format!(
                "{self} pretrained weights require 224x224 input, got {input_size}"
            )));
        }
        Ok(())
    }

    pub fn graph_file_name(self) -> String {
        format!("{}.onnx", self.as_str())
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneId::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = BackboneId::ALL.iter().map(|b| b.as_str()).collect();
                Error::Config(format!("unknown backbone `{s}` (expected one of: {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Nchw,
    Nhwc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureOutput {
    /// Rank-4 map in the same layout as the input.
    Map,
    /// Rank-2 `[1, C]` vector.
    Pooled,
}

type Plan = TypedRunnableModel<TypedModel>;

/// A loaded, frozen backbone specialised to one input size.
#[derive(Clone)]
pub struct Backbone {
    id: BackboneId,
    graph: Arc<[u8]>,
    digest: String,
    param_count: usize,
    input_size: usize,
    layout: Layout,
    output: FeatureOutput,
    feature_dim: usize,
    plan: Plan,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone")
            .field("id", &self.id)
            .field("input_size", &self.input_size)
            .field("layout", &self.layout)
            .field("feature_dim", &self.feature_dim)
            .field("param_count", &self.param_count)
            .field("digest", &self.digest)
            .finish()
    }
}

/// Compile an ONNX graph for a single `[1, 3, s, s]` / `[1, s, s, 3]` input.
pub(crate) fn compile(proto: &tract_onnx::pb::ModelProto, layout: Layout, input_size: usize) -> Result<(Plan, TVec<usize>)> {
    let shape = match layout {
        Layout::Nchw => [1, 3, input_size, input_size],
        Layout::Nhwc => [1, input_size, input_size, 3],
    };
    let model = tract_onnx::onnx()
        .model_for_proto_model(proto)
        .map_err(|e| Error::Format(format!("cannot parse graph: {e:#}")))?
        .with_input_fact(0, f32::fact(shape).into())
        .and_then(|m| m.into_optimized())
        .map_err(|e| Error::Config(format!("graph does not accept {input_size}x{input_size} input: {e:#}")))?;
    let out_shape = model
        .output_fact(0)
        .map_err(Error::runtime)?
        .shape
        .as_concrete()
        .map(|s| s.iter().copied().collect::<TVec<usize>>())
        .ok_or_else(|| Error::Config("graph output shape is not fully determined".into()))?;
    let plan = model.into_runnable().map_err(Error::runtime)?;
    Ok((plan, out_shape))
}

/// Detect input layout from the declared graph input and reject graphs
/// pinned to a different spatial size.
pub(crate) fn inspect_input(graph: &GraphProto, input_size: usize) -> Result<Layout> {
    let inputs = onnx::real_inputs(graph);
    let [input] = inputs.as_slice() else {
        return Err(Error::Config(format!("expected one graph input, found {}", inputs.len())));
    };
    let dims = onnx::dims_of(input);
    if dims.len() != 4 {
        return Err(Error::Config(format!("expected a rank-4 image input, found rank {}", dims.len())));
    }
    let (layout, spatial) = if dims[1] == Some(3) {
        (Layout::Nchw, [dims[2], dims[3]])
    } else if dims[3] == Some(3) {
        (Layout::Nhwc, [dims[1], dims[2]])
    } else {
        return Err(Error::Config("cannot tell channel axis of graph input".into()));
    };
    if let Some(fixed) = spatial.iter().flatten().find(|&&d| d as usize != input_size) {
        return Err(Error::Config(format!(
            "graph input is fixed to {fixed} px, requested {input_size}"
        )));
    }
    Ok(layout)
}

/// Arrange one `[h, w, c]` image as the batch-of-one tensor a graph expects.
pub(crate) fn to_tensor(input: &Array3<f32>, layout: Layout) -> Tensor {
    let batched: Array4<f32> = match layout {
        Layout::Nhwc => input.clone().insert_axis(Axis(0)),
        Layout::Nchw => input
            .view()
            .permuted_axes([2, 0, 1])
            .insert_axis(Axis(0))
            .as_standard_layout()
            .into_owned(),
    };
    batched.into_tensor()
}

impl Backbone {
    /// Load `<weights_dir>/<id>.onnx`.
    pub fn load(id: BackboneId, weights_dir: impl AsRef<Path>, input_size: usize) -> Result<Self> {
        let path = weights_dir.as_ref().join(id.graph_file_name());
        if !path.is_file() {
            return Err(Error::Environment {
                backbone: id.to_string(),
                reason: format!("no pretrained graph at {}", path.display()),
            });
        }
        let bytes = std::fs::read(&path)?;
        Self::from_onnx(id, bytes, input_size)
    }

    pub fn from_onnx(id: BackboneId, bytes: Vec<u8>, input_size: usize) -> Result<Self> {
        id.check_input_size(input_size)?;
        let proto = onnx::decode(&bytes)?;
        let graph = proto
            .graph
            .as_ref()
            .ok_or_else(|| Error::Format("ONNX model has no graph".into()))?;
        let layout = inspect_input(graph, input_size)?;
        let param_count = onnx::parameter_count(graph);
        let (plan, out_shape) = compile(&proto, layout, input_size)?;
        let (output, feature_dim) = match (out_shape.as_slice(), layout) {
            ([1, c, _, _], Layout::Nchw) => (FeatureOutput::Map, *c),
            ([1, _, _, c], Layout::Nhwc) => (FeatureOutput::Map, *c),
            ([1, c], _) => (FeatureOutput::Pooled, *c),
            (other, _) => {
                return Err(Error::Config(format!("unsupported backbone output shape {other:?}")));
            }
        };
        Ok(Self {
            id,
            digest: sha256_hex(&bytes),
            graph: bytes.into(),
            param_count,
            input_size,
            layout,
            output,
            feature_dim,
            plan,
        })
    }

    pub fn id(&self) -> BackboneId {
        self.id
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn output(&self) -> FeatureOutput {
        self.output
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Digest recorded when the graph was loaded.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Digest of the bytes held right now.
    pub fn current_digest(&self) -> String {
        sha256_hex(&self.graph)
    }

    pub fn graph_bytes(&self) -> &[u8] {
        &self.graph
    }

    /// Run the backbone on one `[s, s, 3]` image and global-average-pool the
    /// result to a `feature_dim` vector.
    pub fn extract(&self, input: &Array3<f32>) -> Result<Vec<f32>> {
        let s = self.input_size;
        if input.shape() != [s, s, 3] {
            return Err(Error::Input(format!(
                "expected a {s}x{s}x3 input, got {:?}",
                input.shape()
            )));
        }
        let out = self
            .plan
            .run(tvec!(to_tensor(input, self.layout).into()))
            .map_err(Error::runtime)?;
        let view = out[0].to_array_view::<f32>().map_err(Error::runtime)?;
        let feats = match (self.output, self.layout) {
            (FeatureOutput::Pooled, _) => view.iter().copied().collect(),
            (FeatureOutput::Map, layout) => {
                let map = view.into_dimensionality::<ndarray::Ix4>().map_err(Error::runtime)?;
                let map = match layout {
                    Layout::Nchw => map.index_axis_move(Axis(0), 0),
                    Layout::Nhwc => map.index_axis_move(Axis(0), 0).permuted_axes([2, 0, 1]),
                };
                map.outer_iter()
                    .map(|plane| {
                        let sum: f64 = plane.iter().map(|&v| v as f64).sum();
                        (sum / plane.len() as f64) as f32
                    })
                    .collect()
            }
        };
        Ok(feats)
    }

    pub fn extract_batch(&self, inputs: &[Array3<f32>], mode: ExecMode) -> Result<Vec<Vec<f32>>> {
        mode.try_map_slice(inputs, |x| self.extract(x))
    }
}

/// Shape of a randomly initialised stand-in graph.
#[derive(Clone, Debug)]
pub struct RandomGraphSpec {
    pub layout: Layout,
    pub pooled_output: bool,
    /// Pin the spatial input size in the declared graph input.
    pub fixed_input: Option<usize>,
    /// Output channels of each stride-2 3x3 conv + ReLU stage.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for RandomGraphSpec {
    fn default() -> Self {
        Self {
            layout: Layout::Nchw,
            pooled_output: false,
            fixed_input: None,
            channels: vec![16, 32, 64],
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl RandomGraphSpec {
    /// One structural variant per backbone id, so tests cover every input
    /// layout and output kind.
    pub fn variant_for(id: BackboneId, seed: u64) -> Self {
        let base = Self {
            seed,
            ..Self::default()
        };
        match id {
            BackboneId::MobilenetV2 => base,
            BackboneId::NasnetMobile => Self {
                fixed_input: Some(224),
                ..base
            },
            BackboneId::EfficientnetB0 => Self {
                layout: Layout::Nhwc,
                ..base
            },
            BackboneId::Resnet50 => Self {
                pooled_output: true,
                channels: vec![16, 32, 48],
                ..base
            },
            BackboneId::InceptionV3 => Self {
                layout: Layout::Nhwc,
                pooled_output: true,
                channels: vec![12, 24, 48, 64],
                ..base
            },
        }
    }
}

/// Build a headless conv stack with He-uniform random weights. It is a
/// frozen random-feature extractor, not a pretrained network; it exists so
/// the pipeline can be exercised without downloaded weights.
pub fn random_graph(spec: &RandomGraphSpec) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spatial = |_: ()| match spec.fixed_input {
        Some(s) => Dim::Fixed(s as i64),
        None => Dim::Symbol("S".into()),
    };
    let input_dims = match spec.layout {
        Layout::Nchw => vec![Dim::Fixed(1), Dim::Fixed(3), spatial(()), spatial(())],
        Layout::Nhwc => vec![Dim::Fixed(1), spatial(()), spatial(()), Dim::Fixed(3)],
    };

    let mut nodes = Vec::new();
    let mut inits = Vec::new();
    let mut current = "image".to_string();
    if spec.layout == Layout::Nhwc {
        nodes.push(onnx::node("Transpose", "to_nchw", &["image"], &["x_nchw"], vec![Attr::Ints("perm", &[0, 3, 1, 2])]));
        current = "x_nchw".into();
    }
    let mut in_ch = 3usize;
    for (i, &out_ch) in spec.channels.iter().enumerate() {
        let fan_in = (in_ch * 9) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<f32> = (0..out_ch * in_ch * 9).map(|_| rng.gen_range(-bound..bound)).collect();
        let b: Vec<f32> = (0..out_ch).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let (wn, bn, cn, rn) = (format!("conv{i}.w"), format!("conv{i}.b"), format!("conv{i}"), format!("relu{i}"));
        inits.push(onnx::tensor_f32(&wn, &[out_ch as i64, in_ch as i64, 3, 3], &w));
        inits.push(onnx::tensor_f32(&bn, &[out_ch as i64], &b));
        nodes.push(onnx::node(
            "Conv",
            &cn,
            &[&current, &wn, &bn],
            &[&cn],
            vec![
                Attr::Ints("kernel_shape", &[3, 3]),
                Attr::Ints("strides", &[2, 2]),
                Attr::Ints("pads", &[1, 1, 1, 1]),
            ],
        ));
        nodes.push(onnx::node("Relu", &rn, &[&cn], &[&rn], vec![]));
        current = rn;
        in_ch = out_ch;
    }
    let output_dims = if spec.pooled_output {
        nodes.push(onnx::node("GlobalAveragePool", "gap", &[&current], &["gap"], vec![]));
        nodes.push(onnx::node("Flatten", "flatten", &["gap"], &["features"], vec![Attr::Int("axis", 1)]));
        vec![Dim::Fixed(1), Dim::Fixed(in_ch as i64)]
    } else if spec.layout == Layout::Nhwc {
        nodes.push(onnx::node("Transpose", "to_nhwc", &[&current], &["features"], vec![Attr::Ints("perm", &[0, 2, 3, 1])]));
        vec![Dim::Fixed(1), Dim::Symbol("h".into()), Dim::Symbol("w".into()), Dim::Fixed(in_ch as i64)]
    } else {
        nodes.push(onnx::node("Identity", "out", &[&current], &["features"], vec![]));
        vec![Dim::Fixed(1), Dim::Fixed(in_ch as i64), Dim::Symbol("h".into()), Dim::Symbol("w".into())]
    };

    let graph = GraphProto {
        name: "random_backbone".into(),
        node: nodes,
        initializer: inits,
        input: vec![onnx::value_info("image", &input_dims)],
        output: vec![onnx::value_info("features", &output_dims)],
        ..Default::default()
    };
    let mut model = onnx::model(graph, "spiralscreen-random-backbone");
    model.metadata_props.push(StringStringEntryProto {
        key: "pretrained".into(),
        value: "false".into(),
    });
    onnx::encode(&model)
}
