#![allow(dead_code)]

use std::path::PathBuf;

use spiralscreen::backbone::{random_graph, Backbone, BackboneId, RandomGraphSpec};
use spiralscreen::inference::{export_bundle, ExportFields};
use spiralscreen::training::Classifier;
use spiralscreen::DrawingType;
use spiralscreen_cli::api::Models;

/// Bundles built on a stand-in backbone plus one PNG per drawing type.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub spiral_bundle: PathBuf,
    pub wave_bundle: PathBuf,
    pub spiral_png: Vec<u8>,
    pub wave_png: Vec<u8>,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let id = BackboneId::MobilenetV2;
        let mut paths = Vec::new();
        for (i, t) in DrawingType::ALL.into_iter().enumerate() {
            let backbone = Backbone::from_onnx(id, random_graph(&RandomGraphSpec::variant_for(id, 3)), 96).unwrap();
            let model = Classifier::new(backbone, 10 + i as u64);
            let fields = ExportFields {
                drawing_type: Some(t),
                training_run_id: Some(format!("fixture-{t}-run")),
            };
            let path = dir.path().join(format!("{t}.bundle"));
            export_bundle(&model, &fields, &path).unwrap();
            paths.push(path);
        }
        let corpus = dir.path().join("corpus");
        spiralscreen::synthetic::generate_corpus(&corpus, 1, 128, 5).unwrap();
        let png = |t: &str| std::fs::read(corpus.join(format!("{t}/parkinson/{t}_parkinson_000.png"))).unwrap();
        Self {
            spiral_png: png("spiral"),
            wave_png: png("wave"),
            wave_bundle: paths.pop().unwrap(),
            spiral_bundle: paths.pop().unwrap(),
            dir,
        }
    }

    pub fn models(&self) -> Models {
        Models {
            spiral: Some(spiralscreen::inference::load_bundle(&self.spiral_bundle).unwrap()),
            wave: Some(spiralscreen::inference::load_bundle(&self.wave_bundle).unwrap()),
        }
    }
}

/// `multipart/form-data` body with one file part per `(field, bytes)`.
pub fn multipart(parts: &[(&str, &[u8])]) -> (String, Vec<u8>) {
    let boundary = "----spiralscreen-test-boundary";
    let mut body = Vec::new();
    for (name, data) in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        body.extend_from_slice(
            format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}.png\"\r\n").as_bytes(),
        );
        body.extend_from_slice(b"Content-Type: application/octet-stream\r\n\r\n");
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}
