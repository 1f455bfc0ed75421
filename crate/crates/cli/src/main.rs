use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use spiralscreen::augmentation::{augment_set_with, write_augmented, AugmentationSpec};
use spiralscreen::backbone::{random_graph, Backbone, BackboneId, RandomGraphSpec};
use spiralscreen::dataset::load_dataset_with;
use spiralscreen::inference::{export_bundle, load_bundle, parity_report, write_parity_csv, ExportFields};
use spiralscreen::pipeline::{run_training, save_run, Protocol};
use spiralscreen::report::report_runs;
use spiralscreen::synthetic::generate_corpus;
use spiralscreen::training::{score, Classifier, DenseHead, RunManifest, TrainingConfig};
use spiralscreen::{DrawingType, ExecMode, DEFAULT_SEED};
use spiralscreen_cli::api::{predict_body, Models};
use spiralscreen_cli::server::{router, CorsConfig};

type AnyResult<T = ()> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

fn backbone_arg() -> impl TypedValueParser<Value = BackboneId> {
    PossibleValuesParser::new(BackboneId::ALL.map(BackboneId::as_str))
        .map(|s| s.parse::<BackboneId>().expect("restricted to valid names"))
}

fn drawing_type_arg() -> impl TypedValueParser<Value = DrawingType> {
    PossibleValuesParser::new(DrawingType::ALL.map(DrawingType::as_str))
        .map(|s| s.parse::<DrawingType>().expect("restricted to valid names"))
}

#[derive(Parser)]
#[command(name = "spiralscreen", version, about = "Spiral/wave drawing screening pipeline")]
struct Cli {
    /// Run every batch loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grow one drawing type of a corpus to a target count.
    Augment(AugmentArgs),
    /// Train a frozen-backbone classifier and export its bundle.
    Train(TrainArgs),
    /// Accuracy and loss of a bundle on a labelled image tree.
    Evaluate(EvaluateArgs),
    /// Comparison tables and learning curves from run directories.
    Report(ReportArgs),
    /// Re-export a run's classifier as a bundle, with a parity report.
    Export(ExportArgs),
    /// Predict on a spiral and/or wave drawing and print the fused verdict.
    Predict(PredictArgs),
    /// Serve the prediction API.
    Serve(ServeArgs),
    /// Write a procedural spiral/wave corpus (not clinical data).
    Synth(SynthArgs),
    /// Write randomly initialised stand-in backbone graphs (not pretrained).
    StandinBackbones(StandinArgs),
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "type", value_parser = drawing_type_arg())]
    drawing_type: DrawingType,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    transforms: TransformArgs,
}

#[derive(Args)]
struct TransformArgs {
    /// Maximum rotation in degrees, either direction.
    #[arg(long, default_value_t = 25.0)]
    rotation: f64,
    #[arg(long, default_value_t = 0.85)]
    zoom_min: f64,
    #[arg(long, default_value_t = 1.15)]
    zoom_max: f64,
    #[arg(long)]
    no_hflip: bool,
    #[arg(long)]
    no_vflip: bool,
}

impl TransformArgs {
    fn spec(&self, target_count: usize, seed: u64) -> AugmentationSpec {
        AugmentationSpec {
            rotation_degrees: self.rotation,
            zoom_min: self.zoom_min,
            zoom_max: self.zoom_max,
            allow_hflip: !self.no_hflip,
            allow_vflip: !self.no_vflip,
            target_count,
            seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus root containing `<type>/{healthy,parkinson}/`.
    #[arg(long)]
    data: PathBuf,
    /// Directory holding `<backbone>.onnx` pretrained graphs.
    #[arg(long, env = "SPIRALSCREEN_WEIGHTS")]
    weights: PathBuf,
    #[arg(long, value_parser = backbone_arg())]
    backbone: BackboneId,
    #[arg(long = "type", value_parser = drawing_type_arg())]
    drawing_type: DrawingType,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    /// Train for all epochs regardless of validation accuracy.
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long, default_value_t = 224)]
    input_size: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.8)]
    split_ratio: f64,
    /// Augmented corpus size for this drawing type.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Split the originals first and augment only the training side.
    #[arg(long)]
    split_before_augment: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Runs directory; this run goes to `<out>/<backbone>_<type>[_split_first]`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    transforms: TransformArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Image tree with `<type>/{healthy,parkinson}/`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, env = "SPIRALSCREEN_WEIGHTS")]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Validation images compared between the native model and the bundle.
    #[arg(long, default_value_t = 50)]
    parity_images: usize,
}

#[derive(Args)]
struct BundleArgs {
    #[arg(long, env = "SPIRALSCREEN_SPIRAL_BUNDLE")]
    spiral_bundle: Option<PathBuf>,
    #[arg(long, env = "SPIRALSCREEN_WAVE_BUNDLE")]
    wave_bundle: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    spiral: Option<PathBuf>,
    #[arg(long)]
    wave: Option<PathBuf>,
    #[command(flatten)]
    bundles: BundleArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "SPIRALSCREEN_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "SPIRALSCREEN_HOST", default_value = "127.0.0.1")]
    host: String,
    /// Allowed browser origins; empty or `*` allows any.
    #[arg(long, env = "SPIRALSCREEN_CORS_ORIGINS", value_delimiter = ',')]
    cors_origin: Vec<String>,
    #[command(flatten)]
    bundles: BundleArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 51)]
    per_class: usize,
    #[arg(long, default_value_t = 256)]
    size: u32,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args)]
struct StandinArgs {
    #[arg(long)]
    out: PathBuf,
    /// Only this backbone; all five by default.
    #[arg(long, value_parser = backbone_arg())]
    backbone: Option<BackboneId>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn augment(args: AugmentArgs, mode: ExecMode) -> AnyResult {
    let (images, summary) = load_dataset_with(&args.input, args.drawing_type, mode)?;
    let spec = args.transforms.spec(args.count, args.seed);
    let set = augment_set_with(&images, &spec, mode)?;
    write_augmented(&args.out, &set, &spec)?;
    print_json(&json!({ "input": summary, "written": set.images.len(), "out": args.out }));
    Ok(())
}

fn train(args: TrainArgs, mode: ExecMode) -> AnyResult {
    let config = TrainingConfig {
        backbone: args.backbone,
        drawing_type: args.drawing_type,
        epochs: args.epochs,
        patience: args.patience,
        input_size: args.input_size,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        split_ratio: args.split_ratio,
        seed: args.seed,
        early_stop_enabled: !args.no_early_stop,
    };
    config.validate()?;
    let backbone = Backbone::load(args.backbone, &args.weights, args.input_size)?;
    let (images, summary) = load_dataset_with(&args.data, args.drawing_type, mode)?;
    log::info!("loaded {} images ({} skipped)", summary.total, summary.skipped);
    let protocol = if args.split_before_augment {
        Protocol::SplitThenAugment
    } else {
        Protocol::AugmentThenSplit
    };
    let spec = args.transforms.spec(args.count.max(images.len()), args.seed);
    let outcome = run_training(&images, backbone, &config, &spec, protocol, mode)?;
    let suffix = if args.split_before_augment { "_split_first" } else { "" };
    let dir = args.out.join(format!("{}_{}{suffix}", args.backbone, args.drawing_type));
    let saved = save_run(&outcome, &dir)?;
    let best = outcome.history.best_record();
    print_json(&json!({
        "run_id": outcome.manifest.run_id,
        "dataset": summary,
        "epochs_run": outcome.history.epochs_run(),
        "stopped_early": outcome.history.stopped_early,
        "best_epoch": outcome.history.best_epoch,
        "best_val_accuracy": best.map(|r| r.val_accuracy),
        "best_val_loss": best.map(|r| r.val_loss),
        "history": saved.history_csv,
        "bundle": saved.bundle,
    }));
    Ok(())
}

fn evaluate(args: EvaluateArgs, mode: ExecMode) -> AnyResult {
    let bundle = load_bundle(&args.bundle)?;
    let t = bundle.manifest().drawing_type;
    let (images, summary) = load_dataset_with(&args.data, t, mode)?;
    let probs = mode.try_map_slice(&images, |img| bundle.probabilities(&img.pixels))?;
    let labels: Vec<_> = images.iter().map(|i| i.label).collect();
    let (accuracy, loss) = score(&probs, &labels)?;
    print_json(&json!({
        "bundle": args.bundle,
        "drawing_type": t,
        "count": summary.total,
        "skipped": summary.skipped,
        "accuracy": accuracy,
        "loss": loss,
    }));
    Ok(())
}

fn report(args: ReportArgs) -> AnyResult {
    let out = report_runs(&args.runs, &args.out)?;
    print_json(&json!({ "comparisons": out.comparisons, "curves": out.curves }));
    Ok(())
}

fn export(args: ExportArgs, mode: ExecMode) -> AnyResult {
    let run = RunManifest::load(&args.run.join("run.json"))?;
    let cfg = &run.history.config;
    let head: DenseHead = serde_json::from_slice(&std::fs::read(args.run.join("head.json"))?)?;
    let backbone = Backbone::load(cfg.backbone, &args.weights, cfg.input_size)?;
    if backbone.digest() != run.backbone_digest {
        return Err(format!(
            "{} graph in {} differs from the one this run was trained with",
            cfg.backbone,
            args.weights.display()
        )
        .into());
    }
    let classifier = Classifier::with_head(backbone, head)?;
    let fields = ExportFields {
        drawing_type: Some(cfg.drawing_type),
        training_run_id: Some(run.run_id.clone()),
    };
    let bundle = export_bundle(&classifier, &fields, &args.out)?;

    let (mut images, _) = load_dataset_with(args.run.join("validation"), cfg.drawing_type, mode)?;
    images.truncate(args.parity_images);
    let rows = parity_report(&classifier, &bundle, &images, mode)?;
    let parity_path = PathBuf::from(format!("{}.parity.csv", args.out.display()));
    write_parity_csv(&rows, &parity_path)?;
    let max_dev = rows.iter().map(|r| r.max_abs_deviation).fold(0.0, f64::max);
    print_json(&json!({
        "bundle": args.out,
        "manifest": bundle.manifest(),
        "parity_images": rows.len(),
        "max_abs_deviation": max_dev,
        "parity_report": parity_path,
    }));
    Ok(())
}

fn load_models(args: &BundleArgs, need_spiral: bool, need_wave: bool) -> AnyResult<Models> {
    let load = |path: &Option<PathBuf>, needed: bool, t: DrawingType| -> AnyResult<_> {
        match (path, needed) {
            (Some(p), true) => Ok(Some(load_bundle(p)?)),
            (None, true) => Err(format!("no {t} bundle given (--{t}-bundle)").into()),
            (_, false) => Ok(None),
        }
    };
    let models = Models {
        spiral: load(&args.spiral_bundle, need_spiral, DrawingType::Spiral)?,
        wave: load(&args.wave_bundle, need_wave, DrawingType::Wave)?,
    };
    models.validate()?;
    Ok(models)
}

fn predict(args: PredictArgs) -> AnyResult {
    let read = |p: &Option<PathBuf>| p.as_deref().map(std::fs::read).transpose();
    let (spiral, wave) = (read(&args.spiral)?, read(&args.wave)?);
    let models = load_models(&args.bundles, spiral.is_some(), wave.is_some())?;
    let body = predict_body(&models, spiral.as_deref(), wave.as_deref())?;
    print!("{}", String::from_utf8(body)?);
    Ok(())
}

fn serve(args: ServeArgs) -> AnyResult {
    let models = Arc::new(load_models(&args.bundles, true, true)?);
    let app = router(models.clone(), &CorsConfig { origins: args.cors_origin })?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("serving on http://{} ({:?})", listener.local_addr()?, models.versions());
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn synth(args: SynthArgs) -> AnyResult {
    generate_corpus(&args.out, args.per_class, args.size, args.seed)?;
    print_json(&json!({ "out": args.out, "per_class": args.per_class, "size": args.size }));
    Ok(())
}

fn standin_backbones(args: StandinArgs) -> AnyResult {
    std::fs::create_dir_all(&args.out)?;
    let ids: Vec<BackboneId> = args.backbone.map_or(BackboneId::ALL.to_vec(), |b| vec![b]);
    let mut written = Vec::new();
    for id in ids {
        let path = args.out.join(id.graph_file_name());
        std::fs::write(&path, random_graph(&RandomGraphSpec::variant_for(id, args.seed)))?;
        written.push(path);
    }
    log::warn!("stand-in graphs are randomly initialised, not pretrained");
    print_json(&json!({ "written": written, "pretrained": false }));
    Ok(())
}

fn run(cli: Cli) -> AnyResult {
    let mode = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    match cli.command {
        Command::Augment(a) => augment(a, mode),
        Command::Train(a) => train(a, mode),
        Command::Evaluate(a) => evaluate(a, mode),
        Command::Report(a) => report(a),
        Command::Export(a) => export(a, mode),
        Command::Predict(a) => predict(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
        Command::StandinBackbones(a) => standin_backbones(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
