use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use monitorvlm_core::clause_filter::{
    read_pairs, train_filter, ClauseFilter, EmbeddingKind, FilterModel, ImageFiles, ImageResolver,
};
use monitorvlm_core::dataset::{
    annotate_record, augment_record, emit_filter_pairs, emit_vqa, ingest_video, read_vqa, AugmentKind, AugmentSpec,
    GroundTruthLabeler, ImageDirs, Labeler, VlmJudgeLabeler,
};
use monitorvlm_core::evaluator::{
    coverage_curve, evaluate, latency_sweep, read_eval_samples, read_split_samples, write_sweep_csv, CoverageSample,
    SweepVideo,
};
use monitorvlm_core::pipeline::{NoObserver, Pipeline};
use monitorvlm_core::video::open_video;
use monitorvlm_core::Error;

use crate::cli::*;
use crate::config::Settings;
use crate::error::CliError;

/// What a subcommand hands back for printing.
pub enum Output {
    /// The artifact itself, printed verbatim.
    Raw(String),
    /// A description of files written elsewhere.
    Summary(Value),
}

type CmdResult = Result<Output, CliError>;

pub fn run(command: &Command, settings: &Settings) -> CmdResult {
    match command {
        Command::Ingest(a) => ingest(a, settings),
        Command::Augment(a) => augment(a, settings),
        Command::Annotate(a) => annotate(a, settings),
        Command::BuildPairs(a) => build_pairs(a, settings),
        Command::TrainFilter(a) => train(a, settings),
        Command::EvalFilter(a) => eval_filter(a, settings),
        Command::Analyze(a) => analyze(a, settings),
        Command::Evaluate(a) => evaluate_cmd(a, settings),
        Command::SweepLatency(a) => sweep(a, settings),
        Command::Serve(_) => serve(settings),
    }
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn stem_of(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(String::from)
        .ok_or_else(|| CliError::Usage(format!("cannot derive an id from {}; pass --video-id", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    let dir = parent_of(path);
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    ensure_parent(path)?;
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(Error::from)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn ingest(a: &IngestArgs, s: &Settings) -> CmdResult {
    let video_id = match &a.video_id {
        Some(id) => id.clone(),
        None => stem_of(&a.video)?,
    };
    let out = a.out.clone().unwrap_or_else(|| s.data_dir.join("frames"));
    let mut source = open_video(&a.video)?;
    let manifest = ingest_video(source.as_mut(), &video_id, &out, s.pipeline.target_fps, s.pipeline.stride)?;
    let manifest_path = out.join(format!("{video_id}.triplets.jsonl"));
    write_jsonl(&manifest_path, &manifest)?;
    Ok(Output::Summary(json!({
        "video_id": video_id,
        "frames_dir": out.join(&video_id),
        "manifest": manifest_path,
        "triplets": manifest.len(),
    })))
}

fn augment(a: &AugmentArgs, s: &Settings) -> CmdResult {
    let records = read_vqa(&a.records)?;
    let kind = match a.kind {
        AugmentChoice::Flip => AugmentKind::Flip,
        AugmentChoice::Lowlight => AugmentKind::Lowlight,
        AugmentChoice::Mask => AugmentKind::Mask,
    };
    let out_dir = a.out_dir.clone().unwrap_or_else(|| s.data_dir.join("augmented"));
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("records.jsonl"));
    let dirs = ImageDirs {
        input: a.images.clone().unwrap_or_else(|| parent_of(&a.records)),
        output: out_dir.clone(),
    };
    let detector = s.pipeline.backends.build_detector()?;
    let vocabulary = s.pipeline.detect_vocabulary.as_slice();
    let mut augmented = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let spec = AugmentSpec::resolve(kind, a.lowlight_factor, a.mask_fraction, s.seed.wrapping_add(i as u64))?;
        let det = detector.as_deref().map(|d| (d, vocabulary));
        augmented.push(augment_record(record, &spec, &dirs, det)?);
    }
    ensure_parent(&out)?;
    let written = emit_vqa(&out, &augmented)?;
    Ok(Output::Summary(json!({
        "records": out,
        "images_dir": out_dir,
        "written": written,
    })))
}

fn annotate(a: &AnnotateArgs, s: &Settings) -> CmdResult {
    let detector = s.pipeline.backends.build_detector()?.ok_or_else(|| {
        CliError::Usage("annotate needs a detector: pass --detector or set pipeline.backends.detector".into())
    })?;
    let root = a.images.clone().unwrap_or_else(|| parent_of(&a.records));
    let annotated = read_vqa(&a.records)?
        .iter()
        .map(|r| annotate_record(r, &root, detector.as_ref(), &s.pipeline.detect_vocabulary))
        .collect::<Result<Vec<_>, _>>()?;
    ensure_parent(&a.out)?;
    let written = emit_vqa(&a.out, &annotated)?;
    Ok(Output::Summary(json!({ "records": a.out, "written": written })))
}

fn build_pairs(a: &BuildPairsArgs, s: &Settings) -> CmdResult {
    let registry = s.pipeline.load_registry()?;
    let records = read_vqa(&a.records)?;
    let vlm;
    let labeler: Box<dyn Labeler + '_> = match a.labeler {
        LabelerChoice::Truth => Box::new(GroundTruthLabeler {
            missing_is_negative: a.missing_negative,
        }),
        LabelerChoice::Vlm => {
            vlm = s.pipeline.backends.build_vlm()?;
            Box::new(VlmJudgeLabeler {
                backend: vlm.as_ref(),
                image_root: a.images.clone().unwrap_or_else(|| parent_of(&a.records)),
                params: s.pipeline.chat,
            })
        }
    };
    let written = emit_filter_pairs(&records, labeler.as_ref(), &registry, create(&a.out)?)?;
    Ok(Output::Summary(json!({ "pairs": a.out, "written": written })))
}

fn train(a: &TrainFilterArgs, s: &Settings) -> CmdResult {
    if s.train.epochs == 0 {
        return Err(CliError::Usage("train.epochs must be at least 1".into()));
    }
    let registry = s.pipeline.load_registry()?;
    let samples = read_pairs(&a.pairs)?;
    let images = ImageFiles {
        root: a.images.clone().unwrap_or_else(|| parent_of(&a.pairs)),
        provider: s.pipeline.backends.build_embedder(EmbeddingKind::Image)?,
    };
    let text = s.pipeline.backends.build_embedder(EmbeddingKind::Text)?;
    let outcome = train_filter(&samples, &registry, &images, text, s.train_config())?;

    let out = a.out.clone().unwrap_or_else(|| s.data_dir.join("cf_weights.json"));
    ensure_parent(&out)?;
    outcome.model.save(&out)?;
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".loss.csv");
        out.with_file_name(name)
    });
    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in outcome.history.iter().enumerate() {
        csv.push_str(&format!("{},{loss}\n", epoch + 1));
    }
    write_text(&loss_csv, &csv)?;
    Ok(Output::Summary(json!({
        "weights": out,
        "loss_csv": loss_csv,
        "samples": samples.len(),
        "epochs": outcome.history.len(),
        "final_loss": outcome.history.last(),
    })))
}

fn eval_filter(a: &EvalFilterArgs, s: &Settings) -> CmdResult {
    let weights = s.pipeline.filter_weights.as_ref().ok_or_else(|| {
        CliError::Usage("eval-filter needs weights: pass --weights or set pipeline.filter_weights".into())
    })?;
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(CliError::Usage("--k values must be positive".into()));
    }
    let registry = s.pipeline.load_registry()?;
    let model = FilterModel::load(weights)?;
    let images = ImageFiles {
        root: a.images.clone().unwrap_or_else(|| parent_of(&a.records)),
        provider: s.pipeline.backends.build_embedder(EmbeddingKind::Image)?,
    };
    let samples = read_vqa(&a.records)?
        .iter()
        .map(|r| {
            Ok(CoverageSample {
                image: images.resolve(r.key_image())?,
                truth: r.violated().into_iter().collect(),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let filter = ClauseFilter::new(Arc::new(model), s.pipeline.backends.build_embedder(EmbeddingKind::Text)?);
    let curve = coverage_curve(&filter, &samples, &registry, &a.k)?;
    let mut table = String::from("k,coverage\n");
    for (k, c) in curve {
        table.push_str(&format!("{k},{c:.4}\n"));
    }
    match &a.out {
        Some(path) => {
            write_text(path, &table)?;
            Ok(Output::Summary(json!({ "table": path, "samples": samples.len() })))
        }
        None => Ok(Output::Raw(table)),
    }
}

fn analyze(a: &AnalyzeArgs, s: &Settings) -> CmdResult {
    let video_id = match &a.video_id {
        Some(id) => id.clone(),
        None => stem_of(&a.video)?,
    };
    let pipeline = Pipeline::from_config(s.pipeline.clone())?;
    let report = pipeline.analyze_path(&video_id, &a.video, &NoObserver)?;
    let text = report.to_json_pretty()?;
    match &a.out {
        Some(path) => {
            write_text(path, &text)?;
            Ok(Output::Summary(json!({ "report": path, "entries": report.entries.len() })))
        }
        None => Ok(Output::Raw(text)),
    }
}

fn evaluate_cmd(a: &EvaluateArgs, s: &Settings) -> CmdResult {
    let samples = match (&a.input, &a.pred, &a.truth) {
        (Some(input), None, None) => read_eval_samples(input)?,
        (None, Some(pred), Some(truth)) => read_split_samples(pred, truth)?,
        _ => return Err(CliError::Usage("pass either --input or both --pred and --truth".into())),
    };
    let registry = s.pipeline.load_registry()?;
    for sample in &samples {
        sample.validate(&registry)?;
    }
    let text = serde_json::to_string_pretty(&evaluate(&samples)).map_err(Error::from)?;
    match &a.out {
        Some(path) => {
            write_text(path, &text)?;
            Ok(Output::Summary(json!({ "metrics": path, "samples": samples.len() })))
        }
        None => Ok(Output::Raw(text)),
    }
}

fn sweep(a: &SweepArgs, s: &Settings) -> CmdResult {
    let cost = s.pipeline.backends.mock_cost;
    if cost.base_s == 0.0 && cost.per_char_s == 0.0 {
        return Err(CliError::Usage(
            "the latency model is zero: pass --base-s/--per-char-s or set pipeline.backends.mock_cost".into(),
        ));
    }
    if a.counts.is_empty() || a.seconds < 3 {
        return Err(CliError::Usage("need at least one --counts value and --seconds >= 3".into()));
    }
    let model = match &s.pipeline.filter_weights {
        Some(path) => FilterModel::load(path)?,
        None => FilterModel::init(s.seed, "synthetic"),
    };
    let video = SweepVideo::synthetic(a.seconds, 64, 48, s.seed);
    let rows = latency_sweep(&s.pipeline, &model, s.pipeline.top_k, cost, &a.counts, &video)?;
    match &a.out {
        Some(path) => {
            write_sweep_csv(&rows, create(path)?)?;
            Ok(Output::Summary(json!({ "csv": path, "rows": rows.len() })))
        }
        None => {
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            Ok(Output::Raw(String::from_utf8_lossy(&buf).into_owned()))
        }
    }
}

fn serve(s: &Settings) -> CmdResult {
    let api = s.api_config();
    api.validate()?;
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("<async runtime>", e))?;
    runtime.block_on(monitorvlm_server::serve(api))?;
    Ok(Output::Summary(json!({ "status": "stopped" })))
}
