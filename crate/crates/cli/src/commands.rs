use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context as _, Result};
use handwash_core::error::Error as CoreError;
use handwash_core::evaluator::{
    confusion, predict_labels, render_report, write_report_files, ClassificationReport, ReportFormat,
};
use handwash_core::ingest::{
    assign_labels, detect_pauses, extract_frames, label_frames, FrameRecord, Manifest, ManifestBuilder,
    SegmentBoundary, SessionVideo,
};
use handwash_core::label::GestureLabel;
use handwash_core::model::{attach_head, load_backbone, Backbone, BackboneSpec};
use handwash_core::predictor::{export_predictions, rolling_predict, RollingWindow};
use handwash_core::prep::{balance_classes, stratified_split, ClassCorpus, Dataset, ImageDataset, SplitFile};
use handwash_core::trainer::{export_curves, load_model, save_model, train, TrainingHistory};
use handwash_core::video::{is_video_path, open_video};
use serde::Serialize;

use crate::config::{invalid, require_path, PipelineConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const SPLIT_CSV: &str = "split.csv";
pub const INGEST_REPORT: &str = "ingest_report.json";
pub const STANDIN_WEIGHTS: &str = "backbone.safetensors";

/// A resolved config and the run directory derived from it.
pub struct Run {
    pub cfg: PipelineConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Validates the config, creates `<out_dir>/run-<hash>` and writes the
    /// resolved config into it.
    pub fn open(cfg: PipelineConfig, out_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let dir = out_dir.join(format!("run-{}", cfg.hash()?));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
        Ok(Self { cfg, dir })
    }

    fn dataset_dir(&self) -> PathBuf {
        self.cfg
            .dataset
            .manifest_dir
            .clone()
            .unwrap_or_else(|| self.dir.join("dataset"))
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.dir.join(name);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    pub fn model_path(&self) -> PathBuf {
        self.dir.join("train").join("model.json")
    }

    fn load_split(&self) -> Result<(SplitFile, PathBuf)> {
        let path = self.dir.join(SPLIT_FILE);
        if !path.is_file() {
            return Err(invalid(format!(
                "{} not found; run `prepare` with the same config first",
                path.display()
            )));
        }
        let split = SplitFile::load(&path)?;
        if split.classes != self.cfg.classes {
            return Err(invalid(format!(
                "{} was prepared for classes {:?}, config asks for {:?}",
                path.display(),
                split.classes,
                self.cfg.classes
            )));
        }
        let root = self.dataset_dir();
        require_path("dataset directory", &root)?;
        Ok((split, root))
    }
}

#[derive(Debug, Serialize)]
struct SessionReport {
    session: String,
    path: PathBuf,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    frames_kept: usize,
    segments: Vec<SegmentBoundary>,
}

#[derive(Debug, Serialize)]
struct IngestReport {
    accepted: usize,
    rejected: usize,
    sessions: Vec<SessionReport>,
}

fn list_sessions(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_video_path(p))
        .collect();
    paths.sort();
    Ok(paths)
}

fn ingest_session(
    cfg: &PipelineConfig,
    path: &Path,
) -> handwash_core::error::Result<(String, Vec<SegmentBoundary>, Vec<FrameRecord>)> {
    let (session, mut source) = SessionVideo::open(path)?;
    let frames = extract_frames(source.as_mut(), &session.participant_id, cfg.dataset.sample_every)?;
    let min_pause = cfg.dataset.min_pause_frames.unwrap_or_else(|| {
        // the pause length is counted in sampled frames
        (session.default_min_pause_frames() / cfg.dataset.sample_every).max(1)
    });
    let segments = detect_pauses(&frames, cfg.dataset.activity_threshold, min_pause)?;
    let labeled = assign_labels(&session.participant_id, &segments, &GestureLabel::session_order())?;
    Ok((session.participant_id, segments, label_frames(frames, &labeled)))
}

pub fn ingest(run: &Run) -> Result<()> {
    let videos = run
        .cfg
        .dataset
        .videos_dir
        .as_deref()
        .ok_or_else(|| invalid("dataset.videos_dir is not set"))?;
    require_path("videos directory", videos)?;
    let sessions = list_sessions(videos)?;
    if sessions.is_empty() {
        return Err(invalid(format!("no session videos found in {}", videos.display())));
    }
    let out = run.dataset_dir();
    if run.cfg.dataset.manifest_dir.is_some() {
        return Err(invalid(
            "dataset.manifest_dir points at an existing manifest; ingest writes its own",
        ));
    }
    if out.exists() {
        fs::remove_dir_all(&out).with_context(|| format!("clearing {}", out.display()))?;
    }
    let mut builder = ManifestBuilder::new(&out)?;
    let mut reports = Vec::new();
    for path in sessions {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match ingest_session(&run.cfg, &path) {
            Ok((session, segments, frames)) => {
                builder.add(&frames)?;
                log::info!("{session}: {} labeled frames", frames.len());
                reports.push(SessionReport {
                    session,
                    path,
                    status: "accepted",
                    reason: None,
                    frames_kept: frames.len(),
                    segments,
                });
            }
            Err(e @ (CoreError::Labeling { .. } | CoreError::Ingest { .. } | CoreError::Config(_))) => {
                log::warn!("skipping {}: {e}", path.display());
                reports.push(SessionReport {
                    session: stem,
                    path,
                    status: "rejected",
                    reason: Some(e.to_string()),
                    frames_kept: 0,
                    segments: Vec::new(),
                });
            }
            Err(e) => return Err(e).with_context(|| format!("ingesting {}", path.display())),
        }
    }
    let accepted = reports.iter().filter(|r| r.status == "accepted").count();
    let report = IngestReport {
        accepted,
        rejected: reports.len() - accepted,
        sessions: reports,
    };
    let report_path = run.dir.join(INGEST_REPORT);
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    if accepted == 0 {
        return Err(invalid(format!(
            "every session was rejected; see {}",
            report_path.display()
        )));
    }
    let manifest = builder.finish()?;
    println!(
        "ingested {accepted} session(s), skipped {}; {} frames in {}",
        report.rejected,
        manifest.entries.len(),
        out.display()
    );
    for (label, n) in &manifest.meta.class_counts {
        println!("  {:<24} {n}", label.name());
    }
    Ok(())
}

pub fn prepare(run: &Run) -> Result<()> {
    let root = run.dataset_dir();
    require_path("dataset directory", &root)?;
    let manifest = Manifest::load(&root)?;
    manifest.verify_on_disk()?;
    let corpus = ClassCorpus::from_manifest(&manifest, &run.cfg.classes)?;
    let corpus = match run.cfg.split.balance_tolerance {
        Some(t) => balance_classes(&corpus, t, run.cfg.seed)?,
        None => corpus,
    };
    let (train, val) = stratified_split(&corpus, &run.cfg.split_spec())?;
    let split = SplitFile {
        seed: run.cfg.seed,
        val_fraction: run.cfg.split.val_fraction,
        balance_tolerance: run.cfg.split.balance_tolerance,
        classes: run.cfg.classes.clone(),
        train,
        val,
    };
    split.save(&run.dir.join(SPLIT_FILE))?;

    let mut w = csv::Writer::from_path(run.dir.join(SPLIT_CSV))?;
    w.write_record(["path", "label", "subset"])?;
    for (subset, corpus) in [("train", &split.train), ("val", &split.val)] {
        for (label, path) in corpus.iter() {
            w.write_record([path, label.slug(), subset])?;
        }
    }
    w.flush()?;

    println!("{:<24} {:>7} {:>7}", "class", "train", "val");
    for label in &split.classes {
        println!(
            "{:<24} {:>7} {:>7}",
            label.name(),
            split.train.count(*label),
            split.val.count(*label)
        );
    }
    Ok(())
}

/// Loads the configured backbone, or creates (once) a seeded stand-in in
/// the run directory when no weights are configured.
fn backbone_for(run: &Run) -> Result<Backbone> {
    let spec = BackboneSpec::resnet50();
    if let Some(weights) = &run.cfg.model.weights {
        require_path("backbone weights", weights)?;
        let mut spec = spec.with_weights(weights);
        spec.weights_sha256 = run.cfg.model.weights_sha256.clone();
        return Ok(load_backbone(&spec)?);
    }
    let path = run.dir.join(STANDIN_WEIGHTS);
    if !path.is_file() {
        log::warn!(
            "no backbone weights configured; generating a seeded stand-in at {}",
            path.display()
        );
        Backbone::standin(spec.clone(), run.cfg.seed)?.save(&path)?;
    }
    Ok(load_backbone(&spec.with_weights(path))?)
}

pub fn train_cmd(run: &Run) -> Result<()> {
    let (split, root) = run.load_split()?;
    let backbone = Arc::new(backbone_for(run)?);
    let mut model = attach_head(
        backbone,
        run.cfg.head_spec(),
        &run.cfg.classes,
        run.cfg.preprocess,
    )?
    .freeze_backbone();
    let train_set = ImageDataset::from_corpus(&root, &split.train, run.cfg.preprocess);
    let val_set = ImageDataset::from_corpus(&root, &split.val, run.cfg.preprocess);
    println!(
        "training head on {} frames ({} validation), {} trainable parameters",
        train_set.len(),
        val_set.len(),
        model.trainable_parameter_count()
    );
    let history = train(&mut model, &train_set, &val_set, &run.cfg.train_config())?;

    let out = run.subdir("train")?;
    save_model(&model, &history, &out.join("model.json"))?;
    export_curves(&history, &out.join("history.csv"), &out.join("curves.svg"))?;
    print_last_epoch(&history);
    println!("model written to {}", out.join("model.json").display());
    Ok(())
}

fn print_last_epoch(h: &TrainingHistory) {
    if let Some(r) = h.records.last() {
        println!(
            "epoch {}: loss {:.4}, accuracy {:.4}, val_loss {:.4}, val_accuracy {:.4} ({:.1}s)",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy, h.wall_seconds
        );
    }
}

fn resolve_model(run: &Run, model: Option<&Path>) -> Result<PathBuf> {
    let path = model.map(Path::to_path_buf).unwrap_or_else(|| run.model_path());
    require_path("model artifact", &path)?;
    Ok(path)
}

pub fn evaluate(run: &Run, model: Option<&Path>) -> Result<()> {
    let model_path = resolve_model(run, model)?;
    let (split, root) = run.load_split()?;
    let (model, _) = load_model(&model_path)?;
    if model.class_order != split.classes {
        return Err(invalid(format!(
            "model classes {:?} differ from the split's {:?}",
            model.class_order, split.classes
        )));
    }
    let val = ImageDataset::from_corpus(&root, &split.val, model.preprocess);
    let predictions = predict_labels(&model, &val)?;
    let truths: Vec<GestureLabel> = (0..val.len()).map(|i| val.label(i)).collect();
    let matrix = confusion(&predictions, &truths, &model.class_order)?;
    let report = ClassificationReport::from_confusion(&matrix, 1.0)?;
    let out = run.subdir("eval")?;
    write_report_files(&report, &matrix, &out)?;
    print!("{}", render_report(&report, ReportFormat::Text)?);
    Ok(())
}

pub fn predict(run: &Run, model: Option<&Path>, video: &Path) -> Result<()> {
    let model_path = resolve_model(run, model)?;
    require_path("video", video)?;
    let (model, _) = load_model(&model_path)?;
    let mut source = open_video(video)?;
    let mut window = RollingWindow::new(run.cfg.predict.window)?;
    let events = rolling_predict(source.as_mut(), &model, &mut window)?;
    let stem = video
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let out = run.subdir("predict")?.join(stem);
    fs::create_dir_all(&out)?;
    let csv_path = out.join("predictions.csv");
    export_predictions(&events, &model.class_order, &csv_path)?;
    let mut changes = 0;
    for pair in events.windows(2) {
        if pair[0].label != pair[1].label {
            changes += 1;
        }
    }
    println!(
        "{} frames, {changes} label changes; log written to {}",
        events.len(),
        csv_path.display()
    );
    Ok(())
}

pub fn init_weights(seed: u64, output: &Path) -> Result<()> {
    let backbone = Backbone::standin(BackboneSpec::resnet50(), seed)?;
    backbone.save(output)?;
    println!("{} sha256={}", output.display(), backbone.checksum());
    Ok(())
}
