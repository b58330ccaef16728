//! Session videos to a labeled frame corpus.
//!
//! A session video contains the six rubbing stages in WHO order, each
//! followed by a pause in which the participant moves their hands out of
//! view. Pauses show up as runs of near-identical frames; everything between
//! them is an activity burst, and the k-th burst gets the k-th stage label.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::GestureLabel;
use crate::video::{open_video, VideoSource};

pub const MANIFEST_CSV: &str = "manifest.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Default mean-absolute-difference threshold below which a frame counts as still.
pub const DEFAULT_ACTIVITY_THRESHOLD: f64 = 0.02;

/// Metadata of one participant's recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionVideo {
    pub path: PathBuf,
    pub participant_id: String,
    pub fps: f64,
    pub duration_s: f64,
}

impl SessionVideo {
    /// Opens a video and derives its metadata. The participant id is the
    /// file (or directory) stem.
    pub fn open(path: &Path) -> Result<(SessionVideo, Box<dyn VideoSource>)> {
        let source = open_video(path)?;
        let participant_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        validate_session_id(&participant_id)?;
        let fps = source.fps();
        let duration_s = source.frame_count().map_or(0.0, |n| n as f64 / fps);
        Ok((
            SessionVideo {
                path: path.to_path_buf(),
                participant_id,
                fps,
                duration_s,
            },
            source,
        ))
    }

    /// Default minimum pause length: half a second of frames, at least one.
    pub fn default_min_pause_frames(&self) -> usize {
        ((self.fps / 2.0).round() as usize).max(1)
    }
}

/// Number of whole frames in `duration_s` seconds of footage at `fps`.
pub fn frames_in_duration(duration_s: f64, fps: f64) -> usize {
    // The epsilon absorbs products like 30 * 29.84 landing a hair under an integer.
    (duration_s * fps + 1e-9).floor() as usize
}

/// Session ids become file names, so they are restricted to a safe alphabet.
pub fn validate_session_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "session id {id:?} must be non-empty and use only ASCII letters, digits, '-' or '.'"
        )))
    }
}

/// One extracted frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub session: String,
    /// Frame number in the source video.
    pub index: usize,
    pub timestamp_s: f64,
    pub image: RgbImage,
    pub label: Option<GestureLabel>,
}

/// Decodes every `sample_every`-th frame.
///
/// Frames are grouped into consecutive runs of `sample_every`; the first
/// frame of each complete run is kept, so a video of `n` frames yields
/// `n / sample_every` records.
pub fn extract_frames(
    source: &mut dyn VideoSource,
    session: &str,
    sample_every: usize,
) -> Result<Vec<FrameRecord>> {
    if sample_every == 0 {
        return Err(Error::Config("sample_every must be at least 1".into()));
    }
    let fps = source.fps();
    let mut out = Vec::new();
    let mut pending: Option<FrameRecord> = None;
    let mut index = 0usize;
    while let Some(image) = source.next_frame()? {
        if index.is_multiple_of(sample_every) {
            pending = Some(FrameRecord {
                session: session.to_string(),
                index,
                timestamp_s: index as f64 / fps,
                image,
                label: None,
            });
        }
        if index % sample_every == sample_every - 1 {
            out.extend(pending.take());
        }
        index += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Activity,
    Pause,
}

/// Inclusive range of positions in a session's frame list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentBoundary {
    pub start_index: usize,
    pub end_index: usize,
    pub kind: SegmentKind,
}

impl SegmentBoundary {
    pub fn len(&self) -> usize {
        self.end_index - self.start_index + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Mean absolute per-channel difference of two equally sized frames, in [0, 1].
pub fn frame_difference(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Shape(format!(
            "frame sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let raw_a = a.as_raw();
    if raw_a.is_empty() {
        return Ok(0.0);
    }
    let total: u64 = raw_a
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| x.abs_diff(y) as u64)
        .sum();
    Ok(total as f64 / (raw_a.len() as f64 * 255.0))
}

/// Per-frame motion score: the smaller of the differences to the previous
/// and next frame. A frame that matches either neighbour scores zero, which
/// makes both ends of a static run count as still.
pub fn activity_scores(frames: &[FrameRecord]) -> Result<Vec<f64>> {
    let n = frames.len();
    if n < 2 {
        return Ok(vec![1.0; n]);
    }
    let diffs: Vec<f64> = frames
        .windows(2)
        .map(|w| frame_difference(&w[0].image, &w[1].image))
        .collect::<Result<_>>()?;
    Ok((0..n)
        .map(|i| {
            let prev = if i > 0 { diffs[i - 1] } else { f64::INFINITY };
            let next = if i + 1 < n { diffs[i] } else { f64::INFINITY };
            prev.min(next)
        })
        .collect())
}

/// Splits a session into alternating activity and pause segments that tile
/// the frame list.
pub fn detect_pauses(
    frames: &[FrameRecord],
    activity_threshold: f64,
    min_pause_frames: usize,
) -> Result<Vec<SegmentBoundary>> {
    if !(activity_threshold.is_finite() && activity_threshold >= 0.0) {
        return Err(Error::Config(format!(
            "activity threshold must be a non-negative number, got {activity_threshold}"
        )));
    }
    if min_pause_frames == 0 {
        return Err(Error::Config("min_pause_frames must be at least 1".into()));
    }
    if let Some(first) = frames.first() {
        for w in frames.windows(2) {
            if w[1].session != first.session {
                return Err(Error::Config(format!(
                    "frames from sessions {} and {} mixed",
                    first.session, w[1].session
                )));
            }
            if w[1].index <= w[0].index {
                return Err(Error::Config(format!(
                    "frame indices not increasing in session {}: {} then {}",
                    first.session, w[0].index, w[1].index
                )));
            }
        }
    }
    let n = frames.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n < 2 {
        return Ok(vec![SegmentBoundary {
            start_index: 0,
            end_index: n - 1,
            kind: SegmentKind::Activity,
        }]);
    }

    let scores = activity_scores(frames)?;
    let mut kinds: Vec<SegmentKind> = scores
        .iter()
        .map(|&s| {
            if s < activity_threshold {
                SegmentKind::Pause
            } else {
                SegmentKind::Activity
            }
        })
        .collect();
    // Still runs too short to be a pause are absorbed into activity.
    for run in runs(&kinds) {
        if run.kind == SegmentKind::Pause && run.len() < min_pause_frames {
            kinds[run.start_index..=run.end_index].fill(SegmentKind::Activity);
        }
    }
    Ok(runs(&kinds))
}

fn runs(kinds: &[SegmentKind]) -> Vec<SegmentBoundary> {
    let mut out: Vec<SegmentBoundary> = Vec::new();
    for (i, &kind) in kinds.iter().enumerate() {
        match out.last_mut() {
            Some(seg) if seg.kind == kind => seg.end_index = i,
            _ => out.push(SegmentBoundary {
                start_index: i,
                end_index: i,
                kind,
            }),
        }
    }
    out
}

/// Gives the k-th activity segment the k-th label of `expected_order`.
///
/// A session whose activity-segment count differs from the number of
/// expected stages is rejected rather than merged or truncated.
pub fn assign_labels(
    session: &str,
    segments: &[SegmentBoundary],
    expected_order: &[GestureLabel],
) -> Result<Vec<(SegmentBoundary, Option<GestureLabel>)>> {
    if expected_order
        .windows(2)
        .any(|w| w[0].who_stage() >= w[1].who_stage())
    {
        return Err(Error::Config(
            "expected stage order must follow increasing WHO stage numbers".into(),
        ));
    }
    let count = segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Activity)
        .count();
    if count != expected_order.len() {
        return Err(Error::Labeling {
            session: session.to_string(),
            expected: expected_order.len(),
            count,
        });
    }
    let mut labels = expected_order.iter();
    Ok(segments
        .iter()
        .map(|&seg| match seg.kind {
            SegmentKind::Activity => (seg, labels.next().copied()),
            SegmentKind::Pause => (seg, None),
        })
        .collect())
}

/// Attaches segment labels to frames and drops the pause frames.
pub fn label_frames(
    frames: Vec<FrameRecord>,
    labeled: &[(SegmentBoundary, Option<GestureLabel>)],
) -> Vec<FrameRecord> {
    let mut out = Vec::new();
    for (pos, mut frame) in frames.into_iter().enumerate() {
        let label = labeled
            .iter()
            .find(|(seg, _)| seg.start_index <= pos && pos <= seg.end_index)
            .and_then(|(_, l)| *l);
        if let Some(l) = label {
            frame.label = Some(l);
            out.push(frame);
        }
    }
    out
}

/// One row of `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the manifest directory.
    pub path: String,
    pub session: String,
    pub index: usize,
    pub timestamp_s: f64,
    pub label: GestureLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub frames: usize,
    pub first_index: usize,
    pub last_index: usize,
}

/// Contents of the `manifest.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub image_width: u32,
    pub image_height: u32,
    pub total: usize,
    pub class_counts: BTreeMap<GestureLabel, usize>,
    pub sessions: BTreeMap<String, SessionSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub meta: ManifestMeta,
}

impl Manifest {
    pub fn count(&self, label: GestureLabel) -> usize {
        self.meta.class_counts.get(&label).copied().unwrap_or(0)
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let csv_path = dir.join(MANIFEST_CSV);
        let mut reader = csv::Reader::from_path(&csv_path)?;
        let entries: Vec<ManifestEntry> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
        let json_path = dir.join(MANIFEST_JSON);
        let raw = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: ManifestMeta = serde_json::from_str(&raw)?;
        let manifest = Manifest {
            root: dir.to_path_buf(),
            entries,
            meta,
        };
        manifest.check_counts()?;
        Ok(manifest)
    }

    fn check_counts(&self) -> Result<()> {
        let mut counts: BTreeMap<GestureLabel, usize> = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.label).or_default() += 1;
        }
        if counts != self.meta.class_counts || self.entries.len() != self.meta.total {
            return Err(Error::Manifest(format!(
                "{}: class counts in {MANIFEST_JSON} disagree with {MANIFEST_CSV}",
                self.root.display()
            )));
        }
        Ok(())
    }

    /// Checks that every listed image exists and that each class directory
    /// holds exactly the listed files.
    pub fn verify_on_disk(&self) -> Result<()> {
        for label in self.meta.class_counts.keys() {
            let dir = self.root.join(label.slug());
            let on_disk = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
                .count();
            if on_disk != self.count(*label) {
                return Err(Error::Manifest(format!(
                    "{} holds {on_disk} images, manifest lists {}",
                    dir.display(),
                    self.count(*label)
                )));
            }
        }
        for e in &self.entries {
            if !self.root.join(&e.path).is_file() {
                return Err(Error::Manifest(format!("missing image {}", e.path)));
            }
        }
        Ok(())
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Reads every listed image back into frame records.
    pub fn load_frames(&self) -> Result<Vec<FrameRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let p = self.image_path(e);
                let image = image::open(&p)
                    .map_err(|source| Error::Image { path: p, source })?
                    .to_rgb8();
                Ok(FrameRecord {
                    session: e.session.clone(),
                    index: e.index,
                    timestamp_s: e.timestamp_s,
                    image,
                    label: Some(e.label),
                })
            })
            .collect()
    }
}

/// Writes labeled frames as `<out_dir>/<label>/<session>_<index>.png` plus
/// `manifest.csv` and `manifest.json`.
///
/// Rows are ordered by (label, session, index) so rebuilding from the
/// manifest's own images reproduces it byte for byte.
pub fn build_manifest(frames: &[FrameRecord], out_dir: &Path) -> Result<Manifest> {
    let mut builder = ManifestBuilder::new(out_dir)?;
    builder.add(frames)?;
    builder.finish()
}

/// Incremental form of [`build_manifest`]: images are written as each batch
/// of frames arrives, so only the manifest rows stay in memory.
#[derive(Debug)]
pub struct ManifestBuilder {
    out_dir: PathBuf,
    seen: HashSet<(String, usize)>,
    size: Option<(u32, u32)>,
    entries: Vec<ManifestEntry>,
}

impl ManifestBuilder {
    pub fn new(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            seen: HashSet::new(),
            size: None,
            entries: Vec::new(),
        })
    }

    /// Validates the whole batch, then writes its images. A rejected batch
    /// leaves the builder unchanged.
    pub fn add(&mut self, frames: &[FrameRecord]) -> Result<()> {
        let mut batch_seen = HashSet::new();
        let mut size = self.size;
        for f in frames {
            if f.label.is_none() {
                return Err(Error::Manifest(format!(
                    "frame {}/{} has no label",
                    f.session, f.index
                )));
            }
            validate_session_id(&f.session)?;
            let key = (f.session.clone(), f.index);
            if self.seen.contains(&key) || !batch_seen.insert(key) {
                return Err(Error::Manifest(format!(
                    "duplicate frame {}/{}",
                    f.session, f.index
                )));
            }
            match size {
                None => size = Some(f.image.dimensions()),
                Some(s) if s != f.image.dimensions() => {
                    return Err(Error::Manifest(format!(
                        "frame {}/{} is {:?}, expected {:?}",
                        f.session,
                        f.index,
                        f.image.dimensions(),
                        s
                    )))
                }
                _ => {}
            }
        }

        for f in frames {
            let label = f.label.expect("checked above");
            let class_dir = self.out_dir.join(label.slug());
            fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
            let rel = format!("{}/{}_{}.png", label.slug(), f.session, f.index);
            let abs = self.out_dir.join(&rel);
            f.image
                .save(&abs)
                .map_err(|source| Error::Image { path: abs, source })?;
            self.entries.push(ManifestEntry {
                path: rel,
                session: f.session.clone(),
                index: f.index,
                timestamp_s: f.timestamp_s,
                label,
            });
        }
        self.seen.extend(batch_seen);
        self.size = size;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorts the rows and writes `manifest.csv` and `manifest.json`.
    pub fn finish(mut self) -> Result<Manifest> {
        self.entries.sort_by(|a, b| {
            (a.label, &a.session, a.index).cmp(&(b.label, &b.session, b.index))
        });
        let mut class_counts: BTreeMap<GestureLabel, usize> = BTreeMap::new();
        let mut sessions: BTreeMap<String, SessionSummary> = BTreeMap::new();
        for e in &self.entries {
            *class_counts.entry(e.label).or_default() += 1;
            sessions
                .entry(e.session.clone())
                .and_modify(|s| {
                    s.frames += 1;
                    s.first_index = s.first_index.min(e.index);
                    s.last_index = s.last_index.max(e.index);
                })
                .or_insert(SessionSummary {
                    frames: 1,
                    first_index: e.index,
                    last_index: e.index,
                });
        }
        let (image_width, image_height) = self.size.unwrap_or((0, 0));
        let manifest = Manifest {
            root: self.out_dir,
            meta: ManifestMeta {
                image_width,
                image_height,
                total: self.entries.len(),
                class_counts,
                sessions,
            },
            entries: self.entries,
        };
        write_manifest_files(&manifest)?;
        Ok(manifest)
    }
}

fn write_manifest_files(m: &Manifest) -> Result<()> {
    let csv_path = m.root.join(MANIFEST_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    if m.entries.is_empty() {
        w.write_record(["path", "session", "index", "timestamp_s", "label"])?;
    }
    for e in &m.entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = m.root.join(MANIFEST_JSON);
    let mut json = serde_json::to_string_pretty(&m.meta)?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}
