//! Sequential video frame sources.
//!
//! A *frame directory* holds `video.json` (`{"fps": ..}`) plus PNG frames
//! that sort lexicographically in playback order. It is lossless, needs no
//! external tools, and is what the fixtures use. Any other file (MP4 in
//! practice) is decoded by an `ffmpeg` process found on `PATH`, streaming
//! raw RGB24. [`MemoryVideo`] serves frames already held in memory.

use std::fs;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAME_DIR_META: &str = "video.json";

/// A decodable stream of RGB frames at a fixed frame rate.
pub trait VideoSource {
    fn path(&self) -> &Path;
    fn fps(&self) -> f64;
    /// Total frame count, when the container declares it.
    fn frame_count(&self) -> Option<usize>;
    /// Next frame in playback order, `None` at end of stream.
    fn next_frame(&mut self) -> Result<Option<RgbImage>>;
}

/// Frames held in memory.
#[derive(Debug, Clone)]
pub struct MemoryVideo {
    path: PathBuf,
    fps: f64,
    frames: Vec<RgbImage>,
    pos: usize,
}

impl MemoryVideo {
    pub fn new(name: impl Into<PathBuf>, fps: f64, frames: Vec<RgbImage>) -> Result<Self> {
        check_fps(fps)?;
        Ok(Self {
            path: name.into(),
            fps,
            frames,
            pos: 0,
        })
    }
}

impl VideoSource for MemoryVideo {
    fn path(&self) -> &Path {
        &self.path
    }

    fn fps(&self) -> f64 {
        self.fps
    }

    fn frame_count(&self) -> Option<usize> {
        Some(self.frames.len())
    }

    fn next_frame(&mut self) -> Result<Option<RgbImage>> {
        let frame = self.frames.get(self.pos).cloned();
        if frame.is_some() {
            self.pos += 1;
        }
        Ok(frame)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameDirMeta {
    fps: f64,
}

/// A directory of PNG frames with a `video.json` sidecar.
#[derive(Debug)]
pub struct FrameDirVideo {
    path: PathBuf,
    fps: f64,
    files: Vec<PathBuf>,
    pos: usize,
}

impl FrameDirVideo {
    pub fn open(dir: &Path) -> Result<Self> {
        let ingest_err = |reason: String| Error::Ingest {
            path: dir.to_path_buf(),
            reason,
        };
        let meta_path = dir.join(FRAME_DIR_META);
        let raw = fs::read_to_string(&meta_path)
            .map_err(|e| ingest_err(format!("missing {FRAME_DIR_META}: {e}")))?;
        let meta: FrameDirMeta = serde_json::from_str(&raw)
            .map_err(|e| ingest_err(format!("bad {FRAME_DIR_META}: {e}")))?;
        if !(meta.fps.is_finite() && meta.fps > 0.0) {
            return Err(ingest_err(format!("fps must be positive, got {}", meta.fps)));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| ingest_err(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        Ok(Self {
            path: dir.to_path_buf(),
            fps: meta.fps,
            files,
            pos: 0,
        })
    }
}

impl VideoSource for FrameDirVideo {
    fn path(&self) -> &Path {
        &self.path
    }

    fn fps(&self) -> f64 {
        self.fps
    }

    fn frame_count(&self) -> Option<usize> {
        Some(self.files.len())
    }

    fn next_frame(&mut self) -> Result<Option<RgbImage>> {
        let Some(file) = self.files.get(self.pos) else {
            return Ok(None);
        };
        let img = image::open(file).map_err(|e| Error::Ingest {
            path: file.clone(),
            reason: e.to_string(),
        })?;
        self.pos += 1;
        Ok(Some(img.to_rgb8()))
    }
}

/// Writes `frames` as a frame-directory video at `dir`.
pub fn write_frame_dir_video(dir: &Path, fps: f64, frames: &[RgbImage]) -> Result<()> {
    check_fps(fps)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::to_string_pretty(&FrameDirMeta { fps })?;
    let meta_path = dir.join(FRAME_DIR_META);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    for (i, frame) in frames.iter().enumerate() {
        let p = dir.join(format!("frame_{i:06}.png"));
        frame.save(&p).map_err(|source| Error::Image { path: p, source })?;
    }
    Ok(())
}

/// MP4 (or any ffmpeg-readable container) decoded through an external
/// `ffmpeg` process.
pub struct FfmpegVideo {
    path: PathBuf,
    fps: f64,
    width: u32,
    height: u32,
    frame_count: Option<usize>,
    child: Child,
    stdout: BufReader<ChildStdout>,
}

impl FfmpegVideo {
    pub fn open(path: &Path) -> Result<Self> {
        let ingest_err = |reason: String| Error::Ingest {
            path: path.to_path_buf(),
            reason,
        };
        if !path.is_file() {
            return Err(ingest_err("no such file".into()));
        }
        let probe = Command::new("ffprobe")
            .args([
                "-v",
                "error",
                "-select_streams",
                "v:0",
                "-show_entries",
                "stream=width,height,avg_frame_rate,nb_frames",
                "-of",
                "json",
            ])
            .arg(path)
            .output()
            .map_err(|e| ingest_err(format!("ffprobe unavailable: {e}")))?;
        if !probe.status.success() {
            return Err(ingest_err(
                String::from_utf8_lossy(&probe.stderr).trim().to_string(),
            ));
        }
        let info: serde_json::Value = serde_json::from_slice(&probe.stdout)
            .map_err(|e| ingest_err(format!("unreadable ffprobe output: {e}")))?;
        let stream = info["streams"]
            .get(0)
            .ok_or_else(|| ingest_err("no video stream".into()))?;
        let width = stream["width"].as_u64().unwrap_or(0) as u32;
        let height = stream["height"].as_u64().unwrap_or(0) as u32;
        let fps = parse_rational(stream["avg_frame_rate"].as_str().unwrap_or(""))
            .ok_or_else(|| ingest_err("missing frame rate".into()))?;
        if width == 0 || height == 0 || fps.is_nan() || fps <= 0.0 {
            return Err(ingest_err("invalid stream geometry or frame rate".into()));
        }
        let frame_count = stream["nb_frames"]
            .as_str()
            .and_then(|s| s.parse::<usize>().ok());
        let mut child = Command::new("ffmpeg")
            .args(["-v", "error", "-i"])
            .arg(path)
            .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ingest_err(format!("ffmpeg unavailable: {e}")))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| ingest_err("ffmpeg produced no output pipe".into()))?;
        Ok(Self {
            path: path.to_path_buf(),
            fps,
            width,
            height,
            frame_count,
            child,
            stdout: BufReader::new(stdout),
        })
    }
}

impl VideoSource for FfmpegVideo {
    fn path(&self) -> &Path {
        &self.path
    }

    fn fps(&self) -> f64 {
        self.fps
    }

    fn frame_count(&self) -> Option<usize> {
        self.frame_count
    }

    fn next_frame(&mut self) -> Result<Option<RgbImage>> {
        let len = (self.width * self.height * 3) as usize;
        let mut buf = vec![0u8; len];
        let mut filled = 0;
        while filled < len {
            let n = self
                .stdout
                .read(&mut buf[filled..])
                .map_err(|e| Error::Ingest {
                    path: self.path.clone(),
                    reason: e.to_string(),
                })?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled == 0 {
            return Ok(None);
        }
        if filled < len {
            return Err(Error::Ingest {
                path: self.path.clone(),
                reason: "truncated frame in decoder output".into(),
            });
        }
        Ok(RgbImage::from_raw(self.width, self.height, buf))
    }
}

impl Drop for FfmpegVideo {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn parse_rational(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.parse().ok()?;
            let d: f64 = d.parse().ok()?;
            (d != 0.0).then(|| n / d)
        }
        None => s.parse().ok(),
    }
}

fn check_fps(fps: f64) -> Result<()> {
    if fps.is_finite() && fps > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("fps must be positive, got {fps}")))
    }
}

/// Opens a frame directory or, for regular files, an ffmpeg-decoded video.
pub fn open_video(path: &Path) -> Result<Box<dyn VideoSource>> {
    if path.is_dir() {
        Ok(Box::new(FrameDirVideo::open(path)?))
    } else if path.is_file() {
        Ok(Box::new(FfmpegVideo::open(path)?))
    } else {
        Err(Error::Ingest {
            path: path.to_path_buf(),
            reason: "no such file or directory".into(),
        })
    }
}

/// True if `path` looks like something [`open_video`] can read.
pub fn is_video_path(path: &Path) -> bool {
    if path.is_dir() {
        return path.join(FRAME_DIR_META).is_file();
    }
    path.extension().is_some_and(|e| {
        ["mp4", "m4v", "mov", "avi", "mkv"]
            .iter()
            .any(|x| e.eq_ignore_ascii_case(x))
    })
}
