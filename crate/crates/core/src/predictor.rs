//! Per-frame inference over a video with rolling-average smoothing.

use std::collections::VecDeque;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::GestureLabel;
use crate::model::{argmax, ClassifierModel};
use crate::prep::preprocess_rgb;
use crate::video::VideoSource;

pub const DEFAULT_WINDOW: usize = 30;

/// Fixed-capacity buffer of probability vectors; the oldest is evicted first.
#[derive(Debug, Clone)]
pub struct RollingWindow {
    capacity: usize,
    buffer: VecDeque<Array1<f64>>,
}

impl RollingWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("rolling window capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            buffer: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn clear(&mut self) {
        self.buffer.clear();
    }

    /// Inserts `probs` and returns the mean of the window contents.
    pub fn push(&mut self, probs: Array1<f64>) -> Result<Array1<f64>> {
        if let Some(first) = self.buffer.front() {
            if first.len() != probs.len() {
                return Err(Error::Shape(format!(
                    "window holds {}-class vectors, got {}",
                    first.len(),
                    probs.len()
                )));
            }
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(probs);
        Ok(self.mean())
    }

    fn mean(&self) -> Array1<f64> {
        let mut sum = Array1::zeros(self.buffer[0].len());
        for v in &self.buffer {
            sum += v;
        }
        sum / self.buffer.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub frame_index: usize,
    pub timestamp_s: f64,
    pub raw_probs: Vec<f64>,
    pub smoothed_probs: Vec<f64>,
    pub label: GestureLabel,
    pub confidence: f64,
}

/// Class probabilities for an already preprocessed HxWx3 tensor.
pub fn predict_frame(model: &ClassifierModel, tensor: ArrayView3<f32>) -> Result<Array1<f64>> {
    let features = model.features(tensor)?;
    let p = model.head.predict(features.view().insert_axis(Axis(0)));
    Ok(p.row(0).to_owned())
}

pub fn predict_rgb(model: &ClassifierModel, frame: &RgbImage) -> Result<Array1<f64>> {
    predict_frame(model, preprocess_rgb(frame, &model.preprocess)?.view())
}

/// Feeds one raw vector through the window and builds its event.
pub fn smooth_step(
    window: &mut RollingWindow,
    class_order: &[GestureLabel],
    frame_index: usize,
    timestamp_s: f64,
    raw: Array1<f64>,
) -> Result<PredictionEvent> {
    if raw.len() != class_order.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} classes",
            raw.len(),
            class_order.len()
        )));
    }
    let smoothed = window.push(raw.clone())?;
    let best = argmax(smoothed.iter().copied());
    Ok(PredictionEvent {
        frame_index,
        timestamp_s,
        label: class_order[best],
        confidence: smoothed[best],
        raw_probs: raw.to_vec(),
        smoothed_probs: smoothed.to_vec(),
    })
}

/// Smooths an already computed stream of `(frame_index, timestamp, probs)`.
pub fn smooth_stream(
    raw: impl IntoIterator<Item = (usize, f64, Array1<f64>)>,
    class_order: &[GestureLabel],
    window: &mut RollingWindow,
) -> Result<Vec<PredictionEvent>> {
    raw.into_iter()
        .map(|(i, t, p)| smooth_step(window, class_order, i, t, p))
        .collect()
}

/// Runs the model on every frame of `video`, emitting one event per frame.
pub fn rolling_predict(
    video: &mut dyn VideoSource,
    model: &ClassifierModel,
    window: &mut RollingWindow,
) -> Result<Vec<PredictionEvent>> {
    let fps = video.fps();
    let mut events = Vec::new();
    let mut index = 0;
    while let Some(frame) = video.next_frame()? {
        let raw = predict_rgb(model, &frame)?;
        events.push(smooth_step(window, &model.class_order, index, index as f64 / fps, raw)?);
        index += 1;
    }
    log::info!("predicted {index} frames from {}", video.path().display());
    Ok(events)
}

fn header(class_order: &[GestureLabel]) -> Vec<String> {
    let mut h: Vec<String> = ["frame_index", "timestamp_s", "label", "confidence"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(class_order.iter().map(|c| format!("raw_{}", c.slug())));
    h.extend(class_order.iter().map(|c| format!("smoothed_{}", c.slug())));
    h
}

pub fn export_predictions(events: &[PredictionEvent], class_order: &[GestureLabel], path: &Path) -> Result<()> {
    if events.is_empty() {
        return Err(Error::Export("no prediction events to write".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(class_order))?;
    for e in events {
        if e.raw_probs.len() != class_order.len() || e.smoothed_probs.len() != class_order.len() {
            return Err(Error::Export(format!(
                "frame {} has {} probabilities for {} classes",
                e.frame_index,
                e.raw_probs.len(),
                class_order.len()
            )));
        }
        let mut rec = vec![
            e.frame_index.to_string(),
            e.timestamp_s.to_string(),
            e.label.slug().to_string(),
            e.confidence.to_string(),
        ];
        rec.extend(e.raw_probs.iter().chain(&e.smoothed_probs).map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a prediction log back, recovering the class order from its header.
pub fn read_predictions(path: &Path) -> Result<(Vec<GestureLabel>, Vec<PredictionEvent>)> {
    let bad = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let class_order = headers
        .iter()
        .filter_map(|h| h.strip_prefix("raw_"))
        .map(|s| s.parse::<GestureLabel>().map_err(|e| bad(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if headers.iter().ne(header(&class_order).iter().map(String::as_str)) {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let c = class_order.len();
    let mut events = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|e| bad(format!("{e}"))) };
        events.push(PredictionEvent {
            frame_index: rec[0].parse().map_err(|e| bad(format!("{e}")))?,
            timestamp_s: num(1)?,
            label: rec[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            confidence: num(3)?,
            raw_probs: (4..4 + c).map(num).collect::<Result<_>>()?,
            smoothed_probs: (4 + c..4 + 2 * c).map(num).collect::<Result<_>>()?,
        });
    }
    Ok((class_order, events))
}
