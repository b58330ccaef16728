//! Class balancing, stratified splitting and frame preprocessing.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Manifest;
use crate::label::{class_index, GestureLabel};

pub const SPLIT_JSON: &str = "split.json";

/// Frame references grouped by class. References are manifest-relative
/// image paths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassCorpus {
    entries: BTreeMap<GestureLabel, Vec<String>>,
}

impl ClassCorpus {
    /// Fails if a frame reference appears under more than one label.
    pub fn new(entries: BTreeMap<GestureLabel, Vec<String>>) -> Result<Self> {
        let mut owner: HashMap<&str, GestureLabel> = HashMap::new();
        for (label, refs) in &entries {
            for r in refs {
                if let Some(prev) = owner.insert(r.as_str(), *label) {
                    return Err(Error::Split(format!(
                        "frame {r} listed under both {prev} and {label}"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Corpus of the given classes from a manifest, in manifest order.
    pub fn from_manifest(manifest: &Manifest, classes: &[GestureLabel]) -> Result<Self> {
        let mut entries: BTreeMap<GestureLabel, Vec<String>> =
            classes.iter().map(|&c| (c, Vec::new())).collect();
        for e in &manifest.entries {
            if let Some(list) = entries.get_mut(&e.label) {
                list.push(e.path.clone());
            }
        }
        Self::new(entries)
    }

    /// Placeholder references `<slug>/<i>`; useful for planning splits from counts alone.
    pub fn from_counts(counts: &[(GestureLabel, usize)]) -> Result<Self> {
        Self::new(
            counts
                .iter()
                .map(|&(label, n)| {
                    (
                        label,
                        (0..n).map(|i| format!("{}/{i}", label.slug())).collect(),
                    )
                })
                .collect(),
        )
    }

    pub fn labels(&self) -> impl Iterator<Item = GestureLabel> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, label: GestureLabel) -> &[String] {
        self.entries.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn count(&self, label: GestureLabel) -> usize {
        self.get(label).len()
    }

    pub fn counts(&self) -> BTreeMap<GestureLabel, usize> {
        self.entries.iter().map(|(l, v)| (*l, v.len())).collect()
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GestureLabel, &str)> {
        self.entries
            .iter()
            .flat_map(|(l, refs)| refs.iter().map(move |r| (*l, r.as_str())))
    }
}

/// Independent, reproducible random stream per (seed, class).
fn class_rng(seed: u64, label: GestureLabel) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label.who_stage() as u64);
    rng
}

/// Indices of `n` items chosen at random from `0..len`, in ascending order.
fn choose_sorted(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

/// Undersamples classes so none exceeds the smallest class by more than
/// `tolerance` (as a fraction of the smallest count).
pub fn balance_classes(corpus: &ClassCorpus, tolerance: f64, seed: u64) -> Result<ClassCorpus> {
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::Config(format!(
            "balance tolerance must be >= 0, got {tolerance}"
        )));
    }
    let min = corpus
        .entries
        .iter()
        .map(|(l, v)| {
            if v.is_empty() {
                Err(Error::Split(format!("class {l} is empty")))
            } else {
                Ok(v.len())
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .unwrap_or(0);
    let cap = (min as f64 * (1.0 + tolerance) + 1e-9).floor() as usize;
    let mut entries = BTreeMap::new();
    for (&label, refs) in &corpus.entries {
        let kept = if refs.len() > cap {
            let mut rng = class_rng(seed, label);
            choose_sorted(&mut rng, refs.len(), cap)
                .into_iter()
                .map(|i| refs[i].clone())
                .collect()
        } else {
            refs.clone()
        };
        entries.insert(label, kept);
    }
    Ok(ClassCorpus { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    #[default]
    HalfUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub rounding: Rounding,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            val_fraction: 0.25,
            seed: 0,
            rounding: Rounding::HalfUp,
        }
    }
}

impl SplitSpec {
    /// Validation size for a class of `count` frames.
    pub fn val_count(&self, count: usize) -> usize {
        match self.rounding {
            Rounding::HalfUp => (count as f64 * self.val_fraction + 0.5).floor() as usize,
        }
    }
}

/// Per-class random split into (train, val) with
/// `|val_c| = round_half_up(count_c * val_fraction)`.
pub fn stratified_split(corpus: &ClassCorpus, spec: &SplitSpec) -> Result<(ClassCorpus, ClassCorpus)> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must lie in (0, 1), got {}",
            spec.val_fraction
        )));
    }
    let mut train = BTreeMap::new();
    let mut val = BTreeMap::new();
    for (&label, refs) in &corpus.entries {
        let n = refs.len();
        let n_val = spec.val_count(n);
        if n_val == 0 || n_val >= n {
            return Err(Error::Split(format!(
                "class {label} with {n} frames gives {n_val} validation frames; both sides must be non-empty"
            )));
        }
        let mut rng = class_rng(spec.seed, label);
        let chosen = choose_sorted(&mut rng, n, n_val);
        let mut is_val = vec![false; n];
        for i in chosen {
            is_val[i] = true;
        }
        let (v, t): (Vec<_>, Vec<_>) = refs.iter().zip(&is_val).partition(|(_, &b)| b);
        val.insert(label, v.into_iter().map(|(r, _)| r.clone()).collect());
        train.insert(label, t.into_iter().map(|(r, _)| r.clone()).collect());
    }
    Ok((ClassCorpus { entries: train }, ClassCorpus { entries: val }))
}

/// Contents of `split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub val_fraction: f64,
    #[serde(default)]
    pub balance_tolerance: Option<f64>,
    pub classes: Vec<GestureLabel>,
    pub train: ClassCorpus,
    pub val: ClassCorpus,
}

impl SplitFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Resize target and normalization applied to every frame before the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// (height, width)
    pub target_size: (usize, usize),
    /// Per-channel RGB means subtracted before scaling.
    pub channel_means: [f32; 3],
    pub scale: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: (224, 224),
            // ImageNet training-set RGB means
            channel_means: [123.68, 116.779, 103.939],
            scale: 1.0,
        }
    }
}

/// Bilinear resize with half-pixel centres; identity when sizes match.
pub fn resize_bilinear(image: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (in_h, in_w, ch) = image.dim();
    let map = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let rows: Vec<_> = (0..out_h).map(|y| map(y, out_h, in_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| map(x, out_w, in_w)).collect();
    let mut out = Array3::<f32>::zeros((out_h, out_w, ch));
    for (y, &(y0, y1, wy)) in rows.iter().enumerate() {
        for (x, &(x0, x1, wx)) in cols.iter().enumerate() {
            for c in 0..ch {
                let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                let top = lerp(image[[y0, x0, c]], image[[y0, x1, c]], wx);
                let bottom = lerp(image[[y1, x0, c]], image[[y1, x1, c]], wx);
                out[[y, x, c]] = lerp(top, bottom, wy);
            }
        }
    }
    out
}

/// HxWx3 pixels (0..255 range) to a normalized `target_size` x 3 tensor.
pub fn preprocess_frame(image: ArrayView3<f32>, config: &PreprocessConfig) -> Result<Array3<f32>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Preprocess(format!("expected 3 channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Preprocess("empty image".into()));
    }
    let (th, tw) = config.target_size;
    let mut out = resize_bilinear(image, th, tw);
    for mut px in out.rows_mut() {
        for (v, m) in px.iter_mut().zip(config.channel_means) {
            *v = (*v - m) * config.scale;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Preprocess("non-finite value after preprocessing".into()));
    }
    Ok(out)
}

pub fn rgb_to_array(image: &RgbImage) -> Array3<f32> {
    let (w, h) = image.dimensions();
    Array3::from_shape_vec(
        (h as usize, w as usize, 3),
        image.as_raw().iter().map(|&v| v as f32).collect(),
    )
    .expect("RgbImage buffer is h*w*3")
}

pub fn preprocess_rgb(image: &RgbImage, config: &PreprocessConfig) -> Result<Array3<f32>> {
    preprocess_frame(rgb_to_array(image).view(), config)
}

/// One-hot rows over `class_order`.
pub fn encode_labels(labels: &[GestureLabel], class_order: &[GestureLabel]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), class_order.len()));
    for (row, &label) in labels.iter().enumerate() {
        out[[row, class_index(label, class_order)?]] = 1.0;
    }
    Ok(out)
}

/// Labeled, preprocessed samples for training and evaluation.
pub trait Dataset {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> GestureLabel;
    /// Preprocessed HxWx3 tensor of sample `i`.
    fn tensor(&self, i: usize) -> Result<Array3<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples held in memory, already preprocessed.
#[derive(Debug, Clone, Default)]
pub struct TensorDataset {
    samples: Vec<(Array3<f32>, GestureLabel)>,
}

impl TensorDataset {
    pub fn new(samples: Vec<(Array3<f32>, GestureLabel)>) -> Self {
        Self { samples }
    }

    pub fn push(&mut self, tensor: Array3<f32>, label: GestureLabel) {
        self.samples.push((tensor, label));
    }
}

impl Dataset for TensorDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, i: usize) -> GestureLabel {
        self.samples[i].1
    }

    fn tensor(&self, i: usize) -> Result<Array3<f32>> {
        Ok(self.samples[i].0.clone())
    }
}

/// Images on disk, loaded and preprocessed on demand.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    root: PathBuf,
    items: Vec<(String, GestureLabel)>,
    config: PreprocessConfig,
}

impl ImageDataset {
    pub fn from_corpus(root: &Path, corpus: &ClassCorpus, config: PreprocessConfig) -> Self {
        Self {
            root: root.to_path_buf(),
            items: corpus.iter().map(|(l, r)| (r.to_string(), l)).collect(),
            config,
        }
    }
}

impl Dataset for ImageDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, i: usize) -> GestureLabel {
        self.items[i].1
    }

    fn tensor(&self, i: usize) -> Result<Array3<f32>> {
        let p = self.root.join(&self.items[i].0);
        let img = image::open(&p)
            .map_err(|source| Error::Image { path: p, source })?
            .to_rgb8();
        preprocess_rgb(&img, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use GestureLabel::*;

    #[test]
    fn duplicate_reference_across_labels_rejected() {
        let mut m = BTreeMap::new();
        m.insert(ThumbRub, vec!["a".to_string()]);
        m.insert(RotationalRub, vec!["a".to_string()]);
        assert!(ClassCorpus::new(m).is_err());
    }

    #[test]
    fn balance_leaves_mildly_uneven_counts() {
        let c = ClassCorpus::from_counts(&[
            (P2PFingersInterlaced, 2149),
            (FingersInterlaced, 2043),
            (RotationalRub, 1834),
        ])
        .unwrap();
        assert_eq!(balance_classes(&c, 0.2, 7).unwrap(), c);
        let u = ClassCorpus::from_counts(&[(ThumbRub, 100), (RotationalRub, 100), (RubPalmToPalm, 100)])
            .unwrap();
        assert_eq!(balance_classes(&u, 0.0, 7).unwrap(), u);
    }

    #[test]
    fn balance_undersamples_to_minimum() {
        let c = ClassCorpus::from_counts(&[(ThumbRub, 1000), (RotationalRub, 100), (RubPalmToPalm, 100)])
            .unwrap();
        let b = balance_classes(&c, 0.0, 7).unwrap();
        assert_eq!(b.counts().values().copied().collect::<Vec<_>>(), vec![100, 100, 100]);
        // kept frames are a subset, without repeats
        let kept = b.get(ThumbRub);
        let mut dedup = kept.to_vec();
        dedup.dedup();
        assert_eq!(dedup.len(), 100);
        assert!(kept.iter().all(|r| c.get(ThumbRub).contains(r)));
        assert_eq!(balance_classes(&c, 0.0, 7).unwrap(), b);
        assert!(matches!(balance_classes(&c, -0.1, 7), Err(Error::Config(_))));
    }

    #[test]
    fn balance_rejects_empty_class() {
        let c = ClassCorpus::from_counts(&[(ThumbRub, 10), (RotationalRub, 0)]).unwrap();
        assert!(balance_classes(&c, 0.2, 1).is_err());
    }

    #[test]
    fn smallest_exact_split() {
        let c = ClassCorpus::from_counts(&[(ThumbRub, 4)]).unwrap();
        let (t, v) = stratified_split(&c, &SplitSpec::default()).unwrap();
        assert_eq!((t.count(ThumbRub), v.count(ThumbRub)), (3, 1));
    }

    #[test]
    fn split_rejects_empty_side() {
        let c = ClassCorpus::from_counts(&[(ThumbRub, 1)]).unwrap();
        assert!(matches!(
            stratified_split(&c, &SplitSpec::default()),
            Err(Error::Split(_))
        ));
        let c = ClassCorpus::from_counts(&[(ThumbRub, 10)]).unwrap();
        for f in [0.0, 1.0, -0.5, f64::NAN] {
            let spec = SplitSpec {
                val_fraction: f,
                ..SplitSpec::default()
            };
            assert!(stratified_split(&c, &spec).is_err());
        }
    }

    #[test]
    fn half_up_rounding() {
        let s = SplitSpec::default();
        assert_eq!(s.val_count(1834), 459); // 458.5
        assert_eq!(s.val_count(2042), 511); // 510.5
        assert_eq!(s.val_count(2043), 511);
        assert_eq!(s.val_count(2), 1);
    }

    #[test]
    fn encode_small_cases() {
        let order = [FingersInterlaced, P2PFingersInterlaced, RotationalRub];
        let m = encode_labels(&[FingersInterlaced], &order).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        let m = encode_labels(&[RotationalRub, P2PFingersInterlaced], &order).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![0.0, 0.0, 1.0]);
        assert_eq!(m.row(1).to_vec(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            encode_labels(&[ThumbRub], &order),
            Err(Error::Encoding(_))
        ));
    }

    #[test]
    fn encode_argmax_round_trip_all_labels() {
        let order = GestureLabel::ALL;
        let m = encode_labels(&order, &order).unwrap();
        for (i, row) in m.rows().into_iter().enumerate() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, i);
            assert_eq!(row.sum(), 1.0);
        }
    }

    #[test]
    fn preprocess_native_frame_size() {
        let img = RgbImage::from_fn(320, 240, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let t = preprocess_rgb(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(t.dim(), (224, 224, 3));
        assert!(t.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_mean_image_becomes_zero() {
        let cfg = PreprocessConfig {
            channel_means: [10.0, 20.0, 30.0],
            ..Default::default()
        };
        let mut img = Array3::<f32>::zeros((240, 320, 3));
        for mut px in img.rows_mut() {
            px.assign(&ndarray::arr1(&[10.0, 20.0, 30.0]));
        }
        let t = preprocess_frame(img.view(), &cfg).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn native_size_checkerboard_is_unchanged() {
        let cfg = PreprocessConfig {
            channel_means: [0.0; 3],
            scale: 1.0,
            ..Default::default()
        };
        let img = Array3::from_shape_fn((224, 224, 3), |(y, x, c)| {
            if (x + y) % 2 == 0 {
                255.0
            } else {
                c as f32
            }
        });
        let t = preprocess_frame(img.view(), &cfg).unwrap();
        assert_eq!(t, img);
    }

    #[test]
    fn non_rgb_input_rejected() {
        let gray = Array3::<f32>::zeros((10, 10, 1));
        assert!(matches!(
            preprocess_frame(gray.view(), &PreprocessConfig::default()),
            Err(Error::Preprocess(_))
        ));
        let rgba = Array3::<f32>::zeros((10, 10, 4));
        assert!(preprocess_frame(rgba.view(), &PreprocessConfig::default()).is_err());
    }
}
