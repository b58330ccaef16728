//! 50-layer bottleneck residual network used as a frozen feature extractor.
//!
//! Layer names follow the Keras `ResNet50` application (`conv1_conv`,
//! `conv2_block1_1_conv`, ...), with the stride of each downsampling block on
//! its first 1x1 convolution and on the projection shortcut. Convolution
//! kernels are stored (out, in, kh, kw).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn;

pub const WEIGHTS_FORMAT: &str = "handwash-resnet-backbone";
const BN_EPS: f32 = 1.001e-5;

/// Architecture and weight source of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub max_pool: bool,
    /// Bottleneck blocks per stage, conv2_x onwards.
    pub stage_blocks: Vec<usize>,
    /// Inner width of the bottlenecks per stage; outputs are `expansion` times wider.
    pub stage_widths: Vec<usize>,
    pub expansion: usize,
    pub input_size: usize,
    /// Weight file (safetensors) to load.
    #[serde(default)]
    pub weights_source: Option<PathBuf>,
    /// Expected content checksum of the weights, if pinned.
    #[serde(default)]
    pub weights_sha256: Option<String>,
    #[serde(default)]
    pub include_classifier_top: bool,
}

impl BackboneSpec {
    /// The standard 50-layer configuration.
    pub fn resnet50() -> Self {
        Self {
            conv1_filters: 64,
            conv1_kernel: 7,
            conv1_stride: 2,
            max_pool: true,
            stage_blocks: vec![3, 4, 6, 3],
            stage_widths: vec![64, 128, 256, 512],
            expansion: 4,
            input_size: 224,
            weights_source: None,
            weights_sha256: None,
            include_classifier_top: false,
        }
    }

    pub fn with_weights(mut self, path: impl Into<PathBuf>) -> Self {
        self.weights_source = Some(path.into());
        self
    }

    /// Weighted layers: stem + 3 per bottleneck + the classifier position.
    pub fn depth(&self) -> usize {
        2 + 3 * self.stage_blocks.iter().sum::<usize>()
    }

    pub fn feature_len(&self) -> usize {
        self.stage_widths.last().copied().unwrap_or(self.conv1_filters) * self.expansion
    }

    fn validate(&self) -> Result<()> {
        if self.include_classifier_top {
            return Err(Error::Config(
                "backbone must be loaded without its classifier top; a new head is attached instead"
                    .into(),
            ));
        }
        if self.stage_blocks.len() != self.stage_widths.len()
            || self.stage_blocks.contains(&0)
            || self.conv1_kernel == 0
            || self.conv1_stride == 0
        {
            return Err(Error::Config("inconsistent backbone stage description".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub moving_mean: Array1<f32>,
    pub moving_variance: Array1<f32>,
}

impl BatchNorm {
    fn identity(ch: usize) -> Self {
        Self {
            gamma: Array1::ones(ch),
            beta: Array1::zeros(ch),
            moving_mean: Array1::zeros(ch),
            moving_variance: Array1::ones(ch),
        }
    }

    fn apply(&self, x: &mut Array3<f32>) {
        nn::batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &self.moving_mean,
            &self.moving_variance,
            BN_EPS,
        );
    }
}

/// Convolution followed by batch normalization (no activation).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub name: String,
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
    pub bn: BatchNorm,
}

impl ConvBn {
    fn conv(&self, x: ArrayView3<f32>) -> Array3<f32> {
        nn::conv2d(x, &self.weight, self.bias.view(), self.stride, self.pad)
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let mut y = self.conv(x);
        self.bn.apply(&mut y);
        y
    }

    pub fn conv_id(&self) -> String {
        format!("{}_conv", self.name)
    }

    pub fn bn_id(&self) -> String {
        format!("{}_bn", self.name)
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (kh, kw)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    /// Sets the normalization statistics from the conv outputs on `xs`
    /// and returns the normalized outputs.
    fn calibrate(&mut self, xs: &[Array3<f32>]) -> Vec<Array3<f32>> {
        let mut ys: Vec<Array3<f32>> = xs.iter().map(|x| self.conv(x.view())).collect();
        let ch = self.out_channels();
        for c in 0..ch {
            let (mut sum, mut sq, mut n) = (0f64, 0f64, 0f64);
            for y in &ys {
                for &v in y.index_axis(Axis(0), c) {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                    n += 1.0;
                }
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(1e-6);
            self.bn.moving_mean[c] = mean as f32;
            self.bn.moving_variance[c] = var as f32;
        }
        for y in &mut ys {
            self.bn.apply(y);
        }
        ys
    }

    fn zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
        self.bn.gamma.fill(0.0);
        self.bn.beta.fill(0.0);
        self.bn.moving_mean.fill(0.0);
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let conv = self.conv_id();
        let bn = self.bn_id();
        vec![
            (format!("{conv}.weight"), self.weight.shape().to_vec(), slice(&self.weight)),
            (format!("{conv}.bias"), self.bias.shape().to_vec(), slice(&self.bias)),
            (format!("{bn}.gamma"), self.bn.gamma.shape().to_vec(), slice(&self.bn.gamma)),
            (format!("{bn}.beta"), self.bn.beta.shape().to_vec(), slice(&self.bn.beta)),
            (
                format!("{bn}.moving_mean"),
                self.bn.moving_mean.shape().to_vec(),
                slice(&self.bn.moving_mean),
            ),
            (
                format!("{bn}.moving_variance"),
                self.bn.moving_variance.shape().to_vec(),
                slice(&self.bn.moving_variance),
            ),
        ]
    }
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> &[f32] {
    a.as_slice().expect("parameters are contiguous")
}

/// Three-layer bottleneck `relu(F(x) + shortcut(x))`, where the shortcut
/// is the identity or a strided 1x1 projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub name: String,
    pub reduce: ConvBn,
    pub spatial: ConvBn,
    pub expand: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl Bottleneck {
    pub fn residual(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let mut a = self.reduce.forward(x);
        nn::relu(&mut a);
        let mut b = self.spatial.forward(a.view());
        nn::relu(&mut b);
        self.expand.forward(b.view())
    }

    /// Output of the shortcut path alone, after the block's final ReLU.
    pub fn shortcut_path(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let mut s = match &self.shortcut {
            Some(proj) => proj.forward(x),
            None => x.to_owned(),
        };
        nn::relu(&mut s);
        s
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let mut y = self.residual(x);
        match &self.shortcut {
            Some(proj) => y += &proj.forward(x),
            None => y += &x,
        }
        nn::relu(&mut y);
        y
    }

    /// Zeroes every parameter of the residual branch so that `F(x) = 0`.
    pub fn zero_residual_branch(&mut self) {
        self.reduce.zero();
        self.spatial.zero();
        self.expand.zero();
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvBn> {
        [&self.reduce, &self.spatial, &self.expand]
            .into_iter()
            .chain(self.shortcut.as_ref())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn> {
        [&mut self.reduce, &mut self.spatial, &mut self.expand]
            .into_iter()
            .chain(self.shortcut.as_mut())
    }

    fn calibrate(&mut self, xs: &[Array3<f32>]) -> Vec<Array3<f32>> {
        let mut a = self.reduce.calibrate(xs);
        a.iter_mut().for_each(nn::relu);
        let mut b = self.spatial.calibrate(&a);
        b.iter_mut().for_each(nn::relu);
        let mut c = self.expand.calibrate(&b);
        let s = match &mut self.shortcut {
            Some(proj) => proj.calibrate(xs),
            None => xs.to_vec(),
        };
        for (y, s) in c.iter_mut().zip(&s) {
            *y += s;
            nn::relu(y);
        }
        c
    }
}

/// A loaded (or generated) backbone. Immutable once built; the checksum is
/// computed over all parameters at construction.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    pub stem: ConvBn,
    pub stages: Vec<Vec<Bottleneck>>,
    checksum: String,
}

/// Expected parameter shapes for a spec, keyed by tensor name.
fn layout(spec: &BackboneSpec) -> Vec<(String, [usize; 4], usize, usize)> {
    // (layer name, kernel shape, stride, pad)
    let mut out = vec![(
        "conv1".to_string(),
        [spec.conv1_filters, 3, spec.conv1_kernel, spec.conv1_kernel],
        spec.conv1_stride,
        spec.conv1_kernel / 2,
    )];
    let mut in_ch = spec.conv1_filters;
    for (s, (&blocks, &width)) in spec.stage_blocks.iter().zip(&spec.stage_widths).enumerate() {
        let out_ch = width * spec.expansion;
        for b in 0..blocks {
            let name = format!("conv{}_block{}", s + 2, b + 1);
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            out.push((format!("{name}_1"), [width, in_ch, 1, 1], stride, 0));
            out.push((format!("{name}_2"), [width, width, 3, 3], 1, 1));
            out.push((format!("{name}_3"), [out_ch, width, 1, 1], 1, 0));
            if b == 0 {
                out.push((format!("{name}_0"), [out_ch, in_ch, 1, 1], stride, 0));
            }
            in_ch = out_ch;
        }
    }
    out
}

impl Backbone {
    fn assemble(
        spec: BackboneSpec,
        mut make: impl FnMut(&str, [usize; 4], usize, usize) -> Result<ConvBn>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers: HashMap<String, ConvBn> = HashMap::new();
        for (name, shape, stride, pad) in layout(&spec) {
            layers.insert(name.clone(), make(&name, shape, stride, pad)?);
        }
        let mut take = |name: &str| layers.remove(name).expect("layout lists every layer");
        let stem = take("conv1");
        let mut stages = Vec::new();
        for (s, &blocks) in spec.stage_blocks.iter().enumerate() {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let name = format!("conv{}_block{}", s + 2, b + 1);
                stage.push(Bottleneck {
                    reduce: take(&format!("{name}_1")),
                    spatial: take(&format!("{name}_2")),
                    expand: take(&format!("{name}_3")),
                    shortcut: (b == 0).then(|| take(&format!("{name}_0"))),
                    name,
                });
            }
            stages.push(stage);
        }
        let mut bb = Self {
            spec,
            stem,
            stages,
            checksum: String::new(),
        };
        bb.checksum = bb.compute_checksum();
        Ok(bb)
    }

    /// Randomly initialized backbone with data-calibrated normalization
    /// statistics, for environments without converted pretrained weights.
    ///
    /// Kernels are He-normal; each batch-norm layer gets the mean and
    /// variance its convolution produces on a few seeded synthetic images,
    /// so activations stay near unit scale through the whole network.
    pub fn standin(spec: BackboneSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bb = Self::assemble(spec, |name, shape, stride, pad| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            Ok(ConvBn {
                name: name.to_string(),
                weight: Array4::from_shape_simple_fn(shape, || normal.sample(&mut rng)),
                bias: Array1::zeros(shape[0]),
                stride,
                pad,
                bn: BatchNorm::identity(shape[0]),
            })
        })?;
        let n = bb.spec.input_size;
        let noise = Uniform::new(-128.0f32, 128.0).expect("valid range");
        let mut images: Vec<Array3<f32>> = (0..2)
            .map(|_| Array3::from_shape_simple_fn((3, n, n), || noise.sample(&mut rng)))
            .collect();
        images.push(Array3::from_shape_fn((3, n, n), |(c, y, x)| {
            ((x + y * (c + 1)) % 256) as f32 - 128.0
        }));
        bb.calibrate(&images);
        bb.checksum = bb.compute_checksum();
        Ok(bb)
    }

    fn calibrate(&mut self, images: &[Array3<f32>]) {
        let mut xs = self.stem.calibrate(images);
        for x in &mut xs {
            nn::relu(x);
            if self.spec.max_pool {
                *x = nn::max_pool(x.view(), 3, 2, 1);
            }
        }
        for stage in &mut self.stages {
            for block in stage {
                xs = block.calibrate(&xs);
            }
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Content checksum recorded when the weights were loaded.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recomputes the checksum from the current parameters.
    pub fn compute_checksum(&self) -> String {
        let mut tensors = self.tensors();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let mut h = Sha256::new();
        for (name, shape, data) in tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((shape.len() as u64).to_le_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvBn> {
        std::iter::once(&self.stem).chain(self.stages.iter().flatten().flat_map(|b| b.layers()))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn> {
        std::iter::once(&mut self.stem)
            .chain(self.stages.iter_mut().flatten().flat_map(|b| b.layers_mut()))
    }

    /// Layer ids (conv and bn separately) with their trainable parameter counts.
    pub fn layer_ids(&self) -> Vec<(String, usize)> {
        self.layers()
            .flat_map(|l| {
                [
                    (l.conv_id(), l.weight.len() + l.bias.len()),
                    (l.bn_id(), l.bn.gamma.len() + l.bn.beta.len()),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        self.layers().flat_map(|l| l.tensors()).collect()
    }

    /// Global-average-pooled features of one CHW image.
    pub fn features(&self, chw: ArrayView3<f32>) -> Array1<f32> {
        let mut x = self.stem.forward(chw);
        nn::relu(&mut x);
        if self.spec.max_pool {
            x = nn::max_pool(x.view(), 3, 2, 1);
        }
        for block in self.stages.iter().flatten() {
            x = block.forward(x.view());
        }
        nn::global_avg_pool(x.view())
    }

    /// Writes the parameters as safetensors, recording format and checksum
    /// in the header metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.tensors();
        let bytes: Vec<Vec<u8>> = tensors
            .iter()
            .map(|(_, _, d)| d.iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views = tensors
            .iter()
            .zip(&bytes)
            .map(|((name, shape, _), b)| {
                TensorView::new(Dtype::F32, shape.clone(), b)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Export(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([
            ("format".to_string(), WEIGHTS_FORMAT.to_string()),
            ("sha256".to_string(), self.checksum.clone()),
        ]);
        let buf = safetensors::serialize(views, Some(meta))
            .map_err(|e| Error::Export(e.to_string()))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Loads the weights named by `spec.weights_source` and verifies their checksum.
pub fn load_backbone(spec: &BackboneSpec) -> Result<Backbone> {
    spec.validate()?;
    let path = spec
        .weights_source
        .clone()
        .ok_or_else(|| Error::Config("backbone spec has no weights_source".into()))?;
    let load_err = |reason: String| Error::Load {
        path: path.clone(),
        reason,
    };
    let bytes = fs::read(&path).map_err(|e| load_err(e.to_string()))?;
    let (_, header) =
        SafeTensors::read_metadata(&bytes).map_err(|e| load_err(format!("corrupt header: {e}")))?;
    let meta: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    if meta.get("format").map(String::as_str) != Some(WEIGHTS_FORMAT) {
        return Err(load_err(format!("not a {WEIGHTS_FORMAT} weight file")));
    }
    let recorded = meta
        .get("sha256")
        .cloned()
        .ok_or_else(|| load_err("weight file records no checksum".into()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| load_err(format!("corrupt file: {e}")))?;

    let backbone = Backbone::assemble(spec.clone(), |name, shape, stride, pad| {
        let read = |suffix: &str, want: &[usize]| -> Result<Vec<f32>> {
            let key = format!("{name}{suffix}");
            let t = st
                .tensor(&key)
                .map_err(|_| load_err(format!("missing tensor {key}")))?;
            if t.dtype() != Dtype::F32 || t.shape() != want {
                return Err(load_err(format!(
                    "tensor {key} is {:?}{:?}, expected F32{want:?}",
                    t.dtype(),
                    t.shape()
                )));
            }
            Ok(t.data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let ch = [shape[0]];
        let vec1 = |suffix: &str| read(suffix, &ch).map(Array1::from);
        Ok(ConvBn {
            name: name.to_string(),
            weight: Array4::from_shape_vec(shape, read("_conv.weight", &shape)?)
                .expect("shape checked"),
            bias: vec1("_conv.bias")?,
            stride,
            pad,
            bn: BatchNorm {
                gamma: vec1("_bn.gamma")?,
                beta: vec1("_bn.beta")?,
                moving_mean: vec1("_bn.moving_mean")?,
                moving_variance: vec1("_bn.moving_variance")?,
            },
        })
    })?;

    if backbone.checksum != recorded {
        return Err(load_err(format!(
            "checksum mismatch: file records {recorded}, contents hash to {}",
            backbone.checksum
        )));
    }
    if let Some(pinned) = &spec.weights_sha256 {
        if !pinned.eq_ignore_ascii_case(&backbone.checksum) {
            return Err(load_err(format!(
                "checksum mismatch: configuration pins {pinned}, file holds {}",
                backbone.checksum
            )));
        }
    }
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Same topology, narrow channels, so unit tests stay fast.
    fn tiny_spec() -> BackboneSpec {
        BackboneSpec {
            conv1_filters: 8,
            stage_widths: vec![4, 4, 8, 8],
            stage_blocks: vec![1, 2, 1, 1],
            input_size: 32,
            ..BackboneSpec::resnet50()
        }
    }

    #[test]
    fn resnet50_layout_has_fifty_layers() {
        let spec = BackboneSpec::resnet50();
        assert_eq!(spec.depth(), 50);
        assert_eq!(spec.feature_len(), 2048);
        let convs = layout(&spec);
        // 1 stem + 16 blocks x 3 + 4 projections
        assert_eq!(convs.len(), 1 + 48 + 4);
    }

    #[test]
    fn classifier_top_is_refused() {
        let spec = BackboneSpec {
            include_classifier_top: true,
            ..tiny_spec()
        };
        assert!(matches!(Backbone::standin(spec.clone(), 0), Err(Error::Config(_))));
        assert!(matches!(load_backbone(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn standin_is_seeded() {
        let a = Backbone::standin(tiny_spec(), 3).unwrap();
        let b = Backbone::standin(tiny_spec(), 3).unwrap();
        let c = Backbone::standin(tiny_spec(), 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.checksum(), a.compute_checksum());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let bb = Backbone::standin(tiny_spec(), 1).unwrap();
        bb.save(&path).unwrap();
        let spec = tiny_spec().with_weights(&path);
        let loaded = load_backbone(&spec).unwrap();
        assert_eq!(loaded.checksum(), bb.checksum());
        let x = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| (c + y + x) as f32 / 10.0);
        assert_eq!(loaded.features(x.view()), bb.features(x.view()));

        // pinned checksum
        let pinned = BackboneSpec {
            weights_sha256: Some("00".repeat(32)),
            ..spec.clone()
        };
        let err = load_backbone(&pinned).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");

        // flip one byte near the end (tensor data)
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = load_backbone(&spec).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");

        fs::write(&path, &bytes[..n / 2]).unwrap();
        assert!(matches!(load_backbone(&spec), Err(Error::Load { .. })));
        fs::remove_file(&path).unwrap();
        assert!(matches!(load_backbone(&spec), Err(Error::Load { .. })));
    }

    #[test]
    fn wrong_architecture_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        Backbone::standin(tiny_spec(), 1).unwrap().save(&path).unwrap();
        let other = BackboneSpec {
            conv1_filters: 16,
            ..tiny_spec()
        }
        .with_weights(&path);
        let err = load_backbone(&other).unwrap_err();
        assert!(err.to_string().contains("conv1_conv.weight"), "{err}");
    }

    #[test]
    fn zeroed_branch_leaves_the_shortcut_path() {
        let bb = Backbone::standin(tiny_spec(), 2).unwrap();
        let x = Array3::from_shape_fn((8, 8, 8), |(c, y, x)| ((c * 7 + y * 3 + x) % 5) as f32 - 1.0);
        for stage in &bb.stages {
            for block in stage {
                let c_in = block.reduce.in_channels();
                let x = Array3::from_shape_fn((c_in, 8, 8), |(c, y, xx)| x[[c % 8, y, xx]]);
                let mut zeroed = block.clone();
                zeroed.zero_residual_branch();
                let out = zeroed.forward(x.view());
                let identity = zeroed.shortcut_path(x.view());
                assert_eq!(out.dim(), identity.dim());
                for (a, b) in out.iter().zip(identity.iter()) {
                    assert!((a - b).abs() <= 1e-5);
                }
                assert!(zeroed.residual(x.view()).iter().all(|&v| v == 0.0));
            }
        }
    }
}
