//! Frozen pretrained backbone plus a freshly initialized classification head.

mod backbone;
mod head;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

pub use backbone::{load_backbone, Backbone, BackboneSpec, BatchNorm, Bottleneck, ConvBn, WEIGHTS_FORMAT};
pub use head::{argmax, softmax_rows, Dense, ForwardCache, Head, HeadGradients, HeadSpec};

use crate::error::{Error, Result};
use crate::label::{validate_class_order, GestureLabel};
use crate::nn::hwc_to_chw;
use crate::prep::PreprocessConfig;

pub const HEAD_HIDDEN_ID: &str = "head_hidden";
pub const HEAD_OUTPUT_ID: &str = "head_output";

/// Backbone + head + per-layer freeze flags.
///
/// The backbone is shared behind an `Arc` and never mutated; training only
/// touches `head`.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    backbone: Arc<Backbone>,
    pub head: Head,
    pub class_order: Vec<GestureLabel>,
    pub preprocess: PreprocessConfig,
    freeze_state: BTreeMap<String, bool>,
}

/// Builds a classifier on `backbone` with a new randomly initialized head.
/// Nothing is frozen yet; see [`ClassifierModel::freeze_backbone`].
pub fn attach_head(
    backbone: Arc<Backbone>,
    head: HeadSpec,
    class_order: &[GestureLabel],
    preprocess: PreprocessConfig,
) -> Result<ClassifierModel> {
    head.validate()?;
    validate_class_order(class_order)?;
    if head.num_classes != class_order.len() {
        return Err(Error::Config(format!(
            "head has {} outputs but {} classes are listed",
            head.num_classes,
            class_order.len()
        )));
    }
    let side = backbone.spec().input_size;
    if preprocess.target_size != (side, side) {
        return Err(Error::Config(format!(
            "preprocessing produces {:?}, backbone expects {side}x{side}",
            preprocess.target_size
        )));
    }
    let head = Head::new(head, backbone.spec().feature_len())?;
    let mut freeze_state: BTreeMap<String, bool> = backbone
        .layer_ids()
        .into_iter()
        .map(|(id, _)| (id, false))
        .collect();
    freeze_state.insert(HEAD_HIDDEN_ID.into(), false);
    freeze_state.insert(HEAD_OUTPUT_ID.into(), false);
    Ok(ClassifierModel {
        backbone,
        head,
        class_order: class_order.to_vec(),
        preprocess,
        freeze_state,
    })
}

impl ClassifierModel {
    pub(crate) fn from_parts(
        backbone: Arc<Backbone>,
        head: Head,
        class_order: Vec<GestureLabel>,
        preprocess: PreprocessConfig,
    ) -> Result<Self> {
        let mut model = attach_head(backbone, head.spec, &class_order, preprocess)?;
        if head.feature_len() != model.head.feature_len() {
            return Err(Error::Config(format!(
                "head expects {} features, backbone yields {}",
                head.feature_len(),
                model.head.feature_len()
            )));
        }
        model.head = head;
        Ok(model.freeze_backbone())
    }

    /// Marks every backbone layer as frozen; head layers stay trainable.
    pub fn freeze_backbone(mut self) -> Self {
        for (id, frozen) in self.freeze_state.iter_mut() {
            *frozen = !is_head_layer(id);
        }
        self
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn shared_backbone(&self) -> Arc<Backbone> {
        Arc::clone(&self.backbone)
    }

    pub fn freeze_state(&self) -> &BTreeMap<String, bool> {
        &self.freeze_state
    }

    pub fn is_backbone_frozen(&self) -> bool {
        self.freeze_state
            .iter()
            .all(|(id, &frozen)| frozen || is_head_layer(id))
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Parameters an optimizer would update given the current freeze state.
    pub fn trainable_parameter_count(&self) -> usize {
        let mut counts: BTreeMap<String, usize> = self.backbone.layer_ids().into_iter().collect();
        counts.insert(HEAD_HIDDEN_ID.into(), self.head.hidden.parameter_count());
        counts.insert(HEAD_OUTPUT_ID.into(), self.head.output.parameter_count());
        self.freeze_state
            .iter()
            .filter(|(_, &frozen)| !frozen)
            .map(|(id, _)| counts.get(id).copied().unwrap_or(0))
            .sum()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.head.parameter_count()
    }

    pub fn backbone_checksum(&self) -> String {
        self.backbone.compute_checksum()
    }

    pub fn head_checksum(&self) -> String {
        self.head.checksum()
    }

    fn check_image(&self, h: usize, w: usize, c: usize) -> Result<()> {
        let side = self.backbone.spec().input_size;
        if (h, w, c) != (side, side, 3) {
            return Err(Error::Shape(format!(
                "expected {side}x{side}x3 input, got {h}x{w}x{c}"
            )));
        }
        Ok(())
    }

    /// Backbone features for one preprocessed HxWx3 image.
    pub fn features(&self, image: ArrayView3<f32>) -> Result<Array1<f64>> {
        let (h, w, c) = image.dim();
        self.check_image(h, w, c)?;
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Preprocess("input tensor contains non-finite values".into()));
        }
        Ok(self
            .backbone
            .features(hwc_to_chw(image).view())
            .mapv(f64::from))
    }

    /// Class probabilities for a Bx224x224x3 batch, inference mode.
    pub fn forward(&self, batch: ArrayView4<f32>) -> Result<Array2<f64>> {
        let (b, h, w, c) = batch.dim();
        self.check_image(h, w, c)?;
        let mut feats = Array2::zeros((b, self.head.feature_len()));
        for (i, image) in batch.axis_iter(Axis(0)).enumerate() {
            feats.row_mut(i).assign(&self.features(image)?);
        }
        Ok(self.head.predict(feats.view()))
    }

    /// Class probabilities from precomputed backbone features.
    pub fn forward_features(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.head.feature_len() {
            return Err(Error::Shape(format!(
                "expected {} features per row, got {}",
                self.head.feature_len(),
                features.ncols()
            )));
        }
        Ok(self.head.predict(features))
    }
}

fn is_head_layer(id: &str) -> bool {
    id == HEAD_HIDDEN_ID || id == HEAD_OUTPUT_ID
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyCheck {
    pub name: String,
    pub expected: String,
    pub actual: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub checks: Vec<TopologyCheck>,
}

impl TopologyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&TopologyCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn check(&self, name: &str) -> Option<&TopologyCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Compares the assembled model against the reference 50-layer layout.
pub fn verify_topology(model: &ClassifierModel) -> TopologyReport {
    let bb = model.backbone();
    let mut checks = Vec::new();
    let mut check = |name: &str, expected: String, actual: String| {
        checks.push(TopologyCheck {
            name: name.into(),
            passed: expected == actual,
            expected,
            actual,
        });
    };

    let (kh, kw) = bb.stem.kernel_size();
    check("conv1 filters", "64".into(), bb.stem.out_channels().to_string());
    check("conv1 kernel", "7x7".into(), format!("{kh}x{kw}"));
    check("conv1 stride", "2".into(), bb.stem.stride.to_string());
    check("max pool", "present".into(), present(bb.spec().max_pool));
    check("bottleneck stages", "4".into(), bb.stages.len().to_string());
    check(
        "blocks per stage",
        "[3, 4, 6, 3]".into(),
        format!("{:?}", bb.stages.iter().map(Vec::len).collect::<Vec<_>>()),
    );
    let bottleneck_form = bb.stages.iter().flatten().all(|b| {
        b.reduce.kernel_size() == (1, 1)
            && b.spatial.kernel_size() == (3, 3)
            && b.expand.kernel_size() == (1, 1)
            && b.expand.out_channels() == 4 * b.reduce.out_channels()
    });
    check("bottleneck form", "1x1-3x3-1x1".into(), if bottleneck_form {
        "1x1-3x3-1x1".into()
    } else {
        "irregular".into()
    });
    let projections = bb
        .stages
        .iter()
        .filter(|s| s.first().is_some_and(|b| b.shortcut.is_some()))
        .count();
    check(
        "projection shortcut per stage",
        bb.stages.len().to_string(),
        projections.to_string(),
    );
    check("depth", "50".into(), bb.spec().depth().to_string());
    let feature_len = bb
        .stages
        .last()
        .and_then(|s| s.last())
        .map_or(bb.stem.out_channels(), |b| b.expand.out_channels());
    check("global average pool features", "2048".into(), feature_len.to_string());
    check(
        "classifier top",
        "absent".into(),
        present(bb.spec().include_classifier_top),
    );
    check(
        "head input",
        feature_len.to_string(),
        model.head.feature_len().to_string(),
    );
    check(
        "head width",
        model.num_classes().to_string(),
        model.head.output.weight.ncols().to_string(),
    );
    check("head activation", "softmax".into(), "softmax".into());
    TopologyReport { checks }
}

fn present(b: bool) -> String {
    if b { "present" } else { "absent" }.into()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> BackboneSpec {
        BackboneSpec {
            conv1_filters: 8,
            stage_widths: vec![4, 4, 8, 8],
            stage_blocks: vec![1, 1, 1, 1],
            input_size: 32,
            ..BackboneSpec::resnet50()
        }
    }

    fn tiny_model(classes: &[GestureLabel]) -> ClassifierModel {
        let bb = Arc::new(Backbone::standin(tiny_spec(), 0).unwrap());
        let pre = PreprocessConfig {
            target_size: (32, 32),
            ..Default::default()
        };
        attach_head(bb, HeadSpec::new(classes.len()), classes, pre).unwrap()
    }

    #[test]
    fn freeze_bookkeeping() {
        let model = tiny_model(&GestureLabel::SET_1);
        assert!(!model.is_backbone_frozen());
        assert!(model.trainable_parameter_count() > model.head_parameter_count());
        let model = model.freeze_backbone();
        assert!(model.is_backbone_frozen());
        assert_eq!(model.trainable_parameter_count(), model.head_parameter_count());
        for (id, frozen) in model.freeze_state() {
            assert_eq!(*frozen, !id.starts_with("head_"), "{id}");
        }
    }

    #[test]
    fn head_config_errors() {
        let bb = Arc::new(Backbone::standin(tiny_spec(), 0).unwrap());
        let pre = PreprocessConfig {
            target_size: (32, 32),
            ..Default::default()
        };
        let one = [GestureLabel::ThumbRub];
        assert!(matches!(
            attach_head(bb.clone(), HeadSpec::new(1), &one, pre),
            Err(Error::Config(_))
        ));
        assert!(attach_head(bb.clone(), HeadSpec::new(2), &GestureLabel::SET_1, pre).is_err());
        assert!(attach_head(bb, HeadSpec::new(3), &GestureLabel::SET_1, PreprocessConfig::default()).is_err());
    }

    #[test]
    fn wrong_spatial_size_names_expected_shape() {
        let model = tiny_model(&GestureLabel::SET_1);
        let batch = ndarray::Array4::<f32>::zeros((1, 16, 32, 3));
        let err = model.forward(batch.view()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("32x32"), "{err}");
    }

    #[test]
    fn tiny_topology_reports_its_differences() {
        let model = tiny_model(&GestureLabel::SET_1);
        let report = verify_topology(&model);
        assert!(!report.passed());
        assert!(report.check("conv1 kernel").unwrap().passed);
        assert!(!report.check("conv1 filters").unwrap().passed);
        assert_eq!(report.check("head width").unwrap().actual, "3");
    }
}
