#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use handwash_core::label::GestureLabel;
use handwash_core::model::{attach_head, load_backbone, Backbone, BackboneSpec, ClassifierModel, HeadSpec};
use handwash_core::prep::{preprocess_rgb, PreprocessConfig, TensorDataset};
use handwash_core::synthetic::gesture_frame;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A narrow backbone with the ResNet-50 layout but one block per stage.
pub fn tiny_spec() -> BackboneSpec {
    BackboneSpec {
        conv1_filters: 8,
        stage_widths: vec![4, 4, 8, 8],
        stage_blocks: vec![1, 1, 1, 1],
        input_size: 32,
        ..BackboneSpec::resnet50()
    }
}

pub fn tiny_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        target_size: (32, 32),
        ..Default::default()
    }
}

pub fn tiny_model(classes: &[GestureLabel], seed: u64) -> ClassifierModel {
    let bb = Arc::new(Backbone::standin(tiny_spec(), seed).unwrap());
    attach_head(bb, HeadSpec::new(classes.len()), classes, tiny_preprocess())
        .unwrap()
        .freeze_backbone()
}

/// Tiny model whose backbone is backed by a weight file in `dir`.
pub fn tiny_model_on_disk(classes: &[GestureLabel], dir: &Path) -> ClassifierModel {
    let path = dir.join("tiny.safetensors");
    Backbone::standin(tiny_spec(), 0).unwrap().save(&path).unwrap();
    let bb = Arc::new(load_backbone(&tiny_spec().with_weights(&path)).unwrap());
    attach_head(bb, HeadSpec::new(classes.len()), classes, tiny_preprocess())
        .unwrap()
        .freeze_backbone()
}

/// `per_class` noisy solid-colour frames per class, preprocessed with `cfg`.
pub fn colour_dataset(classes: &[GestureLabel], per_class: usize, seed: u64, cfg: &PreprocessConfig) -> TensorDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = TensorDataset::default();
    for _ in 0..per_class {
        for &label in classes {
            let img = gesture_frame(label, 32, 24, 24, &mut rng);
            ds.push(preprocess_rgb(&img, cfg).unwrap(), label);
        }
    }
    ds
}
