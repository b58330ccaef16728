//! Head fine-tuning with categorical cross-entropy, history export and
//! model persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use plotters::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::label::GestureLabel;
use crate::model::{argmax, load_backbone, Backbone, BackboneSpec, ClassifierModel, Dense, Head, HeadSpec};
use crate::prep::{encode_labels, Dataset, PreprocessConfig};

/// Lower clip applied to probabilities before taking logs.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Stochastic gradient descent with classical momentum.
    #[default]
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub seed: u64,
    pub class_order: Vec<GestureLabel>,
}

impl TrainConfig {
    pub fn new(class_order: &[GestureLabel], epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 32,
            learning_rate: 1e-4,
            momentum: 0.9,
            optimizer: Optimizer::SgdMomentum,
            seed: 0,
            class_order: class_order.to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub wall_seconds: f64,
}

/// Mean categorical cross-entropy of probability rows against one-hot rows.
pub fn cross_entropy(probabilities: ArrayView2<f64>, onehot: ArrayView2<f64>) -> Result<f64> {
    if probabilities.dim() != onehot.dim() {
        return Err(Error::Loss(format!(
            "probabilities are {:?} but targets are {:?}",
            probabilities.dim(),
            onehot.dim()
        )));
    }
    if probabilities.nrows() == 0 {
        return Err(Error::Loss("empty batch".into()));
    }
    let total: f64 = probabilities
        .iter()
        .zip(onehot.iter())
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| -y * p.clamp(PROB_EPSILON, 1.0).ln())
        .sum();
    Ok(total / probabilities.nrows() as f64)
}

/// Gradient of the mean softmax cross-entropy with respect to the logits.
pub fn cross_entropy_logit_grad(probabilities: ArrayView2<f64>, onehot: ArrayView2<f64>) -> Array2<f64> {
    (&probabilities - &onehot) / probabilities.nrows() as f64
}

fn correct(probabilities: ArrayView2<f64>, onehot: ArrayView2<f64>) -> usize {
    probabilities
        .rows()
        .into_iter()
        .zip(onehot.rows())
        .filter(|(p, y)| argmax(p.iter().copied()) == argmax(y.iter().copied()))
        .count()
}

struct Velocity {
    hidden_w: Array2<f64>,
    hidden_b: Array1<f64>,
    output_w: Array2<f64>,
    output_b: Array1<f64>,
}

impl Velocity {
    fn zeros(head: &Head) -> Self {
        Self {
            hidden_w: Array2::zeros(head.hidden.weight.dim()),
            hidden_b: Array1::zeros(head.hidden.bias.dim()),
            output_w: Array2::zeros(head.output.weight.dim()),
            output_b: Array1::zeros(head.output.bias.dim()),
        }
    }
}

fn sgd_step(head: &mut Head, grads: &crate::model::HeadGradients, v: &mut Velocity, lr: f64, momentum: f64) {
    fn update<D: ndarray::Dimension>(
        w: &mut ndarray::Array<f64, D>,
        v: &mut ndarray::Array<f64, D>,
        g: &ndarray::Array<f64, D>,
        lr: f64,
        momentum: f64,
    ) {
        v.zip_mut_with(g, |v, &g| *v = momentum * *v - lr * g);
        *w += &*v;
    }
    update(&mut head.hidden.weight, &mut v.hidden_w, &grads.hidden.weight, lr, momentum);
    update(&mut head.hidden.bias, &mut v.hidden_b, &grads.hidden.bias, lr, momentum);
    update(&mut head.output.weight, &mut v.output_w, &grads.output.weight, lr, momentum);
    update(&mut head.output.bias, &mut v.output_b, &grads.output.bias, lr, momentum);
}

/// Backbone features and one-hot targets for a whole dataset.
pub fn extract_features(
    model: &ClassifierModel,
    data: &dyn Dataset,
    class_order: &[GestureLabel],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut feats = Array2::zeros((data.len(), model.head.feature_len()));
    let mut labels = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let t = data.tensor(i)?;
        feats.row_mut(i).assign(&model.features(t.view())?);
        labels.push(data.label(i));
    }
    Ok((feats, encode_labels(&labels, class_order)?))
}

/// Fine-tunes the head of a frozen model.
///
/// The backbone is frozen, so every sample's features are computed once up
/// front and the epochs run over those features. Batches are reshuffled
/// each epoch from `config.seed`; dropout draws come from the same seed,
/// which makes the whole run reproducible.
pub fn train(
    model: &mut ClassifierModel,
    train_set: &dyn Dataset,
    val_set: &dyn Dataset,
    config: &TrainConfig,
) -> Result<TrainingHistory> {
    config.validate()?;
    if !model.is_backbone_frozen() {
        return Err(Error::Training("backbone must be frozen before training".into()));
    }
    if config.class_order != model.class_order {
        return Err(Error::Training(
            "training class order differs from the model's class order".into(),
        ));
    }
    if train_set.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Training("validation set is empty".into()));
    }
    let started = Instant::now();
    let backbone_before = model.backbone_checksum();

    let (train_x, train_y) = extract_features(model, train_set, &config.class_order)?;
    let (val_x, val_y) = extract_features(model, val_set, &config.class_order)?;
    log::info!(
        "extracted features for {} training and {} validation samples",
        train_x.nrows(),
        val_x.nrows()
    );

    let mut velocity = Velocity::zeros(&model.head);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.epochs);
    let n = train_x.nrows();
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let x = train_x.select(Axis(0), batch);
            let y = train_y.select(Axis(0), batch);
            let cache = model.head.forward(x.view(), Some(&mut dropout_rng));
            let loss = cross_entropy(cache.probabilities.view(), y.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let grad = cross_entropy_logit_grad(cache.probabilities.view(), y.view());
            let grads = model.head.backward(x.view(), &cache, grad.view());
            sgd_step(&mut model.head, &grads, &mut velocity, config.learning_rate, config.momentum);
            loss_sum += loss * batch.len() as f64;
            hits += correct(cache.probabilities.view(), y.view());
        }

        let val_p = model.head.predict(val_x.view());
        let val_loss = cross_entropy(val_p.view(), val_y.view())?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: n.div_ceil(config.batch_size) });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: hits as f64 / n as f64,
            val_loss,
            val_accuracy: correct(val_p.view(), val_y.view()) as f64 / val_x.nrows() as f64,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            config.epochs,
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy
        );
        records.push(record);
    }

    if model.backbone_checksum() != backbone_before {
        return Err(Error::Training("backbone parameters changed during training".into()));
    }
    Ok(TrainingHistory {
        records,
        config: config.clone(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

pub const HISTORY_HEADER: [&str; 5] = ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"];

/// Writes `history.csv` (one row per epoch) and an SVG with the four curves.
pub fn export_curves(history: &TrainingHistory, csv_path: &Path, plot_path: &Path) -> Result<()> {
    if history.records.is_empty() {
        return Err(Error::Export("history has no epochs".into()));
    }
    let mut w = csv::Writer::from_path(csv_path)?;
    for r in &history.records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    plot_history(history, plot_path).map_err(|e| Error::Export(format!("{}: {e}", plot_path.display())))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(HISTORY_HEADER) {
        return Err(Error::Export(format!(
            "{}: unexpected header {headers:?}",
            path.display()
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn plot_history(history: &TrainingHistory, path: &Path) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE)?;
    let last = history.records.len() as f64;
    let y_max = history
        .records
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss, 1.0])
        .fold(1.0f64, f64::max)
        * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Accuracy/Loss over {} epochs", history.records.len()), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1f64..last.max(2.0), 0f64..y_max)?;
    chart
        .configure_mesh()
        .x_desc("Epoch")
        .y_desc("Loss / Accuracy")
        .draw()?;
    type Series = (&'static str, RGBColor, fn(&EpochRecord) -> f64);
    let series: [Series; 4] = [
        ("train_loss", RED, |r| r.train_loss),
        ("val_loss", BLUE, |r| r.val_loss),
        ("train_acc", GREEN, |r| r.train_accuracy),
        ("val_acc", MAGENTA, |r| r.val_accuracy),
    ];
    for (name, color, get) in series {
        chart
            .draw_series(LineSeries::new(
                history.records.iter().map(|r| (r.epoch as f64, get(r))),
                color.stroke_width(2),
            ))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

const ARTIFACT_FORMAT: &str = "handwash-classifier";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncodedMatrix {
    rows: usize,
    cols: usize,
    /// Little-endian f64 values, base64.
    data: String,
}

impl EncodedMatrix {
    fn encode(a: ArrayView2<f64>) -> Self {
        let bytes: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: B64.encode(bytes),
        }
    }

    fn decode(&self) -> std::result::Result<Array2<f64>, String> {
        let bytes = B64.decode(&self.data).map_err(|e| e.to_string())?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(format!(
                "matrix {}x{} carries {} bytes",
                self.rows,
                self.cols,
                bytes.len()
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Array2::from_shape_vec((self.rows, self.cols), values).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArtifactPayload {
    backbone_spec: BackboneSpec,
    backbone_sha256: String,
    head_spec: HeadSpec,
    hidden_weight: EncodedMatrix,
    hidden_bias: EncodedMatrix,
    output_weight: EncodedMatrix,
    output_bias: EncodedMatrix,
    class_order: Vec<GestureLabel>,
    preprocess: PreprocessConfig,
    history: TrainingHistory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Artifact {
    format: String,
    version: u32,
    payload_sha256: String,
    payload: ArtifactPayload,
}

fn payload_digest(p: &ArtifactPayload) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(p)?)))
}

/// Writes the model artifact: backbone reference and checksum, head
/// parameters (bit-exact), class order, preprocessing and history.
pub fn save_model(model: &ClassifierModel, history: &TrainingHistory, path: &Path) -> Result<()> {
    let row = |b: &Array1<f64>| b.view().insert_axis(Axis(0)).to_owned();
    let payload = ArtifactPayload {
        backbone_spec: model.backbone().spec().clone(),
        backbone_sha256: model.backbone().checksum().to_string(),
        head_spec: model.head.spec,
        hidden_weight: EncodedMatrix::encode(model.head.hidden.weight.view()),
        hidden_bias: EncodedMatrix::encode(row(&model.head.hidden.bias).view()),
        output_weight: EncodedMatrix::encode(model.head.output.weight.view()),
        output_bias: EncodedMatrix::encode(row(&model.head.output.bias).view()),
        class_order: model.class_order.clone(),
        preprocess: model.preprocess,
        history: history.clone(),
    };
    let artifact = Artifact {
        format: ARTIFACT_FORMAT.into(),
        version: ARTIFACT_VERSION,
        payload_sha256: payload_digest(&payload)?,
        payload,
    };
    let mut json = serde_json::to_string_pretty(&artifact)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_artifact(path: &Path) -> Result<ArtifactPayload> {
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let raw = fs::read(path).map_err(|e| load_err(e.to_string()))?;
    let artifact: Artifact =
        serde_json::from_slice(&raw).map_err(|e| load_err(format!("unreadable artifact: {e}")))?;
    if artifact.format != ARTIFACT_FORMAT {
        return Err(load_err(format!("not a {ARTIFACT_FORMAT} artifact")));
    }
    if artifact.version != ARTIFACT_VERSION {
        return Err(load_err(format!(
            "artifact version {} is not supported (expected {ARTIFACT_VERSION})",
            artifact.version
        )));
    }
    let digest = payload_digest(&artifact.payload)?;
    if digest != artifact.payload_sha256 {
        return Err(load_err(format!(
            "checksum mismatch: recorded {}, computed {digest}",
            artifact.payload_sha256
        )));
    }
    Ok(artifact.payload)
}

/// Loads an artifact, reading the backbone weights it references. Relative
/// weight paths resolve against the artifact's directory.
pub fn load_model(path: &Path) -> Result<(ClassifierModel, TrainingHistory)> {
    let payload = read_artifact(path)?;
    let mut spec = payload.backbone_spec.clone();
    if let Some(w) = &spec.weights_source {
        if w.is_relative() && !w.exists() {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            spec.weights_source = Some(base.join(w));
        }
    }
    spec.weights_sha256 = Some(payload.backbone_sha256.clone());
    let backbone = Arc::new(load_backbone(&spec)?);
    assemble(path, payload, backbone)
}

/// Loads an artifact on top of an already loaded backbone, which must match
/// the recorded checksum.
pub fn load_model_with_backbone(
    path: &Path,
    backbone: Arc<Backbone>,
) -> Result<(ClassifierModel, TrainingHistory)> {
    let payload = read_artifact(path)?;
    if backbone.checksum() != payload.backbone_sha256 {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!(
                "checksum mismatch: artifact expects backbone {}, got {}",
                payload.backbone_sha256,
                backbone.checksum()
            ),
        });
    }
    assemble(path, payload, backbone)
}

fn assemble(
    path: &Path,
    p: ArtifactPayload,
    backbone: Arc<Backbone>,
) -> Result<(ClassifierModel, TrainingHistory)> {
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let first_row = |m: Array2<f64>| m.row(0).to_owned();
    let head = Head {
        spec: p.head_spec,
        hidden: Dense {
            weight: p.hidden_weight.decode().map_err(load_err)?,
            bias: first_row(p.hidden_bias.decode().map_err(load_err)?),
        },
        output: Dense {
            weight: p.output_weight.decode().map_err(load_err)?,
            bias: first_row(p.output_bias.decode().map_err(load_err)?),
        },
    };
    let model = ClassifierModel::from_parts(backbone, head, p.class_order, p.preprocess)?;
    Ok((model, p.history))
}

/// Default artifact file names inside a run directory.
pub fn run_files(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join("model.json"), dir.join("history.csv"), dir.join("curves.svg"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_prediction_costs_nothing() {
        let p = array![[1.0, 0.0, 0.0]];
        let loss = cross_entropy(p.view(), p.view()).unwrap();
        assert!(loss.abs() <= 1e-6);
    }

    #[test]
    fn uniform_three_class_loss_is_ln3() {
        let p = array![[1.0 / 3.0; 3]];
        for k in 0..3 {
            let mut y = Array2::zeros((1, 3));
            y[[0, k]] = 1.0;
            let loss = cross_entropy(p.view(), y.view()).unwrap();
            assert!((loss - 3f64.ln()).abs() < 1e-6);
        }
        let p2 = array![[1.0, 0.0, 0.0], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        let y2 = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let mean = cross_entropy(p2.view(), y2.view()).unwrap();
        assert!((mean - 3f64.ln() / 2.0).abs() < 1e-6);
        assert!((mean - 0.5493).abs() < 1e-4);
    }

    #[test]
    fn loss_is_bounded_by_clip() {
        let p = array![[0.0, 1.0]];
        let y = array![[1.0, 0.0]];
        let loss = cross_entropy(p.view(), y.view()).unwrap();
        assert!(loss.is_finite());
        assert!((loss - -PROB_EPSILON.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_shape_mismatch() {
        let p = array![[0.5, 0.5]];
        let y = array![[1.0, 0.0, 0.0]];
        assert!(matches!(cross_entropy(p.view(), y.view()), Err(Error::Loss(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(&GestureLabel::SET_1, 0);
        assert!(c.validate().is_err());
        c.epochs = 1;
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    fn history(n: usize) -> TrainingHistory {
        TrainingHistory {
            records: (1..=n)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0 / e as f64 + 0.1,
                    train_accuracy: 1.0 - 1.0 / (e as f64 + 1.0),
                    val_loss: 1.3 / e as f64 + 1.0 / 3.0,
                    val_accuracy: 0.5 + 0.01 * e as f64,
                })
                .collect(),
            config: TrainConfig::new(&GestureLabel::SET_1, n),
            wall_seconds: 1.5,
        }
    }

    #[test]
    fn curves_export_and_reparse() {
        let dir = tempfile::tempdir().unwrap();
        for n in [1, 25] {
            let h = history(n);
            let csv = dir.path().join(format!("h{n}.csv"));
            let svg = dir.path().join(format!("h{n}.svg"));
            export_curves(&h, &csv, &svg).unwrap();
            let back = read_history_csv(&csv).unwrap();
            assert_eq!(back.len(), n);
            for (a, b) in back.iter().zip(&h.records) {
                assert_eq!(a.epoch, b.epoch);
                for (x, y) in [
                    (a.train_loss, b.train_loss),
                    (a.train_accuracy, b.train_accuracy),
                    (a.val_loss, b.val_loss),
                    (a.val_accuracy, b.val_accuracy),
                ] {
                    assert!((x - y).abs() <= 1e-9);
                }
            }
            let svg_text = fs::read_to_string(&svg).unwrap();
            assert!(svg_text.starts_with("<svg"));
            for name in ["train_loss", "val_loss", "train_acc", "val_acc"] {
                assert!(svg_text.contains(name), "{name}");
            }
        }
        let first = fs::read_to_string(dir.path().join("h1.csv")).unwrap();
        assert!(first.starts_with("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n"));
    }

    #[test]
    fn empty_history_is_an_export_error() {
        let dir = tempfile::tempdir().unwrap();
        let h = history(0);
        assert!(matches!(
            export_curves(&h, &dir.path().join("a.csv"), &dir.path().join("a.svg")),
            Err(Error::Export(_))
        ));
    }

    #[test]
    fn matrix_encoding_is_bit_exact() {
        let m = array![[0.1, -0.0, f64::MIN_POSITIVE], [1e300, 3.0, -2.5e-310]];
        let back = EncodedMatrix::encode(m.view()).decode().unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
