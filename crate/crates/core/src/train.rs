//! Training loop, evaluation and single-file prediction.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::load_wav;
use crate::dataset::{LabelSet, Manifest, ManifestEntry, Split};
use crate::dsp::{self, GrayImage, StftConfig};
use crate::error::{Error, Result};
use crate::lens::{resize_bilinear, OUTPUT_SIZE};
use crate::metrics::{history_csv, history_svg, ConfusionMatrix, EpochRecord, HISTORY_CSV, HISTORY_SVG};
use crate::nn::{sgd_step, softmax, softmax_cross_entropy, Checkpoint, InputSpec, Model, ModelConfig, SgdState, SolverConfig, Tensor};

pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Samples per forward pass during evaluation.
const EVAL_SHARD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, patience: None, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidConfig("patience must be >= 1 when set".into()));
        }
        Ok(())
    }
}

/// Where training and evaluation images come from.
pub trait ImageSource: Sync {
    fn load(&self, entry: &ManifestEntry) -> Result<GrayImage>;
}

/// Reads the 8-bit grayscale PNG at each entry's path.
#[derive(Debug, Clone, Copy, Default)]
pub struct PngFiles;

impl ImageSource for PngFiles {
    fn load(&self, entry: &ManifestEntry) -> Result<GrayImage> {
        GrayImage::load_png(&entry.path)
    }
}

/// Decoded and resized images of one split, still in 8-bit form.
struct RawSplit {
    pixels: Vec<Vec<u8>>,
    labels: Vec<usize>,
}

fn load_split(
    manifest: &Manifest,
    split: Split,
    labels: &LabelSet,
    input: &InputSpec,
    source: &dyn ImageSource,
) -> Result<RawSplit> {
    if input.channels != 1 {
        return Err(Error::InvalidConfig(format!("grayscale input needs 1 channel, model has {}", input.channels)));
    }
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    let loaded: Vec<(Vec<u8>, usize)> = entries
        .par_iter()
        .map(|e| {
            let label = labels.index_of(&e.label).ok_or_else(|| Error::UnknownLabel(e.label.clone()))?;
            let img = source.load(e)?;
            let img = resize_bilinear(&img, input.width, input.height)?;
            Ok((img.pixels, label))
        })
        .collect::<Result<_>>()?;
    let (pixels, labels) = loaded.into_iter().unzip();
    Ok(RawSplit { pixels, labels })
}

/// Mean pixel of a split on the `[0, 1]` scale.
fn pixel_mean(raw: &RawSplit) -> f64 {
    let n: usize = raw.pixels.iter().map(Vec::len).sum();
    let sum: u64 = raw.pixels.iter().flatten().map(|&p| p as u64).sum();
    sum as f64 / 255.0 / n as f64
}

fn normalize(pixels: &[u8], mean: f64) -> impl Iterator<Item = f32> + '_ {
    pixels.iter().map(move |&p| (p as f64 / 255.0 - mean) as f32)
}

fn batch_tensor(raw: &RawSplit, idx: &[usize], input: &InputSpec, mean: f64) -> Result<Tensor<f32>> {
    let data = idx.iter().flat_map(|&i| normalize(&raw.pixels[i], mean)).collect();
    Tensor::from_vec(&[idx.len(), input.channels, input.height, input.width], data)
}

fn argmax(row: &[f32]) -> usize {
    // first maximum wins on ties
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Confusion matrix of `model` over preloaded data, evaluated in shards and
/// merged.
fn confusion(model: &Model<f32>, labels: &LabelSet, raw: &RawSplit, mean: f64) -> Result<ConfusionMatrix> {
    let order: Vec<usize> = (0..raw.labels.len()).collect();
    let shards: Vec<ConfusionMatrix> = order
        .par_chunks(EVAL_SHARD)
        .map(|idx| {
            let logits = model.forward(&batch_tensor(raw, idx, &model.config.input, mean)?)?;
            let mut cm = ConfusionMatrix::zeros(labels.clone());
            for (&i, row) in idx.iter().zip(logits.data().chunks(labels.len())) {
                cm.record(raw.labels[i], argmax(row))?;
            }
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    ConfusionMatrix::merge_all(labels, &shards)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation accuracy (the initial weights
    /// when no epoch ran).
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// `(epoch, val_accuracy)` of the best epoch.
    pub best: Option<(usize, f64)>,
}

pub struct TrainRequest<'a> {
    pub manifest: &'a Manifest,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    /// Recorded in the checkpoint so prediction repeats the same front end.
    pub stft: StftConfig,
    /// Receives `best.ckpt`, `history.csv` and the training curve when set.
    pub out_dir: Option<&'a Path>,
}

/// Minibatch SGD over the train split with validation after every epoch.
/// Only train and val entries are ever read.
pub fn train(req: &TrainRequest<'_>, source: &dyn ImageSource) -> Result<TrainOutcome> {
    req.train.validate()?;
    req.solver.validate()?;
    req.model.validate()?;
    let labels = req.manifest.labels()?;
    if labels.len() != req.model.num_classes {
        return Err(Error::InvalidConfig(format!(
            "model has {} classes, manifest has {} labels",
            req.model.num_classes,
            labels.len()
        )));
    }
    for split in [Split::Train, Split::Val] {
        if req.manifest.split(split).next().is_none() {
            return Err(Error::EmptySplit(split.to_string()));
        }
    }
    let input = req.model.input;
    let train_data = load_split(req.manifest, Split::Train, &labels, &input, source)?;
    let val_data = load_split(req.manifest, Split::Val, &labels, &input, source)?;
    let mean = pixel_mean(&train_data);
    info!("loaded {} train / {} val images, mean pixel {mean:.4}", train_data.labels.len(), val_data.labels.len());

    let mut model = Model::<f32>::init(req.model.clone(), req.train.seed)?;
    let mut state = SgdState::new(&model.params);
    let snapshot = |model: &Model<f32>, state: &SgdState<f32>, epoch| Checkpoint {
        model: model.clone(),
        labels: labels.clone(),
        epoch,
        solver: req.solver,
        stft: req.stft,
        input_mean: mean,
        solver_state: Some(state.clone()),
    };
    let mut best_ckpt = snapshot(&model, &state, 0);
    let mut best: Option<(usize, f64)> = None;
    let mut history = Vec::new();
    let save_best = |ck: &Checkpoint| -> Result<()> {
        match req.out_dir {
            Some(dir) => ck.save(dir.join(BEST_CHECKPOINT)),
            None => Ok(()),
        }
    };
    if req.train.epochs == 0 {
        save_best(&best_ckpt)?;
    }

    let mut order: Vec<usize> = (0..train_data.labels.len()).collect();
    for epoch in 1..=req.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(req.train.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(req.train.batch_size) {
            let x = batch_tensor(&train_data, idx, &input, mean)?;
            let y: Vec<usize> = idx.iter().map(|&i| train_data.labels[i]).collect();
            let (logits, cache) = model.forward_train(&x)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: state.iteration });
            }
            loss_sum += loss as f64 * idx.len() as f64;
            let grads = model.backward(&cache, &grad)?;
            sgd_step(&mut model.params, &grads, &mut state, &req.solver)?;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_accuracy = confusion(&model, &labels, &val_data, mean)?.overall_accuracy()?;
        info!("epoch {epoch}: train loss {train_loss:.4}, val accuracy {val_accuracy:.4}");
        history.push(EpochRecord { epoch, train_loss, val_accuracy });
        if best.is_none_or(|(_, acc)| val_accuracy > acc) {
            best = Some((epoch, val_accuracy));
            best_ckpt = snapshot(&model, &state, epoch);
            save_best(&best_ckpt)?;
        }
        if let (Some(patience), Some((best_epoch, _))) = (req.train.patience, best) {
            if epoch - best_epoch >= patience {
                info!("no improvement for {patience} epochs, stopping");
                break;
            }
        }
    }

    if let Some(dir) = req.out_dir {
        std::fs::write(dir.join(HISTORY_CSV), history_csv(&history))?;
        let svg_path = dir.join(HISTORY_SVG);
        match history_svg(&history) {
            Some(svg) => std::fs::write(svg_path, svg)?,
            None if svg_path.exists() => std::fs::remove_file(svg_path)?,
            None => {}
        }
    }
    Ok(TrainOutcome { checkpoint: best_ckpt, history, best })
}

/// Confusion matrix of `ckpt` over one split of `manifest`. The label sets
/// are compared before any image is read.
pub fn evaluate(ckpt: &Checkpoint, manifest: &Manifest, split: Split, source: &dyn ImageSource) -> Result<ConfusionMatrix> {
    let found = manifest.labels()?;
    if found != ckpt.labels {
        return Err(Error::LabelMismatch {
            expected: ckpt.labels.names().to_vec(),
            found: found.names().to_vec(),
        });
    }
    let raw = load_split(manifest, split, &ckpt.labels, &ckpt.model.config.input, source)?;
    if raw.labels.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    confusion(&ckpt.model, &ckpt.labels, &raw, ckpt.input_mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub label: String,
    pub probabilities: Vec<f64>,
}

/// Classifies one WAV through the unaugmented path: spectrogram image,
/// resize to the augmented size (the M = 1 copy), then to the model input.
pub fn predict(ckpt: &Checkpoint, wav_path: impl AsRef<Path>) -> Result<Prediction> {
    let clip = load_wav(wav_path)?;
    let (image, _) = dsp::spectrogram_image(&clip, &ckpt.stft, dsp::DEFAULT_DB_FLOOR)?;
    let image = resize_bilinear(&image, OUTPUT_SIZE, OUTPUT_SIZE)?;
    let input = ckpt.model.config.input;
    let image = resize_bilinear(&image, input.width, input.height)?;
    let x = Tensor::from_vec(&[1, 1, input.height, input.width], normalize(&image.pixels, ckpt.input_mean).collect())?;
    let probs = softmax(&ckpt.model.forward(&x)?)?;
    let best = argmax(probs.data());
    Ok(Prediction {
        label: ckpt.labels.name(best).to_string(),
        probabilities: probs.data().iter().map(|&p| p as f64).collect(),
    })
}

/// Wraps another source and records every entry it serves.
pub struct AuditedSource<S> {
    inner: S,
    log: Mutex<Vec<(String, Split, PathBuf)>>,
}

impl<S: ImageSource> AuditedSource<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn accesses(&self) -> Vec<(String, Split, PathBuf)> {
        self.log.lock().expect("audit log").clone()
    }
}

impl<S: ImageSource> ImageSource for AuditedSource<S> {
    fn load(&self, entry: &ManifestEntry) -> Result<GrayImage> {
        self.log
            .lock()
            .expect("audit log")
            .push((entry.item_id.clone(), entry.split, entry.path.clone()));
        self.inner.load(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_alexnet_like;
    use std::collections::HashMap;

    /// In-memory images keyed by item id: a bright bar whose row encodes
    /// the class.
    struct Synthetic(HashMap<String, GrayImage>);

    impl ImageSource for Synthetic {
        fn load(&self, entry: &ManifestEntry) -> Result<GrayImage> {
            self.0.get(&entry.item_id).cloned().ok_or_else(|| Error::MissingFile(entry.path.clone()))
        }
    }

    fn corpus(per_class: usize) -> (Manifest, Synthetic) {
        let mut entries = Vec::new();
        let mut images = HashMap::new();
        for (c, label) in ["a", "b"].iter().enumerate() {
            for i in 0..per_class {
                let id = format!("{label}{i}");
                let split = match i % 5 {
                    0 => Split::Val,
                    1 => Split::Test,
                    _ => Split::Train,
                };
                let mut img = GrayImage::filled(32, 32, 20);
                let row0 = if c == 0 { 6 } else { 20 };
                for y in row0..row0 + 6 {
                    for x in 0..32 {
                        img.pixels[y * 32 + x] = 200 + (i % 7) as u8 * 5;
                    }
                }
                images.insert(id.clone(), img);
                entries.push(ManifestEntry {
                    item_id: id.clone(),
                    parent_id: id.clone(),
                    path: PathBuf::from(format!("/nonexistent/{id}.png")),
                    label: label.to_string(),
                    split,
                    augmentation: None,
                });
            }
        }
        (Manifest::new(entries).unwrap(), Synthetic(images))
    }

    fn request(manifest: &Manifest, epochs: usize) -> TrainRequest<'_> {
        TrainRequest {
            manifest,
            model: build_alexnet_like(2, 1.0 / 16.0, 1, 64).unwrap(),
            solver: SolverConfig { base_lr: 0.01, ..Default::default() },
            train: TrainConfig { epochs, batch_size: 8, patience: None, seed: 3 },
            stft: StftConfig::default(),
            out_dir: None,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (manifest, source) = corpus(10);
        let out = train(&request(&manifest, 0), &source).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best, None);
        let fresh = Model::<f32>::init(build_alexnet_like(2, 1.0 / 16.0, 1, 64).unwrap(), 3).unwrap();
        assert_eq!(out.checkpoint.model, fresh);
    }

    #[test]
    fn deterministic_and_learns_separable_data() {
        let (manifest, source) = corpus(20);
        let a = train(&request(&manifest, 12), &source).unwrap();
        let b = train(&request(&manifest, 12), &source).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint, b.checkpoint);
        let (best_epoch, best_acc) = a.best.unwrap();
        assert_eq!(a.checkpoint.epoch, best_epoch);
        assert!(best_acc >= 0.9, "{:?}", a.history);
        // history matches a fresh evaluation of the stored checkpoint
        let cm = evaluate(&a.checkpoint, &manifest, Split::Val, &source).unwrap();
        assert_eq!(cm.overall_accuracy().unwrap(), best_acc);
        assert_eq!(cm.total(), manifest.split(Split::Val).count() as u64);
    }

    #[test]
    fn training_never_reads_test_items() {
        let (manifest, source) = corpus(10);
        let audited = AuditedSource::new(source);
        train(&request(&manifest, 1), &audited).unwrap();
        let log = audited.accesses();
        assert!(!log.is_empty());
        assert!(log.iter().all(|(_, split, _)| *split != Split::Test));
        assert_eq!(log.len(), manifest.entries.iter().filter(|e| e.split != Split::Test).count());
    }

    #[test]
    fn evaluate_rejects_label_mismatch_before_reading() {
        let (manifest, source) = corpus(10);
        let ck = train(&request(&manifest, 0), &source).unwrap().checkpoint;
        let mut other = manifest.clone();
        other.entries[0].label = "zzz".into();
        let audited = AuditedSource::new(source);
        assert!(matches!(evaluate(&ck, &other, Split::Test, &audited), Err(Error::LabelMismatch { .. })));
        assert!(audited.accesses().is_empty());
    }

    #[test]
    fn constant_predictor_fills_one_column() {
        let (manifest, source) = corpus(10);
        let mut ck = train(&request(&manifest, 0), &source).unwrap().checkpoint;
        for p in &mut ck.model.params {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let last = ck.model.params.len() - 1;
        ck.model.params[last].data_mut()[1] = 1.0;
        let cm = evaluate(&ck, &manifest, Split::Test, &source).unwrap();
        assert!(cm.counts().iter().all(|row| row[0] == 0));
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn missing_image_reports_path() {
        let (manifest, _) = corpus(10);
        let err = train(&request(&manifest, 1), &PngFiles).unwrap_err();
        assert!(matches!(err, Error::MissingFile(ref p) if p.to_string_lossy().contains("/nonexistent/")), "{err}");
    }

    #[test]
    fn divergence_is_reported() {
        let (manifest, source) = corpus(10);
        let mut req = request(&manifest, 3);
        req.solver.base_lr = 1e30;
        assert!(matches!(train(&req, &source), Err(Error::Diverged { .. })));
    }

    #[test]
    fn empty_val_split_rejected() {
        let (mut manifest, source) = corpus(10);
        manifest.entries.iter_mut().for_each(|e| e.split = Split::Train);
        assert!(matches!(train(&request(&manifest, 1), &source), Err(Error::EmptySplit(_))));
    }
}
