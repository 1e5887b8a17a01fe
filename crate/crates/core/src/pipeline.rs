//! File-based pipeline stages and the split-leakage experiment.
//!
//! Every stage reads its inputs from and writes its outputs under
//! `paths.work_dir`, so stages can run as separate processes:
//!
//! ```text
//! corpus/            synthetic WAVs + manifest.jsonl   (synth)
//! spectrograms/      one PNG + sidecar JSON per WAV   (spectrogram)
//! augmented/         lens PNGs + manifest.jsonl       (augment)
//! split/             manifest.jsonl + summary CSV     (split)
//! train/             best.ckpt, history CSV and SVG   (train)
//! eval/              report JSON, confusion CSV       (eval)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{default_class_specs, load_wav, synth_corpus, SynthClassSpec};
use crate::dataset::{assign_splits, expand_with_augmented, Manifest, Split, SplitMode, SplitSpec};
use crate::dsp::{spectrogram_image, StftConfig, DEFAULT_DB_FLOOR};
use crate::error::{Error, Result};
use crate::lens::LensConfig;
use crate::metrics::{self, ConfusionMatrix, EpochRecord};
use crate::nn::{build_alexnet_like, Checkpoint, SolverConfig};
use crate::train::{evaluate, train, ImageSource, PngFiles, TrainConfig, TrainRequest, BEST_CHECKPOINT};

pub const MANIFEST: &str = "manifest.jsonl";
pub const SPLIT_SUMMARY: &str = "split_summary.csv";
pub const LEAKAGE_REPORT: &str = "leakage_report.json";
pub const LEAKAGE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: Vec<SynthClassSpec>,
    pub utterances_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: default_class_specs(),
            utterances_per_class: 25,
            duration_s: 1.0,
            sample_rate: 16_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width_scale: f64,
    /// Side of the square network input; augmented images are resized to it.
    pub input_size: usize,
    /// Checked against the manifest's label count when set.
    pub num_classes: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { width_scale: 0.125, input_size: 64, num_classes: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of source WAVs with a `manifest.jsonl`.
    pub corpus: Option<PathBuf>,
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { corpus: None, work_dir: PathBuf::from("work") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    pub lens: LensConfig,
    pub split: SplitSpec,
    pub model: ModelSection,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.lens.validate()?;
        self.split.validate()?;
        self.solver.validate()?;
        self.train.validate()?;
        if !(self.model.width_scale > 0.0 && self.model.width_scale <= 1.0) {
            return Err(Error::InvalidConfig("model.width_scale must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Sets every seed in the config to `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.lens.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths.corpus.clone().unwrap_or_else(|| self.paths.work_dir.join("corpus"))
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.paths.work_dir.join(stage)
    }
}

/// Runs pipeline stages against one config.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    /// Replace existing stage outputs instead of refusing.
    pub overwrite: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, overwrite: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, overwrite })
    }

    /// Creates `dir`, clearing it first when overwriting. Fails if `marker`
    /// already exists and overwriting is off.
    fn prepare(&self, dir: &Path, marker: &str) -> Result<()> {
        let marker = dir.join(marker);
        if marker.exists() {
            if !self.overwrite {
                return Err(Error::AlreadyExists(marker));
            }
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        Ok(())
    }

    pub fn synth(&self) -> Result<Manifest> {
        let dir = self.cfg.corpus_dir();
        self.prepare(&dir, MANIFEST)?;
        let s = &self.cfg.synth;
        let manifest = synth_corpus(&s.classes, s.utterances_per_class, s.duration_s, s.sample_rate, s.seed, &dir)?;
        manifest.write_jsonl(dir.join(MANIFEST))?;
        info!("synthesized {} utterances into {}", manifest.entries.len(), dir.display());
        Ok(manifest)
    }

    pub fn corpus_manifest(&self) -> Result<Manifest> {
        Manifest::read_jsonl(self.cfg.corpus_dir().join(MANIFEST))
    }

    /// Renders the unaugmented spectrogram of every corpus WAV.
    pub fn spectrogram(&self) -> Result<usize> {
        let manifest = self.corpus_manifest()?;
        let dir = self.cfg.dir("spectrograms");
        self.prepare(&dir, MANIFEST)?;
        let entries: Vec<_> = manifest
            .entries
            .par_iter()
            .map(|e| {
                let mut clip = load_wav(&e.path)?;
                clip.source_id = e.item_id.clone();
                let (image, sidecar) = spectrogram_image(&clip, &self.cfg.stft, DEFAULT_DB_FLOOR)?;
                let path = dir.join(format!("{}.png", e.item_id));
                image.save_png(&path)?;
                fs::write(dir.join(format!("{}.json", e.item_id)), serde_json::to_string_pretty(&sidecar)?)?;
                Ok(crate::dataset::ManifestEntry { path, ..e.clone() })
            })
            .collect::<Result<_>>()?;
        let out = Manifest::new(entries)?;
        out.write_jsonl(dir.join(MANIFEST))?;
        Ok(out.entries.len())
    }

    pub fn augment(&self) -> Result<Manifest> {
        let manifest = self.corpus_manifest()?;
        let dir = self.cfg.dir("augmented");
        self.prepare(&dir, MANIFEST)?;
        let outcome = expand_with_augmented(&manifest, &self.cfg.stft, &self.cfg.lens, &dir)?;
        for (id, err) in &outcome.failures {
            warn!("skipped {id}: {err}");
        }
        outcome.manifest.write_jsonl(dir.join(MANIFEST))?;
        info!("wrote {} augmented images", outcome.manifest.entries.len());
        Ok(outcome.manifest)
    }

    pub fn split(&self) -> Result<Manifest> {
        self.split_into(&self.cfg.dir("split"), &self.cfg.split)
    }

    fn split_into(&self, dir: &Path, spec: &SplitSpec) -> Result<Manifest> {
        let manifest = Manifest::read_jsonl(self.cfg.dir("augmented").join(MANIFEST))?;
        if spec.mode == SplitMode::RandomItem {
            warn!("random_item split over augmented data lets siblings of one utterance land in different splits; test accuracy will be inflated by leakage");
        }
        self.prepare(dir, MANIFEST)?;
        let split = assign_splits(&manifest, spec)?;
        split.write_jsonl(dir.join(MANIFEST))?;
        fs::write(dir.join(SPLIT_SUMMARY), split.split_summary_csv()?)?;
        Ok(split)
    }

    pub fn train(&self, source: &dyn ImageSource) -> Result<(Checkpoint, Vec<EpochRecord>)> {
        self.train_from(&self.cfg.dir("split"), &self.cfg.dir("train"), source)
    }

    fn train_from(&self, split_dir: &Path, out: &Path, source: &dyn ImageSource) -> Result<(Checkpoint, Vec<EpochRecord>)> {
        let manifest = Manifest::read_jsonl(split_dir.join(MANIFEST))?;
        let labels = manifest.labels()?;
        if let Some(n) = self.cfg.model.num_classes {
            if n != labels.len() {
                return Err(Error::InvalidConfig(format!("model.num_classes is {n}, manifest has {} labels", labels.len())));
            }
        }
        self.prepare(out, BEST_CHECKPOINT)?;
        let model = build_alexnet_like(labels.len(), self.cfg.model.width_scale, 1, self.cfg.model.input_size)?;
        let outcome = train(
            &TrainRequest {
                manifest: &manifest,
                model,
                solver: self.cfg.solver,
                train: self.cfg.train,
                stft: self.cfg.stft,
                out_dir: Some(out),
            },
            source,
        )?;
        Ok((outcome.checkpoint, outcome.history))
    }

    /// Evaluates the trained checkpoint on the test split and writes the report.
    pub fn eval(&self, source: &dyn ImageSource) -> Result<ConfusionMatrix> {
        self.eval_from(&self.cfg.dir("split"), &self.cfg.dir("train"), &self.cfg.dir("eval"), source)
    }

    fn eval_from(&self, split_dir: &Path, train_dir: &Path, out: &Path, source: &dyn ImageSource) -> Result<ConfusionMatrix> {
        let manifest = Manifest::read_jsonl(split_dir.join(MANIFEST))?;
        let ckpt = Checkpoint::load(train_dir.join(BEST_CHECKPOINT))?;
        let cm = evaluate(&ckpt, &manifest, Split::Test, source)?;
        let history = read_history(&train_dir.join(metrics::HISTORY_CSV))?;
        self.prepare(out, metrics::REPORT_JSON)?;
        metrics::report(&cm, &history, out)?;
        Ok(cm)
    }

    /// Synth (unless a corpus is configured), augment, split, train, eval.
    pub fn run_all(&self) -> Result<ConfusionMatrix> {
        if self.cfg.paths.corpus.is_none() {
            self.synth()?;
        }
        self.augment()?;
        self.split()?;
        self.train(&PngFiles)?;
        self.eval(&PngFiles)
    }

    /// Trains and tests the same augmented corpus under both split modes,
    /// all other settings and seeds equal.
    pub fn leakage_experiment(&self) -> Result<LeakageReport> {
        if self.cfg.paths.corpus.is_none() {
            self.synth()?;
        }
        self.augment()?;
        let run = |mode: SplitMode| -> Result<ProtocolResult> {
            let root = self.cfg.dir("leakage").join(mode_name(mode));
            let spec = SplitSpec { mode, ..self.cfg.split.clone() };
            let split = self.split_into(&root.join("split"), &spec)?;
            let (_, history) = self.train_from(&root.join("split"), &root.join("train"), &PngFiles)?;
            let cm = self.eval_from(&root.join("split"), &root.join("train"), &root.join("eval"), &PngFiles)?;
            let straddling = split.straddling_parents();
            Ok(ProtocolResult {
                split_mode: mode,
                test_accuracy: cm.overall_accuracy()?,
                test_items: cm.total(),
                straddling_parents: straddling.len(),
                straddling_examples: straddling.into_iter().take(5).collect(),
                best_val_accuracy: history.iter().map(|r| r.val_accuracy).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
                epochs_run: history.len(),
            })
        };
        let random_item = run(SplitMode::RandomItem)?;
        let grouped = run(SplitMode::GroupedByParent)?;
        let report = LeakageReport {
            schema_version: LEAKAGE_SCHEMA_VERSION,
            gap: random_item.test_accuracy - grouped.test_accuracy,
            random_item,
            grouped,
            config: self.cfg.clone(),
        };
        let path = self.cfg.paths.work_dir.join(LEAKAGE_REPORT);
        fs::write(&path, report.to_json()?)?;
        info!("leakage report written to {}", path.display());
        Ok(report)
    }
}

fn mode_name(mode: SplitMode) -> &'static str {
    match mode {
        SplitMode::RandomItem => "random_item",
        SplitMode::GroupedByParent => "grouped_by_parent",
    }
}

fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Parse(format!("{}: bad history row {line:?}", path.display()));
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 3 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: cells[0].parse().map_err(|_| bad())?,
                train_loss: cells[1].parse().map_err(|_| bad())?,
                val_accuracy: cells[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolResult {
    pub split_mode: SplitMode,
    pub test_accuracy: f64,
    pub test_items: u64,
    pub straddling_parents: usize,
    pub straddling_examples: Vec<String>,
    pub best_val_accuracy: Option<f64>,
    pub epochs_run: usize,
}

/// Both protocols' test accuracy, their gap and the sibling audit, with the
/// full config (including seeds) for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakageReport {
    pub schema_version: u32,
    pub random_item: ProtocolResult,
    pub grouped: ProtocolResult,
    /// `random_item.test_accuracy - grouped.test_accuracy`.
    pub gap: f64,
    pub config: PipelineConfig,
}

impl LeakageReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != LEAKAGE_SCHEMA_VERSION {
            return Err(Error::Parse(format!("leakage report: unsupported schema_version {}", r.schema_version)));
        }
        if r.random_item.split_mode != SplitMode::RandomItem || r.grouped.split_mode != SplitMode::GroupedByParent {
            return Err(Error::Parse("leakage report: protocols out of place".into()));
        }
        if r.gap != r.random_item.test_accuracy - r.grouped.test_accuracy {
            return Err(Error::Parse("leakage report: gap disagrees with accuracies".into()));
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_defaults_fill_in() {
        let cfg = PipelineConfig::default();
        let json = cfg.to_json().unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 32);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn reseed_touches_every_seed() {
        let mut cfg = PipelineConfig::default();
        cfg.reseed(9);
        assert_eq!((cfg.split.seed, cfg.lens.seed, cfg.train.seed, cfg.synth.seed), (9, 9, 9, 9));
    }

    #[test]
    fn stages_refuse_to_clobber_without_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.paths.work_dir = dir.path().to_path_buf();
        cfg.synth.utterances_per_class = 3;
        cfg.synth.duration_s = 0.1;
        let p = Pipeline::new(cfg.clone(), false).unwrap();
        p.synth().unwrap();
        assert!(matches!(p.synth(), Err(Error::AlreadyExists(_))));
        let again = Pipeline::new(cfg, true).unwrap();
        assert_eq!(again.synth().unwrap(), p.corpus_manifest().unwrap());
        assert_eq!(again.spectrogram().unwrap(), 12);
    }

    #[test]
    fn history_csv_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let h = vec![EpochRecord { epoch: 1, train_loss: 0.693_147_180_559_945_3, val_accuracy: 0.25 }];
        let path = dir.path().join("h.csv");
        fs::write(&path, metrics::history_csv(&h)).unwrap();
        assert_eq!(read_history(&path).unwrap(), h);
        assert!(read_history(&dir.path().join("none.csv")).unwrap().is_empty());
    }
}
