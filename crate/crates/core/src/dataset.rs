//! Corpus manifests, labels and train/val/test splitting.
//!
//! Two split modes exist. `RandomItem` shuffles individual items, which over
//! an augmented manifest scatters the siblings of one utterance across
//! splits. `GroupedByParent` shuffles utterances and lets every augmented
//! child inherit its parent's split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::audio_io::load_wav;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::lens::{daarip, LensConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Parse(format!("unknown split {other}"))),
        }
    }
}

/// Lens metadata carried by augmented children.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub u: f64,
    #[serde(rename = "M")]
    pub m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub item_id: String,
    /// Originating utterance; equals `item_id` for originals.
    pub parent_id: String,
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
    pub augmentation: Option<Augmentation>,
}

/// Ordered emotion names. A label's position is its class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidConfig("label set is empty".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::InvalidConfig(format!("duplicate label {dup}")));
        }
        Ok(Self(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.0[index]
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }
}

/// A corpus catalog. The label set is the sorted set of entry labels, so it
/// survives a round trip through the JSONL file unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !ids.insert(e.item_id.as_str()) {
                return Err(Error::DuplicateItem(e.item_id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn labels(&self) -> Result<LabelSet> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.label.as_str()).collect();
        LabelSet::new(set)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Label × split counts, rows in label order.
    pub fn split_counts(&self) -> Result<Vec<(String, [usize; 4])>> {
        let labels = self.labels()?;
        let mut counts = vec![[0usize; 4]; labels.len()];
        for e in &self.entries {
            let row = labels.index_of(&e.label).expect("label from own entries");
            let col = match e.split {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
                Split::Unassigned => 3,
            };
            counts[row][col] += 1;
        }
        Ok(labels.names().iter().cloned().zip(counts).collect())
    }

    pub fn split_summary_csv(&self) -> Result<String> {
        let mut out = String::from("label,train,val,test,unassigned\n");
        for (label, c) in self.split_counts()? {
            out.push_str(&format!("{label},{},{},{},{}\n", c[0], c[1], c[2], c[3]));
        }
        Ok(out)
    }

    /// Parents whose children sit in more than one split.
    pub fn straddling_parents(&self) -> Vec<String> {
        let mut splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for e in &self.entries {
            splits.entry(e.parent_id.as_str()).or_default().insert(e.split);
        }
        splits
            .into_iter()
            .filter(|(_, s)| s.len() > 1)
            .map(|(p, _)| p.to_string())
            .collect()
    }
}

/// Filename regex → label. The first matching rule wins.
#[derive(Debug, Clone)]
pub struct LabelRule {
    pattern: Regex,
    label: String,
}

impl LabelRule {
    pub fn new(pattern: &str, label: &str) -> Result<Self> {
        let pattern = Regex::new(pattern)
            .map_err(|e| Error::InvalidConfig(format!("bad label pattern {pattern}: {e}")))?;
        Ok(Self {
            pattern,
            label: label.to_string(),
        })
    }

    /// Rules of the form `^<label>_` for each label, matching the synthetic
    /// corpus naming.
    pub fn prefix_rules<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Self>> {
        labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                Self::new(&format!("^{}_", regex::escape(l)), l)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildSummary {
    pub matched: usize,
    pub skipped: Vec<PathBuf>,
}

/// Walks `dir` for `.wav` files and labels them by filename.
pub fn build_manifest(dir: impl AsRef<Path>, rules: &[LabelRule]) -> Result<(Manifest, BuildSummary)> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();

    let mut summary = BuildSummary::default();
    let mut entries = Vec::new();
    for path in files {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        match rules.iter().find(|r| r.pattern.is_match(&name)) {
            Some(rule) => {
                let item_id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                entries.push(ManifestEntry {
                    parent_id: item_id.clone(),
                    item_id,
                    path,
                    label: rule.label.clone(),
                    split: Split::Unassigned,
                    augmentation: None,
                });
            }
            None => summary.skipped.push(path),
        }
    }
    if !summary.skipped.is_empty() {
        warn!("{} file(s) matched no label rule and were skipped", summary.skipped.len());
    }
    if entries.is_empty() {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }
    summary.matched = entries.len();
    Ok((Manifest::new(entries)?, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    RandomItem,
    GroupedByParent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// (train, val, test)
    pub fractions: (f64, f64, f64),
    pub mode: SplitMode,
    pub stratify: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: (0.70, 0.15, 0.15),
            mode: SplitMode::GroupedByParent,
            stratify: true,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.fractions;
        if [a, b, c].iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::InvalidConfig("each split fraction must lie in (0, 1)".into()));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// Train/val/test sizes for a stratum of `n` units. Val and test are
    /// rounded to nearest and train takes the rest, so every split is within
    /// one unit of its exact share.
    pub fn cut_sizes(&self, n: usize) -> [usize; 3] {
        let (_, fv, ft) = self.fractions;
        let val = (n as f64 * fv).round() as usize;
        let test = ((n as f64 * ft).round() as usize).min(n - val);
        [n - val - test, val, test]
    }
}

/// Assigns every entry a split. The result depends only on the manifest's
/// content (not its order) and `spec`.
pub fn assign_splits(manifest: &Manifest, spec: &SplitSpec) -> Result<Manifest> {
    spec.validate()?;
    // unit = item (random mode) or parent (grouped mode); stratum key = label or ""
    let mut strata: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut unit_labels: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        let unit = match spec.mode {
            SplitMode::RandomItem => e.item_id.clone(),
            SplitMode::GroupedByParent => e.parent_id.clone(),
        };
        unit_labels.entry(unit.clone()).or_default().insert(e.label.as_str());
        let key = if spec.stratify { e.label.clone() } else { String::new() };
        strata.entry(key).or_default().insert(unit);
    }
    if let Some((unit, labels)) = unit_labels.iter().find(|(_, l)| l.len() > 1) {
        return Err(Error::InvalidConfig(format!("parent {unit} has children with labels {labels:?}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (key, units) in strata {
        if spec.stratify && units.len() < Split::ASSIGNED.len() {
            return Err(Error::LabelTooSmall {
                label: key,
                count: units.len(),
                needed: Split::ASSIGNED.len(),
            });
        }
        let mut units: Vec<String> = units.into_iter().collect();
        units.shuffle(&mut rng);
        let sizes = spec.cut_sizes(units.len());
        let mut iter = units.into_iter();
        for (split, size) in Split::ASSIGNED.iter().zip(sizes) {
            for unit in iter.by_ref().take(size) {
                assignment.insert(unit, *split);
            }
        }
    }

    let entries = manifest
        .entries
        .iter()
        .map(|e| {
            let unit = match spec.mode {
                SplitMode::RandomItem => &e.item_id,
                SplitMode::GroupedByParent => &e.parent_id,
            };
            ManifestEntry {
                split: assignment[unit],
                ..e.clone()
            }
        })
        .collect();
    Manifest::new(entries)
}

/// One row of the augmentation sidecar JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSidecarRow {
    pub item_id: String,
    pub parent_id: String,
    pub u: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub lens_cfg_hash: String,
}

pub const AUGMENT_SIDECAR: &str = "augment_sidecar.jsonl";

#[derive(Debug, Clone, Default)]
pub struct ExpandOutcome {
    pub manifest: Manifest,
    pub failures: Vec<(String, String)>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

/// Maximum tolerated fraction of originals that fail DSP before expansion aborts.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

/// Runs the lens augmentation over every original and writes
/// `<parent_id>_aug<k>.png` into `out_dir`. Children keep the parent's
/// label and split; the result is sorted by `item_id`.
pub fn expand_with_augmented(
    manifest: &Manifest,
    stft_cfg: &StftConfig,
    lens_cfg: &LensConfig,
    out_dir: impl AsRef<Path>,
) -> Result<ExpandOutcome> {
    lens_cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let hash = lens_cfg.hash();

    type Children = Vec<(ManifestEntry, AugmentSidecarRow)>;
    let results: Vec<(String, Result<Children>)> = manifest
        .entries
        .par_iter()
        .map(|parent| {
            let run = || -> Result<Children> {
                let mut clip = load_wav(&parent.path)?;
                clip.source_id = parent.item_id.clone();
                let images = daarip(&clip, stft_cfg, lens_cfg)?;
                images
                    .into_iter()
                    .map(|aug| {
                        let item_id = format!("{}_aug{}", parent.item_id, aug.augmentation_index);
                        let path = out_dir.join(format!("{item_id}.png"));
                        aug.image.save_png(&path)?;
                        let entry = ManifestEntry {
                            item_id: item_id.clone(),
                            parent_id: parent.item_id.clone(),
                            path,
                            label: parent.label.clone(),
                            split: parent.split,
                            augmentation: Some(Augmentation {
                                u: aug.object_distance,
                                m: aug.magnification,
                            }),
                        };
                        let row = AugmentSidecarRow {
                            item_id,
                            parent_id: parent.item_id.clone(),
                            u: aug.object_distance,
                            m: aug.magnification,
                            lens_cfg_hash: hash.clone(),
                        };
                        Ok((entry, row))
                    })
                    .collect()
            };
            (parent.item_id.clone(), run())
        })
        .collect();

    let mut children = Vec::new();
    let mut failures = Vec::new();
    for (id, res) in results {
        match res {
            Ok(c) => children.extend(c),
            Err(e) => {
                warn!("augmentation of {id} failed: {e}");
                failures.push((id, e.to_string()));
            }
        }
    }
    let total = manifest.entries.len();
    if failures.len() as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total,
        });
    }
    children.sort_by(|a, b| a.0.item_id.cmp(&b.0.item_id));

    let mut sidecar = BufWriter::new(File::create(out_dir.join(AUGMENT_SIDECAR))?);
    for (_, row) in &children {
        serde_json::to_writer(&mut sidecar, row)?;
        sidecar.write_all(b"\n")?;
    }
    sidecar.flush()?;

    Ok(ExpandOutcome {
        manifest: Manifest::new(children.into_iter().map(|(e, _)| e).collect())?,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, parent: &str, label: &str) -> ManifestEntry {
        ManifestEntry {
            item_id: id.into(),
            parent_id: parent.into(),
            path: PathBuf::from(format!("{id}.png")),
            label: label.into(),
            split: Split::Unassigned,
            augmentation: None,
        }
    }

    fn flat(labels: &[(&str, usize)]) -> Manifest {
        let entries = labels
            .iter()
            .flat_map(|(l, n)| (0..*n).map(move |i| entry(&format!("{l}_{i:04}"), &format!("{l}_{i:04}"), l)))
            .collect();
        Manifest::new(entries).unwrap()
    }

    fn augmented(parents: usize, children: usize, labels: &[&str]) -> Manifest {
        let mut entries = Vec::new();
        for p in 0..parents {
            let label = labels[p % labels.len()];
            let pid = format!("{label}_{p:03}");
            for c in 0..children {
                entries.push(entry(&format!("{pid}_aug{c}"), &pid, label));
            }
        }
        Manifest::new(entries).unwrap()
    }

    #[test]
    fn exact_seventy_fifteen_fifteen() {
        let m = assign_splits(&flat(&[("a", 100)]), &SplitSpec::default()).unwrap();
        let c = m.split_counts().unwrap();
        assert_eq!(c[0].1, [70, 15, 15, 0]);
    }

    #[test]
    fn iemocap_anger_support() {
        // 1103 originals; the reported test row for anger sums to 166
        let sizes = SplitSpec::default().cut_sizes(1103);
        assert!((sizes[2] as i64 - 166).abs() <= 1, "{sizes:?}");
        assert_eq!(sizes.iter().sum::<usize>(), 1103);
    }

    #[test]
    fn cut_sizes_small_strata() {
        let spec = SplitSpec::default();
        assert_eq!(spec.cut_sizes(3), [3, 0, 0]);
        assert_eq!(spec.cut_sizes(4), [2, 1, 1]);
        assert_eq!(spec.cut_sizes(0), [0, 0, 0]);
    }

    #[test]
    fn grouped_keeps_children_together() {
        let m = augmented(40, 8, &["x", "y"]);
        let spec = SplitSpec { seed: 3, ..Default::default() };
        let split = assign_splits(&m, &spec).unwrap();
        assert!(split.straddling_parents().is_empty());
        let train_parents: BTreeSet<_> = split.split(Split::Train).map(|e| &e.parent_id).collect();
        assert_eq!(train_parents.len(), 28);
    }

    #[test]
    fn random_item_scatters_siblings() {
        let m = augmented(100, 8, &["a", "b", "c", "d"]);
        let spec = SplitSpec { mode: SplitMode::RandomItem, ..Default::default() };
        let split = assign_splits(&m, &spec).unwrap();
        assert!(!split.straddling_parents().is_empty());
    }

    #[test]
    fn label_too_small() {
        let err = assign_splits(&flat(&[("a", 10), ("b", 2)]), &SplitSpec::default()).unwrap_err();
        assert!(matches!(err, Error::LabelTooSmall { ref label, count: 2, .. } if label == "b"));
        let unstratified = SplitSpec { stratify: false, ..Default::default() };
        assert!(assign_splits(&flat(&[("a", 10), ("b", 2)]), &unstratified).is_ok());
    }

    #[test]
    fn bad_fractions() {
        let spec = SplitSpec { fractions: (0.7, 0.2, 0.2), ..Default::default() };
        assert!(assign_splits(&flat(&[("a", 10)]), &spec).is_err());
        let spec = SplitSpec { fractions: (1.0, 0.0, 0.0), ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_is_order_independent() {
        let m = augmented(30, 4, &["a", "b"]);
        let mut reversed = m.clone();
        reversed.entries.reverse();
        for mode in [SplitMode::RandomItem, SplitMode::GroupedByParent] {
            let spec = SplitSpec { mode, seed: 11, ..Default::default() };
            let a = assign_splits(&m, &spec).unwrap();
            let b = assign_splits(&reversed, &spec).unwrap();
            let lookup: BTreeMap<_, _> = b.entries.iter().map(|e| (&e.item_id, e.split)).collect();
            assert!(a.entries.iter().all(|e| lookup[&e.item_id] == e.split));
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Manifest::new(vec![entry("a", "a", "x"), entry("a", "a", "y")]).unwrap_err();
        assert!(matches!(err, Error::DuplicateItem(id) if id == "a"));
    }

    #[test]
    fn jsonl_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = augmented(3, 2, &["b", "a"]);
        m.entries[0].augmentation = Some(Augmentation { u: 1.5, m: 2.0 });
        let path = dir.path().join("m.jsonl");
        m.write_jsonl(&path).unwrap();
        let back = Manifest::read_jsonl(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.labels().unwrap().names(), &["a".to_string(), "b".to_string()]);
        let first = fs::read_to_string(&path).unwrap();
        let row: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        let keys: BTreeSet<_> = row.as_object().unwrap().keys().cloned().collect();
        let expected: BTreeSet<String> = ["item_id", "parent_id", "path", "label", "split", "augmentation"]
            .into_iter()
            .map(String::from)
            .collect();
        assert_eq!(keys, expected);
        assert_eq!(row["augmentation"]["M"], 2.0);
    }

    #[test]
    fn build_manifest_rules() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["anger_000.wav", "anger_001.wav", "calm_000.wav", "notes.txt"] {
            fs::write(dir.path().join(name), b"x").unwrap();
        }
        let rules = LabelRule::prefix_rules(&["anger", "joy"]).unwrap();
        let (m, summary) = build_manifest(dir.path(), &rules).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(summary.skipped.len(), 1);
        assert!(m.entries.iter().all(|e| e.parent_id == e.item_id && e.split == Split::Unassigned));

        let none = LabelRule::prefix_rules(&["joy"]).unwrap();
        assert!(matches!(build_manifest(dir.path(), &none), Err(Error::EmptyCorpus(_))));

        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/anger_000.wav"), b"x").unwrap();
        assert!(matches!(build_manifest(dir.path(), &rules), Err(Error::DuplicateItem(_))));
    }

    #[test]
    fn summary_csv() {
        let m = assign_splits(&flat(&[("a", 20), ("b", 20)]), &SplitSpec::default()).unwrap();
        assert_eq!(m.split_summary_csv().unwrap(), "label,train,val,test,unassigned\na,14,3,3,0\nb,14,3,3,0\n");
    }

    proptest::proptest! {
        #[test]
        fn fractions_realized_within_one_unit(n in 3usize..400, seed in 0u64..50, grouped in proptest::bool::ANY) {
            let m = if grouped { augmented(n, 3, &["q"]) } else { flat(&[("q", n)]) };
            let spec = SplitSpec {
                mode: if grouped { SplitMode::GroupedByParent } else { SplitMode::RandomItem },
                seed,
                ..Default::default()
            };
            let split = assign_splits(&m, &spec).unwrap();
            let per_unit = if grouped { 3 } else { 1 };
            let counts = split.split_counts().unwrap()[0].1;
            for (k, frac) in [0.70, 0.15, 0.15].iter().enumerate() {
                let units = (counts[k] / per_unit) as f64;
                proptest::prop_assert!((units - frac * n as f64).abs() <= 1.0 + 1e-9, "{counts:?} n={n}");
            }
            if grouped {
                proptest::prop_assert!(split.straddling_parents().is_empty());
            }
        }
    }
}
