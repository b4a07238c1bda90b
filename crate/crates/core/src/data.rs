//! Corpus ingestion, equivalent-aspect merging and the generalized zero-shot
//! split sampler.
//!
//! A corpus is JSON Lines, one product per line:
//!
//! ```json
//! {"id": "p1", "category": "shoes", "image": "p1.img", "title": null,
//!  "aspects": [{"attribute": "type", "value": "Boots"}]}
//! ```
//!
//! Splitting follows the generalized zero-shot setting: a fraction of every
//! category's aspect vocabulary is held out as *unseen*, every product that
//! carries an unseen aspect goes to validation or test, and the training
//! partition never sees an unseen aspect.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspect::{normalize_attribute, normalize_value, parse_aspect, Aspect, AspectSet};
use crate::digest;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus format error at line {line}: {message}")]
    CorpusFormat { line: usize, message: String },
    #[error("invalid synonym map: {0}")]
    InvalidSynonymMap(String),
    #[error("category {category:?} has {vocabulary} aspects; unseen fraction {fraction} reserves none")]
    InfeasibleSplit {
        category: String,
        vocabulary: usize,
        fraction: f64,
    },
    #[error("unseen fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("split references unknown product id {0:?}")]
    UnknownId(String),
    #[error("invalid split file: {0}")]
    SplitFormat(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One product: an image reference and its gold aspects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub id: String,
    pub category: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(rename = "aspects")]
    pub gold_aspects: AspectSet,
}

impl ProductRecord {
    /// Gold aspects rendered as normalized `attr: value` strings.
    pub fn aspect_keys(&self) -> impl Iterator<Item = String> + '_ {
        self.gold_aspects.iter().map(|a| a.normalized().to_string())
    }
}

/// Decides whether an image reference can be retrieved.
pub trait ImageResolver {
    fn resolve(&self, image_ref: &str) -> Option<PathBuf>;
}

/// Accepts every image reference, for files whose images were already
/// checked or are not needed.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAllImages;

impl ImageResolver for AcceptAllImages {
    fn resolve(&self, image_ref: &str) -> Option<PathBuf> {
        Some(PathBuf::from(image_ref))
    }
}

/// Resolves image references as files relative to a root directory.
/// Remote URLs are never resolvable; nothing is downloaded.
#[derive(Debug, Clone)]
pub struct LocalImages {
    root: PathBuf,
}

impl LocalImages {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageResolver for LocalImages {
    fn resolve(&self, image_ref: &str) -> Option<PathBuf> {
        let image_ref = image_ref.trim();
        if image_ref.is_empty() || image_ref.contains("://") {
            return None;
        }
        let path = self.root.join(image_ref);
        path.is_file().then_some(path)
    }
}

/// Result of [`load_corpus`]: usable records in file order plus the ids of
/// rows that were dropped.
#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub records: Vec<ProductRecord>,
    pub dropped_missing_image: Vec<String>,
    pub dropped_without_aspects: Vec<String>,
}

impl LoadedCorpus {
    pub fn dropped(&self) -> usize {
        self.dropped_missing_image.len() + self.dropped_without_aspects.len()
    }
}

/// Load a JSON Lines corpus. Blank lines are skipped. Rows whose image the
/// resolver cannot find, or that carry no aspects, are dropped and counted.
pub fn load_corpus(path: &Path, images: &dyn ImageResolver) -> Result<LoadedCorpus, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_corpus(BufReader::new(file), images).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_corpus(reader: impl BufRead, images: &dyn ImageResolver) -> Result<LoadedCorpus, DataError> {
    let mut loaded = LoadedCorpus::default();
    let mut seen_ids = HashSet::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|source| DataError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ProductRecord =
            serde_json::from_str(&line).map_err(|e| DataError::CorpusFormat {
                line: line_no,
                message: e.to_string(),
            })?;
        if record.id.trim().is_empty() {
            return Err(DataError::CorpusFormat {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if !seen_ids.insert(record.id.clone()) {
            return Err(DataError::CorpusFormat {
                line: line_no,
                message: format!("duplicate id {:?}", record.id),
            });
        }
        if images.resolve(&record.image_ref).is_none() {
            loaded.dropped_missing_image.push(record.id);
        } else if record.gold_aspects.is_empty() {
            loaded.dropped_without_aspects.push(record.id);
        } else {
            loaded.records.push(record);
        }
    }
    Ok(loaded)
}

pub fn write_corpus(records: &[ProductRecord], mut out: impl Write) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Variant-to-canonical rewrites applied after case/plural normalization.
///
/// Keys come in two forms: a bare value (`"booty"`), which applies under any
/// attribute, or a full aspect (`"type: booty"`), which applies only under
/// that attribute and takes precedence. Canonical targets must have the same
/// form as their key and must not be rewritable themselves.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymMap {
    values: BTreeMap<String, String>,
    aspects: BTreeMap<Aspect, Aspect>,
}

impl SynonymMap {
    pub fn new<K: AsRef<str>, V: AsRef<str>>(
        entries: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Self, DataError> {
        let mut map = Self::default();
        for (variant, canonical) in entries {
            let (variant, canonical) = (variant.as_ref(), canonical.as_ref());
            match (variant.contains(':'), canonical.contains(':')) {
                (false, false) => {
                    let (variant, canonical) = (normalize_value(variant), normalize_value(canonical));
                    if variant != canonical {
                        map.values.insert(variant, canonical);
                    }
                }
                (true, true) => {
                    let parse = |s: &str| {
                        parse_aspect(s)
                            .map(|a| a.normalized())
                            .map_err(|e| DataError::InvalidSynonymMap(e.to_string()))
                    };
                    let (variant, canonical) = (parse(variant)?, parse(canonical)?);
                    if variant != canonical {
                        map.aspects.insert(variant, canonical);
                    }
                }
                _ => {
                    return Err(DataError::InvalidSynonymMap(format!(
                        "{variant:?} -> {canonical:?} mixes a bare value with a full aspect"
                    )))
                }
            }
        }
        map.check_acyclic()?;
        Ok(map)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let raw: BTreeMap<String, String> = serde_json::from_str(text)
            .map_err(|e| DataError::InvalidSynonymMap(e.to_string()))?;
        Self::new(raw)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.values.len() + self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_acyclic(&self) -> Result<(), DataError> {
        let cycle = |what: String| Err(DataError::InvalidSynonymMap(format!("{what} is both a canonical target and a variant")));
        for canonical in self.values.values() {
            if self.values.contains_key(canonical) {
                return cycle(format!("{canonical:?}"));
            }
            if let Some(key) = self.aspects.keys().find(|k| k.value() == canonical) {
                return cycle(format!("{:?}", key.to_string()));
            }
        }
        for canonical in self.aspects.values() {
            if self.aspects.contains_key(canonical) || self.values.contains_key(canonical.value()) {
                return cycle(format!("{:?}", canonical.to_string()));
            }
        }
        Ok(())
    }

    /// Rewrite an already-normalized aspect.
    pub fn rewrite(&self, aspect: &Aspect) -> Aspect {
        if let Some(canonical) = self.aspects.get(aspect) {
            return canonical.clone();
        }
        match self.values.get(aspect.value()) {
            Some(value) => aspect.with_value(value).expect("canonical values are non-empty"),
            None => aspect.clone(),
        }
    }
}

/// Counts reported by [`merge_equivalent_aspects_with_stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeStats {
    /// Aspects whose text changed.
    pub rewritten: usize,
    /// Aspects that collapsed into another aspect of the same product.
    pub collapsed: usize,
}

/// Normalize every gold aspect, rewrite it through `synonyms`, and collapse
/// duplicates within each product.
pub fn merge_equivalent_aspects(records: Vec<ProductRecord>, synonyms: &SynonymMap) -> Vec<ProductRecord> {
    merge_equivalent_aspects_with_stats(records, synonyms).0
}

pub fn merge_equivalent_aspects_with_stats(
    records: Vec<ProductRecord>,
    synonyms: &SynonymMap,
) -> (Vec<ProductRecord>, MergeStats) {
    let mut stats = MergeStats::default();
    let merged = records
        .into_iter()
        .map(|mut record| {
            let before = record.gold_aspects.len();
            let mut merged = AspectSet::new();
            for aspect in record.gold_aspects.iter() {
                let rewritten = synonyms.rewrite(&aspect.normalized());
                if &rewritten != aspect {
                    stats.rewritten += 1;
                }
                merged.insert(rewritten);
            }
            stats.collapsed += before - merged.len();
            record.gold_aspects = merged;
            record
        })
        .collect();
    (merged, stats)
}

/// Train/validation/test partition with disjoint seen and unseen aspect
/// vocabularies. Ids keep corpus order; aspects are normalized strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seen_aspects: BTreeSet<String>,
    pub unseen_aspects: BTreeSet<String>,
    pub seed: u64,
    pub unseen_fraction: f64,
}

impl ZeroShotSplit {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DataError::SplitFormat(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("split serializes");
        text.push('\n');
        text
    }

    pub fn partition(&self, partition: Partition) -> &[String] {
        match partition {
            Partition::Train => &self.train_ids,
            Partition::Val => &self.val_ids,
            Partition::Test => &self.test_ids,
        }
    }

    /// Records of one partition, in split order.
    pub fn select<'a>(
        &self,
        partition: Partition,
        records: &'a [ProductRecord],
    ) -> Result<Vec<&'a ProductRecord>, DataError> {
        let by_id: HashMap<&str, &ProductRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        self.partition(partition)
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| DataError::UnknownId(id.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// Held-out products go to validation when `hash(seed, id) % 3 == 0`,
/// otherwise to test, giving roughly a 1:2 ratio.
const HELDOUT_BUCKETS: u64 = 3;

/// Sample a generalized zero-shot split.
///
/// For every category independently, `floor(unseen_fraction * |V_c|)` aspects
/// of that category's vocabulary `V_c` are drawn as unseen with a seeded
/// shuffle. The global unseen set is the union over categories and the seen
/// set is the rest of the vocabulary. Products carrying any unseen aspect are
/// held out; the others form the training partition.
pub fn sample_zero_shot_split(
    records: &[ProductRecord],
    unseen_fraction: f64,
    seed: u64,
) -> Result<ZeroShotSplit, DataError> {
    if !(unseen_fraction > 0.0 && unseen_fraction < 1.0) {
        return Err(DataError::InvalidFraction(unseen_fraction));
    }
    if records.is_empty() {
        return Err(DataError::EmptyCorpus);
    }

    let mut vocab_by_category: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for record in records {
        vocab_by_category
            .entry(record.category.as_str())
            .or_default()
            .extend(record.aspect_keys());
    }

    let mut unseen = BTreeSet::new();
    for (category, vocab) in &vocab_by_category {
        // Guard against 0.29 * 100 = 28.999999999999996.
        let count = (unseen_fraction * vocab.len() as f64 + 1e-9).floor() as usize;
        if count == 0 {
            return Err(DataError::InfeasibleSplit {
                category: category.to_string(),
                vocabulary: vocab.len(),
                fraction: unseen_fraction,
            });
        }
        let mut rng = ChaCha8Rng::from_seed(digest::sha256_parts(&[
            b"unseen-aspects",
            &seed.to_le_bytes(),
            category.as_bytes(),
        ]));
        let mut candidates: Vec<&String> = vocab.iter().collect();
        candidates.shuffle(&mut rng);
        unseen.extend(candidates.into_iter().take(count).cloned());
    }
    let seen = vocab_by_category
        .values()
        .flatten()
        .filter(|a| !unseen.contains(*a))
        .cloned()
        .collect();

    let mut split = ZeroShotSplit {
        train_ids: Vec::new(),
        val_ids: Vec::new(),
        test_ids: Vec::new(),
        seen_aspects: seen,
        unseen_aspects: unseen,
        seed,
        unseen_fraction,
    };
    for record in records {
        let held_out = record.aspect_keys().any(|a| split.unseen_aspects.contains(&a));
        let target = if !held_out {
            &mut split.train_ids
        } else if heldout_bucket(seed, &record.id) == 0 {
            &mut split.val_ids
        } else {
            &mut split.test_ids
        };
        target.push(record.id.clone());
    }
    Ok(split)
}

fn heldout_bucket(seed: u64, id: &str) -> u64 {
    digest::u64_of(&[b"heldout", &seed.to_le_bytes(), id.as_bytes()]) % HELDOUT_BUCKETS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Offending product ids, or aspect strings for the vocabulary check.
    pub offending: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for check in &self.checks {
            let status = if check.passed { "pass" } else { "FAIL" };
            write!(f, "{status:4}  {}", check.name)?;
            if !check.passed {
                write!(f, "  ({})", check.offending.join(", "))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub const CHECK_PARTITIONS_DISJOINT: &str = "partitions_disjoint";
pub const CHECK_VOCABULARIES_DISJOINT: &str = "seen_unseen_disjoint";
pub const CHECK_HELDOUT_HAS_UNSEEN: &str = "heldout_has_unseen_aspect";
pub const CHECK_TRAIN_FREE_OF_UNSEEN: &str = "train_free_of_unseen_aspects";

/// Check a split against the records it was drawn from.
pub fn validate_split(split: &ZeroShotSplit, records: &[ProductRecord]) -> Result<ValidationReport, DataError> {
    let by_id: HashMap<&str, &ProductRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let lookup = |id: &String| {
        by_id
            .get(id.as_str())
            .copied()
            .ok_or_else(|| DataError::UnknownId(id.clone()))
    };
    let carries_unseen = |record: &ProductRecord| {
        record
            .aspect_keys()
            .any(|a| split.unseen_aspects.contains(&a))
    };

    let mut assigned: HashMap<&str, usize> = HashMap::new();
    for id in split.train_ids.iter().chain(&split.val_ids).chain(&split.test_ids) {
        lookup(id)?;
        *assigned.entry(id.as_str()).or_default() += 1;
    }
    let mut duplicated: Vec<String> = assigned
        .into_iter()
        .filter(|&(_, n)| n > 1)
        .map(|(id, _)| id.to_string())
        .collect();
    duplicated.sort();

    let overlap: Vec<String> = split
        .seen_aspects
        .intersection(&split.unseen_aspects)
        .cloned()
        .collect();

    let mut heldout_without = Vec::new();
    for id in split.val_ids.iter().chain(&split.test_ids) {
        if !carries_unseen(lookup(id)?) {
            heldout_without.push(id.clone());
        }
    }
    let mut train_with = Vec::new();
    for id in &split.train_ids {
        if carries_unseen(lookup(id)?) {
            train_with.push(id.clone());
        }
    }

    let check = |name, offending: Vec<String>| CheckResult {
        name,
        passed: offending.is_empty(),
        offending,
    };
    Ok(ValidationReport {
        checks: vec![
            check(CHECK_PARTITIONS_DISJOINT, duplicated),
            check(CHECK_VOCABULARIES_DISJOINT, overlap),
            check(CHECK_HELDOUT_HAS_UNSEEN, heldout_without),
            check(CHECK_TRAIN_FREE_OF_UNSEEN, train_with),
        ],
    })
}

/// Attribute names present in a set of records, normalized and sorted.
pub fn attribute_vocabulary<'a>(records: impl IntoIterator<Item = &'a ProductRecord>) -> Vec<String> {
    records
        .into_iter()
        .flat_map(|r| r.gold_aspects.attributes().map(normalize_attribute))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
