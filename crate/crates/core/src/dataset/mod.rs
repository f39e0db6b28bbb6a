//! Specimen tables, the taxonomy index, batching and the synthetic
//! hierarchical generator.

mod synth;

pub use synth::{generate_synthetic, SynthSpec};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::RANKS;

pub const RANK_NAMES: [&str; RANKS] = ["order", "family", "genus", "species"];

pub const TSV_HEADER: &str = "id\tsplit\torder\tfamily\tgenus\tspecies\timg_feat\tdna_feat";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line 1: expected header `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {rank} `{label}` has two parents: `{first}` and `{second}`")]
    TwoParents {
        line: usize,
        rank: &'static str,
        label: String,
        first: String,
        second: String,
    },
    #[error("line {line}: {what} width {found} differs from {expected}")]
    FeatureWidth {
        line: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("dataset has no records in split `{0}`")]
    MissingSplit(Split),
    #[error("specimen `{0}` has no taxonomic label")]
    NoLabels(String),
    #[error("batch size must be at least 2, got {0}")]
    BatchSize(usize),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainSeen,
    Val,
    TestSeen,
    TestUnseen,
    Key,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::TrainSeen,
        Split::Val,
        Split::TestSeen,
        Split::TestUnseen,
        Split::Key,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainSeen => "train_seen",
            Split::Val => "val",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
            Split::Key => "key",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecimenRecord {
    pub id: String,
    pub split: Split,
    /// Order, family, genus, species; `None` when the rank is unknown.
    pub labels: [Option<String>; RANKS],
    pub img_feat: Vec<f64>,
    pub dna_feat: Vec<f64>,
}

impl SpecimenRecord {
    pub fn has_rank(&self, rank: usize) -> bool {
        self.labels[rank].is_some()
    }

    /// Deepest rank with a label.
    pub fn deepest_rank(&self) -> Option<usize> {
        (0..RANKS).rev().find(|&r| self.has_rank(r))
    }

    /// Class identity at `rank`: the full ancestor path joined by `/`, with
    /// an empty segment for an unknown ancestor. `None` if the rank itself
    /// is unknown.
    pub fn class_key(&self, rank: usize) -> Option<String> {
        self.labels[rank].as_ref()?;
        Some(
            self.labels[..=rank]
                .iter()
                .map(|l| l.as_deref().unwrap_or(""))
                .collect::<Vec<_>>()
                .join("/"),
        )
    }

    /// Text fed to the label encoder for `rank`: the known labels from the
    /// root down to `rank`, space separated.
    pub fn rank_text(&self, rank: usize) -> Option<String> {
        self.labels[rank].as_ref()?;
        build_full_text_key(&self.labels[..=rank]).ok()
    }

    pub fn full_text(&self) -> Result<String, DataError> {
        build_full_text_key(&self.labels).map_err(|_| DataError::NoLabels(self.id.clone()))
    }
}

/// Concatenates the known labels root to leaf with single spaces, skipping
/// unknown ranks.
pub fn build_full_text_key(labels: &[Option<String>]) -> Result<String, DataError> {
    let parts: Vec<&str> = labels.iter().flatten().map(String::as_str).collect();
    if parts.is_empty() {
        return Err(DataError::NoLabels(String::new()));
    }
    Ok(parts.join(" "))
}

/// Per-rank class vocabularies, parent links and split membership.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyIndex {
    vocab: [Vec<String>; RANKS],
    lookup: [HashMap<String, usize>; RANKS],
    parent: [Vec<Option<usize>>; RANKS],
    by_split: BTreeMap<Split, [BTreeSet<usize>; RANKS]>,
}

impl TaxonomyIndex {
    /// Builds the index. `lines[i]` is the source line of `records[i]` for
    /// error messages.
    fn build(records: &[SpecimenRecord], lines: &[usize]) -> Result<Self, DataError> {
        // Bare-label consistency: a label may not sit under two different
        // parent labels anywhere in the table.
        let mut bare_parent: [HashMap<&str, &str>; RANKS] = Default::default();
        for (rec, &line) in records.iter().zip(lines) {
            for r in 1..RANKS {
                if let (Some(child), Some(parent)) = (&rec.labels[r], &rec.labels[r - 1]) {
                    match bare_parent[r].get(child.as_str()) {
                        Some(&first) if first != parent => {
                            return Err(DataError::TwoParents {
                                line,
                                rank: RANK_NAMES[r],
                                label: child.clone(),
                                first: first.to_string(),
                                second: parent.clone(),
                            });
                        }
                        Some(_) => {}
                        None => {
                            bare_parent[r].insert(child, parent);
                        }
                    }
                }
            }
        }

        let mut keys: [BTreeSet<String>; RANKS] = Default::default();
        for rec in records {
            for (r, set) in keys.iter_mut().enumerate() {
                if let Some(k) = rec.class_key(r) {
                    set.insert(k);
                }
            }
        }
        let vocab: [Vec<String>; RANKS] = keys.map(|s| s.into_iter().collect());
        let lookup: [HashMap<String, usize>; RANKS] =
            std::array::from_fn(|r| vocab[r].iter().enumerate().map(|(i, k)| (k.clone(), i)).collect());
        let parent: [Vec<Option<usize>>; RANKS] = std::array::from_fn(|r| {
            vocab[r]
                .iter()
                .map(|k| {
                    if r == 0 {
                        return None;
                    }
                    let prefix = &k[..k.rfind('/').expect("path has a separator")];
                    lookup[r - 1].get(prefix).copied()
                })
                .collect()
        });
        let mut by_split: BTreeMap<Split, [BTreeSet<usize>; RANKS]> = BTreeMap::new();
        for rec in records {
            let entry = by_split.entry(rec.split).or_default();
            for (r, set) in entry.iter_mut().enumerate() {
                if let Some(k) = rec.class_key(r) {
                    set.insert(lookup[r][&k]);
                }
            }
        }
        Ok(TaxonomyIndex {
            vocab,
            lookup,
            parent,
            by_split,
        })
    }

    pub fn num_classes(&self, rank: usize) -> usize {
        self.vocab[rank].len()
    }

    pub fn class_name(&self, rank: usize, id: usize) -> &str {
        &self.vocab[rank][id]
    }

    pub fn class_id(&self, rank: usize, key: &str) -> Option<usize> {
        self.lookup[rank].get(key).copied()
    }

    /// Class id of a record at `rank`, if the record is part of the index.
    pub fn class_of(&self, record: &SpecimenRecord, rank: usize) -> Option<usize> {
        self.class_id(rank, &record.class_key(rank)?)
    }

    pub fn classes_of(&self, record: &SpecimenRecord) -> [Option<usize>; RANKS] {
        std::array::from_fn(|r| self.class_of(record, r))
    }

    /// Parent class of a class at `rank >= 1`; `None` when the parent rank
    /// is unknown for that path.
    pub fn parent(&self, rank: usize, id: usize) -> Option<usize> {
        self.parent[rank][id]
    }

    /// Classes at `rank` carried by at least one record of `split`.
    pub fn classes_in(&self, split: Split, rank: usize) -> BTreeSet<usize> {
        self.by_split.get(&split).map(|s| s[rank].clone()).unwrap_or_default()
    }

    pub fn is_seen(&self, rank: usize, id: usize) -> bool {
        self.by_split
            .get(&Split::TrainSeen)
            .is_some_and(|s| s[rank].contains(&id))
    }
}

/// Seen classes at `rank` (carried by some train_seen record) and unseen
/// classes (occurring in a test split but never in train_seen).
pub fn split_seen_unseen(index: &TaxonomyIndex, rank: usize) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let seen = index.classes_in(Split::TrainSeen, rank);
    let mut test = index.classes_in(Split::TestSeen, rank);
    test.extend(index.classes_in(Split::TestUnseen, rank));
    let unseen = test.difference(&seen).copied().collect();
    (seen, unseen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SpecimenRecord>,
    pub index: TaxonomyIndex,
}

impl Dataset {
    pub fn from_records(records: Vec<SpecimenRecord>) -> Result<Self, DataError> {
        let lines: Vec<usize> = (2..records.len() + 2).collect();
        Self::with_lines(records, &lines)
    }

    fn with_lines(records: Vec<SpecimenRecord>, lines: &[usize]) -> Result<Self, DataError> {
        let mut ids = HashMap::new();
        let widths = records.first().map(|r| (r.img_feat.len(), r.dna_feat.len()));
        for (rec, &line) in records.iter().zip(lines) {
            if ids.insert(rec.id.as_str(), line).is_some() {
                return Err(DataError::DuplicateId {
                    line,
                    id: rec.id.clone(),
                });
            }
            let (wi, wd) = widths.expect("non-empty");
            for (what, expected, found) in [
                ("img_feat", wi, rec.img_feat.len()),
                ("dna_feat", wd, rec.dna_feat.len()),
            ] {
                if expected != found {
                    return Err(DataError::FeatureWidth {
                        line,
                        what,
                        expected,
                        found,
                    });
                }
            }
        }
        let index = TaxonomyIndex::build(&records, lines)?;
        Ok(Dataset { records, index })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices in `split`, in file order.
    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Like [`Dataset::indices_in`] but an empty split is an error.
    pub fn require(&self, split: Split) -> Result<Vec<usize>, DataError> {
        let idx = self.indices_in(split);
        if idx.is_empty() {
            Err(DataError::MissingSplit(split))
        } else {
            Ok(idx)
        }
    }

    pub fn feature_widths(&self) -> (usize, usize) {
        self.records
            .first()
            .map_or((0, 0), |r| (r.img_feat.len(), r.dna_feat.len()))
    }

    pub fn to_tsv(&self) -> String {
        write_tsv_string(&self.records)
    }
}

fn parse_features(field: &str, line: usize, what: &str) -> Result<Vec<f64>, DataError> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    line,
                    message: format!("malformed {what} value `{s}`"),
                })
        })
        .collect()
}

/// Parses a specimen table from TSV text.
pub fn parse_tsv(text: &str) -> Result<Dataset, DataError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != TSV_HEADER {
        return Err(DataError::Header {
            expected: TSV_HEADER.to_string(),
            found: header.to_string(),
        });
    }
    let mut records = Vec::new();
    let mut line_numbers = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 8 {
            return Err(DataError::Parse {
                line,
                message: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() {
            return Err(DataError::Parse {
                line,
                message: "empty id".into(),
            });
        }
        let split = fields[1]
            .parse::<Split>()
            .map_err(|message| DataError::Parse { line, message })?;
        let labels = std::array::from_fn(|r| Some(fields[2 + r]).filter(|s| !s.is_empty()).map(str::to_string));
        records.push(SpecimenRecord {
            id: fields[0].to_string(),
            split,
            labels,
            img_feat: parse_features(fields[6], line, "img_feat")?,
            dna_feat: parse_features(fields[7], line, "dna_feat")?,
        });
        line_numbers.push(line);
    }
    Dataset::with_lines(records, &line_numbers)
}

pub fn load_tsv(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_tsv(&text)
}

fn join_features(v: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        write!(s, "{x}").expect("writing to a string");
    }
    s
}

pub fn write_tsv_string(records: &[SpecimenRecord]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in records {
        let labels: Vec<&str> = r.labels.iter().map(|l| l.as_deref().unwrap_or("")).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.id,
            r.split,
            labels.join("\t"),
            join_features(&r.img_feat),
            join_features(&r.dna_feat)
        )
        .expect("writing to a string");
    }
    out
}

pub fn write_tsv(path: &Path, records: &[SpecimenRecord]) -> Result<(), DataError> {
    std::fs::write(path, write_tsv_string(records)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Record indices of one batch with their class ids per rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub classes: Vec<[Option<usize>; RANKS]>,
}

/// Shuffles `subset` with a stream keyed by `(seed, epoch)` and cuts it into
/// batches of `batch_size`; the last batch may be shorter.
pub fn make_batches(
    dataset: &Dataset,
    subset: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>, DataError> {
    if batch_size < 2 {
        return Err(DataError::BatchSize(batch_size));
    }
    let mut order = subset.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
            classes: chunk
                .iter()
                .map(|&i| dataset.index.classes_of(&dataset.records[i]))
                .collect(),
        })
        .collect())
}
