//! Top-1 retrieval per taxonomic rank with macro and micro accuracy for
//! seen and unseen taxa.

mod report;

pub use report::{AccuracyPair, EvalReport, ReportCell, REPORT_CSV_HEADER};

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Dataset, Split};
use crate::losses::{LossConfig, RANKS};
use crate::manifold::{exterior_angle, geodesic_distance_unchecked, half_aperture, LorentzPoint, ManifoldError};
use crate::trainer::{embed_records, embed_texts, Checkpoint, ParamSet, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("retrieval needs at least one key")]
    EmptyKeys,
    #[error("query and key embeddings use different geometries")]
    GeometryMismatch,
    #[error("dataset has no `{0}` split")]
    MissingSplit(Split),
    #[error("malformed report: {0}")]
    Report(String),
    #[error("label embeddings need a hyperbolic text encoder")]
    NoLabelEncoder,
    #[error(transparent)]
    Geometry(#[from] ManifoldError),
    #[error(transparent)]
    Embed(Box<TrainError>),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Embed(Box::new(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Dna,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    DnaToDna,
    ImageToImage,
    ImageToDna,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::DnaToDna, Task::ImageToImage, Task::ImageToDna];

    pub fn name(self) -> &'static str {
        match self {
            Task::DnaToDna => "DNA-to-DNA",
            Task::ImageToImage => "Image-to-Image",
            Task::ImageToDna => "Image-to-DNA",
        }
    }

    pub fn query(self) -> Modality {
        match self {
            Task::DnaToDna => Modality::Dna,
            Task::ImageToImage | Task::ImageToDna => Modality::Image,
        }
    }

    pub fn key(self) -> Modality {
        match self {
            Task::DnaToDna | Task::ImageToDna => Modality::Dna,
            Task::ImageToImage => Modality::Image,
        }
    }
}

/// Embeddings of a set of records in one geometry.
#[derive(Debug, Clone, PartialEq)]
pub enum PointSet {
    Lorentz(Vec<LorentzPoint>),
    Euclidean(Vec<Vec<f64>>),
}

impl PointSet {
    pub fn len(&self) -> usize {
        match self {
            PointSet::Lorentz(p) => p.len(),
            PointSet::Euclidean(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of row `i`: `(time, space...)` on the hyperboloid, the
    /// vector itself in Euclidean geometry.
    pub fn coords(&self, i: usize) -> Vec<f64> {
        match self {
            PointSet::Lorentz(p) => p[i].to_coords(),
            PointSet::Euclidean(p) => p[i].clone(),
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

fn nearest(n_keys: usize, skip: Option<usize>, score: impl Fn(usize) -> f64) -> usize {
    // Lower score is better; strict comparison keeps the lowest index on ties.
    let mut best = None;
    let mut best_score = f64::INFINITY;
    for k in 0..n_keys {
        if Some(k) == skip {
            continue;
        }
        let s = score(k);
        if best.is_none() || s < best_score {
            best = Some(k);
            best_score = s;
        }
    }
    best.expect("at least one candidate key")
}

fn retrieve(
    queries: &PointSet,
    keys: &PointSet,
    exclude_self: bool,
    cfg: &LossConfig,
) -> Result<Vec<usize>, EvalError> {
    let min_keys = if exclude_self { 2 } else { 1 };
    if keys.len() < min_keys {
        return Err(EvalError::EmptyKeys);
    }
    let skip = |q: usize| exclude_self.then_some(q);
    match (queries, keys) {
        (PointSet::Lorentz(q), PointSet::Lorentz(k)) => Ok((0..q.len())
            .into_par_iter()
            .map(|i| {
                nearest(k.len(), skip(i), |j| {
                    geodesic_distance_unchecked(&q[i], &k[j], &cfg.manifold)
                })
            })
            .collect()),
        (PointSet::Euclidean(q), PointSet::Euclidean(k)) => Ok((0..q.len())
            .into_par_iter()
            .map(|i| nearest(k.len(), skip(i), |j| -cosine(&q[i], &k[j])))
            .collect()),
        _ => Err(EvalError::GeometryMismatch),
    }
}

/// Index of the nearest key for every query: smallest geodesic distance on
/// the hyperboloid, largest cosine similarity in Euclidean geometry. Ties go
/// to the lowest key index.
pub fn retrieve_top1(queries: &PointSet, keys: &PointSet, cfg: &LossConfig) -> Result<Vec<usize>, EvalError> {
    retrieve(queries, keys, false, cfg)
}

/// Like [`retrieve_top1`] with the queries used as their own keys; a point
/// never retrieves itself.
pub fn retrieve_top1_excluding_self(points: &PointSet, cfg: &LossConfig) -> Result<Vec<usize>, EvalError> {
    retrieve(points, points, true, cfg)
}

/// Labels of the nearest keys.
pub fn retrieve_labels<L: Clone>(
    queries: &PointSet,
    keys: &PointSet,
    key_labels: &[L],
    cfg: &LossConfig,
) -> Result<Vec<L>, EvalError> {
    Ok(retrieve_top1(queries, keys, cfg)?
        .into_iter()
        .map(|k| key_labels[k].clone())
        .collect())
}

/// Mean over truth classes of per-class accuracy; `None` without queries.
pub fn accuracy_macro<L: Ord + Clone>(preds: &[L], truths: &[L]) -> Option<f64> {
    let mut per_class: BTreeMap<L, (usize, usize)> = BTreeMap::new();
    for (p, t) in preds.iter().zip(truths) {
        let e = per_class.entry(t.clone()).or_default();
        e.0 += (p == t) as usize;
        e.1 += 1;
    }
    if per_class.is_empty() {
        return None;
    }
    let sum: f64 = per_class.values().map(|&(c, n)| c as f64 / n as f64).sum();
    Some(sum / per_class.len() as f64)
}

/// Fraction of correct predictions; `None` without queries.
pub fn accuracy_micro<L: PartialEq>(preds: &[L], truths: &[L]) -> Option<f64> {
    if truths.is_empty() {
        return None;
    }
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Some(correct as f64 / truths.len() as f64)
}

/// `2ab / (a + b)`, and 0 when both are 0.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Queries are test_seen and test_unseen records; keys are train_seen and
/// key records, each in file order.
pub fn query_and_key_indices(dataset: &Dataset) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    for split in [Split::TrainSeen, Split::TestSeen, Split::TestUnseen, Split::Key] {
        if dataset.indices_in(split).is_empty() {
            return Err(EvalError::MissingSplit(split));
        }
    }
    let pick = |a: Split, b: Split| -> Vec<usize> {
        (0..dataset.len())
            .filter(|&i| matches!(dataset.records[i].split, s if s == a || s == b))
            .collect()
    };
    Ok((
        pick(Split::TestSeen, Split::TestUnseen),
        pick(Split::TrainSeen, Split::Key),
    ))
}

type Classes = Vec<Option<usize>>;

/// Scores already-embedded queries and keys. `queries` and `keys` are
/// record indices aligned with the rows of the embeddings.
pub fn evaluate_embeddings(
    dataset: &Dataset,
    queries: &[usize],
    keys: &[usize],
    query_emb: &crate::trainer::Embeddings,
    key_emb: &crate::trainer::Embeddings,
    cfg: &LossConfig,
) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport::empty();
    for task in Task::ALL {
        let nearest = retrieve_top1(query_emb.modality(task.query()), key_emb.modality(task.key()), cfg)?;
        for r in 0..RANKS {
            let class = |i: usize| dataset.index.class_of(&dataset.records[i], r);
            // (predictions, truths) for seen and unseen queries
            let mut groups: [(Classes, Classes); 2] = Default::default();
            for (qi, &q) in queries.iter().enumerate() {
                let Some(truth) = class(q) else { continue };
                let g = if dataset.index.is_seen(r, truth) { 0 } else { 1 };
                groups[g].0.push(class(keys[nearest[qi]]));
                groups[g].1.push(Some(truth));
            }
            let score = |(p, t): &(Classes, Classes)| AccuracyPair {
                macro_avg: accuracy_macro(p, t),
                micro: accuracy_micro(p, t),
            };
            report.set(r, task, score(&groups[0]), score(&groups[1]));
        }
    }
    Ok(report)
}

/// Embeds the query and key splits with the checkpoint's encoders and runs
/// all three tasks at every rank.
pub fn evaluate_all(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<EvalReport, EvalError> {
    let cfg = &checkpoint.config;
    let (queries, keys) = query_and_key_indices(dataset)?;
    let q = embed_records(&checkpoint.params, dataset, &queries, cfg)?;
    let k = embed_records(&checkpoint.params, dataset, &keys, cfg)?;
    evaluate_embeddings(dataset, &queries, &keys, &q, &k, &cfg.loss)
}

/// How well rank-label embeddings of the train_seen taxonomy follow the
/// hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyStats {
    /// Distinct (parent, child) label pairs at consecutive ranks.
    pub pairs: usize,
    /// Fraction of pairs whose child lies outside the parent's cone.
    pub violation_rate: f64,
    /// Mean geodesic distance from the origin of the label embeddings per rank.
    pub mean_origin_distance: [f64; RANKS],
}

/// Embeds every train_seen rank label with the text encoder and measures
/// cone containment between consecutive ranks.
pub fn hierarchy_stats(params: &ParamSet, dataset: &Dataset, cfg: &TrainConfig) -> Result<HierarchyStats, EvalError> {
    if params.get("text.w").is_none() {
        return Err(EvalError::NoLabelEncoder);
    }
    let train = dataset.require(Split::TrainSeen).map_err(TrainError::from)?;
    let mut labels: BTreeMap<(usize, usize), String> = BTreeMap::new();
    let mut pairs = std::collections::BTreeSet::new();
    for &i in &train {
        let rec = &dataset.records[i];
        let classes = dataset.index.classes_of(rec);
        for r in 0..RANKS {
            if let (Some(c), Some(text)) = (classes[r], rec.rank_text(r)) {
                labels.entry((r, c)).or_insert(text);
                if r > 0 {
                    if let Some(p) = classes[r - 1] {
                        pairs.insert(((r - 1, p), (r, c)));
                    }
                }
            }
        }
    }
    let keys: Vec<(usize, usize)> = labels.keys().copied().collect();
    let texts: Vec<String> = labels.into_values().collect();
    let PointSet::Lorentz(points) = embed_texts(params, &texts, cfg)? else {
        return Err(EvalError::NoLabelEncoder);
    };
    let row = |k: &(usize, usize)| keys.binary_search(k).expect("label embedded");
    let m = &cfg.loss.manifold;
    let mut violations = 0;
    for (parent, child) in &pairs {
        let (u, w) = (&points[row(parent)], &points[row(child)]);
        if exterior_angle(u, w, m)? > half_aperture(u, m)? {
            violations += 1;
        }
    }
    let dim = points.first().map_or(0, |p| p.space().len());
    let origin = LorentzPoint::origin(dim, m);
    let mut sums = [(0.0, 0usize); RANKS];
    for (k, p) in keys.iter().zip(&points) {
        sums[k.0].0 += geodesic_distance_unchecked(&origin, p, m);
        sums[k.0].1 += 1;
    }
    Ok(HierarchyStats {
        pairs: pairs.len(),
        violation_rate: if pairs.is_empty() {
            0.0
        } else {
            violations as f64 / pairs.len() as f64
        },
        mean_origin_distance: sums.map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 }),
    })
}
