//! Contrastive, entailment-cone and stacked entailment objectives.
//!
//! Every entailment term is written with the cone held by the parent: the
//! positive term penalises a child outside its parent's cone, the negative
//! term penalises a non-descendant inside the cone widened by the margin.
//!
//! The batched functions take embeddings already placed on a [`Graph`] so the
//! trainer can differentiate them. The pointwise functions work on
//! [`LorentzPoint`]s and serve evaluation and diagnostics.

mod config;
pub mod geometry;

pub use config::{ElMode, Entailment, Geometry, LossConfig, Method};
pub use geometry::Points;

use thiserror::Error;

use crate::manifold::{self, LorentzPoint, ManifoldError};
use crate::numerics::{Graph, Tensor, Var};

/// Taxonomic ranks, root to leaf.
pub const RANKS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no positive pairs for {0}")]
    NoPositivePairs(&'static str),
    #[error("entailment parent at the origin has no cone")]
    ApexAtOrigin,
    #[error("specimen {0} in the batch has no taxonomic label")]
    NoLabel(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch size mismatch: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Entailment loss for one (parent, child) pair with the cone at the parent.
pub fn entailment_pair_loss(
    parent: &LorentzPoint,
    child: &LorentzPoint,
    cfg: &LossConfig,
    polarity: Polarity,
) -> Result<f64, LossError> {
    let ext = manifold::exterior_angle(parent, child, &cfg.manifold)?;
    let aper = manifold::half_aperture(parent, &cfg.manifold)?;
    Ok(pair_term(ext, aper, cfg.margin, polarity))
}

/// `max(0, ext - aper)` or `max(0, aper - ext + margin)`.
pub fn pair_term(ext: f64, aper: f64, margin: f64, polarity: Polarity) -> f64 {
    match polarity {
        Polarity::Positive => (ext - aper).max(0.0),
        Polarity::Negative => (aper - ext + margin).max(0.0),
    }
}

/// Combines per-pair terms: the positive mean alone under [`ElMode::Pos`],
/// otherwise the average of the positive and negative means. An empty
/// negative set contributes 0.
pub fn combine_entailment(positive: &[f64], negative: &[f64], mode: ElMode) -> Result<f64, LossError> {
    if positive.is_empty() {
        return Err(LossError::NoPositivePairs("entailment"));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(match mode {
        ElMode::Pos => mean(positive),
        ElMode::PosNeg => 0.5 * (mean(positive) + mean(negative)),
        ElMode::None => 0.0,
    })
}

/// Pointwise entailment loss over all cross pairs of `parents` and
/// `children`; a pair is positive when the classes agree.
pub fn entailment_loss(
    parents: &[LorentzPoint],
    parent_classes: &[usize],
    children: &[LorentzPoint],
    child_classes: &[usize],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    check_len(parents.len(), parent_classes.len())?;
    check_len(children.len(), child_classes.len())?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, &pc) in parents.iter().zip(parent_classes) {
        for (c, &cc) in children.iter().zip(child_classes) {
            if pc == cc {
                pos.push(entailment_pair_loss(p, c, cfg, Polarity::Positive)?);
            } else if cfg.el_mode == ElMode::PosNeg {
                neg.push(entailment_pair_loss(p, c, cfg, Polarity::Negative)?);
            }
        }
    }
    combine_entailment(&pos, &neg, cfg.el_mode)
}

/// Mean over the available levels; 0 when none is available.
pub fn sel_intra_from_levels(levels: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = levels.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Unweighted mean of the label-image, label-DNA and DNA-image terms.
pub fn sel_inter_from_components(components: [f64; 3]) -> f64 {
    components.iter().sum::<f64>() / 3.0
}

/// Symmetric cross-entropy over in-batch pairs with logits `-d(a_i, b_j) / tau`.
pub fn contrastive_loss(
    a: &[LorentzPoint],
    b: &[LorentzPoint],
    temperature: f64,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    if a.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    check_len(a.len(), b.len())?;
    let n = a.len();
    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            logits[i * n + j] = -manifold::geodesic_distance(&a[i], &b[j], &cfg.manifold)? / temperature;
        }
    }
    let logits = Tensor::new(n, n, logits);
    let mut g = Graph::new();
    let l = g.constant(logits);
    let targets: Vec<usize> = (0..n).collect();
    let out = symmetric_ce(&mut g, l, &targets);
    Ok(g.value(out).item())
}

fn check_len(a: usize, b: usize) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::BatchMismatch(a, b))
    }
}

fn symmetric_ce(g: &mut Graph, logits: Var, targets: &[usize]) -> Var {
    let row = g.softmax_cross_entropy(logits, targets);
    let lt = g.transpose(logits);
    let col = g.softmax_cross_entropy(lt, targets);
    let s = g.add(row, col);
    g.scale(s, 0.5)
}

/// Embeddings of one batch on a graph.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub image: Points,
    pub dna: Points,
    /// One row per distinct (rank, class) present in the batch.
    pub labels: Option<Points>,
    /// Row of `labels` holding each specimen's class at each rank.
    pub label_rows: Vec<[Option<usize>; RANKS]>,
    pub full_text: Option<Points>,
}

impl BatchEmbeddings {
    fn deepest_rows(&self) -> Result<Vec<usize>, LossError> {
        self.label_rows
            .iter()
            .enumerate()
            .map(|(i, rows)| rows.iter().rev().flatten().next().copied().ok_or(LossError::NoLabel(i)))
            .collect()
    }

    fn labels(&self) -> Result<&Points, LossError> {
        self.labels
            .as_ref()
            .ok_or_else(|| LossError::InvalidConfig("label embeddings are required".into()))
    }
}

/// Batched entailment loss on the graph over all cross pairs of parent and
/// child rows; a pair is positive when the classes agree.
pub fn entailment_loss_graph(
    g: &mut Graph,
    parents: &Points,
    parent_classes: &[usize],
    children: &Points,
    child_classes: &[usize],
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    check_len(parents.len(g), parent_classes.len())?;
    check_len(children.len(g), child_classes.len())?;
    let eps = cfg.manifold.eps();
    let apex_at_origin = (0..parent_classes.len())
        .any(|r| g.value(parents.space).row(r).iter().map(|x| x * x).sum::<f64>().sqrt() <= eps);
    if apex_at_origin {
        return Err(LossError::ApexAtOrigin);
    }
    let (m, n) = (parent_classes.len(), child_classes.len());
    let mut pos_mask = vec![0.0; m * n];
    let mut neg_mask = vec![0.0; m * n];
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for (i, pc) in parent_classes.iter().enumerate() {
        for (j, cc) in child_classes.iter().enumerate() {
            if pc == cc {
                pos_mask[i * n + j] = 1.0;
                n_pos += 1;
            } else {
                neg_mask[i * n + j] = 1.0;
                n_neg += 1;
            }
        }
    }
    if n_pos == 0 {
        return Err(LossError::NoPositivePairs("entailment"));
    }
    let ext = geometry::pairwise_exterior_angle(g, parents, children, &cfg.manifold);
    let aper = geometry::half_aperture(g, parents, &cfg.manifold);

    let outside = g.sub(ext, aper);
    let outside = g.relu(outside);
    let mask = g.constant(Tensor::new(m, n, pos_mask));
    let masked = g.mul(outside, mask);
    let pos_sum = g.sum(masked);
    let l_pos = g.scale(pos_sum, 1.0 / n_pos as f64);
    match cfg.el_mode {
        ElMode::Pos | ElMode::None => Ok(l_pos),
        ElMode::PosNeg => {
            if n_neg == 0 {
                return Ok(g.scale(l_pos, 0.5));
            }
            let inside = g.sub(aper, ext);
            let inside = g.offset(inside, cfg.margin);
            let inside = g.relu(inside);
            let mask = g.constant(Tensor::new(m, n, neg_mask));
            let masked = g.mul(inside, mask);
            let neg_sum = g.sum(masked);
            let l_neg = g.scale(neg_sum, 1.0 / n_neg as f64);
            let both = g.add(l_pos, l_neg);
            Ok(g.scale(both, 0.5))
        }
    }
}

/// Intra-modal label chain: at each rank the parent rows are the batch's
/// labels one rank up, the child rows are labels of specimens that also
/// carry that parent rank, and the pair class is the parent-rank class.
/// Returns `None` when no consecutive pair of ranks is available.
pub fn sel_intra_graph(g: &mut Graph, batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<Option<Var>, LossError> {
    let labels = *batch.labels()?;
    let mut levels = Vec::new();
    for r in 1..RANKS {
        let parent_rows: Vec<usize> = batch.label_rows.iter().filter_map(|rows| rows[r - 1]).collect();
        let (child_rows, child_classes): (Vec<usize>, Vec<usize>) = batch
            .label_rows
            .iter()
            .filter_map(|rows| Some((rows[r]?, rows[r - 1]?)))
            .unzip();
        if child_rows.is_empty() {
            continue;
        }
        let parents = labels.gather(g, &parent_rows);
        let children = labels.gather(g, &child_rows);
        levels.push(entailment_loss_graph(
            g,
            &parents,
            &parent_rows,
            &children,
            &child_classes,
            cfg,
        )?);
    }
    Ok(mean_of(g, &levels))
}

/// Inter-modal terms: deepest label over image, deepest label over DNA and
/// DNA over image, with the deepest-label class deciding positives.
pub fn sel_inter_graph(g: &mut Graph, batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<Var, LossError> {
    let deepest = batch.deepest_rows()?;
    let labels = batch.labels()?.gather(g, &deepest);
    let t_i = entailment_loss_graph(g, &labels, &deepest, &batch.image, &deepest, cfg)?;
    let t_d = entailment_loss_graph(g, &labels, &deepest, &batch.dna, &deepest, cfg)?;
    let d_i = entailment_loss_graph(g, &batch.dna, &deepest, &batch.image, &deepest, cfg)?;
    Ok(mean_of(g, &[t_i, t_d, d_i]).expect("three terms"))
}

/// Single-level entailment from the deepest label to the image, and to the
/// DNA when `single_entailment_dna` is set.
pub fn single_entailment_graph(g: &mut Graph, batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<Var, LossError> {
    let deepest = batch.deepest_rows()?;
    let labels = batch.labels()?.gather(g, &deepest);
    let mut terms = vec![entailment_loss_graph(
        g,
        &labels,
        &deepest,
        &batch.image,
        &deepest,
        cfg,
    )?];
    if cfg.single_entailment_dna {
        terms.push(entailment_loss_graph(g, &labels, &deepest, &batch.dna, &deepest, cfg)?);
    }
    Ok(mean_of(g, &terms).expect("at least one term"))
}

/// Symmetric in-batch cross-entropy between matching rows of `a` and `b`.
/// Hyperbolic logits are `-d/tau`; Euclidean logits are cosine similarity
/// over `tau`. `log_temperature` is a `1 x 1` node.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    a: &Points,
    b: &Points,
    log_temperature: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let n = a.len(g);
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_len(n, b.len(g))?;
    let similarity = match cfg.geometry {
        Geometry::Lorentz => {
            let d = geometry::pairwise_distance(g, a, b, &cfg.manifold);
            g.neg(d)
        }
        Geometry::Euclidean => {
            let ua = geometry::normalize_rows(g, a.space, cfg.manifold.eps());
            let ub = geometry::normalize_rows(g, b.space, cfg.manifold.eps());
            g.matmul_nt(ua, ub)
        }
    };
    let neg_log_t = g.neg(log_temperature);
    let inv_t = g.exp(neg_log_t);
    let logits = g.mul(similarity, inv_t);
    let targets: Vec<usize> = (0..n).collect();
    Ok(symmetric_ce(g, logits, &targets))
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    let (&first, rest) = terms.split_first()?;
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t);
    }
    Some(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Nodes of the weighted objective. Each component is already multiplied by
/// its weight, and `total` is their sum in field order.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub contrastive: Option<Var>,
    pub entailment: Option<Var>,
    pub sel_intra: Option<Var>,
    pub sel_inter: Option<Var>,
}

/// Weighted component values; absent components were not part of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: Option<f64>,
    pub entailment: Option<f64>,
    pub sel_intra: Option<f64>,
    pub sel_inter: Option<f64>,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item());
        LossBreakdown {
            total: g.value(self.total).item(),
            contrastive: v(self.contrastive),
            entailment: v(self.entailment),
            sel_intra: v(self.sel_intra),
            sel_inter: v(self.sel_inter),
        }
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components().iter().all(|(_, v)| v.is_none_or(f64::is_finite))
    }

    pub fn components(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("contrastive", self.contrastive),
            ("entailment", self.entailment),
            ("sel_intra", self.sel_intra),
            ("sel_inter", self.sel_inter),
        ]
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "total={}", self.total)?;
        for (name, v) in self.components() {
            if let Some(v) = v {
                write!(f, " {name}={v}")?;
            }
        }
        Ok(())
    }
}

/// The configured objective. Contrastive pair losses are averaged over the
/// enabled modality pairs before weighting.
pub fn total_loss(
    g: &mut Graph,
    batch: &BatchEmbeddings,
    log_temperature: Var,
    cfg: &LossConfig,
) -> Result<LossNodes, LossError> {
    cfg.validate()?;
    let n = batch.image.len(g);
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_len(n, batch.dna.len(g))?;
    check_len(n, batch.label_rows.len())?;

    let contrastive = if cfg.has_contrastive() {
        let mut pairs = Vec::new();
        if cfg.use_image_dna_contrastive {
            pairs.push(contrastive_loss_graph(
                g,
                &batch.image,
                &batch.dna,
                log_temperature,
                cfg,
            )?);
        }
        if cfg.contrastive_text {
            let deepest = batch.deepest_rows()?;
            let text = batch.labels()?.gather(g, &deepest);
            pairs.push(contrastive_loss_graph(g, &batch.image, &text, log_temperature, cfg)?);
            pairs.push(contrastive_loss_graph(g, &batch.dna, &text, log_temperature, cfg)?);
        }
        if cfg.use_full_text {
            let ft = batch
                .full_text
                .ok_or_else(|| LossError::InvalidConfig("full-text embeddings are required".into()))?;
            pairs.push(contrastive_loss_graph(g, &batch.image, &ft, log_temperature, cfg)?);
            pairs.push(contrastive_loss_graph(g, &batch.dna, &ft, log_temperature, cfg)?);
        }
        let cl = mean_of(g, &pairs).expect("contrastive pairs enabled");
        Some(g.scale(cl, cfg.weight_cl))
    } else {
        None
    };

    let (entailment, sel_intra, sel_inter) = match cfg.entailment {
        Entailment::None => (None, None, None),
        Entailment::Single => {
            let el = single_entailment_graph(g, batch, cfg)?;
            (Some(g.scale(el, cfg.weight_sel)), None, None)
        }
        Entailment::Stacked => {
            let intra = match sel_intra_graph(g, batch, cfg)? {
                Some(v) => v,
                None => g.scalar(0.0),
            };
            let inter = sel_inter_graph(g, batch, cfg)?;
            (
                None,
                Some(g.scale(intra, cfg.weight_sel)),
                Some(g.scale(inter, cfg.weight_sel)),
            )
        }
    };

    let parts: Vec<Var> = [contrastive, entailment, sel_intra, sel_inter]
        .into_iter()
        .flatten()
        .collect();
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p);
    }
    Ok(LossNodes {
        total,
        contrastive,
        entailment,
        sel_intra,
        sel_inter,
    })
}

#[cfg(test)]
mod tests;
