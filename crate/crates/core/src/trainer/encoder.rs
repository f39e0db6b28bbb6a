use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{stack_rows, TrainConfig, TrainError};
use crate::dataset::{Batch, Dataset};
use crate::evaluator::{Modality, PointSet};
use crate::losses::{geometry, BatchEmbeddings, Geometry, Points, RANKS};
use crate::manifold::{exp_map_origin, TangentVector};
use crate::numerics::{Gradients, Graph, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamSet { entries }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_index(&self, k: usize) -> &Tensor {
        &self.entries[k].1
    }

    pub fn get_index_mut(&mut self, k: usize) -> &mut Tensor {
        &mut self.entries[k].1
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Weight matrices receive weight decay; biases and the temperature do not.
    pub fn is_weight(name: &str) -> bool {
        name.ends_with(".w") || name.ends_with(".w0")
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    /// Places every parameter on `g` as a leaf.
    pub fn attach(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), g.leaf(t.clone())))
                .collect(),
        }
    }
}

/// Graph leaves of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    /// Wraps leaves created elsewhere, in the order of `names`.
    pub fn from_parts(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        ParamVars {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn log_temperature(&self) -> Var {
        self.get("log_temperature").expect("log_temperature parameter")
    }

    /// Gradients shaped like `params`, zero where a parameter was unused.
    pub fn gradients(&self, grads: &Gradients, params: &ParamSet) -> ParamSet {
        ParamSet {
            entries: self
                .vars
                .iter()
                .zip(params.iter())
                .map(|((n, v), (_, t))| (n.clone(), grads.get_or_zeros(*v, t.shape())))
                .collect(),
        }
    }
}

fn modalities(cfg: &TrainConfig) -> Vec<&'static str> {
    let mut m = vec!["image", "dna"];
    if cfg.loss.uses_labels() || cfg.loss.use_full_text {
        m.push("text");
    }
    m
}

/// Draws initial parameters: weights `N(0, init_scale^2 / fan_in)`, zero
/// biases, and the log of the initial temperature.
pub fn init_params(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut entries = Vec::new();
    let mut dense = |entries: &mut Vec<(String, Tensor)>, name: String, fan_in: usize, fan_out: usize| {
        let std = cfg.init_scale / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        entries.push((name, Tensor::new(fan_in, fan_out, w)));
    };
    for m in modalities(cfg) {
        let mut width = cfg.d_in;
        if let Some(h) = cfg.hidden {
            dense(&mut entries, format!("{m}.w0"), width, h);
            entries.push((format!("{m}.b0"), Tensor::zeros(1, h)));
            width = h;
        }
        dense(&mut entries, format!("{m}.w"), width, cfg.d);
        entries.push((format!("{m}.b"), Tensor::zeros(1, cfg.d)));
    }
    entries.push(("log_temperature".into(), Tensor::scalar(cfg.loss.init_temperature.ln())));
    ParamSet { entries }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bag of whitespace tokens hashed into `width` signed buckets (two per
/// token), scaled to unit length.
pub fn featurize_text(text: &str, width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    for token in text.split_whitespace() {
        let h1 = fnv1a(token.as_bytes());
        let h2 = mix(h1);
        for (h, sign_bits) in [(h1, h2), (h2, h1)] {
            let sign = if sign_bits >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % width as u64) as usize] += sign;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

type LabelRows = Vec<[Option<usize>; RANKS]>;

/// Distinct (rank, class) labels of a batch in first-seen order, their
/// texts, and each specimen's row into that list per rank.
pub fn label_layout(dataset: &Dataset, batch: &Batch) -> (Vec<(usize, usize, String)>, LabelRows) {
    let mut rows: HashMap<(usize, usize), usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut per_specimen = Vec::with_capacity(batch.indices.len());
    for (&i, classes) in batch.indices.iter().zip(&batch.classes) {
        let rec = &dataset.records[i];
        let mut out = [None; RANKS];
        for r in 0..RANKS {
            if let Some(c) = classes[r] {
                let next = labels.len();
                let row = *rows.entry((r, c)).or_insert(next);
                if row == next {
                    labels.push((r, c, rec.rank_text(r).expect("rank present")));
                }
                out[r] = Some(row);
            }
        }
        per_specimen.push(out);
    }
    (labels, per_specimen)
}

fn encode_graph(g: &mut Graph, vars: &ParamVars, modality: &str, x: Tensor, cfg: &TrainConfig) -> Points {
    let p = |name: &str| vars.get(&format!("{modality}.{name}")).expect("encoder parameter");
    let mut h = g.constant(x);
    if cfg.hidden.is_some() {
        let z = g.matmul(h, p("w0"));
        let z = g.add(z, p("b0"));
        h = g.relu(z);
    }
    let z = g.matmul(h, p("w"));
    let tangent = g.add(z, p("b"));
    match cfg.loss.geometry {
        Geometry::Lorentz => geometry::exp_map_origin(g, tangent, &cfg.loss.manifold),
        Geometry::Euclidean => Points::euclidean(tangent),
    }
}

#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub embeddings: BatchEmbeddings,
    /// `(rank, class)` of each row of the label embeddings.
    pub label_classes: Vec<(usize, usize)>,
}

/// Embeds one batch on `g`: image and DNA features through their encoders,
/// each distinct rank label (and the full text when enabled) through the
/// text encoder, then the exponential map.
pub fn encode_batch(
    g: &mut Graph,
    vars: &ParamVars,
    dataset: &Dataset,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<EncodedBatch, TrainError> {
    let (wi, wd) = dataset.feature_widths();
    for (what, found) in [("img_feat", wi), ("dna_feat", wd)] {
        if found != cfg.d_in {
            return Err(TrainError::WidthMismatch {
                what,
                expected: cfg.d_in,
                found,
            });
        }
    }
    let recs: Vec<_> = batch.indices.iter().map(|&i| &dataset.records[i]).collect();
    let img = stack_rows(recs.iter().map(|r| r.img_feat.as_slice()), cfg.d_in);
    let dna = stack_rows(recs.iter().map(|r| r.dna_feat.as_slice()), cfg.d_in);
    let image = encode_graph(g, vars, "image", img, cfg);
    let dna = encode_graph(g, vars, "dna", dna, cfg);

    let (label_list, label_rows) = label_layout(dataset, batch);
    let labels = if cfg.loss.uses_labels() && !label_list.is_empty() {
        let feats: Vec<Vec<f64>> = label_list.iter().map(|(_, _, t)| featurize_text(t, cfg.d_in)).collect();
        Some(encode_graph(g, vars, "text", Tensor::from_rows(&feats), cfg))
    } else {
        None
    };
    let full_text = if cfg.loss.use_full_text {
        let feats = recs
            .iter()
            .map(|r| r.full_text().map(|t| featurize_text(&t, cfg.d_in)))
            .collect::<Result<Vec<_>, _>>()?;
        Some(encode_graph(g, vars, "text", Tensor::from_rows(&feats), cfg))
    } else {
        None
    };
    Ok(EncodedBatch {
        embeddings: BatchEmbeddings {
            image,
            dna,
            labels,
            label_rows,
            full_text,
        },
        label_classes: label_list.into_iter().map(|(r, c, _)| (r, c)).collect(),
    })
}

/// Tangent vectors of an encoder for the rows of `x`, without a graph.
fn encode_plain(params: &ParamSet, modality: &str, x: &Tensor) -> Tensor {
    let p = |name: &str| params.get(&format!("{modality}.{name}")).expect("encoder parameter");
    let affine = |h: &Tensor, w: &Tensor, b: &Tensor| {
        let mut z = h.matmul(w);
        let cols = z.cols();
        for (k, v) in z.data_mut().iter_mut().enumerate() {
            *v += b.data()[k % cols];
        }
        z
    };
    let mut h = x.clone();
    if params.get(&format!("{modality}.w0")).is_some() {
        h = affine(&h, p("w0"), p("b0")).map(|v| v.max(0.0));
    }
    affine(&h, p("w"), p("b"))
}

fn to_points(tangent: &Tensor, cfg: &TrainConfig) -> Result<PointSet, TrainError> {
    let rows = (0..tangent.rows()).map(|r| tangent.row(r).to_vec());
    match cfg.loss.geometry {
        Geometry::Lorentz => Ok(PointSet::Lorentz(
            rows.map(|v| exp_map_origin(&TangentVector::new(v), &cfg.loss.manifold))
                .collect::<Result<_, _>>()
                .map_err(crate::losses::LossError::from)?,
        )),
        Geometry::Euclidean => Ok(PointSet::Euclidean(rows.collect())),
    }
}

/// Image and DNA embeddings of a set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub image: PointSet,
    pub dna: PointSet,
}

impl Embeddings {
    pub fn modality(&self, m: Modality) -> &PointSet {
        match m {
            Modality::Image => &self.image,
            Modality::Dna => &self.dna,
        }
    }
}

/// Embeds records outside the graph, for evaluation and export.
pub fn embed_records(
    params: &ParamSet,
    dataset: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<Embeddings, TrainError> {
    let recs: Vec<_> = idx.iter().map(|&i| &dataset.records[i]).collect();
    let img = stack_rows(recs.iter().map(|r| r.img_feat.as_slice()), cfg.d_in);
    let dna = stack_rows(recs.iter().map(|r| r.dna_feat.as_slice()), cfg.d_in);
    Ok(Embeddings {
        image: to_points(&encode_plain(params, "image", &img), cfg)?,
        dna: to_points(&encode_plain(params, "dna", &dna), cfg)?,
    })
}

/// Embeds label texts with the text encoder, outside the graph.
pub fn embed_texts(params: &ParamSet, texts: &[String], cfg: &TrainConfig) -> Result<PointSet, TrainError> {
    let feats: Vec<Vec<f64>> = texts.iter().map(|t| featurize_text(t, cfg.d_in)).collect();
    let x = stack_rows(feats.iter().map(Vec::as_slice), cfg.d_in);
    to_points(&encode_plain(params, "text", &x), cfg)
}
