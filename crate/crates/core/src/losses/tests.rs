use super::*;
use crate::manifold::{exterior_angle, geodesic_distance, half_aperture, ManifoldConfig, TangentVector};
use crate::numerics::{check_gradient, Tensor};
use approx::{assert_abs_diff_eq, assert_relative_eq};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn point(cfg: &ManifoldConfig, v: &[f64]) -> LorentzPoint {
    manifold::exp_map_origin(&TangentVector::new(v.to_vec()), cfg).unwrap()
}

#[test]
fn pair_term_examples() {
    assert_eq!(pair_term(0.4, 0.6, 0.1, Polarity::Positive), 0.0);
    assert_abs_diff_eq!(pair_term(0.9, 0.5, 0.1, Polarity::Positive), 0.4, epsilon = 1e-12);
    assert_abs_diff_eq!(pair_term(0.4, 0.5, 0.2, Polarity::Negative), 0.3, epsilon = 1e-12);
}

#[test]
fn pair_loss_on_points() {
    let cfg = LossConfig::preset(Method::Sel);
    let m = &cfg.manifold;
    let parent = point(m, &[1.0, 0.0]);
    let inside = point(m, &[2.0, 0.0]);
    let behind = point(m, &[-1.0, 0.0]);
    assert_eq!(
        entailment_pair_loss(&parent, &inside, &cfg, Polarity::Positive).unwrap(),
        0.0
    );
    let aper = half_aperture(&parent, m).unwrap();
    let ext = exterior_angle(&parent, &behind, m).unwrap();
    assert_abs_diff_eq!(
        entailment_pair_loss(&parent, &behind, &cfg, Polarity::Positive).unwrap(),
        ext - aper,
        epsilon = 1e-12
    );
    assert_eq!(
        entailment_pair_loss(&parent, &behind, &cfg, Polarity::Negative).unwrap(),
        0.0
    );
    assert_abs_diff_eq!(
        entailment_pair_loss(&parent, &inside, &cfg, Polarity::Negative).unwrap(),
        aper + cfg.margin,
        epsilon = 1e-4
    );
    let origin = LorentzPoint::origin(2, m);
    assert_eq!(
        entailment_pair_loss(&origin, &inside, &cfg, Polarity::Positive),
        Err(LossError::Manifold(ManifoldError::ApexAtOrigin))
    );
}

#[test]
fn combine_examples() {
    assert_abs_diff_eq!(
        combine_entailment(&[0.0, 0.4], &[], ElMode::Pos).unwrap(),
        0.2,
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(
        combine_entailment(&[0.2], &[0.3], ElMode::PosNeg).unwrap(),
        0.25,
        epsilon = 1e-12
    );
    assert_eq!(combine_entailment(&[0.0, 0.0], &[0.0], ElMode::PosNeg).unwrap(), 0.0);
    assert_abs_diff_eq!(
        combine_entailment(&[0.4], &[], ElMode::PosNeg).unwrap(),
        0.2,
        epsilon = 1e-12
    );
    assert!(combine_entailment(&[], &[0.3], ElMode::PosNeg).is_err());
}

#[test]
fn sel_level_examples() {
    assert_abs_diff_eq!(
        sel_intra_from_levels(&[Some(0.1), Some(0.2), Some(0.3)]),
        0.2,
        epsilon = 1e-12
    );
    assert_eq!(sel_intra_from_levels(&[None, None, None]), 0.0);
    assert_eq!(sel_intra_from_levels(&[Some(0.7), None, None]), 0.7);
    assert_abs_diff_eq!(sel_inter_from_components([0.3, 0.6, 0.0]), 0.3, epsilon = 1e-12);
    assert_abs_diff_eq!(sel_inter_from_components([0.5; 3]), 0.5, epsilon = 1e-12);
}

#[test]
fn contrastive_examples() {
    let cfg = LossConfig::preset(Method::Cl);
    let m = &cfg.manifold;
    let a = point(m, &[0.3, -0.2]);
    let b = point(m, &[-1.0, 0.5]);
    assert_abs_diff_eq!(contrastive_loss(&[a], &[b], 0.07, &cfg).unwrap(), 0.0, epsilon = 1e-12);

    let x1 = LorentzPoint::origin(2, m);
    let x2 = point(m, &[2.0, 0.0]);
    let pts = [x1, x2];
    assert_abs_diff_eq!(geodesic_distance(&pts[0], &pts[1], m).unwrap(), 2.0, epsilon = 1e-12);
    let l1 = contrastive_loss(&pts, &pts, 1.0, &cfg).unwrap();
    assert_abs_diff_eq!(l1, (1.0 + (-2.0f64).exp()).ln(), epsilon = 1e-9);
    assert_abs_diff_eq!(l1, 0.1269, epsilon = 1e-4);
    let l2 = contrastive_loss(&pts, &pts, 0.07, &cfg).unwrap();
    assert_relative_eq!(l2, 3.9058e-13, max_relative = 1e-3);
    assert!(contrastive_loss(&[], &[], 1.0, &cfg).is_err());
}

/// A random batch of taxonomy-labelled specimens with embeddings given as
/// tangent vectors.
#[derive(Debug, Clone)]
struct RandomBatch {
    label_rows: Vec<[Option<usize>; RANKS]>,
    label_tangent: Tensor,
    image_tangent: Tensor,
    dna_tangent: Tensor,
    full_text_tangent: Tensor,
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> RandomBatch {
    let mut keys: BTreeMap<(usize, String), usize> = BTreeMap::new();
    let mut key_order = Vec::new();
    let mut label_rows = Vec::with_capacity(n);
    for _ in 0..n {
        let path: Vec<usize> = (0..RANKS).map(|_| rng.random_range(0..2)).collect();
        let mut present = [true; RANKS];
        for (r, p) in present.iter_mut().enumerate() {
            *p = rng.random::<f64>() > [0.05, 0.1, 0.15, 0.25][r];
        }
        if !present.iter().any(|&p| p) {
            present[0] = true;
        }
        let mut rows = [None; RANKS];
        for r in 0..RANKS {
            if present[r] {
                let key = (r, format!("{:?}", &path[..=r]));
                let next = keys.len();
                let row = *keys.entry(key.clone()).or_insert_with(|| {
                    key_order.push(key.0);
                    next
                });
                rows[r] = Some(row);
            }
        }
        label_rows.push(rows);
    }
    let m = keys.len();
    let mut label = Vec::with_capacity(m * d);
    for &rank in &key_order {
        // Deeper labels sit further out, as after training.
        let scale = 0.6 + 0.4 * rank as f64;
        label.extend((0..d).map(|_| rng.random_range(-scale..scale)));
    }
    let mut tangent = |rows: usize| Tensor::new(rows, d, (0..rows * d).map(|_| rng.random_range(-1.5..1.5)).collect());
    RandomBatch {
        label_rows,
        label_tangent: Tensor::new(m, d, label),
        image_tangent: tangent(n),
        dna_tangent: tangent(n),
        full_text_tangent: tangent(n),
    }
}

struct Leaves {
    labels: Var,
    image: Var,
    dna: Var,
    full_text: Var,
    log_t: Var,
}

fn params_of(b: &RandomBatch, log_t: f64) -> Vec<(String, Tensor)> {
    vec![
        ("labels".into(), b.label_tangent.clone()),
        ("image".into(), b.image_tangent.clone()),
        ("dna".into(), b.dna_tangent.clone()),
        ("full_text".into(), b.full_text_tangent.clone()),
        ("log_temperature".into(), Tensor::scalar(log_t)),
    ]
}

fn embed(g: &mut Graph, leaves: &Leaves, rows: &[[Option<usize>; RANKS]], cfg: &LossConfig) -> BatchEmbeddings {
    let lift = |g: &mut Graph, v: Var| match cfg.geometry {
        Geometry::Lorentz => geometry::exp_map_origin(g, v, &cfg.manifold),
        Geometry::Euclidean => Points::euclidean(v),
    };
    BatchEmbeddings {
        image: lift(g, leaves.image),
        dna: lift(g, leaves.dna),
        labels: Some(lift(g, leaves.labels)),
        label_rows: rows.to_vec(),
        full_text: Some(lift(g, leaves.full_text)),
    }
}

fn build(g: &mut Graph, b: &RandomBatch, log_t: f64, cfg: &LossConfig) -> (Leaves, BatchEmbeddings) {
    let leaves = Leaves {
        labels: g.leaf(b.label_tangent.clone()),
        image: g.leaf(b.image_tangent.clone()),
        dna: g.leaf(b.dna_tangent.clone()),
        full_text: g.leaf(b.full_text_tangent.clone()),
        log_t: g.leaf(Tensor::scalar(log_t)),
    };
    let emb = embed(g, &leaves, &b.label_rows, cfg);
    (leaves, emb)
}

fn leaves_from(p: &[Var]) -> Leaves {
    Leaves {
        labels: p[0],
        image: p[1],
        dna: p[2],
        full_text: p[3],
        log_t: p[4],
    }
}

fn lift_rows(cfg: &ManifoldConfig, t: &Tensor) -> Vec<LorentzPoint> {
    (0..t.rows()).map(|r| point(cfg, t.row(r))).collect()
}

// Reference implementations: plain double loops over the pointwise geometry.

fn naive_entailment(parents: &[(LorentzPoint, usize)], children: &[(LorentzPoint, usize)], cfg: &LossConfig) -> f64 {
    let m = &cfg.manifold;
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for (p, pc) in parents {
        let aper = half_aperture(p, m).unwrap();
        for (c, cc) in children {
            let ext = exterior_angle(p, c, m).unwrap();
            if pc == cc {
                pos += (ext - aper).max(0.0);
                n_pos += 1;
            } else {
                neg += (aper - ext + cfg.margin).max(0.0);
                n_neg += 1;
            }
        }
    }
    let lp = pos / n_pos as f64;
    match cfg.el_mode {
        ElMode::PosNeg => 0.5 * (lp + if n_neg == 0 { 0.0 } else { neg / n_neg as f64 }),
        _ => lp,
    }
}

fn naive_sel_intra(b: &RandomBatch, cfg: &LossConfig) -> f64 {
    let labels = lift_rows(&cfg.manifold, &b.label_tangent);
    let mut levels = Vec::new();
    for r in 1..RANKS {
        let mut parents = Vec::new();
        let mut children = Vec::new();
        for rows in &b.label_rows {
            if let Some(p) = rows[r - 1] {
                parents.push((labels[p].clone(), p));
                if let Some(c) = rows[r] {
                    children.push((labels[c].clone(), p));
                }
            }
        }
        if !children.is_empty() {
            levels.push(naive_entailment(&parents, &children, cfg));
        }
    }
    if levels.is_empty() {
        0.0
    } else {
        levels.iter().sum::<f64>() / levels.len() as f64
    }
}

fn deepest(rows: &[[Option<usize>; RANKS]]) -> Vec<usize> {
    rows.iter()
        .map(|r| r.iter().rev().flatten().next().copied().unwrap())
        .collect()
}

fn naive_sel_inter(b: &RandomBatch, cfg: &LossConfig) -> f64 {
    let m = &cfg.manifold;
    let labels = lift_rows(m, &b.label_tangent);
    let image = lift_rows(m, &b.image_tangent);
    let dna = lift_rows(m, &b.dna_tangent);
    let deep = deepest(&b.label_rows);
    let with = |pts: &[LorentzPoint]| -> Vec<(LorentzPoint, usize)> {
        pts.iter().cloned().zip(deep.iter().copied()).collect()
    };
    let text: Vec<(LorentzPoint, usize)> = deep.iter().map(|&k| (labels[k].clone(), k)).collect();
    (naive_entailment(&text, &with(&image), cfg)
        + naive_entailment(&text, &with(&dna), cfg)
        + naive_entailment(&with(&dna), &with(&image), cfg))
        / 3.0
}

fn naive_contrastive(a: &[LorentzPoint], b: &[LorentzPoint], tau: f64, cfg: &ManifoldConfig) -> f64 {
    let n = a.len();
    let logit = |i: usize, j: usize| -geodesic_distance(&a[i], &b[j], cfg).unwrap() / tau;
    let mut row = 0.0;
    let mut col = 0.0;
    for i in 0..n {
        let lse_r = (0..n).map(|j| logit(i, j).exp()).sum::<f64>().ln();
        let lse_c = (0..n).map(|j| logit(j, i).exp()).sum::<f64>().ln();
        row += lse_r - logit(i, i);
        col += lse_c - logit(i, i);
    }
    0.5 * (row + col) / n as f64
}

#[test]
fn batched_losses_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..30 {
        let n = rng.random_range(2..=32);
        let b = random_batch(&mut rng, n, 3);
        let tau = rng.random_range(0.3..2.0);
        for mode in [ElMode::Pos, ElMode::PosNeg] {
            let cfg = LossConfig {
                el_mode: mode,
                ..LossConfig::preset(Method::SelCl)
            };
            let mut g = Graph::new();
            let (leaves, emb) = build(&mut g, &b, f64::ln(tau), &cfg);
            let intra = sel_intra_graph(&mut g, &emb, &cfg)
                .unwrap()
                .map_or(0.0, |v| g.value(v).item());
            assert_abs_diff_eq!(intra, naive_sel_intra(&b, &cfg), epsilon = 1e-6);
            let inter = sel_inter_graph(&mut g, &emb, &cfg).unwrap();
            assert_abs_diff_eq!(g.value(inter).item(), naive_sel_inter(&b, &cfg), epsilon = 1e-6);

            let cl = contrastive_loss_graph(&mut g, &emb.image, &emb.dna, leaves.log_t, &cfg).unwrap();
            let m = &cfg.manifold;
            let expect = naive_contrastive(&lift_rows(m, &b.image_tangent), &lift_rows(m, &b.dna_tangent), tau, m);
            assert_abs_diff_eq!(g.value(cl).item(), expect, epsilon = 1e-6);
            assert!(intra >= 0.0 && g.value(inter).item() >= 0.0, "trial {trial}");
        }
    }
}

#[test]
fn pointwise_entailment_loss_matches_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = LossConfig::preset(Method::Sel);
    let b = random_batch(&mut rng, 12, 4);
    let deep = deepest(&b.label_rows);
    let labels = lift_rows(&cfg.manifold, &b.label_tangent);
    let parents: Vec<LorentzPoint> = deep.iter().map(|&k| labels[k].clone()).collect();
    let image = lift_rows(&cfg.manifold, &b.image_tangent);
    let pointwise = entailment_loss(&parents, &deep, &image, &deep, &cfg).unwrap();

    let mut g = Graph::new();
    let (_, emb) = build(&mut g, &b, 0.0, &cfg);
    let text = emb.labels.unwrap().gather(&mut g, &deep);
    let v = entailment_loss_graph(&mut g, &text, &deep, &emb.image, &deep, &cfg).unwrap();
    assert_abs_diff_eq!(g.value(v).item(), pointwise, epsilon = 1e-9);
}

#[test]
fn entailment_needs_positive_pairs_and_a_cone() {
    let cfg = LossConfig::preset(Method::Sel);
    let mut g = Graph::new();
    let pv = g.leaf(Tensor::from_rows(&[[1.0, 0.0]]));
    let cv = g.leaf(Tensor::from_rows(&[[0.5, 0.5]]));
    let p = geometry::exp_map_origin(&mut g, pv, &cfg.manifold);
    let c = geometry::exp_map_origin(&mut g, cv, &cfg.manifold);
    assert_eq!(
        entailment_loss_graph(&mut g, &p, &[0], &c, &[1], &cfg),
        Err(LossError::NoPositivePairs("entailment"))
    );
    let ov = g.leaf(Tensor::from_rows(&[[0.0, 0.0]]));
    let o = geometry::exp_map_origin(&mut g, ov, &cfg.manifold);
    assert_eq!(
        entailment_loss_graph(&mut g, &o, &[0], &c, &[0], &cfg),
        Err(LossError::ApexAtOrigin)
    );
}

#[test]
fn satisfied_configurations_give_zero() {
    let cfg = LossConfig::preset(Method::Sel);
    let m = &cfg.manifold;
    // Children on the parents' axes further out; negatives on the far side.
    let parents = vec![(point(m, &[1.0, 0.0]), 0), (point(m, &[0.0, 1.0]), 1)];
    let children = vec![(point(m, &[2.0, 0.0]), 0), (point(m, &[0.0, 2.5]), 1)];
    let p: Vec<LorentzPoint> = parents.iter().map(|x| x.0.clone()).collect();
    let c: Vec<LorentzPoint> = children.iter().map(|x| x.0.clone()).collect();
    let loss = entailment_loss(&p, &[0, 1], &c, &[0, 1], &cfg).unwrap();
    assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-6);
    assert_abs_diff_eq!(naive_entailment(&parents, &children, &cfg), 0.0, epsilon = 1e-6);
}

#[test]
fn deepest_label_falls_back_to_genus() {
    let cfg = LossConfig::preset(Method::Sel);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut b = random_batch(&mut rng, 6, 3);
    for rows in &mut b.label_rows {
        *rows = [Some(0), Some(1), Some(2), Some(3)];
    }
    b.label_rows[0][3] = None;
    b.label_tangent = Tensor::new(4, 3, (0..12).map(|i| 0.2 * (i % 5) as f64 + 0.3).collect());
    assert_eq!(deepest(&b.label_rows)[0], 2);
    let mut g = Graph::new();
    let (_, emb) = build(&mut g, &b, 0.0, &cfg);
    let v = sel_inter_graph(&mut g, &emb, &cfg).unwrap();
    assert_abs_diff_eq!(g.value(v).item(), naive_sel_inter(&b, &cfg), epsilon = 1e-9);

    b.label_rows[1] = [None; RANKS];
    let mut g = Graph::new();
    let (_, emb) = build(&mut g, &b, 0.0, &cfg);
    assert_eq!(sel_inter_graph(&mut g, &emb, &cfg), Err(LossError::NoLabel(1)));
}

#[test]
fn sel_intra_degenerate_levels() {
    let cfg = LossConfig::preset(Method::Sel);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut b = random_batch(&mut rng, 5, 3);
    for rows in &mut b.label_rows {
        *rows = [Some(0), None, None, None];
    }
    let mut g = Graph::new();
    let (_, emb) = build(&mut g, &b, 0.0, &cfg);
    assert!(sel_intra_graph(&mut g, &emb, &cfg).unwrap().is_none());

    // Order and family only: the single family-level term.
    for rows in &mut b.label_rows {
        *rows = [Some(0), Some(1), None, None];
    }
    let mut g = Graph::new();
    let (_, emb) = build(&mut g, &b, 0.0, &cfg);
    let v = sel_intra_graph(&mut g, &emb, &cfg).unwrap().unwrap();
    let labels = emb.labels.unwrap();
    let parents = labels.gather(&mut g, &[0; 5]);
    let children = labels.gather(&mut g, &[1; 5]);
    let single = entailment_loss_graph(&mut g, &parents, &[0; 5], &children, &[0; 5], &cfg).unwrap();
    assert_eq!(g.value(v).item(), g.value(single).item());
}

fn permuted(b: &RandomBatch, perm: &[usize]) -> RandomBatch {
    let take = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>());
    RandomBatch {
        label_rows: perm.iter().map(|&i| b.label_rows[i]).collect(),
        label_tangent: b.label_tangent.clone(),
        image_tangent: take(&b.image_tangent),
        dna_tangent: take(&b.dna_tangent),
        full_text_tangent: take(&b.full_text_tangent),
    }
}

#[test]
fn losses_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for method in Method::ALL {
        let cfg = LossConfig::preset(method);
        let b = random_batch(&mut rng, 10, 3);
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(&mut rng);
        let pb = permuted(&b, &perm);
        let value = |b: &RandomBatch| {
            let mut g = Graph::new();
            let (leaves, emb) = build(&mut g, b, f64::ln(0.5), &cfg);
            let nodes = total_loss(&mut g, &emb, leaves.log_t, &cfg).unwrap();
            nodes.breakdown(&g)
        };
        let (x, y) = (value(&b), value(&pb));
        assert_abs_diff_eq!(x.total, y.total, epsilon = 1e-10);
        for ((_, a), (_, b)) in x.components().iter().zip(y.components()) {
            assert_eq!(a.is_some(), b.is_some());
            assert_abs_diff_eq!(a.unwrap_or(0.0), b.unwrap_or(0.0), epsilon = 1e-10);
        }
    }
}

#[test]
fn total_loss_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let b = random_batch(&mut rng, 8, 3);
    let run = |cfg: &LossConfig| {
        let mut g = Graph::new();
        let (leaves, emb) = build(&mut g, &b, f64::ln(0.07), cfg);
        total_loss(&mut g, &emb, leaves.log_t, cfg).unwrap().breakdown(&g)
    };

    let sel = run(&LossConfig::preset(Method::Sel));
    assert_eq!(sel.total, sel.sel_intra.unwrap() + sel.sel_inter.unwrap());
    assert!(sel.contrastive.is_none() && sel.entailment.is_none());

    let cl = run(&LossConfig::preset(Method::Cl));
    assert!(cl.entailment.is_none() && cl.sel_intra.is_none() && cl.sel_inter.is_none());
    assert_eq!(cl.total, cl.contrastive.unwrap());

    let el = run(&LossConfig::preset(Method::ElCl));
    assert_eq!(el.total, el.contrastive.unwrap() + el.entailment.unwrap());

    let mut weighted = LossConfig::preset(Method::SelCl);
    weighted.weight_cl = 2.0;
    weighted.weight_sel = 0.5;
    let plain = run(&LossConfig::preset(Method::SelCl));
    let w = run(&weighted);
    assert_abs_diff_eq!(
        w.contrastive.unwrap(),
        2.0 * plain.contrastive.unwrap(),
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(w.sel_intra.unwrap(), 0.5 * plain.sel_intra.unwrap(), epsilon = 1e-12);
    assert_eq!(
        w.total,
        w.contrastive.unwrap() + w.sel_intra.unwrap() + w.sel_inter.unwrap()
    );
    assert_abs_diff_eq!(
        plain.total,
        plain.contrastive.unwrap() + (plain.sel_intra.unwrap() + plain.sel_inter.unwrap()),
        epsilon = 1e-12
    );
    for bd in [sel, cl, el, plain, w] {
        assert!(bd.total >= 0.0);
    }
}

#[test]
fn every_method_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for method in Method::ALL {
        let cfg = LossConfig::preset(method);
        for _ in 0..3 {
            let b = random_batch(&mut rng, 6, 3);
            let params = params_of(&b, f64::ln(rng.random_range(0.2..1.0)));
            let report = check_gradient(
                |g, p| {
                    let leaves = leaves_from(p);
                    let emb = embed(g, &leaves, &b.label_rows, &cfg);
                    total_loss(g, &emb, leaves.log_t, &cfg).unwrap().total
                },
                &params,
                1e-6,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "{}: {report:?}", method.name());
        }
    }
}

#[test]
fn positive_loss_shrinks_as_child_rotates_onto_axis() {
    let cfg = LossConfig::preset(Method::Sel);
    let m = &cfg.manifold;
    let parent = point(m, &[1.2, 0.0]);
    let radius = 2.0;
    let mut last = f64::INFINITY;
    for k in 0..=40 {
        let angle = std::f64::consts::PI * (1.0 - k as f64 / 40.0);
        let child = point(m, &[radius * angle.cos(), radius * angle.sin()]);
        let l = entailment_pair_loss(&parent, &child, &cfg, Polarity::Positive).unwrap();
        assert!(l <= last + 1e-12, "step {k}: {l} > {last}");
        last = l;
    }
    assert_eq!(last, 0.0);
}

#[test]
fn euclidean_contrastive_uses_cosine() {
    let cfg = LossConfig::preset(Method::Clibd);
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_rows(&[[2.0, 0.0], [0.0, 3.0]]));
    let b = g.leaf(Tensor::from_rows(&[[5.0, 0.0], [0.0, 0.5]]));
    let lt = g.scalar(0.0);
    let v = contrastive_loss_graph(&mut g, &Points::euclidean(a), &Points::euclidean(b), lt, &cfg).unwrap();
    // cos = 1 on the diagonal, 0 off it.
    assert_abs_diff_eq!(g.value(v).item(), (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
}
