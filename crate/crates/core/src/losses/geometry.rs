//! Differentiable counterparts of the [`crate::manifold`] functions, built
//! on a [`Graph`] and batched over rows.

use crate::manifold::ManifoldConfig;
use crate::numerics::{Graph, Tensor, Var};

/// A batch of embeddings on the graph, one row per item.
///
/// `time` is the `n x 1` time coordinate on the hyperboloid; it is `None`
/// for plain Euclidean vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Points {
    pub time: Option<Var>,
    pub space: Var,
}

impl Points {
    pub fn euclidean(space: Var) -> Self {
        Points { time: None, space }
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.space).0
    }

    pub fn is_empty(&self, g: &Graph) -> bool {
        self.len(g) == 0
    }

    fn time(&self) -> Var {
        self.time.expect("hyperbolic operation on Euclidean points")
    }

    pub fn gather(&self, g: &mut Graph, rows: &[usize]) -> Points {
        Points {
            time: self.time.map(|t| g.gather_rows(t, rows)),
            space: g.gather_rows(self.space, rows),
        }
    }

    /// Coordinates `(time, space...)` of each row, for handing to the
    /// pointwise [`crate::manifold`] functions.
    pub fn coords(&self, g: &Graph) -> Vec<(f64, Vec<f64>)> {
        let space = g.value(self.space);
        (0..space.rows())
            .map(|r| {
                let t = self.time.map_or(0.0, |t| g.value(t).data()[r]);
                (t, space.row(r).to_vec())
            })
            .collect()
    }
}

/// Row-wise exponential map at the origin for tangent vectors `v` (`n x d`).
///
/// `space = v * sinh(sqrt(c)|v|) / (sqrt(c)|v|)`, `time = sqrt(1/c + |space|^2)`.
pub fn exp_map_origin(g: &mut Graph, v: Var, cfg: &ManifoldConfig) -> Points {
    let c = cfg.curvature();
    let sq = g.square(v);
    let norm_sq = g.row_sum(sq);
    let arg = g.scale(norm_sq, c);
    let factor = g.sinhc_sqrt(arg);
    let space = g.mul(v, factor);
    let space_sq = g.square(space);
    let space_norm_sq = g.row_sum(space_sq);
    let shifted = g.offset(space_norm_sq, 1.0 / c);
    let time = g.sqrt(shifted);
    Points {
        time: Some(time),
        space,
    }
}

/// `m x n` matrix of Lorentz inner products between rows of `a` and `b`.
pub fn pairwise_inner(g: &mut Graph, a: &Points, b: &Points) -> Var {
    let ss = g.matmul_nt(a.space, b.space);
    let tt = g.matmul_nt(a.time(), b.time());
    g.sub(ss, tt)
}

/// `n x 1` Lorentz inner products between matching rows.
pub fn rowwise_inner(g: &mut Graph, a: &Points, b: &Points) -> Var {
    let ss = g.mul(a.space, b.space);
    let ss = g.row_sum(ss);
    let tt = g.mul(a.time(), b.time());
    g.sub(ss, tt)
}

/// `m x n` geodesic distances `acosh(-c<a_i, b_j>) / sqrt(c)`.
pub fn pairwise_distance(g: &mut Graph, a: &Points, b: &Points, cfg: &ManifoldConfig) -> Var {
    let inner = pairwise_inner(g, a, b);
    let arg = g.scale(inner, -cfg.curvature());
    let d = g.acosh(arg, cfg.eps());
    g.scale(d, 1.0 / cfg.sqrt_c())
}

/// `n x 1` geodesic distances from the origin.
pub fn distance_from_origin(g: &mut Graph, a: &Points, cfg: &ManifoldConfig) -> Var {
    // <x, o>_L = -x_t / sqrt(c), so -c<x, o>_L = sqrt(c) x_t.
    let arg = g.scale(a.time(), cfg.sqrt_c());
    let d = g.acosh(arg, cfg.eps());
    g.scale(d, 1.0 / cfg.sqrt_c())
}

/// `m x 1` half-apertures `asin(K / |u_space|)` of the cones at each row of
/// `u`. The clamped `asin` makes rows inside radius `K` fully open (`pi/2`).
pub fn half_aperture(g: &mut Graph, u: &Points, cfg: &ManifoldConfig) -> Var {
    let norm = g.row_norm(u.space, cfg.eps());
    let k = g.constant(Tensor::scalar(cfg.cone_constant()));
    let ratio = g.div(k, norm);
    g.asin(ratio, cfg.eps())
}

/// `m x n` exterior angles at each parent row `u_i` towards each child row `w_j`.
pub fn pairwise_exterior_angle(g: &mut Graph, u: &Points, w: &Points, cfg: &ManifoldConfig) -> Var {
    let inner = pairwise_inner(g, u, w);
    let c_inner = g.scale(inner, cfg.curvature());
    let w_time_row = g.transpose(w.time());
    let ut_ci = g.mul(u.time(), c_inner);
    let numer = g.add(w_time_row, ut_ci);
    let ci_sq = g.square(c_inner);
    let ci_sq_m1 = g.offset(ci_sq, -1.0);
    let root = g.sqrt_floored(ci_sq_m1, cfg.eps());
    let u_norm = g.row_norm(u.space, cfg.eps());
    let denom = g.mul(u_norm, root);
    let ratio = g.div(numer, denom);
    g.acos(ratio, cfg.eps())
}

/// Rows scaled to unit Euclidean norm.
pub fn normalize_rows(g: &mut Graph, x: Var, floor: f64) -> Var {
    let n = g.row_norm(x, floor);
    g.div(x, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{self, LorentzPoint, TangentVector};
    use crate::numerics::check_gradient;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn to_points(g: &Graph, p: &Points) -> Vec<LorentzPoint> {
        p.coords(g)
            .into_iter()
            .map(|(t, s)| LorentzPoint::from_coords(t, s))
            .collect()
    }

    fn random_tangent(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
        Tensor::new(n, d, (0..n * d).map(|_| rng.random_range(-scale..scale)).collect())
    }

    #[test]
    fn matches_pointwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &c in &[0.25, 1.0, 4.0] {
            let cfg = ManifoldConfig::with_curvature(c).unwrap();
            let ta = random_tangent(&mut rng, 5, 3, 1.0);
            let tb = random_tangent(&mut rng, 4, 3, 1.0);
            let mut g = Graph::new();
            let va = g.leaf(ta.clone());
            let vb = g.leaf(tb.clone());
            let a = exp_map_origin(&mut g, va, &cfg);
            let b = exp_map_origin(&mut g, vb, &cfg);
            let dist = pairwise_distance(&mut g, &a, &b, &cfg);
            let ext = pairwise_exterior_angle(&mut g, &a, &b, &cfg);
            let aper = half_aperture(&mut g, &a, &cfg);
            let pa = to_points(&g, &a);
            let pb = to_points(&g, &b);
            for (i, row) in pa.iter().enumerate() {
                let expect = manifold::exp_map_origin(&TangentVector::new(ta.row(i).to_vec()), &cfg).unwrap();
                assert_abs_diff_eq!(row.time(), expect.time(), epsilon = 1e-12);
                assert_abs_diff_eq!(
                    g.value(aper).data()[i],
                    manifold::half_aperture(row, &cfg).unwrap(),
                    epsilon = 1e-12
                );
                for (j, col) in pb.iter().enumerate() {
                    let d = manifold::geodesic_distance(row, col, &cfg).unwrap();
                    assert_abs_diff_eq!(g.value(dist).get(i, j), d, epsilon = 1e-7);
                    let e = manifold::exterior_angle(row, col, &cfg).unwrap();
                    assert_abs_diff_eq!(g.value(ext).get(i, j), e, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn origin_distance_gradient_is_radial() {
        let cfg = ManifoldConfig::default();
        let mut g = Graph::new();
        let v = g.leaf(Tensor::row_vector(vec![0.7, 0.0]));
        let p = exp_map_origin(&mut g, v, &cfg);
        let d = distance_from_origin(&mut g, &p, &cfg);
        let root = g.sum(d);
        assert_abs_diff_eq!(g.value(root).item(), 0.7, epsilon = 1e-12);
        let grads = g.backward(root).unwrap();
        let gv = grads.get(v).unwrap();
        assert_abs_diff_eq!(gv.data()[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(gv.data()[1], 0.0, epsilon = 1e-12);

        // The same through the general pairwise distance to the origin.
        let mut g = Graph::new();
        let v = g.leaf(Tensor::row_vector(vec![0.7, 0.0]));
        let p = exp_map_origin(&mut g, v, &cfg);
        let o = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let o = exp_map_origin(&mut g, o, &cfg);
        let d = pairwise_distance(&mut g, &p, &o, &cfg);
        let root = g.sum(d);
        let gv = g.backward(root).unwrap().get(v).unwrap().clone();
        assert_abs_diff_eq!(gv.data()[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(gv.data()[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn geometry_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let cfg = ManifoldConfig::with_curvature(rng.random_range(0.3..2.0)).unwrap();
            let params = vec![
                ("u".to_string(), random_tangent(&mut rng, 3, 4, 1.5)),
                ("w".to_string(), random_tangent(&mut rng, 4, 4, 1.5)),
            ];
            let report = check_gradient(
                |g, p| {
                    let u = exp_map_origin(g, p[0], &cfg);
                    let w = exp_map_origin(g, p[1], &cfg);
                    let ext = pairwise_exterior_angle(g, &u, &w, &cfg);
                    let aper = half_aperture(g, &u, &cfg);
                    let dist = pairwise_distance(g, &u, &w, &cfg);
                    let diff = g.sub(ext, aper);
                    let s = g.add(diff, dist);
                    let s = g.square(s);
                    g.mean(s)
                },
                &params,
                1e-6,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-5, "{report:?}");
        }
    }
}
