use thiserror::Error;

use super::graph::{Graph, GraphError, Var};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("step {0} outside [1e-6, 1e-3]")]
    InvalidStep(f64),
    #[error("loss is not finite at the unperturbed point ({0})")]
    NonFiniteBase(f64),
    #[error("loss is not finite at probe {param}[{index}] {sign}h ({value})")]
    NonFiniteProbe {
        param: String,
        index: usize,
        sign: char,
        value: f64,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter: Vec<(String, f64)>,
}

/// Compares reverse-mode gradients against central differences.
///
/// `build` receives a fresh graph and one leaf per entry of `params` (in the
/// same order) and must return the scalar loss node. The graph is built once;
/// probes overwrite a single leaf coordinate and replay the tape.
///
/// Each coordinate is perturbed by `step * max(1, |x|)`. The error for a
/// parameter is `|a - n| / max(|a|, |n|, 1e-12)` with `|.|` the Euclidean norm
/// over all of that parameter's coordinates.
pub fn check_gradient<F>(build: F, params: &[(String, Tensor)], step: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(GradCheckError::InvalidStep(step));
    }
    let mut graph = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|(_, t)| graph.leaf(t.clone())).collect();
    let root = build(&mut graph, &leaves);
    let base = graph.forward(root)?.item();
    if !base.is_finite() {
        return Err(GradCheckError::NonFiniteBase(base));
    }
    let grads = graph.backward(root)?;

    let mut per_parameter = Vec::with_capacity(params.len());
    for ((name, value), &leaf) in params.iter().zip(&leaves) {
        let analytic = grads.get_or_zeros(leaf, value.shape());
        let mut numeric = Tensor::zeros(value.rows(), value.cols());
        for k in 0..value.len() {
            let x = value.data()[k];
            let h = step * x.abs().max(1.0);
            let mut probe = |sign: char, delta: f64| -> Result<f64, GradCheckError> {
                let mut t = value.clone();
                t.data_mut()[k] = x + delta;
                graph.set_leaf(leaf, t)?;
                let v = graph.forward(root)?.item();
                if !v.is_finite() {
                    return Err(GradCheckError::NonFiniteProbe {
                        param: name.clone(),
                        index: k,
                        sign,
                        value: v,
                    });
                }
                Ok(v)
            };
            let plus = probe('+', h)?;
            let minus = probe('-', -h)?;
            numeric.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        graph.set_leaf(leaf, value.clone())?;
        let diff = analytic.zip_map(&numeric, |a, b| a - b).norm();
        let denom = analytic.norm().max(numeric.norm()).max(1e-12);
        per_parameter.push((name.clone(), diff / denom));
    }
    graph.forward(root)?;
    let max_relative_error = per_parameter.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_parameter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn named(name: &str, t: Tensor) -> (String, Tensor) {
        (name.to_string(), t)
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let params = vec![named("w", Tensor::row_vector(vec![1.0, 2.0]))];
        let report = check_gradient(|g, _| g.scalar(4.0), &params, DEFAULT_STEP).unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn linear_loss_matches_exactly() {
        let params = [
            named("w", Tensor::row_vector(vec![0.5, -1.5, 2.0])),
            named("x", Tensor::row_vector(vec![3.0, 0.25, -4.0])),
        ];
        let x = params[1].1.clone();
        let report = check_gradient(
            |g, p| {
                let xc = g.constant(x);
                g.dot(p[0], xc)
            },
            &params[..1],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-9, "{report:?}");
    }

    #[test]
    fn rejects_bad_step_and_names_bad_probe() {
        let params = vec![named("w", Tensor::scalar(0.0))];
        assert_eq!(
            check_gradient(|g, p| g.exp(p[0]), &params, 1e-2).unwrap_err(),
            GradCheckError::InvalidStep(1e-2)
        );
        let err = check_gradient(|g, p| g.log(p[0]), &[named("w", Tensor::scalar(1e-7))], 1e-5).unwrap_err();
        match err {
            GradCheckError::NonFiniteProbe { param, index, sign, .. } => {
                assert_eq!((param.as_str(), index, sign), ("w", 0, '-'));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn assert_primitive<F>(name: &str, sample: impl Fn(&mut ChaCha8Rng) -> Vec<(String, Tensor)>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..100 {
            let params = sample(&mut rng);
            let report = check_gradient(&build, &params, DEFAULT_STEP).unwrap();
            assert!(
                report.max_relative_error < 1e-6,
                "{name} trial {trial}: {report:?} at {params:?}"
            );
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
    }

    fn one(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<(String, Tensor)> {
        vec![named("x", rand_tensor(rng, 3, 2, lo, hi))]
    }

    fn two(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<(String, Tensor)> {
        vec![
            named("a", rand_tensor(rng, 3, 2, lo, hi)),
            named("b", rand_tensor(rng, 3, 2, lo, hi)),
        ]
    }

    // A fixed random projection turns any tensor into a scalar with a
    // non-uniform upstream gradient.
    fn project(g: &mut Graph, x: Var) -> Var {
        let (r, c) = g.shape(x);
        let w = Tensor::new(r, c, (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect());
        let w = g.constant(w);
        g.dot(x, w)
    }

    #[test]
    fn binary_primitives() {
        assert_primitive(
            "add",
            |r| two(r, -2.0, 2.0),
            |g, p| {
                let y = g.add(p[0], p[1]);
                project(g, y)
            },
        );
        assert_primitive(
            "sub",
            |r| two(r, -2.0, 2.0),
            |g, p| {
                let y = g.sub(p[0], p[1]);
                project(g, y)
            },
        );
        assert_primitive(
            "mul",
            |r| two(r, -2.0, 2.0),
            |g, p| {
                let y = g.mul(p[0], p[1]);
                project(g, y)
            },
        );
        assert_primitive(
            "div",
            |r| two(r, 0.5, 2.0),
            |g, p| {
                let y = g.div(p[0], p[1]);
                project(g, y)
            },
        );
        assert_primitive("dot", |r| two(r, -2.0, 2.0), |g, p| g.dot(p[0], p[1]));
    }

    #[test]
    fn broadcast_primitives() {
        let sample = |rng: &mut ChaCha8Rng| {
            vec![
                named("a", rand_tensor(rng, 3, 1, 0.5, 2.0)),
                named("b", rand_tensor(rng, 1, 4, 0.5, 2.0)),
            ]
        };
        assert_primitive("add-bcast", sample, |g, p| {
            let y = g.add(p[0], p[1]);
            project(g, y)
        });
        assert_primitive("div-bcast", sample, |g, p| {
            let y = g.div(p[0], p[1]);
            project(g, y)
        });
    }

    #[test]
    fn linear_algebra_primitives() {
        assert_primitive(
            "matvec",
            |rng| {
                vec![
                    named("m", rand_tensor(rng, 3, 4, -1.0, 1.0)),
                    named("v", rand_tensor(rng, 4, 1, -1.0, 1.0)),
                ]
            },
            |g, p| {
                let y = g.matvec(p[0], p[1]);
                project(g, y)
            },
        );
        assert_primitive(
            "matmul_nt",
            |rng| {
                vec![
                    named("a", rand_tensor(rng, 3, 4, -1.0, 1.0)),
                    named("b", rand_tensor(rng, 2, 4, -1.0, 1.0)),
                ]
            },
            |g, p| {
                let y = g.matmul_nt(p[0], p[1]);
                project(g, y)
            },
        );
        assert_primitive(
            "transpose",
            |r| one(r, -1.0, 1.0),
            |g, p| {
                let y = g.transpose(p[0]);
                project(g, y)
            },
        );
        assert_primitive(
            "norm",
            |r| one(r, -2.0, 2.0),
            |g, p| {
                let y = g.row_norm(p[0], 1e-12);
                project(g, y)
            },
        );
    }

    #[test]
    fn elementwise_primitives() {
        assert_primitive(
            "exp",
            |r| one(r, -2.0, 2.0),
            |g, p| {
                let y = g.exp(p[0]);
                project(g, y)
            },
        );
        assert_primitive(
            "log",
            |r| one(r, 0.2, 3.0),
            |g, p| {
                let y = g.log(p[0]);
                project(g, y)
            },
        );
        assert_primitive(
            "sqrt",
            |r| one(r, 0.2, 3.0),
            |g, p| {
                let y = g.sqrt(p[0]);
                project(g, y)
            },
        );
        assert_primitive(
            "cosh",
            |r| one(r, -2.0, 2.0),
            |g, p| {
                let y = g.cosh(p[0]);
                project(g, y)
            },
        );
        assert_primitive(
            "sinh",
            |r| one(r, -2.0, 2.0),
            |g, p| {
                let y = g.sinh(p[0]);
                project(g, y)
            },
        );
        assert_primitive(
            "acosh",
            |r| one(r, 1.1, 4.0),
            |g, p| {
                let y = g.acosh(p[0], 1e-8);
                project(g, y)
            },
        );
        assert_primitive(
            "asin",
            |r| one(r, -0.9, 0.9),
            |g, p| {
                let y = g.asin(p[0], 1e-8);
                project(g, y)
            },
        );
        assert_primitive(
            "acos",
            |r| one(r, -0.9, 0.9),
            |g, p| {
                let y = g.acos(p[0], 1e-8);
                project(g, y)
            },
        );
        // Stay clear of the kink so central differences do not straddle it.
        assert_primitive(
            "relu",
            |rng| {
                let t = rand_tensor(rng, 3, 2, 0.1, 2.0);
                let signs = rand_tensor(rng, 3, 2, -1.0, 1.0);
                vec![named("x", t.zip_map(&signs, |v, s| if s < 0.0 { -v } else { v }))]
            },
            |g, p| {
                let y = g.relu(p[0]);
                project(g, y)
            },
        );
        assert_primitive(
            "sinhc",
            |r| one(r, 0.01, 4.0),
            |g, p| {
                let y = g.sinhc_sqrt(p[0]);
                project(g, y)
            },
        );
        assert_primitive(
            "square",
            |r| one(r, -2.0, 2.0),
            |g, p| {
                let y = g.square(p[0]);
                project(g, y)
            },
        );
    }

    #[test]
    fn reduction_primitives() {
        assert_primitive(
            "sum",
            |r| one(r, -2.0, 2.0),
            |g, p| {
                let y = g.square(p[0]);
                g.sum(y)
            },
        );
        assert_primitive(
            "mean",
            |r| one(r, -2.0, 2.0),
            |g, p| {
                let y = g.square(p[0]);
                g.mean(y)
            },
        );
        assert_primitive(
            "row_sum",
            |r| one(r, -2.0, 2.0),
            |g, p| {
                let y = g.row_sum(p[0]);
                project(g, y)
            },
        );
        assert_primitive(
            "softmax_ce",
            |rng| vec![named("logits", rand_tensor(rng, 4, 3, -3.0, 3.0))],
            |g, p| g.softmax_cross_entropy(p[0], &[0, 2, 1, 2]),
        );
        assert_primitive(
            "gather_concat",
            |rng| {
                vec![
                    named("a", rand_tensor(rng, 3, 2, -1.0, 1.0)),
                    named("b", rand_tensor(rng, 2, 2, -1.0, 1.0)),
                ]
            },
            |g, p| {
                let ga = g.gather_rows(p[0], &[2, 0, 2]);
                let y = g.concat_rows(&[ga, p[1]]);
                let y = g.square(y);
                project(g, y)
            },
        );
    }

    #[test]
    fn sinhc_is_smooth_at_zero() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::row_vector(vec![0.0, 9.99e-4, 1.001e-3]));
        let s = g.sinhc_sqrt(z);
        let v = g.value(s).clone();
        assert_eq!(v.data()[0], 1.0);
        assert!((v.data()[1] - v.data()[2]).abs() < 1e-6);
        let t = g.sum(s);
        let grads = g.backward(t).unwrap();
        let d = grads.get(z).unwrap().data().to_vec();
        assert!((d[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((d[1] - d[2]).abs() < 1e-6, "{d:?}");
    }
}
