//! Lorentz (hyperboloid) model of hyperbolic space.
//!
//! Points live on the upper sheet of `<x, x>_L = -1/c` in Minkowski space,
//! with one time-like coordinate and `d` space-like coordinates. The origin
//! is `(1/sqrt(c), 0, ..., 0)`.
//!
//! Everything here is a pure function over owned or borrowed coordinates.
//! The differentiable counterparts used during training live in
//! [`crate::losses::geometry`]; these are the reference implementations
//! used for evaluation, validation and worked examples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("point is off the hyperboloid (c<x,x>_L + 1 = {residual:e})")]
    OffManifold { residual: f64 },
    #[error("cone apex at the origin is undefined")]
    ApexAtOrigin,
    #[error("invalid manifold config: {0}")]
    InvalidConfig(String),
}

/// Curvature and cone constants shared by every geometric operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawManifoldConfig", into = "RawManifoldConfig")]
pub struct ManifoldConfig {
    curvature: f64,
    r_min: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifoldConfig {
    #[serde(default = "default_curvature")]
    curvature: f64,
    #[serde(default = "default_r_min")]
    r_min: f64,
    #[serde(default = "default_eps")]
    eps: f64,
}

fn default_curvature() -> f64 {
    1.0
}
fn default_r_min() -> f64 {
    0.1
}
fn default_eps() -> f64 {
    1e-8
}

impl TryFrom<RawManifoldConfig> for ManifoldConfig {
    type Error = ManifoldError;

    fn try_from(raw: RawManifoldConfig) -> Result<Self, Self::Error> {
        ManifoldConfig::new(raw.curvature, raw.r_min, raw.eps)
    }
}

impl From<ManifoldConfig> for RawManifoldConfig {
    fn from(cfg: ManifoldConfig) -> Self {
        RawManifoldConfig {
            curvature: cfg.curvature,
            r_min: cfg.r_min,
            eps: cfg.eps,
        }
    }
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        ManifoldConfig {
            curvature: default_curvature(),
            r_min: default_r_min(),
            eps: default_eps(),
        }
    }
}

impl ManifoldConfig {
    pub fn new(curvature: f64, r_min: f64, eps: f64) -> Result<Self, ManifoldError> {
        if !(curvature.is_finite() && curvature > 0.0) {
            return Err(ManifoldError::InvalidConfig(format!(
                "curvature must be positive, got {curvature}"
            )));
        }
        if !(r_min.is_finite() && r_min > 0.0) {
            return Err(ManifoldError::InvalidConfig(format!(
                "r_min must be positive, got {r_min}"
            )));
        }
        if !(eps > 0.0 && eps < 1e-4) {
            return Err(ManifoldError::InvalidConfig(format!(
                "eps must lie in (0, 1e-4), got {eps}"
            )));
        }
        Ok(ManifoldConfig { curvature, r_min, eps })
    }

    pub fn with_curvature(curvature: f64) -> Result<Self, ManifoldError> {
        Self::new(curvature, default_r_min(), default_eps())
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    pub fn sqrt_c(&self) -> f64 {
        self.curvature.sqrt()
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `K = 2 r_min / sqrt(c)`, the cone constant in the half-aperture formula.
    pub fn cone_constant(&self) -> f64 {
        2.0 * self.r_min / self.curvature.sqrt()
    }
}

/// A point on the hyperboloid: `time > 0` and `c(-time^2 + |space|^2) = -1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzPoint {
    time: f64,
    space: Vec<f64>,
}

impl LorentzPoint {
    /// Builds a point from raw coordinates without validating the constraint.
    pub fn from_coords(time: f64, space: Vec<f64>) -> Self {
        LorentzPoint { time, space }
    }

    /// Lifts space coordinates onto the hyperboloid by solving for the time
    /// coordinate, `time = sqrt(1/c + |space|^2)`.
    pub fn from_space(space: Vec<f64>, cfg: &ManifoldConfig) -> Self {
        let time = lifted_time(&space, cfg.curvature);
        LorentzPoint { time, space }
    }

    pub fn origin(dim: usize, cfg: &ManifoldConfig) -> Self {
        LorentzPoint {
            time: 1.0 / cfg.sqrt_c(),
            space: vec![0.0; dim],
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn space(&self) -> &[f64] {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }

    pub fn space_norm(&self) -> f64 {
        norm(&self.space)
    }

    /// `[time, space...]`, the layout used by embedding dumps.
    pub fn to_coords(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.space.len() + 1);
        out.push(self.time);
        out.extend_from_slice(&self.space);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.time.is_finite() && self.space.iter().all(|v| v.is_finite())
    }

    /// `c <x, x>_L + 1`; zero for an exact point on the hyperboloid.
    pub fn constraint_residual(&self, cfg: &ManifoldConfig) -> f64 {
        cfg.curvature * self_inner(self) + 1.0
    }

    /// Checks the constraint against a tolerance that scales with the
    /// magnitude of the coordinates: `|c<x,x>_L + 1| <= tol (1 + c time^2)`.
    pub fn validate(&self, cfg: &ManifoldConfig, tol: f64) -> Result<(), ManifoldError> {
        if !self.is_finite() {
            return Err(ManifoldError::NonFinite);
        }
        let residual = self.constraint_residual(cfg);
        let scale = 1.0 + cfg.curvature * self.time * self.time;
        if self.time <= 0.0 || residual.abs() > tol * scale {
            return Err(ManifoldError::OffManifold { residual });
        }
        Ok(())
    }
}

/// A tangent vector at the origin. Its time component is implicitly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVector(pub Vec<f64>);

impl TangentVector {
    pub fn new(space: Vec<f64>) -> Self {
        TangentVector(space)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

/// Relative tolerance used by the checked operations below.
pub const ON_MANIFOLD_TOLERANCE: f64 = 1e-6;

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Compensated dot product (Ogita, Rump and Oishi's Dot2). The result is as
/// accurate as if computed in twice the working precision.
pub fn compensated_dot(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let (sum, err) = compensated_dot_parts(pairs);
    sum + err
}

fn compensated_dot_parts(pairs: impl IntoIterator<Item = (f64, f64)>) -> (f64, f64) {
    let mut sum = 0.0;
    let mut err = 0.0;
    for (a, b) in pairs {
        let (p, ep) = two_prod(a, b);
        let (s, es) = two_sum(sum, p);
        sum = s;
        err += ep + es;
    }
    (sum, err)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Correctly-rounded-ish `sqrt(1/c + |space|^2)`: the sum is carried in
/// double-double and one Newton step corrects the square root.
fn lifted_time(space: &[f64], curvature: f64) -> f64 {
    let (hi, lo) = compensated_dot_parts(std::iter::once((1.0 / curvature, 1.0)).chain(space.iter().map(|&s| (s, s))));
    let (hi, lo) = two_sum(hi, lo);
    let t = hi.sqrt();
    if t == 0.0 {
        return t;
    }
    // residual = (hi + lo) - t^2, computed exactly enough with an fma.
    let residual = (-t).mul_add(t, hi) + lo;
    t + residual / (2.0 * t)
}

fn self_inner(x: &LorentzPoint) -> f64 {
    compensated_dot(std::iter::once((-x.time, x.time)).chain(x.space.iter().map(|&s| (s, s))))
}

fn check_dims(x: &LorentzPoint, y: &LorentzPoint) -> Result<(), ManifoldError> {
    if x.space.len() != y.space.len() {
        return Err(ManifoldError::DimensionMismatch {
            left: x.space.len(),
            right: y.space.len(),
        });
    }
    Ok(())
}

/// Lorentzian inner product `-x_t y_t + <x_s, y_s>`.
pub fn lorentz_inner(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64, ManifoldError> {
    check_dims(x, y)?;
    Ok(lorentz_inner_unchecked(x, y))
}

pub(crate) fn lorentz_inner_unchecked(x: &LorentzPoint, y: &LorentzPoint) -> f64 {
    compensated_dot(std::iter::once((-x.time, y.time)).chain(x.space.iter().copied().zip(y.space.iter().copied())))
}

/// Exponential map at the origin.
///
/// `space = sinh(sqrt(c)|v|) / (sqrt(c)|v|) * v`, and the time coordinate is
/// solved from the constraint, which equals `cosh(sqrt(c)|v|)/sqrt(c)`.
pub fn exp_map_origin(v: &TangentVector, cfg: &ManifoldConfig) -> Result<LorentzPoint, ManifoldError> {
    if v.0.iter().any(|x| !x.is_finite()) {
        return Err(ManifoldError::NonFinite);
    }
    let scaled = cfg.sqrt_c() * v.norm();
    let factor = sinhc(scaled);
    let space: Vec<f64> = v.0.iter().map(|x| x * factor).collect();
    let point = LorentzPoint::from_space(space, cfg);
    if !point.is_finite() {
        return Err(ManifoldError::NonFinite);
    }
    Ok(point)
}

/// `sinh(t)/t`, with the series limit near zero.
pub fn sinhc(t: f64) -> f64 {
    if t.abs() < 1e-4 {
        let t2 = t * t;
        1.0 + t2 / 6.0 + t2 * t2 / 120.0
    } else {
        t.sinh() / t
    }
}

/// Geodesic distance `(1/sqrt c) acosh(-c <x, y>_L)`.
///
/// Evaluated as `(2/sqrt c) asinh(sqrt(c) |x - y|_L / 2)` with the squared
/// Lorentzian chord rewritten as a sum of non-negative terms, so nearby
/// points far from the origin keep their digits.
pub fn geodesic_distance(x: &LorentzPoint, y: &LorentzPoint, cfg: &ManifoldConfig) -> Result<f64, ManifoldError> {
    check_dims(x, y)?;
    x.validate(cfg, ON_MANIFOLD_TOLERANCE)?;
    y.validate(cfg, ON_MANIFOLD_TOLERANCE)?;
    Ok(geodesic_distance_unchecked(x, y, cfg))
}

pub(crate) fn geodesic_distance_unchecked(x: &LorentzPoint, y: &LorentzPoint, cfg: &ManifoldConfig) -> f64 {
    let chord = chord_sq(x, y, cfg.curvature).max(0.0).sqrt();
    2.0 * (cfg.sqrt_c() * chord / 2.0).asinh() / cfg.sqrt_c()
}

fn point_order(x: &LorentzPoint, y: &LorentzPoint) -> std::cmp::Ordering {
    x.time.total_cmp(&y.time).then_with(|| {
        x.space
            .iter()
            .zip(&y.space)
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// `a b - c d` with one rounding (Kahan).
#[inline]
fn diff_of_products(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let w = c * d;
    let e = (-c).mul_add(d, w);
    a.mul_add(b, -w) + e
}

/// `|u|^2 |v|^2 - (u.v)^2`, falling back to the explicit sum of squared 2x2
/// minors when `u` and `v` are nearly parallel.
fn cross_sq(u: &[f64], v: &[f64], uu: f64, vv: f64, uv: f64) -> f64 {
    let naive = uu * vv - uv * uv;
    if naive > 1e-6 * uu * vv {
        return naive;
    }
    let mut sum = 0.0;
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            let m = diff_of_products(u[i], v[j], u[j], v[i]);
            sum += m * m;
        }
    }
    sum
}

/// `|x - y|_L^2 = -2/c - 2 <x, y>_L` for points on the hyperboloid.
fn chord_sq(x: &LorentzPoint, y: &LorentzPoint, c: f64) -> f64 {
    // A fixed order makes the result exactly symmetric.
    let (x, y) = if point_order(x, y).is_gt() { (y, x) } else { (x, y) };
    let p = compensated_dot(x.space.iter().copied().zip(y.space.iter().copied()));
    let a: f64 = x.space.iter().map(|v| v * v).sum();
    let tt = x.time * y.time;
    if p < 0.0 {
        // 2 (t_x t_y - 1/c - p), with t_x t_y - 1/c = (a + b + c a b) / (c t_x t_y + 1).
        let b: f64 = y.space.iter().map(|v| v * v).sum();
        return 2.0 * ((a + b + c * a * b) / (c * tt + 1.0) - p);
    }
    // With d = y_s - x_s: (4|d|^2/c + 4|x_s x d|^2) / (2/c + 2 (t_x t_y + p)).
    let (mut dd, mut xd) = (0.0, 0.0);
    let delta: Vec<f64> = x.space.iter().zip(&y.space).map(|(a, b)| b - a).collect();
    for (xi, di) in x.space.iter().zip(&delta) {
        dd += di * di;
        xd += xi * di;
    }
    let cross = cross_sq(&x.space, &delta, a, dd, xd);
    (4.0 * dd / c + 4.0 * cross) / (2.0 / c + 2.0 * (tt + p))
}

/// Exterior angle at `u` between the cone axis (the ray from the origin
/// through `u`) and the geodesic from `u` to `w`, in `[0, pi]`.
pub fn exterior_angle(u: &LorentzPoint, w: &LorentzPoint, cfg: &ManifoldConfig) -> Result<f64, ManifoldError> {
    check_dims(u, w)?;
    u.validate(cfg, ON_MANIFOLD_TOLERANCE)?;
    w.validate(cfg, ON_MANIFOLD_TOLERANCE)?;
    let u_norm = u.space_norm();
    if u_norm <= cfg.eps {
        return Err(ManifoldError::ApexAtOrigin);
    }
    let c_inner = cfg.curvature * lorentz_inner_unchecked(u, w);
    let numer = w.time + u.time * c_inner;
    let denom = u_norm * (c_inner * c_inner - 1.0).max(cfg.eps).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0).acos())
}

/// Half-aperture `asin(K / |u_space|)` of the entailment cone at `u`.
/// Inside radius `K` the cone is fully open and the result is `pi/2`.
pub fn half_aperture(u: &LorentzPoint, cfg: &ManifoldConfig) -> Result<f64, ManifoldError> {
    if !u.is_finite() {
        return Err(ManifoldError::NonFinite);
    }
    let k = cfg.cone_constant();
    let n = u.space_norm();
    if n <= k {
        return Ok(std::f64::consts::FRAC_PI_2);
    }
    Ok((k / n).min(1.0).asin())
}
