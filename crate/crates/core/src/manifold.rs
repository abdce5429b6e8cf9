//! Constant-curvature geometry on the Poincare ball.
//!
//! Every map here runs in f64 no matter how embeddings are stored on disk.
//! Curvature is trainable through a softplus reparameterization, so each
//! operation exposes a pullback (`*_vjp`) that reports cotangents both for
//! its point inputs and for the scalar curvature parameter `rho`.
//!
//! Ratio terms like tanh(x)/x cancel catastrophically near zero, so the
//! helpers below switch to truncated series under small-argument cutoffs.
//! Near the ball boundary the inverse map instead needs 1 - c*||x||^2 to
//! more precision than a plain product gives; that residual is computed
//! with a compensated sum and an FMA split.

use crate::error::{Result, RhymeError};

/// Norms below this have no usable direction; maps treat the point as the
/// origin (or reject it, where a direction is required).
pub const EPS_NORM: f64 = 1e-12;

/// Floor keeping the learned curvature strictly positive.
pub const DEFAULT_C_MIN: f64 = 1e-4;

/// Default boundary margin for `project_to_ball`.
pub const DEFAULT_MARGIN: f64 = 1e-5;

/// Default shrink factor applied when carrying sphere points into the ball.
pub const DEFAULT_SHRINK: f64 = 0.999;

// ─── curvature ───────────────────────────────────────────────────────────

/// Positive curvature magnitude c = c_min + softplus(rho).
///
/// `rho` is the free parameter the optimizer sees; `c` and `sqrt(c)` are
/// cached because every map needs them.
#[derive(Debug, Clone, Copy)]
pub struct Curvature {
    rho: f64,
    c_min: f64,
    c: f64,
    sqrt_c: f64,
}

impl Curvature {
    pub fn from_rho(rho: f64) -> Result<Self> {
        Self::with_c_min(rho, DEFAULT_C_MIN)
    }

    pub fn with_c_min(rho: f64, c_min: f64) -> Result<Self> {
        if !rho.is_finite() {
            return Err(RhymeError::InvalidArgument("curvature: rho must be finite".into()));
        }
        if !c_min.is_finite() || c_min <= 0.0 {
            return Err(RhymeError::InvalidArgument("curvature: c_min must be positive".into()));
        }
        let c = c_min + softplus(rho);
        Ok(Curvature { rho, c_min, c, sqrt_c: c.sqrt() })
    }

    /// Solves c_min + softplus(rho) = c for rho.
    pub fn from_c(c: f64) -> Result<Self> {
        if !c.is_finite() || c <= DEFAULT_C_MIN {
            return Err(RhymeError::InvalidArgument(format!(
                "curvature: c must exceed c_min = {DEFAULT_C_MIN}, got {c}"
            )));
        }
        Self::with_c_min(softplus_inv(c - DEFAULT_C_MIN), DEFAULT_C_MIN)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn sqrt_c(&self) -> f64 {
        self.sqrt_c
    }

    pub fn c_min(&self) -> f64 {
        self.c_min
    }

    /// dc/drho = sigmoid(rho); chains curvature cotangents onto rho.
    pub fn dc_drho(&self) -> f64 {
        sigmoid(self.rho)
    }
}

// ─── scalar helpers ──────────────────────────────────────────────────────

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    // ln(e^y - 1), split so neither branch cancels: exp_m1 keeps relative
    // precision for small y, the ln_1p form avoids overflow for large y
    if y < std::f64::consts::LN_2 {
        y.exp_m1().ln()
    } else {
        y + (-(-y).exp()).ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Neumaier-compensated sum of squares.
pub(crate) fn norm_sq(xs: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in xs {
        let term = x * x;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub(crate) fn norm(xs: &[f64]) -> f64 {
    norm_sq(xs).sqrt()
}

/// 1 - c*||x||^2 with the product split by an FMA so the subtraction near 1
/// keeps the full residual. This is what decides boundary membership and
/// feeds atanh when a point rides close to the edge.
fn one_minus_c_norm_sq(c: f64, x: &[f64]) -> f64 {
    let msq = norm_sq(x);
    let p = c * msq;
    let p_err = c.mul_add(msq, -p);
    (1.0 - p) - p_err
}

/// tanh(x)/x, continuous through x = 0.
fn tanh_over_x(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0
    } else {
        x.tanh() / x
    }
}

/// atanh(y)/y, continuous through y = 0.
fn atanh_over_y(y: f64) -> f64 {
    if y.abs() < 1e-4 {
        let y2 = y * y;
        1.0 + y2 / 3.0 + y2 * y2 / 5.0
    } else {
        y.atanh() / y
    }
}

/// (x*sech^2(x) - tanh(x)) / x^3: the radial slope factor of tanh(x)/x.
/// Tends to -2/3 at the origin; the direct form cancels below ~1e-3.
fn tanh_ratio_slope(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        let x2 = x * x;
        -2.0 / 3.0 + 8.0 * x2 / 15.0 - 34.0 * x2 * x2 / 105.0
    } else {
        let th = x.tanh();
        (x * (1.0 - th * th) - th) / (x * x * x)
    }
}

/// (y/(1-y^2) - atanh(y)) / y^3: the radial slope factor of atanh(y)/y.
/// `one_minus_y2` is passed in so boundary-adjacent callers can supply the
/// compensated residual instead of the cancelling direct form.
fn atanh_ratio_slope(y: f64, one_minus_y2: f64) -> f64 {
    if y.abs() < 1e-3 {
        let y2 = y * y;
        2.0 / 3.0 + 4.0 * y2 / 5.0 + 6.0 * y2 * y2 / 7.0
    } else {
        let ar = atanh_from_residual(y, one_minus_y2);
        (y / one_minus_y2 - ar) / (y * y * y)
    }
}

/// atanh(y) evaluated through 1 - y^2 so accuracy survives y -> 1.
fn atanh_from_residual(y: f64, one_minus_y2: f64) -> f64 {
    if y > 0.9 {
        0.5 * (((1.0 + y) * (1.0 + y)) / one_minus_y2).ln()
    } else {
        y.atanh()
    }
}

fn check_finite(op: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(RhymeError::InvalidArgument(format!("{op}: empty input vector")));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(RhymeError::InvalidArgument(format!("{op}: non-finite input coordinate")));
    }
    Ok(())
}

// ─── forward maps ────────────────────────────────────────────────────────

/// Exponential map at the origin: v -> tanh(sqrt(c)*||v||) * v / (sqrt(c)*||v||).
///
/// Inputs with ||v|| < EPS_NORM are returned unchanged. The tanh factor is
/// clamped a few ulps under 1 so the output stays strictly inside the ball
/// even when tanh rounds to 1 for very large arguments.
pub fn exp_map(v: &[f64], curv: &Curvature) -> Result<Vec<f64>> {
    check_finite("exp_map", v)?;
    let n = norm(v);
    if n < EPS_NORM {
        return Ok(v.to_vec());
    }
    let t = curv.sqrt_c() * n;
    let th = t.tanh().min(1.0 - 4.0 * f64::EPSILON);
    let scale = th / t;
    Ok(v.iter().map(|&vi| scale * vi).collect())
}

/// Logarithmic map at the origin: x -> atanh(sqrt(c)*||x||) * x / (sqrt(c)*||x||).
///
/// Errors when the point sits on or outside the boundary (1 - c*||x||^2 <= 0,
/// judged on the compensated residual).
pub fn log_map(x: &[f64], curv: &Curvature) -> Result<Vec<f64>> {
    check_finite("log_map", x)?;
    let m = norm(x);
    if m < EPS_NORM {
        return Ok(x.to_vec());
    }
    let residual = one_minus_c_norm_sq(curv.c(), x);
    if residual <= 0.0 {
        return Err(RhymeError::Domain(format!(
            "log_map: point on or outside the ball boundary (sqrt(c)*||x|| = {})",
            curv.sqrt_c() * m
        )));
    }
    let y = curv.sqrt_c() * m;
    let scale = if y > 0.9 {
        atanh_from_residual(y, residual) / y
    } else {
        atanh_over_y(y)
    };
    Ok(x.iter().map(|&xi| scale * xi).collect())
}

/// Clamps a point to the closed ball of radius (1 - margin)/sqrt(c).
/// Points already inside that radius pass through untouched.
pub fn project_to_ball(x: &[f64], curv: &Curvature, margin: f64) -> Result<Vec<f64>> {
    check_finite("project_to_ball", x)?;
    if !margin.is_finite() || margin <= 0.0 || margin >= 1.0 {
        return Err(RhymeError::InvalidArgument(format!(
            "project_to_ball: margin must lie in (0, 1), got {margin}"
        )));
    }
    let m = norm(x);
    let limit = (1.0 - margin) / curv.sqrt_c();
    if m <= limit {
        return Ok(x.to_vec());
    }
    let scale = limit / m;
    Ok(x.iter().map(|&xi| scale * xi).collect())
}

/// Radial projection onto the unit sphere. Inputs under EPS_NORM carry no
/// direction and are rejected; callers that can see a degenerate split
/// substitute a fixed unit basis vector instead.
pub fn sphere_normalize(u: &[f64]) -> Result<Vec<f64>> {
    check_finite("sphere_normalize", u)?;
    let n = norm(u);
    if n < EPS_NORM {
        return Err(RhymeError::DegenerateInput(format!(
            "sphere_normalize: ||u|| = {n} is below {EPS_NORM}"
        )));
    }
    Ok(u.iter().map(|&ui| ui / n).collect())
}

/// Carries a sphere point into the ball through the planar chart
/// y = x / (1 + sqrt(1 - ||x||^2)), then rescales by shrink/sqrt(c) and
/// projects. The rescale keeps unit-norm inputs (where the chart is the
/// identity) strictly interior.
pub fn stereographic_to_ball(x: &[f64], curv: &Curvature, shrink: f64) -> Result<Vec<f64>> {
    check_finite("stereographic_to_ball", x)?;
    if !shrink.is_finite() || shrink <= 0.0 || shrink > 1.0 {
        return Err(RhymeError::InvalidArgument(format!(
            "stereographic_to_ball: shrink must lie in (0, 1], got {shrink}"
        )));
    }
    let nsq = norm_sq(x);
    if nsq.sqrt() > 1.0 + 1e-9 {
        return Err(RhymeError::Domain(format!(
            "stereographic_to_ball: ||x|| = {} exceeds 1 + 1e-9",
            nsq.sqrt()
        )));
    }
    // Rounding can push a unit vector's norm a hair past 1; the chart treats
    // that as exactly on the sphere.
    let beta = 1.0 + (1.0 - nsq).max(0.0).sqrt();
    let scale = shrink / (curv.sqrt_c() * beta);
    let y: Vec<f64> = x.iter().map(|&xi| scale * xi).collect();
    project_to_ball(&y, curv, DEFAULT_MARGIN)
}

/// Barycentric combination of two ball points through the origin tangent
/// space: exp(alpha*log(x_h) + (1-alpha)*log(y_s)), projected back inside.
pub fn barycentric_fuse(x_h: &[f64], y_s: &[f64], alpha: f64, curv: &Curvature) -> Result<Vec<f64>> {
    if x_h.len() != y_s.len() {
        return Err(RhymeError::Shape(format!(
            "barycentric_fuse: dimension mismatch {} vs {}",
            x_h.len(),
            y_s.len()
        )));
    }
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
        return Err(RhymeError::InvalidArgument(format!(
            "barycentric_fuse: alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let a = log_map(x_h, curv)?;
    let b = log_map(y_s, curv)?;
    let w: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(&ai, &bi)| alpha * ai + (1.0 - alpha) * bi)
        .collect();
    let z = exp_map(&w, curv)?;
    project_to_ball(&z, curv, DEFAULT_MARGIN)
}

// ─── pullbacks ───────────────────────────────────────────────────────────

/// Cotangents of a unary ball map: with respect to the point input and to
/// the curvature parameter rho (already chained through dc/drho).
#[derive(Debug, Clone)]
pub struct Pullback {
    pub d_x: Vec<f64>,
    pub d_rho: f64,
}

/// Cotangents of `barycentric_fuse`.
#[derive(Debug, Clone)]
pub struct FusePullback {
    pub d_xh: Vec<f64>,
    pub d_ys: Vec<f64>,
    pub d_alpha: f64,
    pub d_rho: f64,
}

/// Pullback of `exp_map`.
///
/// With g(n) = tanh(s*n)/(s*n) and h = tanh_ratio_slope(s*n):
///   J^T w   = g*w + s^2*h*(v.w)*v
///   d/dc    = (w.v) * n^2 * h / 2
pub fn exp_map_vjp(v: &[f64], curv: &Curvature, cotangent: &[f64]) -> Result<Pullback> {
    check_finite("exp_map_vjp", v)?;
    check_finite("exp_map_vjp cotangent", cotangent)?;
    if v.len() != cotangent.len() {
        return Err(RhymeError::Shape("exp_map_vjp: cotangent dimension mismatch".into()));
    }
    let n = norm(v);
    if n < EPS_NORM {
        return Ok(Pullback { d_x: cotangent.to_vec(), d_rho: 0.0 });
    }
    let s = curv.sqrt_c();
    let t = s * n;
    let g = tanh_over_x(t);
    let h = tanh_ratio_slope(t);
    let vw = dot(v, cotangent);
    let radial = s * s * h * vw;
    let d_x = v
        .iter()
        .zip(cotangent)
        .map(|(&vi, &wi)| g * wi + radial * vi)
        .collect();
    let d_c = vw * n * n * h / 2.0;
    Ok(Pullback { d_x, d_rho: d_c * curv.dc_drho() })
}

/// Pullback of `log_map`.
///
/// With a(m) = atanh(s*m)/(s*m) and k = atanh_ratio_slope(s*m):
///   J^T w   = a*w + s^2*k*(x.w)*x
///   d/dc    = (w.x) * m^2 * k / 2
pub fn log_map_vjp(x: &[f64], curv: &Curvature, cotangent: &[f64]) -> Result<Pullback> {
    check_finite("log_map_vjp", x)?;
    check_finite("log_map_vjp cotangent", cotangent)?;
    if x.len() != cotangent.len() {
        return Err(RhymeError::Shape("log_map_vjp: cotangent dimension mismatch".into()));
    }
    let m = norm(x);
    if m < EPS_NORM {
        return Ok(Pullback { d_x: cotangent.to_vec(), d_rho: 0.0 });
    }
    let residual = one_minus_c_norm_sq(curv.c(), x);
    if residual <= 0.0 {
        return Err(RhymeError::Domain(
            "log_map_vjp: point on or outside the ball boundary".into(),
        ));
    }
    let s = curv.sqrt_c();
    let y = s * m;
    let a = if y > 0.9 {
        atanh_from_residual(y, residual) / y
    } else {
        atanh_over_y(y)
    };
    let k = atanh_ratio_slope(y, residual);
    let xw = dot(x, cotangent);
    let radial = s * s * k * xw;
    let d_x = x
        .iter()
        .zip(cotangent)
        .map(|(&xi, &wi)| a * wi + radial * xi)
        .collect();
    let d_c = xw * m * m * k / 2.0;
    Ok(Pullback { d_x, d_rho: d_c * curv.dc_drho() })
}

/// Pullback of `project_to_ball`. Identity on the interior branch; on the
/// clamping branch, with beta = (1-margin)/sqrt(c):
///   J^T w = (beta/m)*w - beta*(x.w)/m^3 * x
///   d/dc  = -(x.w)/m * (1-margin) / (2*c^(3/2))
pub fn project_to_ball_vjp(
    x: &[f64],
    curv: &Curvature,
    margin: f64,
    cotangent: &[f64],
) -> Result<Pullback> {
    check_finite("project_to_ball_vjp", x)?;
    check_finite("project_to_ball_vjp cotangent", cotangent)?;
    if x.len() != cotangent.len() {
        return Err(RhymeError::Shape("project_to_ball_vjp: cotangent dimension mismatch".into()));
    }
    let m = norm(x);
    let s = curv.sqrt_c();
    let limit = (1.0 - margin) / s;
    if m <= limit {
        return Ok(Pullback { d_x: cotangent.to_vec(), d_rho: 0.0 });
    }
    let beta = limit;
    let xw = dot(x, cotangent);
    let d_x = x
        .iter()
        .zip(cotangent)
        .map(|(&xi, &wi)| beta / m * wi - beta * xw / (m * m * m) * xi)
        .collect();
    let d_c = -(xw / m) * (1.0 - margin) / (2.0 * curv.c() * s);
    Ok(Pullback { d_x, d_rho: d_c * curv.dc_drho() })
}

/// Pullback of `sphere_normalize`: J^T w = (w - (n.w)*n) / ||u||
/// with n = u/||u||. No curvature dependence.
pub fn sphere_normalize_vjp(u: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
    check_finite("sphere_normalize_vjp", u)?;
    check_finite("sphere_normalize_vjp cotangent", cotangent)?;
    if u.len() != cotangent.len() {
        return Err(RhymeError::Shape("sphere_normalize_vjp: cotangent dimension mismatch".into()));
    }
    let n = norm(u);
    if n < EPS_NORM {
        return Err(RhymeError::DegenerateInput(
            "sphere_normalize_vjp: input norm below EPS_NORM".into(),
        ));
    }
    let nw = dot(u, cotangent) / (n * n);
    Ok(u
        .iter()
        .zip(cotangent)
        .map(|(&ui, &wi)| (wi - nw * ui) / n)
        .collect())
}

/// Pullback of `stereographic_to_ball`. Defined for strictly interior
/// inputs; the chart derivative is singular on the sphere itself.
pub fn stereographic_to_ball_vjp(
    x: &[f64],
    curv: &Curvature,
    shrink: f64,
    cotangent: &[f64],
) -> Result<Pullback> {
    check_finite("stereographic_to_ball_vjp", x)?;
    check_finite("stereographic_to_ball_vjp cotangent", cotangent)?;
    if x.len() != cotangent.len() {
        return Err(RhymeError::Shape(
            "stereographic_to_ball_vjp: cotangent dimension mismatch".into(),
        ));
    }
    let nsq = norm_sq(x);
    let root = 1.0 - nsq;
    if root <= 1e-12 {
        return Err(RhymeError::Domain(
            "stereographic_to_ball_vjp: pullback undefined at the sphere boundary".into(),
        ));
    }
    let s = curv.sqrt_c();
    let beta = 1.0 + root.sqrt();
    let t = shrink / s;
    // forward chain: f1 = x/beta, g = t*f1, out = project(g)
    let f1: Vec<f64> = x.iter().map(|&xi| xi / beta).collect();
    let g: Vec<f64> = f1.iter().map(|&fi| t * fi).collect();
    let proj = project_to_ball_vjp(&g, curv, DEFAULT_MARGIN, cotangent)?;
    let w_g = proj.d_x;
    let mut d_rho = proj.d_rho;
    // t depends on c: dt/dc = -shrink / (2*c^(3/2))
    let d_t = dot(&w_g, &f1);
    d_rho += d_t * (-shrink / (2.0 * curv.c() * s)) * curv.dc_drho();
    // chart pullback: J^T w = w/beta + (x.w)/(sqrt(1-nsq)*beta^2) * x
    let w_f1: Vec<f64> = w_g.iter().map(|&wi| t * wi).collect();
    let xw = dot(x, &w_f1);
    let radial = xw / (root.sqrt() * beta * beta);
    let d_x = x
        .iter()
        .zip(&w_f1)
        .map(|(&xi, &wi)| wi / beta + radial * xi)
        .collect();
    Ok(Pullback { d_x, d_rho })
}

/// Pullback of `barycentric_fuse`, assembled from the sub-map pullbacks.
pub fn barycentric_fuse_vjp(
    x_h: &[f64],
    y_s: &[f64],
    alpha: f64,
    curv: &Curvature,
    cotangent: &[f64],
) -> Result<FusePullback> {
    if x_h.len() != y_s.len() || x_h.len() != cotangent.len() {
        return Err(RhymeError::Shape("barycentric_fuse_vjp: dimension mismatch".into()));
    }
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
        return Err(RhymeError::InvalidArgument(format!(
            "barycentric_fuse_vjp: alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let a = log_map(x_h, curv)?;
    let b = log_map(y_s, curv)?;
    let w: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(&ai, &bi)| alpha * ai + (1.0 - alpha) * bi)
        .collect();
    let z = exp_map(&w, curv)?;

    let proj = project_to_ball_vjp(&z, curv, DEFAULT_MARGIN, cotangent)?;
    let mut d_rho = proj.d_rho;
    let exp_pb = exp_map_vjp(&w, curv, &proj.d_x)?;
    d_rho += exp_pb.d_rho;
    let d_w = exp_pb.d_x;

    let d_alpha = a
        .iter()
        .zip(&b)
        .zip(&d_w)
        .map(|((&ai, &bi), &dwi)| (ai - bi) * dwi)
        .sum();

    let cot_a: Vec<f64> = d_w.iter().map(|&dwi| alpha * dwi).collect();
    let cot_b: Vec<f64> = d_w.iter().map(|&dwi| (1.0 - alpha) * dwi).collect();
    let pb_a = log_map_vjp(x_h, curv, &cot_a)?;
    d_rho += pb_a.d_rho;
    let pb_b = log_map_vjp(y_s, curv, &cot_b)?;
    d_rho += pb_b.d_rho;

    Ok(FusePullback { d_xh: pb_a.d_x, d_ys: pb_b.d_x, d_alpha, d_rho })
}

// ─── tests ───────────────────────────────────────────────────────────────
