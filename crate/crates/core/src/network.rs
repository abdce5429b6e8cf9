//! The detector network: a small temporal conv encoder, a sigmoid gate, two
//! curved embedding branches fused on the ball, and a linear two-class
//! readout. Forward returns a full trace of intermediates; `backward`
//! consumes the trace and produces gradients for every parameter in a flat
//! store, including the curvature parameter rho.
//!
//! Everything here is deterministic. Dropout draws come from a caller-owned
//! ChaCha stream, initialization from a seed, and no op depends on thread
//! count or iteration timing.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, EmbeddingSequence, LoadedUtterance};
use crate::error::{Result, RhymeError};
use crate::manifold::{
    dot, exp_map, exp_map_vjp, log_map, log_map_vjp, norm, project_to_ball, project_to_ball_vjp,
    sigmoid, sphere_normalize, sphere_normalize_vjp, Curvature, DEFAULT_MARGIN, DEFAULT_SHRINK,
    EPS_NORM,
};

// ─── configuration ───────────────────────────────────────────────────────

/// Which part of the fusion pipeline is active. `Full` runs both curved
/// branches behind the learned gate; the others disable one ingredient at a
/// time, and `EuclideanFusion` replaces the whole geometric stage with a
/// flat convex mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoGating,
    NoSpherical,
    NoHyperbolic,
    EuclideanFusion,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoGating,
        Ablation::NoSpherical,
        Ablation::NoHyperbolic,
        Ablation::EuclideanFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGating => "no_gating",
            Ablation::NoSpherical => "no_spherical",
            Ablation::NoHyperbolic => "no_hyperbolic",
            Ablation::EuclideanFusion => "euclidean_fusion",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = RhymeError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                RhymeError::InvalidArgument(format!(
                    "unknown ablation `{s}`, expected one of full, no_gating, no_spherical, no_hyperbolic, euclidean_fusion"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub conv_channels: usize,
    pub conv_layers: usize,
    /// Odd, so that same-padding keeps the frame count.
    pub kernel_size: usize,
    pub utterance_dim: usize,
    pub dropout_p: f64,
    pub initial_c: f64,
    /// Radius factor that keeps the normalized direction strictly inside
    /// the ball when the spherical branch re-embeds it.
    pub shrink: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Defaults used throughout: 256 channels, 2 conv layers, kernel 3,
    /// 128-dim utterance embedding, dropout 0.1, unit initial curvature.
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            conv_channels: 256,
            conv_layers: 2,
            kernel_size: 3,
            utterance_dim: 128,
            dropout_p: 0.1,
            initial_c: 1.0,
            shrink: DEFAULT_SHRINK,
            ablation: Ablation::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.conv_channels == 0
            || self.conv_layers == 0
            || self.utterance_dim == 0
        {
            return Err(RhymeError::InvalidArgument(
                "model config: all dimensions must be positive".into(),
            ));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(RhymeError::InvalidArgument(format!(
                "model config: kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if !self.dropout_p.is_finite() || !(0.0..1.0).contains(&self.dropout_p) {
            return Err(RhymeError::InvalidArgument(format!(
                "model config: dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !self.initial_c.is_finite() || self.initial_c <= crate::manifold::DEFAULT_C_MIN {
            return Err(RhymeError::InvalidArgument(format!(
                "model config: initial_c must exceed the curvature floor, got {}",
                self.initial_c
            )));
        }
        if !self.shrink.is_finite() || !(0.0..1.0).contains(&self.shrink) || self.shrink == 0.0 {
            return Err(RhymeError::InvalidArgument(format!(
                "model config: shrink must lie in (0, 1), got {}",
                self.shrink
            )));
        }
        Ok(())
    }
}

// ─── parameter storage ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat value vector.
    pub offset: usize,
    pub len: usize,
}

/// Names, shapes, and offsets of every tensor, in canonical order:
/// conv layers first (weight then bias per layer), then the projection,
/// the gate, the curvature scalar, and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total_len: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &ModelConfig) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |entries: &mut Vec<LayoutEntry>, name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            entries.push(LayoutEntry { name, shape, offset, len });
            offset += len;
        };
        for l in 0..cfg.conv_layers {
            let c_in = if l == 0 { cfg.input_dim } else { cfg.conv_channels };
            push(
                &mut entries,
                format!("conv{l}.weight"),
                vec![cfg.conv_channels, c_in, cfg.kernel_size],
            );
            push(&mut entries, format!("conv{l}.bias"), vec![cfg.conv_channels]);
        }
        push(&mut entries, "proj.weight".into(), vec![cfg.utterance_dim, cfg.conv_channels]);
        push(&mut entries, "proj.bias".into(), vec![cfg.utterance_dim]);
        push(&mut entries, "gate.weight".into(), vec![cfg.utterance_dim]);
        push(&mut entries, "gate.bias".into(), vec![1]);
        push(&mut entries, "curvature.rho".into(), vec![1]);
        push(&mut entries, "cls.weight".into(), vec![2, cfg.utterance_dim]);
        push(&mut entries, "cls.bias".into(), vec![2]);
        ParamLayout { total_len: offset, entries }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn span(&self, name: &str) -> std::ops::Range<usize> {
        let e = self
            .entry(name)
            .unwrap_or_else(|| panic!("tensor `{name}` is not in the layout"));
        e.offset..e.offset + e.len
    }
}

/// All trainable values in one flat, canonically ordered vector. Cloning is
/// cheap enough for snapshotting (the layout is shared behind an Arc), and
/// optimizers, finite differences, and serialization all address the same
/// storage.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

/// Gradients use the same layout and storage as parameters.
pub type GradientStore = ParameterStore;

impl ParameterStore {
    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(RhymeError::Shape(format!(
                "parameter vector has {} values, layout wants {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParameterStore { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn zeros_like(&self) -> ParameterStore {
        ParameterStore {
            layout: Arc::clone(&self.layout),
            values: vec![0.0; self.values.len()],
        }
    }

    /// Flat slice of one named tensor. Panics if the name is not in the
    /// layout; tensor names are fixed at layout construction.
    pub fn get(&self, name: &str) -> &[f64] {
        &self.values[self.layout.span(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        let span = self.layout.span(name);
        &mut self.values[span]
    }

    pub fn scalar(&self, name: &str) -> f64 {
        self.get(name)[0]
    }

    /// self += scale * other, requiring identical layouts.
    pub fn add_scaled(&mut self, other: &ParameterStore, scale: f64) -> Result<()> {
        if self.layout != other.layout {
            return Err(RhymeError::Shape("parameter stores have different layouts".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

/// Fresh parameters: conv/linear tensors from uniform(-1/sqrt(fan_in),
/// 1/sqrt(fan_in)), the gate bias at zero so the initial mix sits near
/// one half, and rho chosen so the curvature starts at `initial_c`.
/// Bitwise deterministic for a given (config, seed).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let layout = Arc::new(ParamLayout::for_config(cfg));
    let mut values = vec![0.0f64; layout.total_len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |values: &mut Vec<f64>, span: std::ops::Range<usize>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut values[span] {
            *v = rng.gen_range(-bound..bound);
        }
    };
    for l in 0..cfg.conv_layers {
        let c_in = if l == 0 { cfg.input_dim } else { cfg.conv_channels };
        let fan_in = c_in * cfg.kernel_size;
        fill(&mut values, layout.span(&format!("conv{l}.weight")), fan_in);
        fill(&mut values, layout.span(&format!("conv{l}.bias")), fan_in);
    }
    fill(&mut values, layout.span("proj.weight"), cfg.conv_channels);
    fill(&mut values, layout.span("proj.bias"), cfg.conv_channels);
    fill(&mut values, layout.span("gate.weight"), cfg.utterance_dim);
    // gate.bias stays zero
    values[layout.span("curvature.rho")][0] = Curvature::from_c(cfg.initial_c)?.rho();
    fill(&mut values, layout.span("cls.weight"), cfg.utterance_dim);
    fill(&mut values, layout.span("cls.bias"), cfg.utterance_dim);
    Ok(ParameterStore { layout, values })
}

// ─── forward ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Every intermediate of one utterance's forward pass, kept for the
/// backward pass. Branch fields are None when the ablation skips them.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input frames transposed to channels x frames, in f64.
    pub input: Array2<f64>,
    /// Post-activation output of each conv layer; the last one is pooled.
    pub conv_outs: Vec<Array2<f64>>,
    pub pooled: Vec<f64>,
    /// Projection output before dropout.
    pub u_raw: Vec<f64>,
    pub dropout_mask: Option<Vec<bool>>,
    /// The shared utterance embedding both branches read.
    pub u: Vec<f64>,
    pub gate_z: f64,
    pub alpha: f64,
    pub u_h: Vec<f64>,
    pub u_s: Vec<f64>,
    /// Hyperbolic branch point.
    pub x_h: Option<Vec<f64>>,
    /// Unit direction of the spherical branch.
    pub x_s: Option<Vec<f64>>,
    /// True when the embedding norm was below the normalization floor and
    /// the spherical branch fell back to a fixed axis direction.
    pub sphere_fallback: bool,
    /// Spherical branch point re-embedded in the ball.
    pub y_s: Option<Vec<f64>>,
    pub log_x_h: Option<Vec<f64>>,
    pub log_y_s: Option<Vec<f64>>,
    /// Gated tangent mix feeding the fusion exponential.
    pub fused_tangent: Option<Vec<f64>>,
    /// Fusion point before and after the boundary projection.
    pub z_pre: Option<Vec<f64>>,
    pub z_star: Option<Vec<f64>>,
    /// Tangent readout the classifier consumes.
    pub readout: Vec<f64>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
    pub mode: Mode,
}

impl ForwardTrace {
    /// Final conv activations, channels x frames.
    pub fn h(&self) -> &Array2<f64> {
        self.conv_outs.last().expect("trace has at least one conv layer")
    }

    /// Whether any ball or sphere op ran in this pass.
    pub fn manifold_ops_used(&self) -> bool {
        self.x_h.is_some() || self.x_s.is_some() || self.z_star.is_some()
    }
}

fn ensure_finite(stage: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RhymeError::numeric(stage, "non-finite intermediate value"))
    }
}

fn ensure_finite_matrix(stage: &str, m: &Array2<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RhymeError::numeric(stage, "non-finite intermediate value"))
    }
}

fn check_store(params: &ParameterStore, cfg: &ModelConfig) -> Result<()> {
    if *params.layout() != ParamLayout::for_config(cfg) {
        return Err(RhymeError::Shape(
            "parameter store layout does not match the model config".into(),
        ));
    }
    Ok(())
}

/// Unrolls a channels x frames matrix into convolution columns: row
/// ci*k + j of the result holds channel ci shifted by j - k/2, zero padded.
/// A kernel-major flat weight [c_out, c_in, k] viewed as (c_out, c_in*k)
/// then convolves as a single matrix product.
fn im2col(input: &Array2<f64>, k: usize) -> Array2<f64> {
    let (c_in, t) = input.dim();
    let pad = (k / 2) as isize;
    let mut cols = Array2::zeros((c_in * k, t));
    for ci in 0..c_in {
        for j in 0..k {
            let shift = j as isize - pad;
            let run = t.saturating_sub(shift.unsigned_abs());
            if run == 0 {
                continue;
            }
            let (dst_lo, src_lo) =
                if shift < 0 { ((-shift) as usize, 0) } else { (0, shift as usize) };
            let src = input.slice(s![ci, src_lo..src_lo + run]);
            cols.slice_mut(s![ci * k + j, dst_lo..dst_lo + run]).assign(&src);
        }
    }
    cols
}

/// Adjoint of `im2col`: scatters column cotangents back onto the input.
fn col2im(d_cols: &Array2<f64>, c_in: usize, k: usize, t: usize) -> Array2<f64> {
    let pad = (k / 2) as isize;
    let mut out = Array2::zeros((c_in, t));
    for ci in 0..c_in {
        for j in 0..k {
            let shift = j as isize - pad;
            let run = t.saturating_sub(shift.unsigned_abs());
            if run == 0 {
                continue;
            }
            let (dst_lo, src_lo) =
                if shift < 0 { ((-shift) as usize, 0) } else { (0, shift as usize) };
            let mut dst = out.slice_mut(s![ci, src_lo..src_lo + run]);
            dst += &d_cols.slice(s![ci * k + j, dst_lo..dst_lo + run]);
        }
    }
    out
}

fn conv_weight_view<'a>(
    params: &'a ParameterStore,
    cfg: &ModelConfig,
    layer: usize,
) -> ArrayView2<'a, f64> {
    let c_in = if layer == 0 { cfg.input_dim } else { cfg.conv_channels };
    let flat = params.get(&format!("conv{layer}.weight"));
    ArrayView2::from_shape((cfg.conv_channels, c_in * cfg.kernel_size), flat)
        .expect("layout guarantees the weight length")
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows).map(|r| dot(&w[r * cols..(r + 1) * cols], x) + b[r]).collect()
}

pub(crate) fn log_sum_exp2(l: [f64; 2]) -> f64 {
    let m = l[0].max(l[1]);
    m + ((l[0] - m).exp() + (l[1] - m).exp()).ln()
}

pub(crate) fn softmax2(l: [f64; 2]) -> [f64; 2] {
    let lse = log_sum_exp2(l);
    [(l[0] - lse).exp(), (l[1] - lse).exp()]
}

/// Runs the full pipeline on one utterance and returns the trace.
///
/// In train mode with a nonzero dropout rate the caller must supply the
/// dropout stream; eval mode ignores it and is bitwise deterministic.
/// Every stage checks its output for non-finite values and reports the
/// stage name on failure.
pub fn forward(
    seq: &EmbeddingSequence,
    params: &ParameterStore,
    cfg: &ModelConfig,
    mode: Mode,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    check_store(params, cfg)?;
    if seq.dim() != cfg.input_dim {
        return Err(RhymeError::Shape(format!(
            "embedding dim {} does not match model input dim {}",
            seq.dim(),
            cfg.input_dim
        )));
    }
    let t_frames = seq.num_frames();
    let d = cfg.utterance_dim;
    let c = cfg.conv_channels;

    let mut input = Array2::zeros((cfg.input_dim, t_frames));
    for ((i, j), &v) in seq.frames().indexed_iter() {
        input[(j, i)] = v as f64;
    }

    let mut conv_outs: Vec<Array2<f64>> = Vec::with_capacity(cfg.conv_layers);
    for l in 0..cfg.conv_layers {
        let prev = if l == 0 { &input } else { &conv_outs[l - 1] };
        let cols = im2col(prev, cfg.kernel_size);
        let mut out = conv_weight_view(params, cfg, l).dot(&cols);
        for (mut row, &b) in out.outer_iter_mut().zip(params.get(&format!("conv{l}.bias"))) {
            row.mapv_inplace(|v| (v + b).max(0.0));
        }
        ensure_finite_matrix(&format!("conv{l}"), &out)?;
        conv_outs.push(out);
    }

    let pooled = conv_outs[cfg.conv_layers - 1]
        .mean_axis(Axis(1))
        .expect("frame count is positive")
        .to_vec();
    ensure_finite("pool", &pooled)?;

    let u_raw = affine(params.get("proj.weight"), params.get("proj.bias"), &pooled, d, c);
    ensure_finite("proj", &u_raw)?;

    let (u, dropout_mask) = if mode == Mode::Train && cfg.dropout_p > 0.0 {
        let rng = dropout_rng.ok_or_else(|| {
            RhymeError::InvalidArgument(
                "train-mode forward with dropout needs a dropout rng".into(),
            )
        })?;
        let keep = 1.0 - cfg.dropout_p;
        let mask: Vec<bool> = (0..d).map(|_| rng.gen::<f64>() >= cfg.dropout_p).collect();
        let u = u_raw
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v / keep } else { 0.0 })
            .collect();
        (u, Some(mask))
    } else {
        (u_raw.clone(), None)
    };
    ensure_finite("dropout", &u)?;

    let (gate_z, alpha) = if cfg.ablation == Ablation::NoGating {
        (0.0, 0.5)
    } else {
        let z = dot(params.get("gate.weight"), &u) + params.scalar("gate.bias");
        ensure_finite("gate", &[z])?;
        (z, sigmoid(z))
    };

    let u_h: Vec<f64> = u.iter().map(|&v| alpha * v).collect();
    let u_s: Vec<f64> = u.iter().map(|&v| (1.0 - alpha) * v).collect();

    let mut x_h = None;
    let mut x_s = None;
    let mut y_s = None;
    let mut log_x_h = None;
    let mut log_y_s = None;
    let mut fused_tangent = None;
    let mut z_pre = None;
    let mut z_star = None;
    let mut sphere_fallback = false;

    let readout: Vec<f64> = if cfg.ablation == Ablation::EuclideanFusion {
        u_h.iter().zip(&u_s).map(|(&a, &b)| alpha * a + (1.0 - alpha) * b).collect()
    } else {
        let curv = Curvature::from_rho(params.scalar("curvature.rho"))?;
        if cfg.ablation != Ablation::NoHyperbolic {
            x_h = Some(exp_map(&u_h, &curv)?);
        }
        if cfg.ablation != Ablation::NoSpherical {
            let direction = if norm(&u_s) < EPS_NORM {
                // constant fallback direction; keeps degenerate inputs on
                // the sphere without dividing by a vanishing norm
                sphere_fallback = true;
                let mut e = vec![0.0; d];
                e[0] = 1.0;
                e
            } else {
                sphere_normalize(&u_s)?
            };
            // At unit norm the disk chart leaves the direction unchanged,
            // so re-embedding is a plain rescale pulled inside the ball.
            let scale = cfg.shrink / curv.sqrt_c();
            let y_pre: Vec<f64> = direction.iter().map(|&v| scale * v).collect();
            y_s = Some(project_to_ball(&y_pre, &curv, DEFAULT_MARGIN)?);
            x_s = Some(direction);
        }
        let r = match cfg.ablation {
            Ablation::NoSpherical => {
                let xh = x_h.as_ref().expect("hyperbolic branch ran");
                z_star = Some(xh.clone());
                log_map(xh, &curv)?
            }
            Ablation::NoHyperbolic => {
                let ys = y_s.as_ref().expect("spherical branch ran");
                z_star = Some(ys.clone());
                log_map(ys, &curv)?
            }
            _ => {
                let a = log_map(x_h.as_ref().expect("hyperbolic branch ran"), &curv)?;
                let b = log_map(y_s.as_ref().expect("spherical branch ran"), &curv)?;
                let w: Vec<f64> =
                    a.iter().zip(&b).map(|(&ai, &bi)| alpha * ai + (1.0 - alpha) * bi).collect();
                let zp = exp_map(&w, &curv)?;
                let zs = project_to_ball(&zp, &curv, DEFAULT_MARGIN)?;
                let r = log_map(&zs, &curv)?;
                log_x_h = Some(a);
                log_y_s = Some(b);
                fused_tangent = Some(w);
                z_pre = Some(zp);
                z_star = Some(zs);
                r
            }
        };
        r
    };
    ensure_finite("readout", &readout)?;

    let cls = affine(params.get("cls.weight"), params.get("cls.bias"), &readout, 2, d);
    let logits = [cls[0], cls[1]];
    ensure_finite("classifier", &logits)?;
    let probs = softmax2(logits);
    ensure_finite("softmax", &probs)?;

    Ok(ForwardTrace {
        input,
        conv_outs,
        pooled,
        u_raw,
        dropout_mask,
        u,
        gate_z,
        alpha,
        u_h,
        u_s,
        x_h,
        x_s,
        sphere_fallback,
        y_s,
        log_x_h,
        log_y_s,
        fused_tangent,
        z_pre,
        z_star,
        readout,
        logits,
        probs,
        mode,
    })
}

/// Spoof probability of one utterance under eval mode.
pub fn predict_score(
    seq: &EmbeddingSequence,
    params: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<f64> {
    Ok(forward(seq, params, cfg, Mode::Eval, None)?.probs[1])
}

/// Eval-mode scores for a batch, in input order. Scoring is read-only over
/// the parameters, so utterances run in parallel on the current pool.
pub fn score_utterances(
    items: &[LoadedUtterance],
    params: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    items.par_iter().map(|it| predict_score(&it.seq, params, cfg)).collect()
}

// ─── backward ────────────────────────────────────────────────────────────

fn trace_field<'a>(field: &'a Option<Vec<f64>>, name: &str) -> Result<&'a [f64]> {
    field
        .as_deref()
        .ok_or_else(|| RhymeError::Shape(format!("trace is missing `{name}` for this ablation")))
}

/// Reverse pass of the spherical branch: pulls a cotangent on y_s back to
/// the shared embedding and the curvature. The fallback direction is a
/// constant, so it passes nothing to the embedding.
fn spherical_branch_backward(
    trace: &ForwardTrace,
    cfg: &ModelConfig,
    curv: &Curvature,
    d_ys: &[f64],
    d_us: &mut [f64],
    d_rho: &mut f64,
) -> Result<()> {
    let xs = trace_field(&trace.x_s, "x_s")?;
    let scale = cfg.shrink / curv.sqrt_c();
    let y_pre: Vec<f64> = xs.iter().map(|&v| scale * v).collect();
    let pp = project_to_ball_vjp(&y_pre, curv, DEFAULT_MARGIN, d_ys)?;
    *d_rho += pp.d_rho;
    // y_pre = (shrink/sqrt(c)) * x_s, so the scale carries its own
    // curvature term: d(scale)/dc = -shrink / (2 c^(3/2))
    let d_scale = dot(&pp.d_x, xs);
    let c = curv.c();
    let d_c = d_scale * (-0.5 * cfg.shrink / (c * curv.sqrt_c()));
    *d_rho += d_c * curv.dc_drho();
    if trace.sphere_fallback {
        return Ok(());
    }
    let d_xs: Vec<f64> = pp.d_x.iter().map(|&v| scale * v).collect();
    let pn = sphere_normalize_vjp(&trace.u_s, &d_xs)?;
    for (a, b) in d_us.iter_mut().zip(pn) {
        *a += b;
    }
    Ok(())
}

/// Gradients of the cross-entropy loss at `label` with respect to every
/// parameter, computed by hand-rolled reverse mode over the trace. The
/// trace must come from a train-mode forward on the same store and config.
pub fn backward(
    trace: &ForwardTrace,
    params: &ParameterStore,
    cfg: &ModelConfig,
    label: ClassLabel,
) -> Result<GradientStore> {
    cfg.validate()?;
    check_store(params, cfg)?;
    if trace.mode != Mode::Train {
        return Err(RhymeError::InvalidArgument(
            "backward needs a trace from a train-mode forward".into(),
        ));
    }
    let d = cfg.utterance_dim;
    let c = cfg.conv_channels;
    if trace.u.len() != d
        || trace.pooled.len() != c
        || trace.conv_outs.len() != cfg.conv_layers
        || trace.input.nrows() != cfg.input_dim
    {
        return Err(RhymeError::Shape("trace shape does not match the model config".into()));
    }

    let mut g = params.zeros_like();

    // softmax cross-entropy head
    let onehot = match label {
        ClassLabel::Bonafide => [1.0, 0.0],
        ClassLabel::Spoof => [0.0, 1.0],
    };
    let d_logits = [trace.probs[0] - onehot[0], trace.probs[1] - onehot[1]];
    {
        let gw = g.get_mut("cls.weight");
        for k in 0..2 {
            for j in 0..d {
                gw[k * d + j] += d_logits[k] * trace.readout[j];
            }
        }
    }
    {
        let gb = g.get_mut("cls.bias");
        gb[0] += d_logits[0];
        gb[1] += d_logits[1];
    }
    let cls_w = params.get("cls.weight");
    let mut d_readout = vec![0.0; d];
    for j in 0..d {
        d_readout[j] = cls_w[j] * d_logits[0] + cls_w[d + j] * d_logits[1];
    }

    // fusion stage, split by ablation
    let mut d_uh = vec![0.0; d];
    let mut d_us = vec![0.0; d];
    let mut d_alpha = 0.0;
    let mut d_rho = 0.0;
    match cfg.ablation {
        Ablation::EuclideanFusion => {
            for j in 0..d {
                d_uh[j] = trace.alpha * d_readout[j];
                d_us[j] = (1.0 - trace.alpha) * d_readout[j];
            }
            d_alpha += dot(&d_readout, &trace.u_h) - dot(&d_readout, &trace.u_s);
        }
        Ablation::NoSpherical => {
            let curv = Curvature::from_rho(params.scalar("curvature.rho"))?;
            let pl = log_map_vjp(trace_field(&trace.x_h, "x_h")?, &curv, &d_readout)?;
            d_rho += pl.d_rho;
            let pe = exp_map_vjp(&trace.u_h, &curv, &pl.d_x)?;
            d_rho += pe.d_rho;
            d_uh = pe.d_x;
        }
        Ablation::NoHyperbolic => {
            let curv = Curvature::from_rho(params.scalar("curvature.rho"))?;
            let pl = log_map_vjp(trace_field(&trace.y_s, "y_s")?, &curv, &d_readout)?;
            d_rho += pl.d_rho;
            spherical_branch_backward(trace, cfg, &curv, &pl.d_x, &mut d_us, &mut d_rho)?;
        }
        Ablation::Full | Ablation::NoGating => {
            let curv = Curvature::from_rho(params.scalar("curvature.rho"))?;
            let z_star = trace_field(&trace.z_star, "z_star")?;
            let z_pre = trace_field(&trace.z_pre, "z_pre")?;
            let w = trace_field(&trace.fused_tangent, "fused_tangent")?;
            let log_a = trace_field(&trace.log_x_h, "log_x_h")?;
            let log_b = trace_field(&trace.log_y_s, "log_y_s")?;

            let pl = log_map_vjp(z_star, &curv, &d_readout)?;
            d_rho += pl.d_rho;
            let pp = project_to_ball_vjp(z_pre, &curv, DEFAULT_MARGIN, &pl.d_x)?;
            d_rho += pp.d_rho;
            let pe = exp_map_vjp(w, &curv, &pp.d_x)?;
            d_rho += pe.d_rho;
            let d_w = pe.d_x;

            for j in 0..d {
                d_alpha += (log_a[j] - log_b[j]) * d_w[j];
            }
            let d_log_a: Vec<f64> = d_w.iter().map(|&v| trace.alpha * v).collect();
            let pa = log_map_vjp(trace_field(&trace.x_h, "x_h")?, &curv, &d_log_a)?;
            d_rho += pa.d_rho;
            let pea = exp_map_vjp(&trace.u_h, &curv, &pa.d_x)?;
            d_rho += pea.d_rho;
            d_uh = pea.d_x;

            let d_log_b: Vec<f64> = d_w.iter().map(|&v| (1.0 - trace.alpha) * v).collect();
            let pb = log_map_vjp(trace_field(&trace.y_s, "y_s")?, &curv, &d_log_b)?;
            d_rho += pb.d_rho;
            spherical_branch_backward(trace, cfg, &curv, &pb.d_x, &mut d_us, &mut d_rho)?;
        }
    }
    if cfg.ablation != Ablation::EuclideanFusion {
        g.get_mut("curvature.rho")[0] += d_rho;
    }

    // split stage: u_h = alpha u, u_s = (1 - alpha) u
    let mut d_u: Vec<f64> =
        (0..d).map(|j| trace.alpha * d_uh[j] + (1.0 - trace.alpha) * d_us[j]).collect();
    d_alpha += dot(&d_uh, &trace.u) - dot(&d_us, &trace.u);

    if cfg.ablation != Ablation::NoGating {
        let dz = trace.alpha * (1.0 - trace.alpha) * d_alpha;
        {
            let gw = g.get_mut("gate.weight");
            for j in 0..d {
                gw[j] += dz * trace.u[j];
            }
        }
        g.get_mut("gate.bias")[0] += dz;
        let gate_w = params.get("gate.weight");
        for j in 0..d {
            d_u[j] += dz * gate_w[j];
        }
    }

    let d_u_raw: Vec<f64> = match &trace.dropout_mask {
        Some(mask) => {
            let keep = 1.0 - cfg.dropout_p;
            d_u.iter().zip(mask).map(|(&v, &m)| if m { v / keep } else { 0.0 }).collect()
        }
        None => d_u,
    };

    {
        let gw = g.get_mut("proj.weight");
        for j in 0..d {
            let dj = d_u_raw[j];
            if dj != 0.0 {
                for ci in 0..c {
                    gw[j * c + ci] += dj * trace.pooled[ci];
                }
            }
        }
    }
    {
        let gb = g.get_mut("proj.bias");
        for j in 0..d {
            gb[j] += d_u_raw[j];
        }
    }
    let proj_w = params.get("proj.weight");
    let mut d_pooled = vec![0.0; c];
    for j in 0..d {
        let dj = d_u_raw[j];
        if dj != 0.0 {
            for (acc, &w) in d_pooled.iter_mut().zip(&proj_w[j * c..(j + 1) * c]) {
                *acc += w * dj;
            }
        }
    }

    // mean pool spreads the cotangent evenly over frames
    let t_frames = trace.input.ncols();
    let inv_t = 1.0 / t_frames as f64;
    let mut d_out = Array2::from_shape_fn((c, t_frames), |(ci, _)| d_pooled[ci] * inv_t);

    for l in (0..cfg.conv_layers).rev() {
        let post = &trace.conv_outs[l];
        if post.dim() != d_out.dim() {
            return Err(RhymeError::Shape("trace conv shape does not match the model".into()));
        }
        ndarray::azip!((dy in &mut d_out, &p in post) if p <= 0.0 { *dy = 0.0 });
        let prev = if l == 0 { &trace.input } else { &trace.conv_outs[l - 1] };
        let cols = im2col(prev, cfg.kernel_size);
        let d_w2 = d_out.dot(&cols.t());
        {
            let gw = g.get_mut(&format!("conv{l}.weight"));
            for (acc, &v) in gw.iter_mut().zip(d_w2.iter()) {
                *acc += v;
            }
        }
        {
            let gb = g.get_mut(&format!("conv{l}.bias"));
            for (acc, v) in gb.iter_mut().zip(d_out.sum_axis(Axis(1))) {
                *acc += v;
            }
        }
        if l > 0 {
            let d_cols = conv_weight_view(params, cfg, l).t().dot(&d_out);
            d_out = col2im(&d_cols, cfg.conv_channels, cfg.kernel_size, t_frames);
        }
    }

    ensure_finite("gradients", g.values())?;
    Ok(g)
}
