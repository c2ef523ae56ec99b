//! Conditional normalizing flow over T×F frame matrices.
//!
//! A stack of affine coupling layers with alternating orientations: each
//! layer passes one feature-half through untouched, and shifts/scales the
//! other half by functions of the untouched half plus a learned projection
//! of the conditioning embedding ω (a global condition, broadcast over
//! time). The Jacobian is triangular, so the log-determinant is just the
//! sum of the log-scales, and the exact conditional log-likelihood follows
//! from the change-of-variables formula against a standard-normal base.
//!
//! The log-scale is squashed through `s_max · tanh(x / s_max)` before use,
//! which bounds it to (−s_max, s_max) and prevents `exp` overflow early in
//! training; the log-determinant uses the squashed value.
//!
//! Like the encoder, everything exists as plain matrix functions plus a
//! bit-identical tape twin ([`loglik_on_tape`]) for training.

use crate::seeds;
use crate::tape::{NodeId, Tape, LN_2PI};
use crate::{Error, Result};
use ndarray::{s, Array2};
use rand::Rng;

/// Default bound on the log-scale outputs.
pub const DEFAULT_S_MAX: f64 = 5.0;

/// One affine coupling layer and its conditioner parameters.
///
/// The conditioner is a one-hidden-layer map applied to each time step's
/// untouched half, with the projected embedding added into the hidden
/// layer (shared across time steps):
///
/// ```text
/// hidden = tanh(z_a · wzᵀ + bz + ω · wpᵀ)      (T×G)
/// out    = hidden · woᵀ + bo                   (T×F)
/// μ = out[:, :F/2],  σ = s_max·tanh(out[:, F/2:] / s_max)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// G × F/2 — hidden map of the untouched half.
    pub wz: Array2<f64>,
    /// 1 × G hidden bias.
    pub bz: Array2<f64>,
    /// G × D — embedding projection (the global conditioning path).
    pub wp: Array2<f64>,
    /// F × G — output map; rows 0..F/2 produce μ, rows F/2.. produce the
    /// raw log-scale.
    pub wo: Array2<f64>,
    /// 1 × F output bias.
    pub bo: Array2<f64>,
    /// false: left half passes through; true: right half passes through.
    pub flip: bool,
}

impl CouplingLayer {
    fn init<R: Rng>(rng: &mut R, half: usize, d: usize, g: usize, flip: bool) -> Self {
        CouplingLayer {
            wz: seeds::normal_array(rng, g, half, 1.0 / (half as f64).sqrt()),
            bz: Array2::zeros((1, g)),
            wp: seeds::normal_array(rng, g, d, 1.0 / (d as f64).sqrt()),
            // Zero output map → the layer starts as the identity transform.
            wo: Array2::zeros((2 * half, g)),
            bo: Array2::zeros((1, 2 * half)),
            flip,
        }
    }
}

/// The full flow: coupling layers over a fixed (T, F) shape with a
/// standard-normal base distribution, conditioned on D-dimensional
/// embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub layers: Vec<CouplingLayer>,
    pub t: usize,
    pub f: usize,
    pub d: usize,
    pub s_max: f64,
}

impl FlowModel {
    /// Seeded initialization with alternating orientations and identity
    /// (zero) output maps.
    pub fn init<R: Rng>(rng: &mut R, t: usize, f: usize, d: usize, depth: usize, hidden: usize) -> Result<Self> {
        if f < 2 || !f.is_multiple_of(2) {
            return Err(Error::Config(format!("flow needs even F >= 2, got {f}")));
        }
        if depth < 1 {
            return Err(Error::Config("flow needs at least one layer".into()));
        }
        let layers = (0..depth)
            .map(|i| CouplingLayer::init(rng, f / 2, d, hidden, i % 2 == 1))
            .collect();
        Ok(FlowModel { layers, t, f, d, s_max: DEFAULT_S_MAX })
    }

    pub fn half(&self) -> usize {
        self.f / 2
    }

    pub fn dims(&self) -> usize {
        self.t * self.f
    }

    /// Named parameter views in checkpoint/optimizer order.
    pub fn params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("flow.{i}.wz"), &l.wz));
            out.push((format!("flow.{i}.bz"), &l.bz));
            out.push((format!("flow.{i}.wp"), &l.wp));
            out.push((format!("flow.{i}.wo"), &l.wo));
            out.push((format!("flow.{i}.bo"), &l.bo));
        }
        out
    }

    /// Mutable variant of [`FlowModel::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("flow.{i}.wz"), &mut l.wz));
            out.push((format!("flow.{i}.bz"), &mut l.bz));
            out.push((format!("flow.{i}.wp"), &mut l.wp));
            out.push((format!("flow.{i}.wo"), &mut l.wo));
            out.push((format!("flow.{i}.bo"), &mut l.bo));
        }
        out
    }

    fn validate_input(&self, z: &Array2<f64>, omega: &Array2<f64>) -> Result<()> {
        if z.dim() != (self.t, self.f) {
            return Err(Error::Shape(format!(
                "input shape {:?}, flow expects ({}, {})",
                z.dim(),
                self.t,
                self.f
            )));
        }
        if omega.dim() != (1, self.d) {
            return Err(Error::Shape(format!(
                "conditioning shape {:?}, flow expects (1, {})",
                omega.dim(),
                self.d
            )));
        }
        Ok(())
    }
}

/// The conditioner outputs (σ, μ) for one layer given the untouched half
/// and the embedding. σ is already squashed.
pub fn conditioner_apply(
    layer: &CouplingLayer,
    z_a: &Array2<f64>,
    omega: &Array2<f64>,
    s_max: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let half = layer.wz.ncols();
    if z_a.ncols() != half {
        return Err(Error::Shape(format!(
            "untouched half has {} columns, conditioner expects {half}",
            z_a.ncols()
        )));
    }
    if omega.dim() != (1, layer.wp.ncols()) {
        return Err(Error::Shape("conditioning vector shape mismatch".into()));
    }
    let lin = z_a.dot(&layer.wz.t()) + &layer.bz;
    let hidden = (lin + &omega.dot(&layer.wp.t())).mapv(f64::tanh);
    let out = hidden.dot(&layer.wo.t()) + &layer.bo;
    let mu = out.slice(s![.., ..half]).to_owned();
    let sigma = out.slice(s![.., half..]).to_owned().mapv(|x| s_max * (x / s_max).tanh());
    Ok((sigma, mu))
}

fn split(z: &Array2<f64>, half: usize, flip: bool) -> (Array2<f64>, Array2<f64>) {
    let left = z.slice(s![.., ..half]).to_owned();
    let right = z.slice(s![.., half..]).to_owned();
    if flip {
        (right, left)
    } else {
        (left, right)
    }
}

fn join(z_a: &Array2<f64>, z_b: &Array2<f64>, flip: bool) -> Array2<f64> {
    let (t, ha) = z_a.dim();
    let hb = z_b.ncols();
    let mut out = Array2::zeros((t, ha + hb));
    if flip {
        out.slice_mut(s![.., ..hb]).assign(z_b);
        out.slice_mut(s![.., hb..]).assign(z_a);
    } else {
        out.slice_mut(s![.., ..ha]).assign(z_a);
        out.slice_mut(s![.., ha..]).assign(z_b);
    }
    out
}

fn check_finite(z: &Array2<f64>, layer_idx: usize, direction: &str) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite value after coupling layer {layer_idx} ({direction})"
        )));
    }
    Ok(())
}

/// One coupling step: the untouched half passes through bit-exactly, the
/// other half is scaled by exp(σ) and shifted by μ. Returns the new matrix
/// and the layer's log-determinant Σσ.
pub fn layer_forward(
    layer: &CouplingLayer,
    layer_idx: usize,
    z: &Array2<f64>,
    omega: &Array2<f64>,
    s_max: f64,
) -> Result<(Array2<f64>, f64)> {
    let half = layer.wz.ncols();
    let (z_a, z_b) = split(z, half, layer.flip);
    let (sigma, mu) = conditioner_apply(layer, &z_a, omega, s_max)?;
    let z_b = &z_b * &sigma.mapv(f64::exp) + &mu;
    let out = join(&z_a, &z_b, layer.flip);
    check_finite(&out, layer_idx, "forward")?;
    Ok((out, sigma.sum()))
}

/// Exact algebraic inverse of [`layer_forward`].
pub fn layer_inverse(
    layer: &CouplingLayer,
    layer_idx: usize,
    z: &Array2<f64>,
    omega: &Array2<f64>,
    s_max: f64,
) -> Result<Array2<f64>> {
    let half = layer.wz.ncols();
    let (z_a, z_b) = split(z, half, layer.flip);
    let (sigma, mu) = conditioner_apply(layer, &z_a, omega, s_max)?;
    let z_b = (&z_b - &mu) * &sigma.mapv(|v| (-v).exp());
    let out = join(&z_a, &z_b, layer.flip);
    check_finite(&out, layer_idx, "inverse")?;
    Ok(out)
}

/// Full data-to-latent pass: returns the latent matrix and the total
/// log-determinant.
pub fn forward(model: &FlowModel, x: &Array2<f64>, omega: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    model.validate_input(x, omega)?;
    let mut z = x.clone();
    let mut logdet = 0.0;
    for (i, layer) in model.layers.iter().enumerate() {
        let (next, ld) = layer_forward(layer, i, &z, omega, model.s_max)?;
        z = next;
        logdet += ld;
    }
    Ok((z, logdet))
}

/// Full latent-to-data pass, the inverse of [`forward`].
pub fn inverse(model: &FlowModel, z: &Array2<f64>, omega: &Array2<f64>) -> Result<Array2<f64>> {
    model.validate_input(z, omega)?;
    let mut x = z.clone();
    for (i, layer) in model.layers.iter().enumerate().rev() {
        x = layer_inverse(layer, i, &x, omega, model.s_max)?;
    }
    Ok(x)
}

/// log p(x | ω) in nats: standard-normal log-density of the latent plus
/// the total log-determinant.
pub fn conditional_log_likelihood(model: &FlowModel, x: &Array2<f64>, omega: &Array2<f64>) -> Result<f64> {
    let (z, logdet) = forward(model, x, omega)?;
    let base = -0.5 * z.mapv(|v| v * v).sum() - 0.5 * LN_2PI * z.len() as f64;
    Ok(base + logdet)
}

/// log p(x | ω) normalized per dimension (divided by T·F) — the scale on
/// which the redundancy term operates.
pub fn loglik_per_dim(model: &FlowModel, x: &Array2<f64>, omega: &Array2<f64>) -> Result<f64> {
    // Multiply by the reciprocal (not divide) so the value is bit-identical
    // to the tape path, which scales by a constant factor.
    Ok(conditional_log_likelihood(model, x, omega)? * (1.0 / model.dims() as f64))
}

/// Mean over the batch of −loglik/(T·F).
pub fn nll_loss(model: &FlowModel, batch: &[(Array2<f64>, Array2<f64>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut total = 0.0;
    for (x, omega) in batch {
        total -= loglik_per_dim(model, x, omega)?;
    }
    Ok(total / batch.len() as f64)
}

/// Tape leaves for every flow parameter, in [`FlowModel::params`] order.
pub struct FlowNodes {
    pub layers: Vec<LayerNodes>,
    flips: Vec<bool>,
    half: usize,
    s_max: f64,
    dims: usize,
}

pub struct LayerNodes {
    pub wz: NodeId,
    pub bz: NodeId,
    pub wp: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl FlowNodes {
    pub fn insert(t: &mut Tape, model: &FlowModel) -> Self {
        FlowNodes {
            layers: model
                .layers
                .iter()
                .map(|l| LayerNodes {
                    wz: t.leaf(l.wz.clone()),
                    bz: t.leaf(l.bz.clone()),
                    wp: t.leaf(l.wp.clone()),
                    wo: t.leaf(l.wo.clone()),
                    bo: t.leaf(l.bo.clone()),
                })
                .collect(),
            flips: model.layers.iter().map(|l| l.flip).collect(),
            half: model.half(),
            s_max: model.s_max,
            dims: model.dims(),
        }
    }

    /// `(name, node)` pairs matching [`FlowModel::params`] order.
    pub fn named(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("flow.{i}.wz"), l.wz));
            out.push((format!("flow.{i}.bz"), l.bz));
            out.push((format!("flow.{i}.wp"), l.wp));
            out.push((format!("flow.{i}.wo"), l.wo));
            out.push((format!("flow.{i}.bo"), l.bo));
        }
        out
    }
}

/// Differentiable twin of [`loglik_per_dim`]: x node (T×F) and ω node
/// (1×D) to per-dimension log-likelihood (1×1). Gradients flow into x, ω,
/// and the flow parameters.
pub fn loglik_on_tape(t: &mut Tape, x: NodeId, omega: NodeId, nodes: &FlowNodes) -> NodeId {
    let half = nodes.half;
    let mut z = x;
    let mut logdets = Vec::with_capacity(nodes.layers.len());
    for (l, &flip) in nodes.layers.iter().zip(&nodes.flips) {
        let f = 2 * half;
        let (a_lo, a_hi, b_lo, b_hi) = if flip {
            (half, f, 0, half)
        } else {
            (0, half, half, f)
        };
        let z_a = t.cols(z, a_lo, a_hi);
        let z_b = t.cols(z, b_lo, b_hi);
        let lin = t.matmul_nt(z_a, l.wz);
        let biased = t.add_row(lin, l.bz);
        let cond = t.matmul_nt(omega, l.wp);
        let with_cond = t.add_row(biased, cond);
        let hidden = t.tanh(with_cond);
        let out_lin = t.matmul_nt(hidden, l.wo);
        let out = t.add_row(out_lin, l.bo);
        let mu = t.cols(out, 0, half);
        let sigma_raw = t.cols(out, half, f);
        let sigma = t.scaled_tanh(sigma_raw, nodes.s_max);
        let scale = t.exp(sigma);
        let scaled = t.mul(z_b, scale);
        let z_b_new = t.add(scaled, mu);
        z = if flip {
            t.hcat(z_b_new, z_a)
        } else {
            t.hcat(z_a, z_b_new)
        };
        logdets.push(t.sum_all(sigma));
    }
    // Sum the log-determinants first and add the base term once, matching
    // the accumulation order of the plain path bit for bit.
    let mut logdet = logdets[0];
    for &ld in &logdets[1..] {
        logdet = t.add(logdet, ld);
    }
    let base = t.std_normal_logpdf(z);
    let total = t.add(base, logdet);
    t.scale(total, 1.0 / nodes.dims as f64)
}
