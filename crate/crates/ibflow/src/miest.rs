//! Mutual-information upper-bound estimation and the redundancy loss.
//!
//! The estimator is the contrastive log-ratio upper bound: the mean paired
//! conditional log-likelihood minus the mean unpaired one,
//!
//! ```text
//! I(X; ω)  ≤  E_p(X,ω)[ℓ(X|ω)] − E_p(X)p(ω)[ℓ(X|ω)]
//! ```
//!
//! with ℓ the per-dimension conditional log-likelihood under the flow. The
//! unpaired expectation is sampled from a minibatch either over all B²
//! ordered pairs (exact sample analogue, O(B²) likelihood evaluations) or
//! along one seeded derangement (O(B)).
//!
//! Internally the estimate is accumulated from paired-minus-unpaired
//! *differences*, which makes two degenerate cases exact rather than
//! approximate: a likelihood that ignores ω, or a batch whose embeddings
//! are all identical, each give a difference of exactly 0.0 per pair and
//! hence an estimate of exactly 0.0. The positive and negative terms are
//! still reported separately and always satisfy
//! `value == positive_term − negative_term` bit-for-bit.
//!
//! [`redundancy_on_tape`] is the differentiable twin used while training
//! the embedding network against a frozen flow; it reproduces
//! [`club_estimate`]'s value bit-exactly for the same inputs, mode, and
//! seed.

use crate::encoder::Embedding;
use crate::flow::{self, FlowModel, FlowNodes};
use crate::seeds;
use crate::tape::{NodeId, Tape, LN_2PI};
use crate::{Error, Result};
use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How the unpaired expectation is sampled from a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// All B² ordered pairs, i = j included (sampling with replacement).
    AllPairs,
    /// One seeded derangement: sample i is paired against ω_π(i), π(i) ≠ i.
    Derangement,
}

impl NegativeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NegativeMode::AllPairs => "all_pairs",
            NegativeMode::Derangement => "derangement",
        }
    }
}

impl std::fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_pairs" => Ok(NegativeMode::AllPairs),
            "derangement" => Ok(NegativeMode::Derangement),
            other => Err(Error::Config(format!(
                "unknown negative-sampling mode {other:?} (expected all_pairs or derangement)"
            ))),
        }
    }
}

/// Default mode for a batch of size `b`: exact all-pairs while the O(B²)
/// cost is cheap, derangement beyond that.
pub fn default_mode(b: usize) -> NegativeMode {
    if b <= 64 {
        NegativeMode::AllPairs
    } else {
        NegativeMode::Derangement
    }
}

/// A mutual-information upper-bound estimate and its two terms (nats; the
/// likelihoods are per-dimension, so the bound is per-dimension too when ℓ
/// is).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MIEstimate {
    /// positive_term − negative_term: the upper-bound estimate.
    pub value: f64,
    /// Mean paired log-likelihood (1/B) Σ_i ℓ(x_i|ω_i).
    pub positive_term: f64,
    /// Mean unpaired log-likelihood under the chosen mode.
    pub negative_term: f64,
    pub batch_size: usize,
    pub mode: NegativeMode,
}

/// The derangement used for a given seed and batch size; shared by the
/// plain and tape paths so they stay bit-identical.
fn derangement_for(seed: u64, b: usize) -> Vec<usize> {
    seeds::derangement(&mut seeds::stream(seed, "club/derangement"), b)
}

/// Core estimator over an arbitrary log-likelihood table `ll(i, j)` =
/// ℓ(x_i | ω_j). Returns the estimate and its standard error (the sample
/// standard deviation of the per-sample paired-minus-unpaired differences,
/// divided by √B).
#[allow(clippy::needless_range_loop)]
pub fn club_scored(
    b: usize,
    mode: NegativeMode,
    seed: u64,
    mut ll: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<(MIEstimate, f64)> {
    if b < 2 {
        return Err(Error::Domain(format!(
            "the unpaired term needs a batch of at least 2, got {b}"
        )));
    }
    let mut diag = Vec::with_capacity(b);
    for i in 0..b {
        diag.push(ll(i, i)?);
    }
    let mut pos_sum = 0.0;
    for &d in &diag {
        pos_sum += d;
    }
    let positive = pos_sum * (1.0 / b as f64);

    // Mean paired-minus-unpaired difference, plus per-sample differences
    // for the standard error.
    let (diff_mean, per_sample) = match mode {
        NegativeMode::AllPairs => {
            let mut diff_sum = 0.0;
            let mut per = Vec::with_capacity(b);
            let inv_b = 1.0 / b as f64;
            for i in 0..b {
                let mut row_diff = 0.0;
                for j in 0..b {
                    let l = if j == i { diag[i] } else { ll(i, j)? };
                    diff_sum += diag[i] - l;
                    row_diff += diag[i] - l;
                }
                per.push(row_diff * inv_b);
            }
            (diff_sum * (1.0 / (b * b) as f64), per)
        }
        NegativeMode::Derangement => {
            let pi = derangement_for(seed, b);
            let mut diff_sum = 0.0;
            let mut per = Vec::with_capacity(b);
            for i in 0..b {
                let l = ll(i, pi[i])?;
                diff_sum += diag[i] - l;
                per.push(diag[i] - l);
            }
            (diff_sum * (1.0 / b as f64), per)
        }
    };

    let negative = positive - diff_mean;
    let value = positive - negative;
    let se = standard_error(&per_sample);
    Ok((
        MIEstimate {
            value,
            positive_term: positive,
            negative_term: negative,
            batch_size: b,
            mode,
        },
        se,
    ))
}

fn standard_error(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// The upper-bound estimate for a batch of (frame matrix, embedding) pairs
/// under the flow's conditional likelihood. Pairing is positional: `xs[i]`
/// was produced with `omegas[i]`.
pub fn club_estimate(
    xs: &[Array2<f64>],
    omegas: &[Embedding],
    model: &FlowModel,
    mode: NegativeMode,
    seed: u64,
) -> Result<MIEstimate> {
    if xs.len() != omegas.len() {
        return Err(Error::Shape(format!(
            "{} frame matrices vs {} embeddings",
            xs.len(),
            omegas.len()
        )));
    }
    let rows: Vec<Array2<f64>> = omegas
        .iter()
        .map(|w| w.view().insert_axis(Axis(0)).to_owned())
        .collect();
    let (est, _) = club_scored(xs.len(), mode, seed, |i, j| {
        flow::loglik_per_dim(model, &xs[i], &rows[j])
    })?;
    Ok(est)
}

/// The redundancy loss: exactly [`club_estimate`]`.value`, exposed under
/// its training-objective name. It is minimized with respect to the
/// embeddings while the flow parameters stay frozen.
pub fn redundancy_loss(
    xs: &[Array2<f64>],
    omegas: &[Embedding],
    model: &FlowModel,
    mode: NegativeMode,
    seed: u64,
) -> Result<f64> {
    Ok(club_estimate(xs, omegas, model, mode, seed)?.value)
}

/// Differentiable twin of [`redundancy_loss`]: frame nodes and embedding
/// nodes (1×D each) to the estimate (1×1). Gradients flow through the
/// embeddings in both the paired and unpaired terms.
#[allow(clippy::needless_range_loop)]
pub fn redundancy_on_tape(
    t: &mut Tape,
    xs: &[NodeId],
    omegas: &[NodeId],
    nodes: &FlowNodes,
    mode: NegativeMode,
    seed: u64,
) -> NodeId {
    let b = xs.len();
    assert!(b >= 2, "the unpaired term needs a batch of at least 2");
    assert_eq!(b, omegas.len(), "frame/embedding batch sizes differ");

    let diag: Vec<NodeId> = (0..b)
        .map(|i| flow::loglik_on_tape(t, xs[i], omegas[i], nodes))
        .collect();
    let mut pos_sum = diag[0];
    for &d in &diag[1..] {
        pos_sum = t.add(pos_sum, d);
    }
    let positive = t.scale(pos_sum, 1.0 / b as f64);

    let diff_mean = match mode {
        NegativeMode::AllPairs => {
            let mut diff_sum: Option<NodeId> = None;
            for i in 0..b {
                for j in 0..b {
                    let l = if j == i {
                        diag[i]
                    } else {
                        flow::loglik_on_tape(t, xs[i], omegas[j], nodes)
                    };
                    let diff = t.sub(diag[i], l);
                    diff_sum = Some(match diff_sum {
                        None => diff,
                        Some(acc) => t.add(acc, diff),
                    });
                }
            }
            t.scale(diff_sum.expect("b >= 2"), 1.0 / (b * b) as f64)
        }
        NegativeMode::Derangement => {
            let pi = derangement_for(seed, b);
            let mut diff_sum: Option<NodeId> = None;
            for i in 0..b {
                let l = flow::loglik_on_tape(t, xs[i], omegas[pi[i]], nodes);
                let diff = t.sub(diag[i], l);
                diff_sum = Some(match diff_sum {
                    None => diff,
                    Some(acc) => t.add(acc, diff),
                });
            }
            t.scale(diff_sum.expect("b >= 2"), 1.0 / b as f64)
        }
    };

    let negative = t.sub(positive, diff_mean);
    t.sub(positive, negative)
}

/// Exact mutual information of `dims` independent bivariate-normal pairs
/// with per-pair correlation ρ: dims · (−½ ln(1−ρ²)) nats.
pub fn gaussian_mi_oracle(rho: f64, dims: usize) -> Result<f64> {
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(Error::Domain(format!("correlation must lie in (-1, 1), got {rho}")));
    }
    // Mutual information is nonnegative; max(0) also folds ρ=0's IEEE
    // negative zero into plain zero.
    Ok((dims as f64 * (-0.5 * (1.0 - rho * rho).ln())).max(0.0))
}

/// Samples B pairs (x_i, ω_i) of `dims`-dimensional vectors where each
/// coordinate pair is bivariate normal with correlation ρ: ω ~ N(0, I),
/// x = ρω + √(1−ρ²)·ε. Returns (xs, ωs) as B×dims matrices.
pub fn gaussian_pairs<R: Rng>(rng: &mut R, b: usize, dims: usize, rho: f64) -> (Array2<f64>, Array2<f64>) {
    let ws = seeds::normal_array(rng, b, dims, 1.0);
    let eps = seeds::normal_array(rng, b, dims, 1.0);
    let noise_std = (1.0 - rho * rho).sqrt();
    let xs = &ws * rho + &eps * noise_std;
    (xs, ws)
}

/// Exact conditional log-density Σ_d log N(x_d; ρ·w_d, 1−ρ²) of one
/// correlated-Gaussian pair (total over dims, not per-dimension — the
/// analytic oracle it is compared against is a total too).
pub fn gaussian_loglik(x: ndarray::ArrayView1<f64>, w: ndarray::ArrayView1<f64>, rho: f64) -> f64 {
    let s2 = 1.0 - rho * rho;
    let mut quad = 0.0;
    for (xv, wv) in x.iter().zip(w.iter()) {
        let r = xv - rho * wv;
        quad += r * r;
    }
    -0.5 * (LN_2PI + s2.ln()) * x.len() as f64 - quad / (2.0 * s2)
}

/// All-pairs estimate for the exact-Gaussian likelihood, computed from
/// factored sums in O(B·dims) instead of the literal O(B²·dims) grid: the
/// unpaired quadratic form Σ_j (x_id − ρ w_jd)² expands into batch sums of
/// x², w², and x·Σw. Algebraically identical to feeding
/// [`gaussian_loglik`] through [`club_scored`] in all-pairs mode, which the
/// tests verify on small batches.
pub fn gaussian_club_all_pairs(xs: &Array2<f64>, ws: &Array2<f64>, rho: f64) -> Result<(MIEstimate, f64)> {
    let (b, dims) = xs.dim();
    if ws.dim() != (b, dims) {
        return Err(Error::Shape(format!("x batch {:?} vs ω batch {:?}", xs.dim(), ws.dim())));
    }
    if b < 2 {
        return Err(Error::Domain(format!(
            "the unpaired term needs a batch of at least 2, got {b}"
        )));
    }
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(Error::Domain(format!("correlation must lie in (-1, 1), got {rho}")));
    }
    let s2 = 1.0 - rho * rho;
    let norm = -0.5 * (LN_2PI + s2.ln()) * dims as f64;
    let half_inv_s2 = 1.0 / (2.0 * s2);

    // Batch sums over ω for the factored cross term.
    let w_col_sum = ws.sum_axis(Axis(0)); // Σ_j w_jd, per d
    let w_sq_sum: f64 = ws.iter().map(|v| v * v).sum(); // Σ_j Σ_d w_jd²

    let inv_b = 1.0 / b as f64;
    let mut diag = Vec::with_capacity(b);
    let mut per = Vec::with_capacity(b);
    for i in 0..b {
        let x_row = xs.row(i);
        let d_i = gaussian_loglik(x_row, ws.row(i), rho);
        diag.push(d_i);
        let x_sq: f64 = x_row.iter().map(|v| v * v).sum();
        let x_dot_wsum: f64 = x_row.iter().zip(w_col_sum.iter()).map(|(x, w)| x * w).sum();
        // (1/B) Σ_j ℓ(x_i|ω_j) from the expanded quadratic form.
        let quad_sum = b as f64 * x_sq - 2.0 * rho * x_dot_wsum + rho * rho * w_sq_sum;
        let neg_i = norm - quad_sum * half_inv_s2 * inv_b;
        per.push(d_i - neg_i);
    }
    let positive = diag.iter().sum::<f64>() * inv_b;
    let diff_mean = per.iter().sum::<f64>() * inv_b;
    let negative = positive - diff_mean;
    let value = positive - negative;
    let se = standard_error(&per);
    Ok((
        MIEstimate {
            value,
            positive_term: positive,
            negative_term: negative,
            batch_size: b,
            mode: NegativeMode::AllPairs,
        },
        se,
    ))
}
