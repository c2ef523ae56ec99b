//! Frame encoder with self-attentive pooling.
//!
//! A shared per-frame feed-forward map lifts each frame to a hidden vector,
//! attention scores `e_t = vᵀ tanh(W h_t + b)` weight the frames, and the
//! softmax-weighted average is projected to the final embedding. One
//! `(v, W, b)` is shared across all frames.
//!
//! Every operation exists twice: as a plain matrix function (the reference
//! surface, used wherever gradients are not needed) and as a tape builder
//! ([`embed_on_tape`]) used during training. The two paths share the same
//! primitive calls in the same order and agree bit-for-bit; a test pins
//! that.

use crate::seeds;
use crate::tape::{NodeId, Tape};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use rand::Rng;

/// Fixed-dimensional utterance embedding ω.
pub type Embedding = Array1<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Tanh,
    Identity,
}

impl Nonlinearity {
    fn apply(&self, x: Array2<f64>) -> Array2<f64> {
        match self {
            Nonlinearity::Tanh => x.mapv(f64::tanh),
            Nonlinearity::Identity => x,
        }
    }

    fn apply_on_tape(&self, t: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Nonlinearity::Tanh => t.tanh(x),
            Nonlinearity::Identity => x,
        }
    }
}

/// One shared per-frame layer: `act(x · wᵀ + b)` with `w` stored `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Array2<f64>,
    /// 1×out bias row.
    pub b: Array2<f64>,
    pub act: Nonlinearity,
}

/// Ordered per-frame layers mapping F → H.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEncoderParams {
    pub layers: Vec<DenseLayer>,
}

impl FrameEncoderParams {
    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.w.ncols()).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.nrows()).unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("frame encoder needs at least one layer".into()));
        }
        let mut width = self.in_dim();
        for (i, l) in self.layers.iter().enumerate() {
            if l.w.ncols() != width {
                return Err(Error::Shape(format!(
                    "layer {i} expects input width {}, previous layer outputs {width}",
                    l.w.ncols()
                )));
            }
            if l.b.dim() != (1, l.w.nrows()) {
                return Err(Error::Shape(format!("layer {i} bias shape mismatch")));
            }
            width = l.w.nrows();
        }
        Ok(())
    }
}

/// Shared attention parameters of the pooling stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// H×H.
    pub w: Array2<f64>,
    /// 1×H.
    pub b: Array2<f64>,
    /// H×1.
    pub v: Array2<f64>,
}

/// Affine head mapping the pooled H vector to the D-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// D×H.
    pub w: Array2<f64>,
    /// 1×D.
    pub b: Array2<f64>,
}

/// All trainable parameters of the embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub frame: FrameEncoderParams,
    pub attention: AttentionParams,
    pub projection: ProjectionParams,
}

impl EncoderParams {
    /// Seeded initialization: weights ~ N(0, 1/fan_in), zero biases,
    /// `depth` tanh frame layers.
    pub fn init<R: Rng>(rng: &mut R, f: usize, h: usize, d: usize, depth: usize) -> Self {
        assert!(depth >= 1);
        let mut layers = Vec::with_capacity(depth);
        let mut input = f;
        for _ in 0..depth {
            layers.push(DenseLayer {
                w: seeds::normal_array(rng, h, input, 1.0 / (input as f64).sqrt()),
                b: Array2::zeros((1, h)),
                act: Nonlinearity::Tanh,
            });
            input = h;
        }
        let scale = 1.0 / (h as f64).sqrt();
        EncoderParams {
            frame: FrameEncoderParams { layers },
            attention: AttentionParams {
                w: seeds::normal_array(rng, h, h, scale),
                b: Array2::zeros((1, h)),
                v: seeds::normal_array(rng, h, 1, scale),
            },
            projection: ProjectionParams {
                w: seeds::normal_array(rng, d, h, scale),
                b: Array2::zeros((1, d)),
            },
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.frame.out_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.w.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        let h = self.frame.out_dim();
        if self.attention.w.dim() != (h, h)
            || self.attention.b.dim() != (1, h)
            || self.attention.v.dim() != (h, 1)
        {
            return Err(Error::Shape("attention parameter shapes inconsistent with H".into()));
        }
        if self.projection.w.ncols() != h || self.projection.b.dim() != (1, self.projection.w.nrows()) {
            return Err(Error::Shape("projection parameter shapes inconsistent".into()));
        }
        Ok(())
    }

    /// Named views of every parameter tensor, in a fixed order shared by
    /// the optimizer, the checkpoint format, and the tape registration.
    pub fn params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.frame.layers.iter().enumerate() {
            out.push((format!("enc.l{i}.w"), &l.w));
            out.push((format!("enc.l{i}.b"), &l.b));
        }
        out.push(("enc.att.w".into(), &self.attention.w));
        out.push(("enc.att.b".into(), &self.attention.b));
        out.push(("enc.att.v".into(), &self.attention.v));
        out.push(("enc.proj.w".into(), &self.projection.w));
        out.push(("enc.proj.b".into(), &self.projection.b));
        out
    }

    /// Mutable variant of [`EncoderParams::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.frame.layers.iter_mut().enumerate() {
            out.push((format!("enc.l{i}.w"), &mut l.w));
            out.push((format!("enc.l{i}.b"), &mut l.b));
        }
        out.push(("enc.att.w".into(), &mut self.attention.w));
        out.push(("enc.att.b".into(), &mut self.attention.b));
        out.push(("enc.att.v".into(), &mut self.attention.v));
        out.push(("enc.proj.w".into(), &mut self.projection.w));
        out.push(("enc.proj.b".into(), &mut self.projection.b));
        out
    }
}

/// Applies the shared per-frame layers: T×F → T×H. Row `t` of the output
/// depends only on row `t` of the input.
pub fn encode_frames(frames: &Array2<f64>, params: &FrameEncoderParams) -> Result<Array2<f64>> {
    params.validate()?;
    if frames.ncols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "frames have {} features, encoder expects {}",
            frames.ncols(),
            params.in_dim()
        )));
    }
    if frames.nrows() == 0 {
        return Err(Error::Domain("empty frame sequence".into()));
    }
    let mut h = frames.clone();
    for l in &params.layers {
        h = l.act.apply(h.dot(&l.w.t()) + &l.b);
    }
    Ok(h)
}

/// Frame-level attention scores `e_t = vᵀ tanh(W h_t + b)`.
pub fn attention_scores(hidden: &Array2<f64>, params: &AttentionParams) -> Result<Array1<f64>> {
    let h = hidden.ncols();
    if params.w.dim() != (h, h) || params.b.dim() != (1, h) || params.v.dim() != (h, 1) {
        return Err(Error::Shape("attention parameter shapes inconsistent with hidden width".into()));
    }
    let u = (hidden.dot(&params.w.t()) + &params.b).mapv(f64::tanh);
    Ok(u.dot(&params.v).index_axis(Axis(1), 0).to_owned())
}

/// Softmax-weighted average of the hidden rows.
pub fn attentive_pool(hidden: &Array2<f64>, scores: &Array1<f64>) -> Result<Array1<f64>> {
    if hidden.nrows() == 0 {
        return Err(Error::Domain("empty sequence".into()));
    }
    if scores.len() != hidden.nrows() {
        return Err(Error::Shape(format!(
            "{} scores for {} hidden rows",
            scores.len(),
            hidden.nrows()
        )));
    }
    let alpha = softmax_column(scores);
    let pooled = alpha
        .view()
        .insert_axis(Axis(0))
        .dot(hidden);
    Ok(pooled.index_axis(Axis(0), 0).to_owned())
}

/// Max-subtracted softmax over a score vector; mirrors the tape op exactly.
fn softmax_column(scores: &Array1<f64>) -> Array1<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = scores.mapv(|v| (v - m).exp());
    let z = e.sum();
    e.mapv(|v| v / z)
}

/// Final affine map from the pooled vector to the embedding.
pub fn project_embedding(pooled: &Array1<f64>, params: &ProjectionParams) -> Result<Embedding> {
    if params.w.ncols() != pooled.len() || params.b.dim() != (1, params.w.nrows()) {
        return Err(Error::Shape("projection shapes inconsistent with pooled width".into()));
    }
    let p = pooled.view().insert_axis(Axis(0));
    let out = p.dot(&params.w.t()) + &params.b;
    Ok(out.index_axis(Axis(0), 0).to_owned())
}

/// Full pipeline: frames → hidden → attention → pooled → embedding.
pub fn embed(frames: &Array2<f64>, params: &EncoderParams) -> Result<Embedding> {
    params.validate()?;
    let hidden = encode_frames(frames, &params.frame)?;
    let scores = attention_scores(&hidden, &params.attention)?;
    let pooled = attentive_pool(&hidden, &scores)?;
    project_embedding(&pooled, &params.projection)
}

/// Tape leaves for every encoder parameter, in [`EncoderParams::params`]
/// order.
pub struct EncoderNodes {
    pub layers: Vec<(NodeId, NodeId)>,
    pub att_w: NodeId,
    pub att_b: NodeId,
    pub att_v: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    acts: Vec<Nonlinearity>,
}

impl EncoderNodes {
    pub fn insert(t: &mut Tape, params: &EncoderParams) -> Self {
        EncoderNodes {
            layers: params
                .frame
                .layers
                .iter()
                .map(|l| (t.leaf(l.w.clone()), t.leaf(l.b.clone())))
                .collect(),
            att_w: t.leaf(params.attention.w.clone()),
            att_b: t.leaf(params.attention.b.clone()),
            att_v: t.leaf(params.attention.v.clone()),
            proj_w: t.leaf(params.projection.w.clone()),
            proj_b: t.leaf(params.projection.b.clone()),
            acts: params.frame.layers.iter().map(|l| l.act).collect(),
        }
    }

    /// `(name, node)` pairs matching [`EncoderParams::params`] order.
    pub fn named(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("enc.l{i}.w"), *w));
            out.push((format!("enc.l{i}.b"), *b));
        }
        out.push(("enc.att.w".into(), self.att_w));
        out.push(("enc.att.b".into(), self.att_b));
        out.push(("enc.att.v".into(), self.att_v));
        out.push(("enc.proj.w".into(), self.proj_w));
        out.push(("enc.proj.b".into(), self.proj_b));
        out
    }
}

/// Differentiable twin of [`embed`]: frames node (T×F) → embedding node
/// (1×D).
pub fn embed_on_tape(t: &mut Tape, frames: NodeId, nodes: &EncoderNodes) -> NodeId {
    let mut h = frames;
    for ((w, b), act) in nodes.layers.iter().zip(&nodes.acts) {
        let lin = t.matmul_nt(h, *w);
        let biased = t.add_row(lin, *b);
        h = act.apply_on_tape(t, biased);
    }
    let att_lin = t.matmul_nt(h, nodes.att_w);
    let att_biased = t.add_row(att_lin, nodes.att_b);
    let u = t.tanh(att_biased);
    let e = t.matmul(u, nodes.att_v);
    let alpha = t.col_softmax(e);
    let pooled = t.matmul_tn(alpha, h);
    let proj = t.matmul_nt(pooled, nodes.proj_w);
    t.add_row(proj, nodes.proj_b)
}
