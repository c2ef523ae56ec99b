//! The alternating training loop: a discriminative warm-up epoch, then per
//! epoch a flow phase (embedding network frozen, flow fitted to the current
//! embeddings by likelihood maximization) followed by an embedding phase
//! (flow frozen, embedding network descended on the combined objective
//! `L_total = L_xent + β·L_redundancy`).
//!
//! The two parameter sets are strictly disjoint: Θ is the encoder plus the
//! classifier head, Φ is the flow. A phase updates exactly one of them.
//! Every batch order, derangement, and initialization draw comes from a
//! labeled substream of the master seed, keyed by absolute epoch and step
//! indices, so a run is a pure function of (dataset, config) and training
//! continued from a checkpoint is bit-identical to an uninterrupted run.

use crate::encoder::{embed, embed_on_tape, EncoderNodes, EncoderParams};
use crate::eval::{self, EmbeddingRecord};
use crate::flow::{self, FlowModel, FlowNodes};
use crate::miest::{self, NegativeMode};
use crate::objectives::{aam_loss_on_tape, ocs_loss_on_tape, AAMHead, OCSHead};
use crate::seeds;
use crate::synthdata::{Dataset, Utterance};
use crate::tape::{NodeId, Tape};
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// First/second-moment adaptive optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "moment decay rates must lie in [0,1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Which discriminative loss trains the embedding network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Additive-angular-margin softmax over `C` classes.
    Aam,
    /// One-class softmax (binary labels; class 0 is the target class).
    Ocs,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Aam => "aam",
            LossKind::Ocs => "ocs",
        }
    }
}

/// Architecture and head hyperparameters. Input dimensions (frames per
/// utterance, features per frame, class count) come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width H of the frame encoder and attention stage.
    pub hidden: usize,
    /// Number of per-frame dense layers.
    pub depth: usize,
    /// Embedding dimension D.
    pub embed_dim: usize,
    /// Number of conditional coupling layers in the flow.
    pub flow_layers: usize,
    /// Conditioner hidden width G.
    pub flow_hidden: usize,
    /// Angular-margin logit scale s.
    pub scale: f64,
    /// Additive angular margin m.
    pub margin: f64,
    /// One-class score scale k.
    pub ocs_k: f64,
    /// One-class compactness margin (target class).
    pub ocs_m0: f64,
    /// One-class exclusion margin (non-target class).
    pub ocs_m1: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            depth: 1,
            embed_dim: 16,
            flow_layers: 4,
            flow_hidden: 32,
            scale: 30.0,
            margin: 0.2,
            ocs_k: 20.0,
            ocs_m0: 0.9,
            ocs_m1: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("flow_layers", self.flow_layers),
            ("flow_hidden", self.flow_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.scale <= 0.0 || self.ocs_k <= 0.0 {
            return Err(Error::Config("logit scales must be positive".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::Config("margin must be nonnegative".into()));
        }
        if self.ocs_m0 <= self.ocs_m1 {
            return Err(Error::Config(format!(
                "one-class margins need m0 > m1, got m0={} m1={}",
                self.ocs_m0, self.ocs_m1
            )));
        }
        Ok(())
    }
}

/// Everything the training loop needs besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Redundancy weight β ≥ 0 in `L_total = L_xent + β·L_redundancy`.
    pub beta: f64,
    /// Total number of epochs, warm-up included.
    pub epochs: usize,
    pub batch_size: usize,
    /// Embedding-phase learning rate.
    pub lr_embed: f64,
    /// Flow-phase learning rate.
    pub lr_flow: f64,
    /// Per-epoch multiplicative decay applied to both learning rates.
    pub lr_decay: f64,
    pub loss_kind: LossKind,
    /// How the unpaired likelihood term is estimated.
    pub negative_mode: NegativeMode,
    /// Optimizer steps per flow phase; 0 means one full pass over the
    /// training split.
    pub flow_steps_per_epoch: usize,
    /// Optimizer steps per embedding phase; 0 means one full pass.
    pub embed_steps_per_epoch: usize,
    /// Master seed for initialization, batch order, and derangements.
    pub seed: u64,
    /// Fraction of the dataset held out for per-epoch EER tracking and
    /// best-checkpoint selection; 0 disables the holdout.
    pub holdout_fraction: f64,
    /// Target and non-target trial pairs per class when scoring the holdout.
    pub eval_pairs_per_class: usize,
    pub adam: AdamParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.001,
            epochs: 30,
            batch_size: 32,
            lr_embed: 0.001,
            lr_flow: 0.001,
            lr_decay: 0.95,
            loss_kind: LossKind::Aam,
            negative_mode: NegativeMode::Derangement,
            flow_steps_per_epoch: 0,
            embed_steps_per_epoch: 0,
            seed: 0,
            holdout_fraction: 0.25,
            eval_pairs_per_class: 25,
            adam: AdamParams::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and nonnegative, got {}", self.beta)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.beta > 0.0 && self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 when beta > 0: the redundancy bound needs unpaired samples".into(),
            ));
        }
        if self.lr_embed <= 0.0 || self.lr_flow <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0,1], got {}", self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in [0,1), got {}",
                self.holdout_fraction
            )));
        }
        if self.eval_pairs_per_class == 0 {
            return Err(Error::Config("eval_pairs_per_class must be at least 1".into()));
        }
        self.adam.validate()?;
        self.model.validate()
    }
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

/// The classifier head attached to the embedding; its single weight tensor
/// is named `head.w` everywhere (optimizer, checkpoint, tape).
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Aam(AAMHead),
    Ocs(OCSHead),
}

impl Head {
    pub fn weights(&self) -> &Array2<f64> {
        match self {
            Head::Aam(h) => &h.weights,
            Head::Ocs(h) => &h.w0,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        match self {
            Head::Aam(h) => &mut h.weights,
            Head::Ocs(h) => &mut h.w0,
        }
    }

    pub fn kind(&self) -> LossKind {
        match self {
            Head::Aam(_) => LossKind::Aam,
            Head::Ocs(_) => LossKind::Ocs,
        }
    }
}

/// The embedding-side parameter set Θ: encoder plus classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub encoder: EncoderParams,
    pub head: Head,
}

impl Theta {
    /// Named views of every Θ tensor in the fixed optimizer/checkpoint order.
    pub fn params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.encoder.params();
        out.push(("head.w".to_string(), self.head.weights()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = self.encoder.params_mut();
        out.push(("head.w".to_string(), self.head.weights_mut()));
        out
    }
}

/// Full training state: both parameter sets, their optimizer slots, and the
/// counters that make resumed training bit-identical to an uninterrupted run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub theta: Theta,
    pub phi: FlowModel,
    pub opt_theta: AdamOpt,
    pub opt_phi: AdamOpt,
    /// Number of completed epochs; the next epoch to run.
    pub epochs_done: usize,
    pub master_seed: u64,
    /// Lowest holdout EER seen so far, if a holdout is configured.
    pub best_eer: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl ModelState {
    /// Seeded initialization of both parameter sets from the dataset's
    /// dimensions. Initialization draws come from dedicated labeled
    /// substreams, so they are unaffected by any later training randomness.
    pub fn init(config: &TrainConfig, frames: usize, feat: usize, classes: usize) -> Result<ModelState> {
        config.validate()?;
        if frames == 0 || feat == 0 {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        let m = &config.model;
        let encoder = EncoderParams::init(
            &mut seeds::stream(config.seed, "init/encoder"),
            feat,
            m.hidden,
            m.embed_dim,
            m.depth,
        );
        let head = match config.loss_kind {
            LossKind::Aam => {
                if classes < 2 {
                    return Err(Error::Config(format!(
                        "angular-margin loss needs at least 2 classes, dataset has {classes}"
                    )));
                }
                Head::Aam(AAMHead::init(
                    &mut seeds::stream(config.seed, "init/head"),
                    classes,
                    m.embed_dim,
                    m.scale,
                    m.margin,
                ))
            }
            LossKind::Ocs => {
                if classes != 2 {
                    return Err(Error::Config(format!(
                        "one-class loss needs exactly 2 classes (target = 0), dataset has {classes}"
                    )));
                }
                Head::Ocs(OCSHead::init(
                    &mut seeds::stream(config.seed, "init/head"),
                    m.embed_dim,
                    m.ocs_k,
                    m.ocs_m0,
                    m.ocs_m1,
                ))
            }
        };
        let phi = FlowModel::init(
            &mut seeds::stream(config.seed, "init/flow"),
            frames,
            feat,
            m.embed_dim,
            m.flow_layers,
            m.flow_hidden,
        )?;
        Ok(ModelState {
            theta: Theta { encoder, head },
            phi,
            opt_theta: AdamOpt::new(),
            opt_phi: AdamOpt::new(),
            epochs_done: 0,
            master_seed: config.seed,
            best_eer: None,
            best_epoch: None,
        })
    }
}

/// SHA-256 hex digest over the named Θ tensors (name, shape, and
/// little-endian payload). Two states share a digest iff Θ is bit-identical.
pub fn theta_digest(theta: &Theta) -> String {
    digest_params(&theta.params())
}

/// SHA-256 hex digest over the named Φ tensors.
pub fn phi_digest(phi: &FlowModel) -> String {
    digest_params(&phi.params())
}

fn digest_params(params: &[(String, &Array2<f64>)]) -> String {
    let mut h = Sha256::new();
    for (name, a) in params {
        h.update(name.as_bytes());
        h.update((a.nrows() as u64).to_le_bytes());
        h.update((a.ncols() as u64).to_le_bytes());
        for v in a.iter() {
            h.update(v.to_le_bytes());
        }
    }
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// First/second-moment adaptive optimizer state for one parameter set.
/// Moment tensors are keyed by parameter name; the step counter drives bias
/// correction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamOpt {
    pub t: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl AdamOpt {
    pub fn new() -> Self {
        AdamOpt::default()
    }

    /// One optimizer step over a named parameter set. Every parameter must
    /// have a same-shaped gradient in `grads`. Deterministic: equal state
    /// and inputs give bit-equal results.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Array2<f64>)>,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        hp: &AdamParams,
    ) -> Result<()> {
        self.t += 1;
        let corr1 = 1.0 - hp.beta1.powi(self.t as i32);
        let corr2 = 1.0 - hp.beta2.powi(self.t as i32);
        for (name, param) in params {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Domain(format!("no gradient supplied for tensor {name:?}")))?;
            if g.dim() != param.dim() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {name:?} shape {:?}",
                    g.dim(),
                    param.dim()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = hp.beta1 * *m + (1.0 - hp.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g);
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / corr1) / ((v / corr2).sqrt() + hp.epsilon);
                });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Metrics and observers
// ---------------------------------------------------------------------------

/// Which part of an epoch a diagnostic refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Epoch 0: discriminative loss only.
    WarmUp,
    /// Flow likelihood maximization, Θ frozen.
    Flow,
    /// Embedding descent on the combined objective, Φ frozen.
    Embedding,
}

impl Phase {
    fn as_str(&self) -> &'static str {
        match self {
            Phase::WarmUp => "warm-up",
            Phase::Flow => "flow",
            Phase::Embedding => "embedding",
        }
    }
}

/// Per-epoch training metrics; one JSON line each in a metrics stream.
/// Loss values are means over the epoch's optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_xent: f64,
    /// Mean redundancy estimate; exactly 0 in warm-up and β = 0 epochs,
    /// where the term is skipped.
    pub l_redundancy: f64,
    /// `l_xent + beta·l_redundancy` with the β in force for the epoch.
    pub l_ib: f64,
    /// Mean per-dimension flow NLL; absent when no flow phase ran.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flow_nll: Option<f64>,
    pub grad_norm_theta: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm_phi: Option<f64>,
    /// Holdout equal error rate; absent when no holdout is configured or
    /// the holdout is too degenerate to build trials on.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_eer: Option<f64>,
    /// Wall-clock seconds; excluded from serialization so metric streams
    /// are bit-reproducible.
    #[serde(skip)]
    pub wall_secs: f64,
}

impl EpochMetrics {
    /// The canonical one-line JSON form (deterministic field order, exact
    /// float round-trip).
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Callbacks fired as training progresses; errors abort the run.
pub trait TrainObserver {
    /// After each phase within an epoch (the warm-up epoch has no flow
    /// phase). Useful for auditing that the frozen parameter set really
    /// did not move.
    fn on_phase_end(&mut self, _epoch: usize, _phase: Phase, _state: &ModelState) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _state: &ModelState, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

/// The do-nothing observer.
pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

// ---------------------------------------------------------------------------
// Batch planning
// ---------------------------------------------------------------------------

/// Full batches of dataset indices for one phase of one epoch, drawn from
/// the labeled shuffle stream. A pass shuffles the training split and cuts
/// it into ⌊N/B⌋ full batches (a trailing partial batch is dropped: the
/// redundancy bound degrades on small batches). When `steps` exceeds one
/// pass, further passes are reshuffled from the same stream.
fn plan_batches(
    master: u64,
    label: &str,
    train_idx: &[usize],
    batch_size: usize,
    steps: usize,
) -> Result<Vec<Vec<usize>>> {
    let per_pass = train_idx.len() / batch_size;
    if per_pass == 0 {
        return Err(Error::Config(format!(
            "batch_size {batch_size} exceeds the {} samples of the training split",
            train_idx.len()
        )));
    }
    let target = if steps == 0 { per_pass } else { steps };
    let mut rng = seeds::stream(master, label);
    let mut out = Vec::with_capacity(target);
    while out.len() < target {
        let perm = seeds::permutation(&mut rng, train_idx.len());
        for chunk in perm.chunks_exact(batch_size) {
            if out.len() == target {
                break;
            }
            out.push(chunk.iter().map(|&i| train_idx[i]).collect());
        }
    }
    Ok(out)
}

/// Deterministic holdout split: a seeded permutation's head becomes the
/// holdout. Stable across resumed runs because the label does not involve
/// the epoch.
fn split_holdout(master: u64, n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if fraction == 0.0 {
        return ((0..n).collect(), Vec::new());
    }
    let perm = seeds::permutation(&mut seeds::stream(master, "split/holdout"), n);
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let (holdout, train) = perm.split_at(k);
    (train.to_vec(), holdout.to_vec())
}

// ---------------------------------------------------------------------------
// Phase steps
// ---------------------------------------------------------------------------

fn batch_labels(batch: &[&Utterance], head: &Head) -> Result<Vec<usize>> {
    match head {
        Head::Aam(h) => {
            for u in batch {
                if u.y >= h.classes() {
                    return Err(Error::Config(format!(
                        "utterance {:?} has label {} but the head has {} classes",
                        u.id,
                        u.y,
                        h.classes()
                    )));
                }
            }
        }
        Head::Ocs(_) => {
            for u in batch {
                if u.y > 1 {
                    return Err(Error::Config(format!(
                        "utterance {:?} has label {}; one-class loss needs labels in {{0,1}}",
                        u.id, u.y
                    )));
                }
            }
        }
    }
    Ok(batch.iter().map(|u| u.y).collect())
}

/// The losses normalize embeddings row-wise, so a non-finite or all-zero
/// embedding must be caught here with a usable message instead of deep in
/// the graph.
fn check_embedding(omega: &Array2<f64>, id: &str) -> Result<()> {
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite embedding for utterance {id:?}")));
    }
    if omega.iter().all(|v| *v == 0.0) {
        return Err(Error::Numeric(format!("zero embedding for utterance {id:?}")));
    }
    Ok(())
}

fn with_step_context(e: Error, epoch: usize, phase: Phase, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!(
            "{msg} at epoch {epoch}, {} phase, step {step}",
            phase.as_str()
        )),
        other => other,
    }
}

fn ensure_finite_loss(value: f64, what: &str, epoch: usize, phase: Phase, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite {what} ({value}) at epoch {epoch}, {} phase, step {step}",
            phase.as_str()
        )))
    }
}

fn grad_norm_checked(
    grads: &BTreeMap<String, Array2<f64>>,
    epoch: usize,
    phase: Phase,
    step: usize,
) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads {
        for &v in g.iter() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in tensor {name:?} at epoch {epoch}, {} phase, step {step}",
                    phase.as_str()
                )));
            }
            sq += v * v;
        }
    }
    Ok(sq.sqrt())
}

/// Builds the embedding-phase tape: encoder and head leaves, per-sample
/// embeddings, the discriminative loss, and (when `beta > 0`) the
/// redundancy term. Returns the xent node, the redundancy node if built,
/// and the total-loss node, plus the named Θ leaves to read gradients from.
#[allow(clippy::type_complexity)]
pub(crate) fn embed_phase_tape(
    theta: &Theta,
    phi: &FlowModel,
    batch: &[&Utterance],
    beta: f64,
    mode: NegativeMode,
    derang_seed: u64,
) -> Result<(Tape, NodeId, Option<NodeId>, NodeId, Vec<(String, NodeId)>)> {
    let labels = batch_labels(batch, &theta.head)?;
    let mut t = Tape::new();
    let enc_nodes = EncoderNodes::insert(&mut t, &theta.encoder);
    let head_node = t.leaf(theta.head.weights().clone());

    let mut x_nodes = Vec::with_capacity(batch.len());
    let mut omega_nodes = Vec::with_capacity(batch.len());
    for u in batch {
        let x = t.leaf(u.frames.clone());
        x_nodes.push(x);
        let w = embed_on_tape(&mut t, x, &enc_nodes);
        check_embedding(t.value(w), &u.id)?;
        omega_nodes.push(w);
    }
    let embeddings = t.rows(omega_nodes.clone());

    let xent = match &theta.head {
        Head::Aam(h) => aam_loss_on_tape(&mut t, embeddings, head_node, &labels, h.scale, h.margin),
        Head::Ocs(h) => {
            let bin: Vec<u8> = labels.iter().map(|&y| y as u8).collect();
            ocs_loss_on_tape(&mut t, embeddings, head_node, &bin, h.k, h.m0, h.m1)
        }
    };

    let (red, total) = if beta > 0.0 {
        let flow_nodes = FlowNodes::insert(&mut t, phi);
        let red = miest::redundancy_on_tape(&mut t, &x_nodes, &omega_nodes, &flow_nodes, mode, derang_seed);
        let scaled = t.scale(red, beta);
        let total = t.add(xent, scaled);
        (Some(red), total)
    } else {
        (None, xent)
    };

    let mut theta_nodes = enc_nodes.named();
    theta_nodes.push(("head.w".to_string(), head_node));
    Ok((t, xent, red, total, theta_nodes))
}

#[allow(clippy::too_many_arguments)]
fn embed_step_inner(
    theta: &mut Theta,
    phi: &FlowModel,
    opt: &mut AdamOpt,
    batch: &[&Utterance],
    beta: f64,
    mode: NegativeMode,
    lr: f64,
    adam: &AdamParams,
    derang_seed: u64,
    epoch: usize,
    step: usize,
) -> Result<(f64, f64, f64)> {
    let phase = if epoch == 0 { Phase::WarmUp } else { Phase::Embedding };
    let (t, xent, red, total, theta_nodes) = embed_phase_tape(theta, phi, batch, beta, mode, derang_seed)
        .map_err(|e| with_step_context(e, epoch, phase, step))?;
    let l_xent = t.scalar(xent);
    let l_red = red.map(|r| t.scalar(r)).unwrap_or(0.0);
    ensure_finite_loss(l_xent, "discriminative loss", epoch, phase, step)?;
    ensure_finite_loss(l_red, "redundancy estimate", epoch, phase, step)?;
    ensure_finite_loss(t.scalar(total), "total loss", epoch, phase, step)?;

    let grads = t.backward(total);
    let mut gmap = BTreeMap::new();
    for (name, node) in theta_nodes {
        gmap.insert(name, grads.get(node, &t));
    }
    let gnorm = grad_norm_checked(&gmap, epoch, phase, step)?;
    opt.step(theta.params_mut(), &gmap, lr, adam)?;
    Ok((l_xent, l_red, gnorm))
}

#[allow(clippy::too_many_arguments)]
fn flow_step_inner(
    phi: &mut FlowModel,
    encoder: &EncoderParams,
    opt: &mut AdamOpt,
    batch: &[&Utterance],
    lr: f64,
    adam: &AdamParams,
    epoch: usize,
    step: usize,
) -> Result<(f64, f64)> {
    // Θ frozen: embeddings are plain forward passes, no tape attachment.
    let mut t = Tape::new();
    let flow_nodes = FlowNodes::insert(&mut t, phi);
    let mut ll_sum = None;
    for u in batch {
        let omega = embed(&u.frames, encoder)?.insert_axis(ndarray::Axis(0));
        check_embedding(&omega, &u.id).map_err(|e| with_step_context(e, epoch, Phase::Flow, step))?;
        let x = t.leaf(u.frames.clone());
        let w = t.leaf(omega);
        let ll = flow::loglik_on_tape(&mut t, x, w, &flow_nodes);
        ll_sum = Some(match ll_sum {
            None => ll,
            Some(acc) => t.add(acc, ll),
        });
    }
    let ll_sum = ll_sum.ok_or_else(|| Error::Domain("empty flow batch".into()))?;
    let nll = t.scale(ll_sum, -1.0 / batch.len() as f64);
    let nll_val = t.scalar(nll);
    ensure_finite_loss(nll_val, "flow NLL", epoch, Phase::Flow, step)?;

    let grads = t.backward(nll);
    let mut gmap = BTreeMap::new();
    for (name, node) in flow_nodes.named() {
        gmap.insert(name, grads.get(node, &t));
    }
    let gnorm = grad_norm_checked(&gmap, epoch, Phase::Flow, step)?;
    opt.step(phi.params_mut(), &gmap, lr, adam)?;
    Ok((nll_val, gnorm))
}

/// One embedding-phase optimizer step on Θ (public form of the inner loop).
/// Epoch 0 is the discriminative warm-up: the redundancy term is skipped
/// there regardless of β. Returns `(L_xent, L_redundancy, L_IB)`.
pub fn embedding_phase_step(
    batch: &[&Utterance],
    state: &mut ModelState,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<(f64, f64, f64)> {
    config.validate()?;
    let beta = if epoch == 0 { 0.0 } else { config.beta };
    let lr = config.lr_embed * config.lr_decay.powi(epoch as i32);
    let derang_seed = seeds::derive_seed(state.master_seed, &format!("derang/{epoch}/{step}"));
    let (l_xent, l_red, _) = embed_step_inner(
        &mut state.theta,
        &state.phi,
        &mut state.opt_theta,
        batch,
        beta,
        config.negative_mode,
        lr,
        &config.adam,
        derang_seed,
        epoch,
        step,
    )?;
    Ok((l_xent, l_red, l_xent + beta * l_red))
}

/// One flow-phase optimizer step on Φ (public form of the inner loop).
/// Embeddings are extracted with Θ frozen. Returns the batch's mean
/// per-dimension flow NLL.
pub fn flow_phase_step(
    batch: &[&Utterance],
    state: &mut ModelState,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    config.validate()?;
    let lr = config.lr_flow * config.lr_decay.powi(epoch as i32);
    let (nll, _) = flow_step_inner(
        &mut state.phi,
        &state.theta.encoder,
        &mut state.opt_phi,
        batch,
        lr,
        &config.adam,
        epoch,
        step,
    )?;
    Ok(nll)
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// Embeds a slice of utterances into evaluation records (plain forward
/// passes, no gradient tracking).
pub fn embed_records(utts: &[&Utterance], encoder: &EncoderParams) -> Result<Vec<EmbeddingRecord>> {
    utts.iter()
        .map(|u| {
            Ok(EmbeddingRecord {
                id: u.id.clone(),
                y: u.y,
                n: u.n,
                omega: embed(&u.frames, encoder)?,
            })
        })
        .collect()
}

/// Holdout EER under the stable trial seed. Degenerate holdouts (too few
/// classes or members to build trials on) yield `None` rather than aborting
/// the run; real numeric failures propagate.
fn holdout_eer(
    holdout: &[&Utterance],
    encoder: &EncoderParams,
    pairs_per_class: usize,
    master: u64,
) -> Result<Option<f64>> {
    if holdout.is_empty() {
        return Ok(None);
    }
    let records = embed_records(holdout, encoder)?;
    let trial_seed = seeds::derive_seed(master, "trials/holdout");
    let (mut trials, _) = match eval::build_trials(&records, pairs_per_class, trial_seed) {
        Ok(x) => x,
        Err(Error::Domain(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    match eval::score_trials(&mut trials, &records).and_then(|()| eval::trial_eer(&trials)) {
        Ok(eer) => Ok(Some(eer)),
        Err(Error::Domain(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn check_dataset_compatible(state: &ModelState, dataset: &Dataset) -> Result<()> {
    if dataset.utterances.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let h = &dataset.header;
    if h.t != state.phi.t || h.f != state.phi.f {
        return Err(Error::Config(format!(
            "dataset frames {}×{} do not match the model's {}×{}",
            h.t, h.f, state.phi.t, state.phi.f
        )));
    }
    if state.theta.encoder.frame.in_dim() != h.f {
        return Err(Error::Config(format!(
            "encoder input width {} does not match feature dim {}",
            state.theta.encoder.frame.in_dim(),
            h.f
        )));
    }
    Ok(())
}

fn train_core(
    state: &mut ModelState,
    dataset: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
    include_flow: bool,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    check_dataset_compatible(state, dataset)?;
    let master = state.master_seed;
    let (train_idx, holdout_idx) = split_holdout(master, dataset.len(), config.holdout_fraction);
    let holdout: Vec<&Utterance> = holdout_idx.iter().map(|&i| &dataset.utterances[i]).collect();

    let mut all_metrics = Vec::new();
    for epoch in state.epochs_done..config.epochs {
        let started = Instant::now();
        let lr_embed = config.lr_embed * config.lr_decay.powi(epoch as i32);
        let lr_flow = config.lr_flow * config.lr_decay.powi(epoch as i32);

        // Flow phase: skipped in the warm-up epoch and in discriminative-only
        // training. Θ is never touched here.
        let (mut flow_nll, mut grad_norm_phi) = (None, None);
        if epoch >= 1 && include_flow {
            let batches = plan_batches(
                master,
                &format!("batch/flow/{epoch}"),
                &train_idx,
                config.batch_size,
                config.flow_steps_per_epoch,
            )?;
            let (mut nll_sum, mut gn_sum) = (0.0, 0.0);
            for (step, batch_idx) in batches.iter().enumerate() {
                let batch: Vec<&Utterance> = batch_idx.iter().map(|&i| &dataset.utterances[i]).collect();
                let (nll, gn) = flow_step_inner(
                    &mut state.phi,
                    &state.theta.encoder,
                    &mut state.opt_phi,
                    &batch,
                    lr_flow,
                    &config.adam,
                    epoch,
                    step,
                )?;
                nll_sum += nll;
                gn_sum += gn;
            }
            let steps = batches.len() as f64;
            flow_nll = Some(nll_sum / steps);
            grad_norm_phi = Some(gn_sum / steps);
            observer.on_phase_end(epoch, Phase::Flow, state)?;
        }

        // Embedding phase (epoch 0: discriminative warm-up). Φ is never
        // touched here; with β = 0 the redundancy term is not even built,
        // so the Θ trajectory is bit-identical to discriminative training.
        let beta = if epoch == 0 || !include_flow { 0.0 } else { config.beta };
        let batches = plan_batches(
            master,
            &format!("batch/embed/{epoch}"),
            &train_idx,
            config.batch_size,
            config.embed_steps_per_epoch,
        )?;
        let (mut xent_sum, mut red_sum, mut gn_sum) = (0.0, 0.0, 0.0);
        for (step, batch_idx) in batches.iter().enumerate() {
            let batch: Vec<&Utterance> = batch_idx.iter().map(|&i| &dataset.utterances[i]).collect();
            let derang_seed = seeds::derive_seed(master, &format!("derang/{epoch}/{step}"));
            let (lx, lr_, gn) = embed_step_inner(
                &mut state.theta,
                &state.phi,
                &mut state.opt_theta,
                &batch,
                beta,
                config.negative_mode,
                lr_embed,
                &config.adam,
                derang_seed,
                epoch,
                step,
            )?;
            xent_sum += lx;
            red_sum += lr_;
            gn_sum += gn;
        }
        let steps = batches.len() as f64;
        let l_xent = xent_sum / steps;
        let l_redundancy = red_sum / steps;
        let embed_phase = if epoch == 0 { Phase::WarmUp } else { Phase::Embedding };
        observer.on_phase_end(epoch, embed_phase, state)?;

        let eer = holdout_eer(&holdout, &state.theta.encoder, config.eval_pairs_per_class, master)?;
        if let Some(e) = eer {
            if state.best_eer.is_none_or(|b| e < b) {
                state.best_eer = Some(e);
                state.best_epoch = Some(epoch);
            }
        }

        state.epochs_done = epoch + 1;
        let metrics = EpochMetrics {
            epoch,
            l_xent,
            l_redundancy,
            l_ib: l_xent + beta * l_redundancy,
            flow_nll,
            grad_norm_theta: gn_sum / steps,
            grad_norm_phi,
            holdout_eer: eer,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        observer.on_epoch_end(state, &metrics)?;
        all_metrics.push(metrics);
    }
    Ok(all_metrics)
}

/// Trains a fresh model on the dataset: a discriminative warm-up epoch,
/// then per-epoch flow/embedding alternation. Fully deterministic given
/// (dataset, config).
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelState, Vec<EpochMetrics>)> {
    train_observed(dataset, config, &mut NoopObserver)
}

/// [`train`] with an observer invoked after every epoch.
pub fn train_observed(
    dataset: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelState, Vec<EpochMetrics>)> {
    config.validate()?;
    let mut state = ModelState::init(config, dataset.header.t, dataset.header.f, dataset.header.c)?;
    let metrics = train_core(&mut state, dataset, config, observer, true)?;
    Ok((state, metrics))
}

/// Continues training an existing state up to `config.epochs` total epochs.
/// With per-epoch labeled randomness and exact checkpoint round-trips, the
/// continued run is bit-identical to one that never stopped. Returns
/// metrics for the newly run epochs only.
pub fn train_from(
    state: &mut ModelState,
    dataset: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochMetrics>> {
    train_core(state, dataset, config, observer, true)
}

/// The discriminative-only baseline: identical batch streams and warm-up,
/// but no flow phase ever runs and the redundancy term is never built
/// (`beta` is ignored). With β = 0, [`train`] produces a bit-identical Θ
/// trajectory.
pub fn train_discriminative(
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelState, Vec<EpochMetrics>)> {
    train_discriminative_observed(dataset, config, &mut NoopObserver)
}

/// [`train_discriminative`] with an observer invoked after every phase and
/// epoch.
pub fn train_discriminative_observed(
    dataset: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelState, Vec<EpochMetrics>)> {
    config.validate()?;
    let mut state = ModelState::init(config, dataset.header.t, dataset.header.f, dataset.header.c)?;
    let metrics = train_core(&mut state, dataset, config, observer, false)?;
    Ok((state, metrics))
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"IBFLOWCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptArch {
    frames: usize,
    feat: usize,
    classes: usize,
    hidden: usize,
    depth: usize,
    embed_dim: usize,
    flow_layers: usize,
    flow_hidden: usize,
    s_max: f64,
}

#[derive(Serialize, Deserialize)]
struct CkptLoss {
    kind: LossKind,
    scale: f64,
    margin: f64,
    k: f64,
    m0: f64,
    m1: f64,
}

#[derive(Serialize, Deserialize)]
struct CkptCounters {
    epochs_done: usize,
    master_seed: u64,
    opt_theta_t: u64,
    opt_phi_t: u64,
}

#[derive(Serialize, Deserialize)]
struct CkptTensor {
    name: String,
    group: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CkptManifest {
    arch: CkptArch,
    loss: CkptLoss,
    counters: CkptCounters,
    best_eer: Option<f64>,
    best_epoch: Option<usize>,
    tensors: Vec<CkptTensor>,
}

/// Writes the full training state to one self-describing file: an 8-byte
/// magic, a format version, a JSON manifest (architecture, counters, tensor
/// directory), then every tensor as little-endian 64-bit floats in manifest
/// order. The payload is bit-exact, so load-then-continue reproduces an
/// uninterrupted run.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let enc = &state.theta.encoder;
    let arch = CkptArch {
        frames: state.phi.t,
        feat: state.phi.f,
        classes: match &state.theta.head {
            Head::Aam(h) => h.classes(),
            Head::Ocs(_) => 2,
        },
        hidden: enc.hidden_dim(),
        depth: enc.frame.layers.len(),
        embed_dim: enc.embed_dim(),
        flow_layers: state.phi.layers.len(),
        flow_hidden: state.phi.layers[0].wz.nrows(),
        s_max: state.phi.s_max,
    };
    let loss = match &state.theta.head {
        Head::Aam(h) => CkptLoss {
            kind: LossKind::Aam,
            scale: h.scale,
            margin: h.margin,
            k: 0.0,
            m0: 0.0,
            m1: 0.0,
        },
        Head::Ocs(h) => CkptLoss {
            kind: LossKind::Ocs,
            scale: 0.0,
            margin: 0.0,
            k: h.k,
            m0: h.m0,
            m1: h.m1,
        },
    };

    fn push_group<'a>(
        group: &str,
        named: Vec<(String, &'a Array2<f64>)>,
        tensors: &mut Vec<CkptTensor>,
        payload: &mut Vec<&'a Array2<f64>>,
    ) {
        for (name, a) in named {
            tensors.push(CkptTensor {
                name,
                group: group.to_string(),
                rows: a.nrows(),
                cols: a.ncols(),
            });
            payload.push(a);
        }
    }
    let mut tensors = Vec::new();
    let mut payload_order: Vec<&Array2<f64>> = Vec::new();
    push_group("theta", state.theta.params(), &mut tensors, &mut payload_order);
    push_group("phi", state.phi.params(), &mut tensors, &mut payload_order);
    for (group, map) in [
        ("opt_theta_m", &state.opt_theta.m),
        ("opt_theta_v", &state.opt_theta.v),
        ("opt_phi_m", &state.opt_phi.m),
        ("opt_phi_v", &state.opt_phi.v),
    ] {
        let named: Vec<(String, &Array2<f64>)> = map.iter().map(|(n, a)| (n.clone(), a)).collect();
        push_group(group, named, &mut tensors, &mut payload_order);
    }

    let manifest = CkptManifest {
        arch,
        loss,
        counters: CkptCounters {
            epochs_done: state.epochs_done,
            master_seed: state.master_seed,
            opt_theta_t: state.opt_theta.t,
            opt_phi_t: state.opt_phi.t,
        },
        best_eer: state.best_eer,
        best_epoch: state.best_epoch,
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| Error::Io(e.to_string()))?;

    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for a in payload_order {
        for v in a.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn ckpt_read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint while reading {what}: {e}")))
}

/// Loads a checkpoint written by [`save_checkpoint`], reconstructing the
/// architecture from the manifest and every tensor bit-exactly from the
/// payload. Malformed files fail without partial state.
pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    ckpt_read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut v4 = [0u8; 4];
    ckpt_read_exact(&mut r, &mut v4, "version")?;
    let version = u32::from_le_bytes(v4);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let mut l8 = [0u8; 8];
    ckpt_read_exact(&mut r, &mut l8, "manifest length")?;
    let mlen = u64::from_le_bytes(l8) as usize;
    if mlen == 0 || mlen > 64 << 20 {
        return Err(Error::Checkpoint(format!("implausible manifest length {mlen}")));
    }
    let mut mbytes = vec![0u8; mlen];
    ckpt_read_exact(&mut r, &mut mbytes, "manifest")?;
    let manifest: CkptManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;

    let a = &manifest.arch;
    if a.frames == 0 || a.feat == 0 || a.hidden == 0 || a.depth == 0 || a.embed_dim == 0
        || a.flow_layers == 0 || a.flow_hidden == 0
    {
        return Err(Error::Checkpoint("manifest architecture has zero dimensions".into()));
    }

    // Rebuild the skeletons (a throwaway stream seeds them; every value is
    // overwritten by the payload).
    let mut scratch = seeds::stream(0, "ckpt/scratch");
    let encoder = EncoderParams::init(&mut scratch, a.feat, a.hidden, a.embed_dim, a.depth);
    let head = match manifest.loss.kind {
        LossKind::Aam => {
            if a.classes < 2 {
                return Err(Error::Checkpoint(format!("implausible class count {}", a.classes)));
            }
            Head::Aam(AAMHead::init(
                &mut scratch,
                a.classes,
                a.embed_dim,
                manifest.loss.scale,
                manifest.loss.margin,
            ))
        }
        LossKind::Ocs => Head::Ocs(OCSHead::init(
            &mut scratch,
            a.embed_dim,
            manifest.loss.k,
            manifest.loss.m0,
            manifest.loss.m1,
        )),
    };
    let mut phi = FlowModel::init(&mut scratch, a.frames, a.feat, a.embed_dim, a.flow_layers, a.flow_hidden)
        .map_err(|e| Error::Checkpoint(format!("manifest architecture rejected: {e}")))?;
    phi.s_max = a.s_max;
    let mut theta = Theta { encoder, head };
    let mut opt_theta = AdamOpt::new();
    let mut opt_phi = AdamOpt::new();
    opt_theta.t = manifest.counters.opt_theta_t;
    opt_phi.t = manifest.counters.opt_phi_t;

    let mut filled_theta = 0usize;
    let mut filled_phi = 0usize;
    for rec in &manifest.tensors {
        let mut buf = vec![0u8; rec.rows * rec.cols * 8];
        ckpt_read_exact(&mut r, &mut buf, &format!("tensor {:?}", rec.name))?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let array = Array2::from_shape_vec((rec.rows, rec.cols), values)
            .map_err(|e| Error::Checkpoint(format!("tensor {:?}: {e}", rec.name)))?;
        match rec.group.as_str() {
            "theta" => {
                let mut params = theta.params_mut();
                let slot = params
                    .iter_mut()
                    .find(|(n, _)| *n == rec.name)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown Θ tensor {:?}", rec.name)))?;
                if slot.1.dim() != array.dim() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {:?} shape {:?} does not match the manifest architecture {:?}",
                        rec.name,
                        array.dim(),
                        slot.1.dim()
                    )));
                }
                *slot.1 = array;
                filled_theta += 1;
            }
            "phi" => {
                let mut params = phi.params_mut();
                let slot = params
                    .iter_mut()
                    .find(|(n, _)| *n == rec.name)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown Φ tensor {:?}", rec.name)))?;
                if slot.1.dim() != array.dim() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {:?} shape {:?} does not match the manifest architecture {:?}",
                        rec.name,
                        array.dim(),
                        slot.1.dim()
                    )));
                }
                *slot.1 = array;
                filled_phi += 1;
            }
            "opt_theta_m" => {
                opt_theta.m.insert(rec.name.clone(), array);
            }
            "opt_theta_v" => {
                opt_theta.v.insert(rec.name.clone(), array);
            }
            "opt_phi_m" => {
                opt_phi.m.insert(rec.name.clone(), array);
            }
            "opt_phi_v" => {
                opt_phi.v.insert(rec.name.clone(), array);
            }
            other => {
                return Err(Error::Checkpoint(format!("unknown tensor group {other:?}")));
            }
        }
    }
    if filled_theta != theta.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint covers {filled_theta} of {} Θ tensors",
            theta.params().len()
        )));
    }
    if filled_phi != phi.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint covers {filled_phi} of {} Φ tensors",
            phi.params().len()
        )));
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Checkpoint("trailing data after the tensor payload".into())),
        Err(e) => return Err(Error::Checkpoint(format!("read error at end of file: {e}"))),
    }

    Ok(ModelState {
        theta,
        phi,
        opt_theta,
        opt_phi,
        epochs_done: manifest.counters.epochs_done,
        master_seed: manifest.counters.master_seed,
        best_eer: manifest.best_eer,
        best_epoch: manifest.best_epoch,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

/// A loss with named parameter tensors and an analytic gradient, the
/// interface the finite-difference checker drives. Implementations must be
/// deterministic: `loss` may be called many times and must be a pure
/// function of the current tensors.
pub trait FdScenario {
    fn name(&self) -> &str;
    fn tensor_names(&self) -> Vec<String>;
    fn get_tensor(&self, name: &str) -> Array2<f64>;
    fn set_tensor(&mut self, name: &str, value: Array2<f64>);
    fn loss(&mut self) -> Result<f64>;
    fn analytic_grads(&mut self) -> Result<BTreeMap<String, Array2<f64>>>;
}

/// The coordinate with the worst analytic-vs-numeric disagreement.
#[derive(Debug, Clone, Serialize)]
pub struct WorstCoord {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub fd: f64,
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub scenario: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

/// Central-difference verification of a scenario's analytic gradient on a
/// seeded subsample of coordinates (at most `max_coords_per_tensor` from
/// each tensor). The per-coordinate step is `epsilon · max(1, |x|)`; the
/// relative error is `|fd − analytic| / max(|fd|, |analytic|, 1e-8)`.
pub fn gradient_check(
    scenario: &mut dyn FdScenario,
    epsilon: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if max_coords_per_tensor == 0 {
        return Err(Error::Config("max_coords_per_tensor must be at least 1".into()));
    }
    let analytic = scenario.analytic_grads()?;
    let mut rng = seeds::stream(seed, "fdcheck");
    let mut report = GradCheckReport {
        scenario: scenario.name().to_string(),
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for name in scenario.tensor_names() {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Domain(format!("scenario reports no gradient for {name:?}")))?;
        let base = scenario.get_tensor(&name);
        if grad.dim() != base.dim() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} vs tensor {name:?} shape {:?}",
                grad.dim(),
                base.dim()
            )));
        }
        let (rows, cols) = base.dim();
        let total = rows * cols;
        let picks: Vec<usize> = if total <= max_coords_per_tensor {
            (0..total).collect()
        } else {
            // Always probe the dominant coordinate (largest |analytic
            // gradient|) so the most influential direction is never skipped,
            // then fill the budget with a seeded random subsample.
            let dominant = grad
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(flat, _)| flat)
                .unwrap_or(0);
            let mut picks = vec![dominant];
            picks.extend(
                seeds::permutation(&mut rng, total)
                    .into_iter()
                    .filter(|&flat| flat != dominant)
                    .take(max_coords_per_tensor - 1),
            );
            picks
        };
        for flat in picks {
            let (i, j) = (flat / cols, flat % cols);
            let x0 = base[[i, j]];
            let h = epsilon * x0.abs().max(1.0);

            let mut plus = base.clone();
            plus[[i, j]] = x0 + h;
            scenario.set_tensor(&name, plus);
            let loss_plus = scenario.loss()?;

            let mut minus = base.clone();
            minus[[i, j]] = x0 - h;
            scenario.set_tensor(&name, minus);
            let loss_minus = scenario.loss()?;

            scenario.set_tensor(&name, base.clone());

            let fd = (loss_plus - loss_minus) / (2.0 * h);
            let an = grad[[i, j]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstCoord {
                    tensor: name.clone(),
                    row: i,
                    col: j,
                    analytic: an,
                    fd,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{sample_dataset, GeneratorSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tiny_spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            num_classes: 3,
            num_nuisance: 2,
            frames: 5,
            feat_dim: 4,
            class_scale: 2.0,
            nuisance_scale: 2.0,
            noise_std: 0.5,
            seed,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            beta: 0.01,
            epochs: 3,
            batch_size: 8,
            lr_embed: 0.005,
            lr_flow: 0.005,
            lr_decay: 0.95,
            loss_kind: LossKind::Aam,
            negative_mode: NegativeMode::Derangement,
            flow_steps_per_epoch: 0,
            embed_steps_per_epoch: 0,
            seed: 11,
            holdout_fraction: 0.0,
            eval_pairs_per_class: 5,
            adam: AdamParams::default(),
            model: ModelConfig {
                hidden: 6,
                depth: 1,
                embed_dim: 4,
                flow_layers: 2,
                flow_hidden: 6,
                ..ModelConfig::default()
            },
        }
    }

    fn tiny_dataset(seed: u64, count: usize) -> Dataset {
        sample_dataset(&tiny_spec(seed), count).unwrap()
    }

    // -- optimizer ---------------------------------------------------------

    #[test]
    fn adam_zero_gradient_leaves_fresh_params_unchanged() {
        let mut p = array![[1.0, -2.0], [0.5, 3.0]];
        let before = p.clone();
        let mut opt = AdamOpt::new();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Array2::zeros((2, 2)));
        opt.step(vec![("p".to_string(), &mut p)], &grads, 0.1, &AdamParams::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        // Bias correction makes the first update lr·g/(|g| + ε'), i.e. very
        // nearly lr units against the gradient's sign, for any magnitude.
        for &g in &[3.0, -0.001, 42.0, -7.5] {
            let mut p = array![[0.0]];
            let mut opt = AdamOpt::new();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), array![[g]]);
            opt.step(vec![("p".to_string(), &mut p)], &grads, 0.01, &AdamParams::default()).unwrap();
            let update = p[[0, 0]];
            assert!(update.signum() == -g.signum(), "update {update} vs gradient {g}");
            assert_abs_diff_eq!(update.abs(), 0.01, epsilon = 1e-5);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let g = array![[0.3, -0.1], [2.0, 0.7]];
        let run = || {
            let mut p = array![[1.0, 1.0], [1.0, 1.0]];
            let mut opt = AdamOpt::new();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), g.clone());
            for _ in 0..5 {
                opt.step(vec![("p".to_string(), &mut p)], &grads, 0.01, &AdamParams::default()).unwrap();
            }
            (p, opt)
        };
        let (p1, o1) = run();
        let (p2, o2) = run();
        assert_eq!(p1, p2);
        assert_eq!(o1, o2);
    }

    #[test]
    fn adam_rejects_missing_or_misshapen_gradients() {
        let mut p = array![[1.0]];
        let mut opt = AdamOpt::new();
        let empty = BTreeMap::new();
        assert!(matches!(
            opt.step(vec![("p".to_string(), &mut p)], &empty, 0.1, &AdamParams::default()),
            Err(Error::Domain(_))
        ));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Array2::zeros((2, 2)));
        assert!(matches!(
            opt.step(vec![("p".to_string(), &mut p)], &grads, 0.1, &AdamParams::default()),
            Err(Error::Shape(_))
        ));
    }

    // -- config and state --------------------------------------------------

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = tiny_config();
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.beta = -0.1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ok.clone();
        c.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ok.clone();
        c.beta = 0.5;
        c.batch_size = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ok.clone();
        c.lr_decay = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ok.clone();
        c.holdout_fraction = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ok.clone();
        c.model.ocs_m0 = 0.1; // below m1
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn state_init_is_seeded_and_checks_the_head() {
        let c = tiny_config();
        let a = ModelState::init(&c, 5, 4, 3).unwrap();
        let b = ModelState::init(&c, 5, 4, 3).unwrap();
        assert_eq!(theta_digest(&a.theta), theta_digest(&b.theta));
        assert_eq!(phi_digest(&a.phi), phi_digest(&b.phi));

        let mut c2 = c.clone();
        c2.seed = 999;
        let d = ModelState::init(&c2, 5, 4, 3).unwrap();
        assert_ne!(theta_digest(&a.theta), theta_digest(&d.theta));

        // One-class loss demands a binary dataset.
        let mut c3 = c.clone();
        c3.loss_kind = LossKind::Ocs;
        assert!(matches!(ModelState::init(&c3, 5, 4, 3), Err(Error::Config(_))));
        ModelState::init(&c3, 5, 4, 2).unwrap();
    }

    // -- phase isolation and reductions -------------------------------------

    #[test]
    fn flow_phase_never_touches_theta_and_vice_versa() {
        let ds = tiny_dataset(1, 32);
        let c = tiny_config();
        let mut state = ModelState::init(&c, 5, 4, 3).unwrap();
        let batch: Vec<&Utterance> = ds.utterances[..8].iter().collect();

        let theta_before = theta_digest(&state.theta);
        flow_phase_step(&batch, &mut state, &c, 1, 0).unwrap();
        assert_eq!(theta_digest(&state.theta), theta_before, "flow phase moved Θ");
        let phi_after_flow = phi_digest(&state.phi);
        assert_ne!(phi_after_flow, phi_digest(&ModelState::init(&c, 5, 4, 3).unwrap().phi));

        embedding_phase_step(&batch, &mut state, &c, 1, 0).unwrap();
        assert_eq!(phi_digest(&state.phi), phi_after_flow, "embedding phase moved Φ");
        assert_ne!(theta_digest(&state.theta), theta_before);
    }

    #[test]
    fn zero_conditioner_flow_gives_zero_redundancy_and_a_pure_discriminative_step() {
        let ds = tiny_dataset(2, 16);
        let c = tiny_config();
        // Fresh flow: zero-initialized conditioner output layers — identity
        // transport, likelihood independent of ω.
        let mut with_red = ModelState::init(&c, 5, 4, 3).unwrap();
        let mut plain = with_red.clone();
        let batch: Vec<&Utterance> = ds.utterances[..8].iter().collect();

        let (lx, lred, lib) = embedding_phase_step(&batch, &mut with_red, &c, 1, 0).unwrap();
        assert_eq!(lred, 0.0, "identity-flow redundancy must vanish exactly");
        assert_eq!(lib, lx);

        let mut c0 = c.clone();
        c0.beta = 0.0;
        embedding_phase_step(&batch, &mut plain, &c0, 1, 0).unwrap();
        for ((na, a), (nb, b)) in with_red.theta.params().iter().zip(plain.theta.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b, "θ tensor {na} diverged despite a zero conditioner");
        }
    }

    #[test]
    fn redundancy_gradient_is_linear_in_beta() {
        let ds = tiny_dataset(3, 16);
        let c = tiny_config();
        let mut state = ModelState::init(&c, 5, 4, 3).unwrap();
        // Push the flow off its identity initialization so the redundancy
        // term has a live gradient.
        let batch: Vec<&Utterance> = ds.utterances[..8].iter().collect();
        for step in 0..5 {
            flow_phase_step(&batch, &mut state, &c, 1, step).unwrap();
        }

        let grads_at = |beta: f64| -> BTreeMap<String, Array2<f64>> {
            let (t, _, _, total, nodes) =
                embed_phase_tape(&state.theta, &state.phi, &batch, beta, c.negative_mode, 77).unwrap();
            let g = t.backward(total);
            nodes.into_iter().map(|(n, id)| (n, g.get(id, &t))).collect()
        };
        let g0 = grads_at(0.0);
        let g1 = grads_at(1.0);
        let g2 = grads_at(2.0);
        let mut saw_live_coord = false;
        for name in g0.keys() {
            let d1 = &g1[name] - &g0[name];
            let d2 = &g2[name] - &g1[name];
            for (a, b) in d1.iter().zip(d2.iter()) {
                let denom = a.abs().max(b.abs());
                if denom > 1e-12 {
                    saw_live_coord = true;
                    assert!(
                        (a - b).abs() <= 1e-9 * denom.max(1.0),
                        "β-increments differ in {name}: {a} vs {b}"
                    );
                }
            }
        }
        assert!(saw_live_coord, "redundancy gradient was identically zero");
    }

    #[test]
    fn beta_zero_training_matches_the_discriminative_baseline_bitwise() {
        let ds = tiny_dataset(4, 48);
        let mut c = tiny_config();
        c.beta = 0.0;
        c.epochs = 3;
        let (ib_state, ib_metrics) = train(&ds, &c).unwrap();
        let (disc_state, disc_metrics) = train_discriminative(&ds, &c).unwrap();
        assert_eq!(theta_digest(&ib_state.theta), theta_digest(&disc_state.theta));
        for (a, b) in ib_metrics.iter().zip(disc_metrics.iter()) {
            assert_eq!(a.l_xent.to_bits(), b.l_xent.to_bits());
            assert_eq!(a.grad_norm_theta.to_bits(), b.grad_norm_theta.to_bits());
        }
        // The full run exercised its flow phase even though Θ ignored it.
        assert!(ib_metrics[1].flow_nll.is_some());
        assert!(disc_metrics[1].flow_nll.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(5, 48);
        let mut c = tiny_config();
        c.holdout_fraction = 0.25;
        let (s1, m1) = train(&ds, &c).unwrap();
        let (s2, m2) = train(&ds, &c).unwrap();
        assert_eq!(theta_digest(&s1.theta), theta_digest(&s2.theta));
        assert_eq!(phi_digest(&s1.phi), phi_digest(&s2.phi));
        let lines1: Vec<String> = m1.iter().map(|m| m.json_line()).collect();
        let lines2: Vec<String> = m2.iter().map(|m| m.json_line()).collect();
        assert_eq!(lines1, lines2);
        assert!(m1.iter().all(|m| m.holdout_eer.is_some()));
    }

    #[test]
    fn a_single_epoch_run_is_warmup_only() {
        let ds = tiny_dataset(6, 32);
        let mut c = tiny_config();
        c.epochs = 1;
        let init_phi = phi_digest(&ModelState::init(&c, 5, 4, 3).unwrap().phi);
        let (state, metrics) = train(&ds, &c).unwrap();
        assert_eq!(metrics.len(), 1);
        assert_eq!(metrics[0].epoch, 0);
        assert!(metrics[0].flow_nll.is_none(), "warm-up must not run the flow phase");
        assert_eq!(metrics[0].l_redundancy, 0.0);
        assert_eq!(phi_digest(&state.phi), init_phi, "Φ updated during warm-up");
        assert_eq!(state.opt_phi.t, 0);
    }

    #[test]
    fn objective_accounting_holds_every_epoch() {
        let ds = tiny_dataset(7, 48);
        let mut c = tiny_config();
        c.epochs = 4;
        let (_, metrics) = train(&ds, &c).unwrap();
        for m in &metrics {
            let beta = if m.epoch == 0 { 0.0 } else { c.beta };
            assert!(
                (m.l_ib - (m.l_xent + beta * m.l_redundancy)).abs() <= 1e-12,
                "epoch {}: l_ib {} vs parts {}",
                m.epoch,
                m.l_ib,
                m.l_xent + beta * m.l_redundancy
            );
        }
        // Redundancy was actually estimated after the warm-up.
        assert!(metrics[1..].iter().any(|m| m.l_redundancy != 0.0));
    }

    #[test]
    fn discriminative_loss_decreases_over_training() {
        let ds = tiny_dataset(8, 96);
        let mut c = tiny_config();
        c.epochs = 12;
        c.beta = 0.001;
        let (_, metrics) = train(&ds, &c).unwrap();
        let first = metrics[0].l_xent;
        let last = metrics.last().unwrap().l_xent;
        assert!(
            last < 0.5 * first,
            "expected halved discriminative loss, got {first} → {last}"
        );
        assert!(metrics.iter().all(|m| m.l_redundancy.is_finite()));
    }

    #[test]
    fn flow_nll_decreases_on_a_fixed_batch_and_beats_the_identity_flow() {
        let ds = tiny_dataset(9, 16);
        let c = tiny_config();
        let mut state = ModelState::init(&c, 5, 4, 3).unwrap();
        let batch: Vec<&Utterance> = ds.utterances[..8].iter().collect();

        // The freshly initialized flow is the identity transport; its NLL is
        // the standard-normal NLL of the raw frames.
        let first = flow_phase_step(&batch, &mut state, &c, 1, 0).unwrap();
        let mut last = first;
        for step in 1..200 {
            last = flow_phase_step(&batch, &mut state, &c, 1, step).unwrap();
        }
        assert!(
            last < first - 0.05,
            "200 flow steps did not reduce NLL: {first} → {last}"
        );
    }

    #[test]
    fn non_finite_parameters_abort_with_phase_diagnostics() {
        let ds = tiny_dataset(10, 16);
        let c = tiny_config();
        let mut state = ModelState::init(&c, 5, 4, 3).unwrap();
        *state.theta.encoder.params_mut()[0].1 = Array2::from_elem((6, 4), f64::INFINITY);
        let batch: Vec<&Utterance> = ds.utterances[..8].iter().collect();
        let err = embedding_phase_step(&batch, &mut state, &c, 2, 3).unwrap_err();
        match err {
            Error::Numeric(msg) => {
                assert!(msg.contains("epoch 2"), "missing epoch in: {msg}");
                assert!(msg.contains("embedding"), "missing phase in: {msg}");
            }
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    // -- checkpointing -------------------------------------------------------

    #[test]
    fn checkpoint_roundtrip_restores_everything_bitwise() {
        let ds = tiny_dataset(11, 48);
        let mut c = tiny_config();
        c.holdout_fraction = 0.25;
        let (state, _) = train(&ds, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(state, loaded);
    }

    #[test]
    fn checkpoint_roundtrip_for_the_one_class_head() {
        let mut spec = tiny_spec(12);
        spec.num_classes = 2;
        let ds = sample_dataset(&spec, 32).unwrap();
        let mut c = tiny_config();
        c.loss_kind = LossKind::Ocs;
        c.epochs = 2;
        let (state, _) = train(&ds, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(state, loaded);
        assert_eq!(loaded.theta.head.kind(), LossKind::Ocs);
    }

    #[test]
    fn training_continues_bit_identically_after_a_checkpoint_roundtrip() {
        let ds = tiny_dataset(13, 48);
        let mut c = tiny_config();
        c.epochs = 5;
        c.holdout_fraction = 0.25;
        let (full_state, full_metrics) = train(&ds, &c).unwrap();

        let mut c3 = c.clone();
        c3.epochs = 3;
        let (state3, mut metrics) = train(&ds, &c3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state3, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        let tail = train_from(&mut resumed, &ds, &c, &mut NoopObserver).unwrap();
        metrics.extend(tail);

        assert_eq!(theta_digest(&full_state.theta), theta_digest(&resumed.theta));
        assert_eq!(phi_digest(&full_state.phi), phi_digest(&resumed.phi));
        assert_eq!(full_state.opt_theta, resumed.opt_theta);
        assert_eq!(full_state.opt_phi, resumed.opt_phi);
        let full_lines: Vec<String> = full_metrics.iter().map(|m| m.json_line()).collect();
        let split_lines: Vec<String> = metrics.iter().map(|m| m.json_line()).collect();
        assert_eq!(full_lines, split_lines);

        // Resuming past the target is a no-op.
        let again = train_from(&mut resumed, &ds, &c, &mut NoopObserver).unwrap();
        assert!(again.is_empty());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let ds = tiny_dataset(14, 32);
        let mut c = tiny_config();
        c.epochs = 2;
        let (state, _) = train(&ds, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        let p = dir.path().join("bad-magic.bin");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));

        // Truncated payload.
        let p = dir.path().join("truncated.bin");
        std::fs::write(&p, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));

        // Trailing garbage.
        let mut long = bytes.clone();
        long.extend_from_slice(&[0u8; 8]);
        let p = dir.path().join("trailing.bin");
        std::fs::write(&p, &long).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));

        // Unsupported version.
        let mut wrong = bytes.clone();
        wrong[8] = 99;
        let p = dir.path().join("version.bin");
        std::fs::write(&p, &wrong).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));

        // Missing file.
        assert!(matches!(
            load_checkpoint(&dir.path().join("nope.bin")),
            Err(Error::Checkpoint(_))
        ));
    }

    // -- finite-difference checker -------------------------------------------

    /// ½‖p‖² has gradient exactly p: the checker must report ~zero error.
    struct Quadratic {
        p: Array2<f64>,
        corrupt: bool,
    }

    impl FdScenario for Quadratic {
        fn name(&self) -> &str {
            "quadratic"
        }
        fn tensor_names(&self) -> Vec<String> {
            vec!["p".to_string()]
        }
        fn get_tensor(&self, _: &str) -> Array2<f64> {
            self.p.clone()
        }
        fn set_tensor(&mut self, _: &str, value: Array2<f64>) {
            self.p = value;
        }
        fn loss(&mut self) -> Result<f64> {
            Ok(0.5 * self.p.iter().map(|v| v * v).sum::<f64>())
        }
        fn analytic_grads(&mut self) -> Result<BTreeMap<String, Array2<f64>>> {
            let mut g = self.p.clone();
            if self.corrupt {
                g[[0, 0]] *= 2.0; // one deliberately doubled coordinate
            }
            let mut out = BTreeMap::new();
            out.insert("p".to_string(), g);
            Ok(out)
        }
    }

    #[test]
    fn gradient_check_accepts_exact_and_flags_corrupted_gradients() {
        let mut rng = seeds::stream(15, "quad");
        let p = seeds::uniform_array(&mut rng, 3, 4, 0.5, 2.0);
        let mut clean = Quadratic { p: p.clone(), corrupt: false };
        let report = gradient_check(&mut clean, 1e-5, 100, 1).unwrap();
        assert_eq!(report.coords_checked, 12);
        assert!(report.max_rel_err < 1e-8, "exact case: {}", report.max_rel_err);

        let mut corrupted = Quadratic { p, corrupt: true };
        let report = gradient_check(&mut corrupted, 1e-5, 100, 1).unwrap();
        assert!(report.max_rel_err > 0.3, "corruption missed: {}", report.max_rel_err);
        assert_eq!(report.worst.as_ref().unwrap().row, 0);
        assert_eq!(report.worst.as_ref().unwrap().col, 0);
    }

    #[test]
    fn gradient_check_subsamples_large_tensors() {
        let mut rng = seeds::stream(16, "quad");
        let p = seeds::uniform_array(&mut rng, 10, 10, 0.5, 2.0);
        let mut s = Quadratic { p, corrupt: false };
        let report = gradient_check(&mut s, 1e-5, 7, 1).unwrap();
        assert_eq!(report.coords_checked, 7);
    }
}
