//! Named finite-difference verification scenarios, one per analytic
//! gradient path: the pooling encoder alone, each classifier head, the
//! conditional flow likelihood, and the full combined objective. The
//! generic checker lives in [`crate::trainer::gradient_check`]; this module
//! supplies the concrete losses it drives, plus a deliberately corrupted
//! wrapper that proves the checker can detect a wrong gradient.

use crate::encoder::{embed_on_tape, EncoderNodes, EncoderParams};
use crate::flow::{self, FlowModel, FlowNodes};
use crate::miest::NegativeMode;
use crate::objectives::{aam_loss_on_tape, ocs_loss_on_tape, AAMHead, OCSHead};
use crate::seeds;
use crate::synthdata::{sample_dataset, GeneratorSpec, Utterance};
use crate::tape::Tape;
use crate::trainer::{embed_phase_tape, FdScenario, Head, Theta};
use crate::{Error, Result};
use ndarray::Array2;
use std::collections::BTreeMap;

/// The built-in scenario names, in the order `grad-check` runs them.
pub fn scenario_names() -> &'static [&'static str] {
    &["sap", "aam", "ocs", "flow", "total"]
}

const T: usize = 5;
const F: usize = 4;
const H: usize = 6;
const D: usize = 4;
const G: usize = 6;
const BATCH: usize = 6;
const CLASSES: usize = 3;

fn fixture_batch(seed: u64, classes: usize) -> Vec<Utterance> {
    let spec = GeneratorSpec {
        num_classes: classes,
        num_nuisance: 2,
        frames: T,
        feat_dim: F,
        class_scale: 2.0,
        nuisance_scale: 2.0,
        noise_std: 0.5,
        seed,
    };
    sample_dataset(&spec, BATCH).expect("fixture dataset").utterances
}

/// Flow with the conditioner pushed off its zero initialization, so the
/// likelihood actually depends on every parameter and on ω.
fn lively_flow(seed: u64) -> FlowModel {
    let mut rng = seeds::stream(seed, "gradcheck/flow");
    let mut model = FlowModel::init(&mut rng, T, F, D, 2, G).expect("flow fixture");
    for layer in &mut model.layers {
        layer.wo += &seeds::normal_array(&mut rng, layer.wo.nrows(), layer.wo.ncols(), 0.2);
        layer.bo += &seeds::normal_array(&mut rng, 1, layer.bo.ncols(), 0.1);
    }
    model
}

fn get_named(params: &[(String, &Array2<f64>)], name: &str) -> Array2<f64> {
    params
        .iter()
        .find(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("unknown tensor {name:?}"))
        .1
        .clone()
}

fn set_named(params: Vec<(String, &mut Array2<f64>)>, name: &str, value: Array2<f64>) {
    for (n, p) in params {
        if n == name {
            assert_eq!(p.dim(), value.dim(), "shape change for tensor {name:?}");
            *p = value;
            return;
        }
    }
    panic!("unknown tensor {name:?}");
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

/// Pooling-encoder path alone: loss = ½·Σ over the batch of ‖ω‖². Exercises
/// the frame layers, attention softmax, and projection without any head.
struct SapScenario {
    encoder: EncoderParams,
    batch: Vec<Utterance>,
}

impl SapScenario {
    fn build_loss(&self) -> (Tape, crate::tape::NodeId, Vec<(String, crate::tape::NodeId)>) {
        let mut t = Tape::new();
        let nodes = EncoderNodes::insert(&mut t, &self.encoder);
        let mut acc = None;
        for u in &self.batch {
            let x = t.leaf(u.frames.clone());
            let w = embed_on_tape(&mut t, x, &nodes);
            let sq = t.mul(w, w);
            let s = t.sum_all(sq);
            acc = Some(match acc {
                None => s,
                Some(a) => t.add(a, s),
            });
        }
        let total = t.scale(acc.expect("nonempty batch"), 0.5);
        let named = nodes.named();
        (t, total, named)
    }
}

impl FdScenario for SapScenario {
    fn name(&self) -> &str {
        "sap"
    }
    fn tensor_names(&self) -> Vec<String> {
        self.encoder.params().into_iter().map(|(n, _)| n).collect()
    }
    fn get_tensor(&self, name: &str) -> Array2<f64> {
        get_named(&self.encoder.params(), name)
    }
    fn set_tensor(&mut self, name: &str, value: Array2<f64>) {
        set_named(self.encoder.params_mut(), name, value);
    }
    fn loss(&mut self) -> Result<f64> {
        let (t, total, _) = self.build_loss();
        Ok(t.scalar(total))
    }
    fn analytic_grads(&mut self) -> Result<BTreeMap<String, Array2<f64>>> {
        let (t, total, named) = self.build_loss();
        let grads = t.backward(total);
        Ok(named.into_iter().map(|(n, id)| (n, grads.get(id, &t))).collect())
    }
}

/// Classifier-head scenario over the full Θ set (encoder + head).
struct HeadScenario {
    kind: &'static str,
    theta: Theta,
    batch: Vec<Utterance>,
}

impl HeadScenario {
    fn build_loss(&self) -> (Tape, crate::tape::NodeId, Vec<(String, crate::tape::NodeId)>) {
        let mut t = Tape::new();
        let enc_nodes = EncoderNodes::insert(&mut t, &self.theta.encoder);
        let head_node = t.leaf(self.theta.head.weights().clone());
        let mut omegas = Vec::with_capacity(self.batch.len());
        for u in &self.batch {
            let x = t.leaf(u.frames.clone());
            omegas.push(embed_on_tape(&mut t, x, &enc_nodes));
        }
        let embeddings = t.rows(omegas);
        let labels: Vec<usize> = self.batch.iter().map(|u| u.y).collect();
        let loss = match &self.theta.head {
            Head::Aam(h) => aam_loss_on_tape(&mut t, embeddings, head_node, &labels, h.scale, h.margin),
            Head::Ocs(h) => {
                let bin: Vec<u8> = labels.iter().map(|&y| y as u8).collect();
                ocs_loss_on_tape(&mut t, embeddings, head_node, &bin, h.k, h.m0, h.m1)
            }
        };
        let mut named = enc_nodes.named();
        named.push(("head.w".to_string(), head_node));
        (t, loss, named)
    }
}

impl FdScenario for HeadScenario {
    fn name(&self) -> &str {
        self.kind
    }
    fn tensor_names(&self) -> Vec<String> {
        self.theta.params().into_iter().map(|(n, _)| n).collect()
    }
    fn get_tensor(&self, name: &str) -> Array2<f64> {
        get_named(&self.theta.params(), name)
    }
    fn set_tensor(&mut self, name: &str, value: Array2<f64>) {
        set_named(self.theta.params_mut(), name, value);
    }
    fn loss(&mut self) -> Result<f64> {
        let (t, loss, _) = self.build_loss();
        Ok(t.scalar(loss))
    }
    fn analytic_grads(&mut self) -> Result<BTreeMap<String, Array2<f64>>> {
        let (t, loss, named) = self.build_loss();
        let grads = t.backward(loss);
        Ok(named.into_iter().map(|(n, id)| (n, grads.get(id, &t))).collect())
    }
}

/// Flow-likelihood scenario: mean per-dimension NLL of fixed (x, ω) pairs
/// with respect to every flow parameter.
struct FlowScenario {
    model: FlowModel,
    pairs: Vec<(Array2<f64>, Array2<f64>)>,
}

impl FlowScenario {
    fn build_loss(&self) -> (Tape, crate::tape::NodeId, Vec<(String, crate::tape::NodeId)>) {
        let mut t = Tape::new();
        let nodes = FlowNodes::insert(&mut t, &self.model);
        let mut acc = None;
        for (x, w) in &self.pairs {
            let xi = t.leaf(x.clone());
            let wi = t.leaf(w.clone());
            let ll = flow::loglik_on_tape(&mut t, xi, wi, &nodes);
            acc = Some(match acc {
                None => ll,
                Some(a) => t.add(a, ll),
            });
        }
        let nll = t.scale(acc.expect("nonempty batch"), -1.0 / self.pairs.len() as f64);
        (t, nll, nodes.named())
    }
}

impl FdScenario for FlowScenario {
    fn name(&self) -> &str {
        "flow"
    }
    fn tensor_names(&self) -> Vec<String> {
        self.model.params().into_iter().map(|(n, _)| n).collect()
    }
    fn get_tensor(&self, name: &str) -> Array2<f64> {
        get_named(&self.model.params(), name)
    }
    fn set_tensor(&mut self, name: &str, value: Array2<f64>) {
        set_named(self.model.params_mut(), name, value);
    }
    fn loss(&mut self) -> Result<f64> {
        let (t, nll, _) = self.build_loss();
        Ok(t.scalar(nll))
    }
    fn analytic_grads(&mut self) -> Result<BTreeMap<String, Array2<f64>>> {
        let (t, nll, named) = self.build_loss();
        let grads = t.backward(nll);
        Ok(named.into_iter().map(|(n, id)| (n, grads.get(id, &t))).collect())
    }
}

/// The full combined objective `L_xent + β·L_redundancy` with respect to Θ,
/// with gradients flowing through the classifier path and through ω's role
/// in both terms of the redundancy bound.
struct TotalScenario {
    theta: Theta,
    phi: FlowModel,
    batch: Vec<Utterance>,
    beta: f64,
    mode: NegativeMode,
    derang_seed: u64,
}

impl FdScenario for TotalScenario {
    fn name(&self) -> &str {
        "total"
    }
    fn tensor_names(&self) -> Vec<String> {
        self.theta.params().into_iter().map(|(n, _)| n).collect()
    }
    fn get_tensor(&self, name: &str) -> Array2<f64> {
        get_named(&self.theta.params(), name)
    }
    fn set_tensor(&mut self, name: &str, value: Array2<f64>) {
        set_named(self.theta.params_mut(), name, value);
    }
    fn loss(&mut self) -> Result<f64> {
        let batch: Vec<&Utterance> = self.batch.iter().collect();
        let (t, _, _, total, _) = embed_phase_tape(
            &self.theta,
            &self.phi,
            &batch,
            self.beta,
            self.mode,
            self.derang_seed,
        )?;
        Ok(t.scalar(total))
    }
    fn analytic_grads(&mut self) -> Result<BTreeMap<String, Array2<f64>>> {
        let batch: Vec<&Utterance> = self.batch.iter().collect();
        let (t, _, _, total, named) = embed_phase_tape(
            &self.theta,
            &self.phi,
            &batch,
            self.beta,
            self.mode,
            self.derang_seed,
        )?;
        let grads = t.backward(total);
        Ok(named.into_iter().map(|(n, id)| (n, grads.get(id, &t))).collect())
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

fn total_scenario(seed: u64, beta: f64) -> TotalScenario {
    let mut rng = seeds::stream(seed, "gradcheck/total");
    let theta = Theta {
        encoder: EncoderParams::init(&mut rng, F, H, D, 1),
        head: Head::Aam(AAMHead::init(&mut rng, CLASSES, D, 30.0, 0.2)),
    };
    TotalScenario {
        theta,
        phi: lively_flow(seed),
        batch: fixture_batch(seed, CLASSES),
        beta,
        mode: NegativeMode::Derangement,
        derang_seed: seeds::derive_seed(seed, "gradcheck/derang"),
    }
}

/// Builds a named verification scenario on seeded fixture data. Valid names
/// are listed by [`scenario_names`].
pub fn build_scenario(name: &str, seed: u64) -> Result<Box<dyn FdScenario>> {
    match name {
        "sap" => {
            let encoder = EncoderParams::init(&mut seeds::stream(seed, "gradcheck/enc"), F, H, D, 2);
            Ok(Box::new(SapScenario { encoder, batch: fixture_batch(seed, CLASSES) }))
        }
        "aam" => {
            let mut rng = seeds::stream(seed, "gradcheck/aam");
            let theta = Theta {
                encoder: EncoderParams::init(&mut rng, F, H, D, 1),
                head: Head::Aam(AAMHead::init(&mut rng, CLASSES, D, 30.0, 0.2)),
            };
            Ok(Box::new(HeadScenario { kind: "aam", theta, batch: fixture_batch(seed, CLASSES) }))
        }
        "ocs" => {
            let mut rng = seeds::stream(seed, "gradcheck/ocs");
            let theta = Theta {
                encoder: EncoderParams::init(&mut rng, F, H, D, 1),
                head: Head::Ocs(OCSHead::init(&mut rng, D, 20.0, 0.9, 0.2)),
            };
            Ok(Box::new(HeadScenario { kind: "ocs", theta, batch: fixture_batch(seed, 2) }))
        }
        "flow" => {
            let model = lively_flow(seed);
            let mut rng = seeds::stream(seed, "gradcheck/pairs");
            let pairs = (0..BATCH)
                .map(|_| {
                    (
                        seeds::normal_array(&mut rng, T, F, 1.0),
                        seeds::normal_array(&mut rng, 1, D, 1.0),
                    )
                })
                .collect();
            Ok(Box::new(FlowScenario { model, pairs }))
        }
        "total" => Ok(Box::new(total_scenario(seed, 0.05))),
        other => Err(Error::Config(format!(
            "unknown gradient-check scenario {other:?}; valid: {}",
            scenario_names().join(", ")
        ))),
    }
}

/// Wraps a scenario, doubling the largest-magnitude coordinate of its
/// analytic gradient. The checker must flag it: this is the detector's
/// own self-test.
pub struct CorruptedGradient {
    inner: Box<dyn FdScenario>,
    name: String,
}

impl CorruptedGradient {
    pub fn new(inner: Box<dyn FdScenario>) -> Self {
        let name = format!("{}+corrupted", inner.name());
        CorruptedGradient { inner, name }
    }
}

impl FdScenario for CorruptedGradient {
    fn name(&self) -> &str {
        &self.name
    }
    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensor_names()
    }
    fn get_tensor(&self, name: &str) -> Array2<f64> {
        self.inner.get_tensor(name)
    }
    fn set_tensor(&mut self, name: &str, value: Array2<f64>) {
        self.inner.set_tensor(name, value);
    }
    fn loss(&mut self) -> Result<f64> {
        self.inner.loss()
    }
    fn analytic_grads(&mut self) -> Result<BTreeMap<String, Array2<f64>>> {
        let mut grads = self.inner.analytic_grads()?;
        let mut worst: Option<(String, usize, usize, f64)> = None;
        for (name, g) in &grads {
            for ((i, j), &v) in g.indexed_iter() {
                if worst.as_ref().is_none_or(|(_, _, _, w)| v.abs() > w.abs()) {
                    worst = Some((name.clone(), i, j, v));
                }
            }
        }
        let (name, i, j, _) =
            worst.ok_or_else(|| Error::Domain("scenario has no gradient coordinates".into()))?;
        grads.get_mut(&name).expect("key from iteration")[[i, j]] *= 2.0;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::gradient_check;

    #[test]
    fn every_builtin_scenario_passes_the_finite_difference_check() {
        for &name in scenario_names() {
            let mut scenario = build_scenario(name, 3).unwrap();
            let report = gradient_check(scenario.as_mut(), 1e-5, 10, 1).unwrap();
            assert!(
                report.max_rel_err < 1e-3,
                "{name}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
            assert!(report.coords_checked > 0);
        }
    }

    #[test]
    fn the_corrupted_wrapper_is_flagged() {
        let mut scenario = CorruptedGradient::new(build_scenario("aam", 3).unwrap());
        let report = gradient_check(&mut scenario, 1e-5, 100, 1).unwrap();
        assert!(
            report.max_rel_err > 0.3,
            "corruption went undetected: {}",
            report.max_rel_err
        );
    }

    #[test]
    fn unknown_scenario_names_are_rejected() {
        assert!(matches!(build_scenario("nope", 1), Err(Error::Config(_))));
    }

    #[test]
    fn the_total_scenario_redundancy_path_is_live() {
        // The full-objective check is only meaningful if the β term
        // contributes: on identical Θ/Φ/batch, the gradient with β > 0 must
        // differ from the β = 0 gradient.
        let g_with = total_scenario(3, 0.05).analytic_grads().unwrap();
        let g_without = total_scenario(3, 0.0).analytic_grads().unwrap();
        let diff: f64 = g_with
            .iter()
            .map(|(n, g)| (g - &g_without[n]).iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(diff > 1e-8, "β had no effect on the Θ gradient (diff {diff})");
    }
}
