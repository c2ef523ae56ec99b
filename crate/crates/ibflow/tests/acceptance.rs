//! Acceptance suite: eleven end-to-end criteria, one test (and one
//! pass/fail line) each. Together they pin the properties the crate is
//! built around — exact flow densities, verified gradients, a true
//! mutual-information upper bound, the alternating schedule's freeze
//! guarantees, bit-exact reproducibility, and the headline behavioral
//! effect: the redundancy term strips nuisance structure out of the
//! embedding without hurting class performance.
//!
//! Run with: cargo test --test acceptance -- --nocapture

use ibflow::eval::{build_trials, compute_eer, linear_probe, score_trials, trial_eer};
use ibflow::flow::{conditional_log_likelihood, forward, inverse, FlowModel};
use ibflow::gradcheck::{build_scenario, scenario_names};
use ibflow::miest::{gaussian_club_all_pairs, gaussian_mi_oracle, gaussian_pairs};
use ibflow::objectives::{exact_discrete_mi, negce_lower_bound, DiscreteJoint};
use ibflow::seeds;
use ibflow::synthdata::{sample_dataset, Dataset, GeneratorSpec};
use ibflow::trainer::{
    embed_records, gradient_check, load_checkpoint, phi_digest, save_checkpoint, theta_digest,
    train, train_discriminative, train_from, train_observed, EpochMetrics, ModelState,
    NoopObserver, Phase, TrainConfig, TrainObserver,
};
use ndarray::Array2;
use rand::Rng;
use std::time::Instant;

/// A coupling stack perturbed away from its identity initialization so the
/// transform actually does something. `spread` scales the perturbation.
fn perturbed_flow<R: Rng>(
    rng: &mut R,
    t: usize,
    f: usize,
    d: usize,
    depth: usize,
    hidden: usize,
    spread: f64,
) -> FlowModel {
    let mut model = FlowModel::init(rng, t, f, d, depth, hidden).unwrap();
    for layer in &mut model.layers {
        layer.wo += &seeds::normal_array(rng, layer.wo.nrows(), layer.wo.ncols(), spread);
        layer.bo += &seeds::normal_array(rng, 1, layer.bo.ncols(), spread * 0.5);
    }
    model
}

#[test]
fn criterion_01_flow_invertibility() {
    let started = Instant::now();
    let shapes = [(1, 2), (2, 2), (1, 4), (3, 4), (5, 2), (4, 6), (10, 8), (2, 16)];
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let mut rng = seeds::stream(101, &format!("c1/{i}"));
        let (t, f) = shapes[i % shapes.len()];
        let d = 2 + i % 5;
        let depth = 1 + i % 4;
        let model = perturbed_flow(&mut rng, t, f, d, depth, 6, 0.3);
        let x = seeds::normal_array(&mut rng, t, f, 2.0);
        let omega = seeds::normal_array(&mut rng, 1, d, 1.0);
        let (z, _) = forward(&model, &x, &omega).unwrap();
        let back = inverse(&model, &z, &omega).unwrap();
        let err = (&back - &x).mapv(f64::abs).into_iter().fold(0.0, f64::max);
        worst = worst.max(err);
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(worst < 1e-6, "worst inverse(forward(x)) error {worst:e} >= 1e-6");
    assert!(secs < 10.0, "1000 round trips took {secs:.1}s >= 10s");
    println!("criterion 01 flow invertibility: PASS (worst |x - inv(fwd(x))| = {worst:.2e} over 1000 triples, {secs:.1}s)");
}

/// log|det J| of a small square matrix by LU elimination with partial
/// pivoting; panics on a singular Jacobian (which would itself be a flow
/// defect at these scales).
#[allow(clippy::needless_range_loop)]
fn logabsdet(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut acc = 0.0;
    for k in 0..n {
        let piv = (k..n).max_by(|&a, &b| m[a][k].abs().total_cmp(&m[b][k].abs())).unwrap();
        m.swap(k, piv);
        let pivot = m[k][k];
        assert!(pivot != 0.0, "singular finite-difference Jacobian");
        acc += pivot.abs().ln();
        for i in (k + 1)..n {
            let factor = m[i][k] / pivot;
            for j in k..n {
                m[i][j] -= factor * m[k][j];
            }
        }
    }
    acc
}

#[test]
#[allow(clippy::needless_range_loop)]
fn criterion_02_logdet_matches_finite_difference_jacobian() {
    // Dense-Jacobian comparison is only tractable on tiny inputs, so cap
    // the flattened dimension at 8 and sweep shapes under that cap.
    let shapes = [(1, 2), (2, 2), (1, 4), (3, 2), (2, 4), (1, 6), (4, 2), (1, 8)];
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = seeds::stream(202, &format!("c2/{seed}"));
        let (t, f) = shapes[seed as usize % shapes.len()];
        let n = t * f;
        let d = 2 + seed as usize % 4;
        let model = perturbed_flow(&mut rng, t, f, d, 1 + seed as usize % 3, 5, 0.3);
        let x = seeds::normal_array(&mut rng, t, f, 1.0);
        let omega = seeds::normal_array(&mut rng, 1, d, 1.0);
        let (_, analytic) = forward(&model, &x, &omega).unwrap();

        // Column l of the Jacobian by central differences on the flattened
        // input; row k is the k-th flattened output coordinate.
        let mut jac = vec![vec![0.0; n]; n];
        for l in 0..n {
            let (i, j) = (l / f, l % f);
            let h = 1e-6 * x[[i, j]].abs().max(1.0);
            let mut plus = x.clone();
            plus[[i, j]] += h;
            let (zp, _) = forward(&model, &plus, &omega).unwrap();
            let mut minus = x.clone();
            minus[[i, j]] -= h;
            let (zm, _) = forward(&model, &minus, &omega).unwrap();
            for k in 0..n {
                let (ki, kj) = (k / f, k % f);
                jac[k][l] = (zp[[ki, kj]] - zm[[ki, kj]]) / (2.0 * h);
            }
        }
        let fd = logabsdet(jac);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst logdet relative error {worst:e} >= 1e-4");
    println!("criterion 02 log-det exactness: PASS (worst rel err {worst:.2e} across 100 seeded models)");
}

#[test]
fn criterion_03_conditional_density_integrates_to_one() {
    // With T = 1, F = 2 the density lives on the plane; integrate it on a
    // grid wide enough to hold all practical mass for mildly perturbed
    // models and check the change-of-variables bookkeeping leaks nothing.
    let (lo, hi, n) = (-8.0, 8.0, 400);
    let step = (hi - lo) / n as f64;
    let mut worst_dev: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = seeds::stream(303, &format!("c3/{seed}"));
        let d = 2 + seed as usize % 3;
        let model = perturbed_flow(&mut rng, 1, 2, d, 2 + seed as usize % 2, 6, 0.1);
        let omega = seeds::normal_array(&mut rng, 1, d, 1.0);
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = ndarray::arr2(&[[
                    lo + (i as f64 + 0.5) * step,
                    lo + (j as f64 + 0.5) * step,
                ]]);
                mass += conditional_log_likelihood(&model, &x, &omega).unwrap().exp();
            }
        }
        mass *= step * step;
        worst_dev = worst_dev.max((mass - 1.0).abs());
        assert!(
            (mass - 1.0).abs() < 1e-2,
            "seed {seed}: quadrature mass {mass} deviates from 1 by >= 1e-2"
        );
    }
    println!("criterion 03 density normalization: PASS (worst |mass - 1| = {worst_dev:.2e} over 5 seeded models)");
}

#[test]
fn criterion_04_gradient_suite() {
    let mut overall: f64 = 0.0;
    for &name in scenario_names() {
        let mut worst: f64 = 0.0;
        for instance in 0..20u64 {
            let seed = seeds::derive_seed(404, &format!("c4/{name}/{instance}"));
            let mut scenario = build_scenario(name, seed).unwrap();
            let report = gradient_check(scenario.as_mut(), 1e-5, 6, seed ^ 1).unwrap();
            worst = worst.max(report.max_rel_err);
        }
        assert!(
            worst < 1e-3,
            "scenario {name}: worst relative error {worst:e} >= 1e-3 over 20 instances"
        );
        overall = overall.max(worst);
    }
    println!(
        "criterion 04 gradient suite: PASS (worst rel err {overall:.2e} across {} scenarios x 20 seeds)",
        scenario_names().len()
    );
}

#[test]
fn criterion_05_mi_upper_bound_on_gaussian_ground_truth() {
    let started = Instant::now();
    let b = 100_000;
    // Correlated case: an upper bound may overshoot the true MI but must
    // not undershoot it beyond sampling noise.
    for (i, rho) in [0.5, 0.9].into_iter().enumerate() {
        let analytic = gaussian_mi_oracle(rho, 1).unwrap();
        let mut rng = seeds::stream(505, &format!("c5/{i}"));
        let (xs, ws) = gaussian_pairs(&mut rng, b, 1, rho);
        let (est, se) = gaussian_club_all_pairs(&xs, &ws, rho).unwrap();
        assert!(
            est.value >= analytic - 3.0 * se,
            "rho {rho}: estimate {} undershoots analytic {analytic} - 3se ({se})",
            est.value
        );
    }
    // Independent case: the estimate must vanish within noise.
    let mut rng = seeds::stream(505, "c5/zero");
    let (xs, ws) = gaussian_pairs(&mut rng, b, 1, 0.0);
    let (est, se) = gaussian_club_all_pairs(&xs, &ws, 0.0).unwrap();
    assert!(
        est.value.abs() <= 3.0 * se,
        "rho 0: |estimate| {} exceeds 3se ({se})",
        est.value.abs()
    );
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "B=1e5 suite took {secs:.1}s >= 2min");
    println!("criterion 05 mi upper bound: PASS (B=1e5 all-pairs, rho in {{0, 0.5, 0.9}}, {secs:.1}s)");
}

#[test]
fn criterion_06_scorer_bound_never_exceeds_exact_mi() {
    let mut violations = 0usize;
    let mut max_gap_above: f64 = f64::NEG_INFINITY;
    for j in 0..50u64 {
        let mut rng = seeds::stream(606, &format!("c6/joint/{j}"));
        let omega_symbols = 2 + (j as usize) % 5;
        let y_symbols = 2 + (j as usize / 5) % 5;
        let joint = DiscreteJoint::random(&mut rng, omega_symbols, y_symbols);
        let mi = exact_discrete_mi(&joint);
        for s in 0..100u64 {
            let mut srng = seeds::stream(606, &format!("c6/scorer/{j}/{s}"));
            let g: Array2<f64> =
                seeds::uniform_array(&mut srng, omega_symbols, y_symbols, 0.05, 3.0);
            let bound = negce_lower_bound(&joint, &g).unwrap();
            if bound > mi + 1e-9 {
                violations += 1;
            }
            max_gap_above = max_gap_above.max(bound - mi);
        }
    }
    assert_eq!(violations, 0, "{violations} scorer bounds exceeded the exact MI");
    println!("criterion 06 scorer bound: PASS (0 violations over 50 joints x 100 scorers, max bound-minus-MI = {max_gap_above:.3e})");
}

/// Small-but-real dataset and config shared by the trajectory criteria.
fn trajectory_fixture() -> (Dataset, TrainConfig) {
    let spec = GeneratorSpec {
        num_classes: 6,
        num_nuisance: 3,
        frames: 8,
        feat_dim: 8,
        class_scale: 2.0,
        nuisance_scale: 2.0,
        noise_std: 0.5,
        seed: 70,
    };
    let ds = sample_dataset(&spec, 240).unwrap();
    let mut config = TrainConfig {
        beta: 0.01,
        epochs: 5,
        batch_size: 16,
        seed: 7,
        holdout_fraction: 0.2,
        eval_pairs_per_class: 5,
        ..TrainConfig::default()
    };
    config.model.hidden = 10;
    config.model.embed_dim = 6;
    config.model.flow_layers = 2;
    config.model.flow_hidden = 8;
    (ds, config)
}

/// Records the Θ digest after every epoch.
struct ThetaTrace(Vec<String>);

impl TrainObserver for ThetaTrace {
    fn on_epoch_end(&mut self, state: &ModelState, _m: &EpochMetrics) -> ibflow::Result<()> {
        self.0.push(theta_digest(&state.theta));
        Ok(())
    }
}

#[test]
fn criterion_07_beta_zero_reduces_to_discriminative_training() {
    let (ds, mut config) = trajectory_fixture();
    config.beta = 0.0;

    // Arm A: the full alternating trainer with beta = 0 — flow phases still
    // run and move Phi, but the redundancy term contributes nothing.
    let mut with_flow = ThetaTrace(Vec::new());
    train_observed(&ds, &config, &mut with_flow).unwrap();

    // Arm B: the discriminative-only trainer (no flow anywhere).
    let mut plain = ThetaTrace(Vec::new());
    ibflow::trainer::train_discriminative_observed(&ds, &config, &mut plain).unwrap();

    assert_eq!(with_flow.0.len(), 5);
    for (epoch, (a, b)) in with_flow.0.iter().zip(&plain.0).enumerate() {
        assert_eq!(a, b, "Theta digests diverge at epoch {epoch}");
    }
    println!("criterion 07 beta-zero reduction: PASS (Theta digest identical at every one of 5 epochs)");
}

/// Records parameter digests at every phase boundary.
struct PhaseTrace(Vec<(usize, Phase, String, String)>);

impl TrainObserver for PhaseTrace {
    fn on_phase_end(&mut self, epoch: usize, phase: Phase, state: &ModelState) -> ibflow::Result<()> {
        self.0.push((epoch, phase, theta_digest(&state.theta), phi_digest(&state.phi)));
        Ok(())
    }
}

#[test]
fn criterion_08_phase_isolation_across_ten_epochs() {
    let (ds, mut config) = trajectory_fixture();
    config.epochs = 10;

    let mut state = ModelState::init(&config, ds.header.t, ds.header.f, ds.header.c).unwrap();
    let theta_init = theta_digest(&state.theta);
    let phi_init = phi_digest(&state.phi);
    let mut trace = PhaseTrace(Vec::new());
    train_from(&mut state, &ds, &config, &mut trace).unwrap();

    // Expected boundary sequence: warm-up, then (flow, embedding) per epoch.
    assert_eq!(trace.0.len(), 1 + 2 * 9, "phase boundary count");
    assert_eq!((trace.0[0].0, trace.0[0].1), (0, Phase::WarmUp));

    let (mut prev_theta, mut prev_phi) = (theta_init, phi_init);
    let (mut theta_moves, mut phi_moves) = (0usize, 0usize);
    for (epoch, phase, theta, phi) in &trace.0 {
        match phase {
            Phase::Flow => {
                assert_eq!(theta, &prev_theta, "flow phase of epoch {epoch} moved Theta");
                if phi != &prev_phi {
                    phi_moves += 1;
                }
            }
            Phase::WarmUp | Phase::Embedding => {
                assert_eq!(phi, &prev_phi, "embedding phase of epoch {epoch} moved Phi");
                if theta != &prev_theta {
                    theta_moves += 1;
                }
            }
        }
        prev_theta = theta.clone();
        prev_phi = phi.clone();
    }
    // The freeze proof is only meaningful if the digests are sensitive:
    // the *unfrozen* set must have moved in every single phase.
    assert_eq!(theta_moves, 10, "Theta failed to move in some embedding phase");
    assert_eq!(phi_moves, 9, "Phi failed to move in some flow phase");
    println!("criterion 08 phase isolation: PASS (19 phase hashes over 10 epochs: frozen set never moved, live set always did)");
}

/// One arm of the disentanglement comparison: train on 2048 utterances,
/// then probe class/nuisance accuracy and trial EER on 1024 held-out
/// utterances drawn from the same factor centers.
fn disentanglement_arm(seed: u64, beta: f64, discriminative: bool) -> (f64, f64, f64) {
    let spec = GeneratorSpec {
        num_classes: 8,
        num_nuisance: 4,
        frames: 20,
        feat_dim: 16,
        class_scale: 2.0,
        nuisance_scale: 2.0,
        noise_std: 0.5,
        seed: 9000 + seed,
    };
    let full = sample_dataset(&spec, 3072).unwrap();
    let train_ds = Dataset {
        header: full.header.clone(),
        utterances: full.utterances[..2048].to_vec(),
    };
    let probe_utts: Vec<_> = full.utterances[2048..].iter().collect();

    let mut config = TrainConfig {
        beta,
        epochs: 60,
        batch_size: 32,
        lr_embed: 1e-3,
        lr_flow: 1e-3,
        lr_decay: 1.0,
        seed,
        holdout_fraction: 0.0,
        ..TrainConfig::default()
    };
    config.model.hidden = 32;
    config.model.embed_dim = 16;
    config.model.flow_layers = 4;
    config.model.flow_hidden = 32;

    let state = if discriminative {
        train_discriminative(&train_ds, &config).unwrap().0
    } else {
        train(&train_ds, &config).unwrap().0
    };
    let records = embed_records(&probe_utts, &state.theta.encoder).unwrap();
    let embeddings: Vec<_> = records.iter().map(|r| r.omega.clone()).collect();
    let ys: Vec<_> = records.iter().map(|r| r.y).collect();
    let ns: Vec<_> = records.iter().map(|r| r.n).collect();
    let class = linear_probe(&embeddings, &ys, 0.25, 5).unwrap();
    let nuisance = linear_probe(&embeddings, &ns, 0.25, 5).unwrap();
    let (mut trials, _) = build_trials(&records, 25, 17).unwrap();
    score_trials(&mut trials, &records).unwrap();
    let eer = trial_eer(&trials).unwrap();
    (class, nuisance, eer)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_09_redundancy_term_strips_nuisance_structure() {
    // Five seeds, two arms each: a discriminative-only baseline and the
    // alternating trainer with the redundancy term at beta = 0.01 (from
    // the permitted sweep; smaller settings are below this desk scale's
    // noise floor). Medians across seeds are compared per metric.
    let started = Instant::now();
    let (mut bc, mut bn, mut be) = (Vec::new(), Vec::new(), Vec::new());
    let (mut fc, mut fn_, mut fe) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 1..=5u64 {
        let seed_started = Instant::now();
        let (c, n, e) = disentanglement_arm(seed, 0.0, true);
        bc.push(c);
        bn.push(n);
        be.push(e);
        let (c, n, e) = disentanglement_arm(seed, 0.01, false);
        fc.push(c);
        fn_.push(n);
        fe.push(e);
        let secs = seed_started.elapsed().as_secs_f64();
        println!("  seed {seed}: baseline nuis {:.3} | with redundancy term nuis {:.3} ({secs:.0}s both arms)", bn[bn.len()-1], fn_[fn_.len()-1]);
        assert!(secs < 2.0 * 30.0 * 60.0, "seed {seed} exceeded the runtime budget");
    }
    let (bc, bn, be) = (median(bc), median(bn), median(be));
    let (fc, fn_, fe) = (median(fc), median(fn_), median(fe));
    println!(
        "  medians: baseline class {bc:.3} nuisance {bn:.3} eer {be:.3} | flow-regularized class {fc:.3} nuisance {fn_:.3} eer {fe:.3}"
    );
    assert!(
        fn_ <= bn - 0.05,
        "median nuisance probe {fn_:.3} is not >= 5 points below baseline {bn:.3}"
    );
    assert!(
        fc >= bc - 0.02,
        "median class probe {fc:.3} dropped more than 2 points below baseline {bc:.3}"
    );
    assert!(
        fe <= be + 0.01,
        "median EER {fe:.3} degraded more than 1 point over baseline {be:.3}"
    );
    println!(
        "criterion 09 directional disentanglement: PASS (nuisance {:.1} pts down, class within {:.1} pts, EER delta {:+.1} pts, {:.0}s total)",
        (bn - fn_) * 100.0,
        (bc - fc).abs() * 100.0,
        (fe - be) * 100.0,
        started.elapsed().as_secs_f64()
    );
}

fn metrics_stream(metrics: &[EpochMetrics]) -> String {
    metrics.iter().map(|m| m.json_line() + "\n").collect()
}

/// Tiny stand-in digest so pass lines can show stream identity compactly
/// (equality is asserted on the full strings).
fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[test]
fn criterion_10_determinism_and_continuation() {
    let (ds, mut config) = trajectory_fixture();
    config.epochs = 8;

    // Same (dataset, config) twice: identical metric streams, bit for bit.
    let (state_a, metrics_a) = train(&ds, &config).unwrap();
    let (state_b, metrics_b) = train(&ds, &config).unwrap();
    let stream_a = metrics_stream(&metrics_a);
    assert_eq!(stream_a, metrics_stream(&metrics_b), "reruns diverged");
    assert_eq!(theta_digest(&state_a.theta), theta_digest(&state_b.theta));
    assert_eq!(phi_digest(&state_a.phi), phi_digest(&state_b.phi));

    // Interrupt at epoch 5, checkpoint to disk, reload, finish: the
    // combined stream and the final parameters must match the
    // uninterrupted run exactly.
    let short = TrainConfig { epochs: 5, ..config.clone() };
    let (state5, metrics_head) = train(&ds, &short).unwrap();
    let dir = std::env::temp_dir().join("acceptance_c10");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("mid.ckpt");
    save_checkpoint(&state5, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    let metrics_tail = train_from(&mut resumed, &ds, &config, &mut NoopObserver).unwrap();
    let stitched = metrics_stream(&metrics_head) + &metrics_stream(&metrics_tail);
    assert_eq!(stream_a, stitched, "checkpoint continuation diverged from the straight run");
    assert_eq!(theta_digest(&state_a.theta), theta_digest(&resumed.theta));
    assert_eq!(phi_digest(&state_a.phi), phi_digest(&resumed.phi));
    println!(
        "criterion 10 determinism and continuation: PASS (metric stream fnv {:016x} reproduced by rerun and by save/load at epoch 5)",
        fnv1a(&stream_a)
    );
}

#[test]
fn criterion_11_eer_hand_case_and_monotone_invariance() {
    // Hand-derived: targets {0.9, 0.8, 0.7, 0.3}, non-targets
    // {0.6, 0.4, 0.2, 0.1}. Sweeping the threshold, FRR and FAR cross
    // between 0.7 and 0.6 where one target (0.3) is rejected and one
    // non-target (0.6) is pending: the interpolated crossing is exactly
    // 1/4.
    let scores = [0.9, 0.8, 0.7, 0.3, 0.6, 0.4, 0.2, 0.1];
    let is_target = [true, true, true, true, false, false, false, false];
    let eer = compute_eer(&scores, &is_target).unwrap();
    assert_eq!(eer, 0.25, "hand case returned {eer}");

    // Any strictly increasing transform preserves score order, hence every
    // (FAR, FRR) sweep point, hence the EER — exactly, not approximately.
    let mut worst_sets = 0usize;
    for i in 0..100u64 {
        let mut rng = seeds::stream(1111, &format!("c11/{i}"));
        let n = 20 + (i as usize * 7) % 180;
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for k in 0..n {
            // Quantized scores so tie groups appear regularly.
            let raw: f64 = rng.gen_range(-2.0..2.0);
            scores.push((raw * 8.0).round() / 8.0);
            labels.push(k % 3 != 0);
        }
        let base = compute_eer(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| 3.0 * s.tanh() - 1.5).collect();
        let exped: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        if compute_eer(&warped, &labels).unwrap() != base
            || compute_eer(&exped, &labels).unwrap() != base
        {
            worst_sets += 1;
        }
    }
    assert_eq!(worst_sets, 0, "{worst_sets} score sets changed EER under monotone warps");
    println!("criterion 11 eer correctness: PASS (hand case = 0.25 exactly; 100 score sets invariant under tanh/exp warps)");
}
