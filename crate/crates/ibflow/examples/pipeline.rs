//! The whole journey end to end at tiny scale: generate, train,
//! checkpoint, resume, evaluate, report.
//!
//! This mirrors what the `ibflow` binary does across its subcommands, but
//! through the library API in one process. Along the way it demonstrates
//! the reproducibility contract: training is a pure function of
//! (dataset, config), and a checkpoint restores it mid-run so exactly
//! that 3 + 2 resumed epochs equal 5 straight epochs, bit for bit.
//!
//! Run with: cargo run --release --example pipeline

use ibflow::eval::{build_trials, linear_probe, score_trials, trial_eer, EvalReport};
use ibflow::synthdata::{sample_dataset, write_dataset, GeneratorSpec};
use ibflow::trainer::{
    embed_records, load_checkpoint, phi_digest, save_checkpoint, theta_digest, train,
    train_from, NoopObserver, TrainConfig,
};

fn main() -> ibflow::Result<()> {
    let dir = std::env::temp_dir().join("ibflow_pipeline");
    std::fs::create_dir_all(&dir)?;

    // 1. Generate and persist a dataset.
    let spec = GeneratorSpec {
        num_classes: 5,
        num_nuisance: 3,
        frames: 10,
        feat_dim: 8,
        class_scale: 2.0,
        nuisance_scale: 2.0,
        noise_std: 0.5,
        seed: 21,
    };
    let ds = sample_dataset(&spec, 300)?;
    write_dataset(&dir.join("data.jsonl"), &ds)?;
    println!("[1/4] generated {} utterances", ds.len());

    // 2. Train 5 epochs straight through.
    let mut config = TrainConfig {
        beta: 0.01,
        epochs: 5,
        batch_size: 20,
        seed: 4,
        ..TrainConfig::default()
    };
    config.model.hidden = 12;
    config.model.embed_dim = 8;
    config.model.flow_hidden = 12;
    config.model.flow_layers = 2;
    let (full, metrics) = train(&ds, &config)?;
    println!(
        "[2/4] trained {} epochs, final l_xent {:.4}",
        full.epochs_done,
        metrics.last().unwrap().l_xent
    );

    // 3. Prove the checkpoint restores training exactly: run 3 epochs,
    // save, load, resume 2 more, and compare parameter digests with the
    // straight 5-epoch run.
    let short = TrainConfig { epochs: 3, ..config.clone() };
    let (state3, _) = train(&ds, &short)?;
    let ckpt = dir.join("model_e3.ckpt");
    save_checkpoint(&state3, &ckpt)?;
    let mut resumed = load_checkpoint(&ckpt)?;
    train_from(&mut resumed, &ds, &config, &mut NoopObserver)?;
    assert_eq!(theta_digest(&resumed.theta), theta_digest(&full.theta));
    assert_eq!(phi_digest(&resumed.phi), phi_digest(&full.phi));
    println!("[3/4] resume from epoch 3 matches the straight run bit for bit");

    // 4. Evaluate: embeddings -> trials -> EER, plus both linear probes.
    let utts: Vec<_> = ds.utterances.iter().collect();
    let records = embed_records(&utts, &full.theta.encoder)?;
    let (mut trials, _) = build_trials(&records, 15, 17)?;
    score_trials(&mut trials, &records)?;
    let embeddings: Vec<_> = records.iter().map(|r| r.omega.clone()).collect();
    let ys: Vec<_> = records.iter().map(|r| r.y).collect();
    let ns: Vec<_> = records.iter().map(|r| r.n).collect();
    let report = EvalReport {
        eer: trial_eer(&trials)?,
        class_probe_acc: linear_probe(&embeddings, &ys, 0.25, 6)?,
        nuisance_probe_acc: linear_probe(&embeddings, &ns, 0.25, 6)?,
        n_trials: trials.len(),
    };
    println!("[4/4] {}", serde_json::to_string(&report).unwrap());
    println!("\nartifacts in {}", dir.display());
    Ok(())
}
