//! Dump embeddings from a trained model, score cosine trials, and run
//! class/nuisance linear probes.
//!
//! Verification-style evaluation asks: do two utterances share a class?
//! Each trial pairs an enrollment embedding with a test embedding and
//! scores them by cosine similarity; the equal error rate (EER) is the
//! operating point where false accepts and false rejects balance. The
//! linear probes measure what a simple classifier can read out of the
//! embeddings — high class accuracy is the goal, while nuisance accuracy
//! measures the residual structure the bottleneck is meant to remove.
//!
//! Run with: cargo run --release --example evaluate

use ibflow::eval::{
    build_trials, linear_probe, score_trials, trial_eer, write_embeddings, write_trials,
};
use ibflow::synthdata::{sample_dataset, GeneratorSpec};
use ibflow::trainer::{embed_records, train, TrainConfig};

fn main() -> ibflow::Result<()> {
    let spec = GeneratorSpec {
        num_classes: 5,
        num_nuisance: 3,
        frames: 12,
        feat_dim: 8,
        class_scale: 2.5,
        nuisance_scale: 1.5,
        noise_std: 0.5,
        seed: 30,
    };
    let ds = sample_dataset(&spec, 400)?;

    let mut config = TrainConfig {
        beta: 0.01,
        epochs: 6,
        batch_size: 25,
        seed: 3,
        holdout_fraction: 0.0, // evaluate on everything below instead
        ..TrainConfig::default()
    };
    config.model.hidden = 16;
    config.model.embed_dim = 8;
    config.model.flow_hidden = 16;
    config.model.flow_layers = 2;

    println!("training {} epochs ...", config.epochs);
    let (state, _) = train(&ds, &config)?;

    // One embedding per utterance, tagged with both labels.
    let utts: Vec<_> = ds.utterances.iter().collect();
    let records = embed_records(&utts, &state.theta.encoder)?;
    let dir = std::env::temp_dir().join("ibflow_evaluate");
    std::fs::create_dir_all(&dir)?;
    write_embeddings(&dir.join("embeddings.jsonl"), &records)?;

    // Build a balanced trial list: per class, the same number of
    // same-class (target) and cross-class (non-target) pairs.
    let (mut trials, warnings) = build_trials(&records, 20, 99)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    score_trials(&mut trials, &records)?;
    write_trials(&dir.join("trials.txt"), &trials)?;
    let eer = trial_eer(&trials)?;
    let targets = trials.iter().filter(|t| t.is_target).count();
    println!(
        "scored {} trials ({} target / {} non-target): EER {:.3}",
        trials.len(),
        targets,
        trials.len() - targets,
        eer
    );

    // Probe both factors with an identical deterministic linear classifier.
    let embeddings: Vec<_> = records.iter().map(|r| r.omega.clone()).collect();
    let ys: Vec<_> = records.iter().map(|r| r.y).collect();
    let ns: Vec<_> = records.iter().map(|r| r.n).collect();
    let class_acc = linear_probe(&embeddings, &ys, 0.25, 7)?;
    let nuisance_acc = linear_probe(&embeddings, &ns, 0.25, 7)?;
    println!("class probe accuracy:    {class_acc:.3}");
    println!("nuisance probe accuracy: {nuisance_acc:.3} (chance = {:.3})", 1.0 / spec.num_nuisance as f64);
    println!("artifacts in {}", dir.display());
    Ok(())
}
