//! Embedding evaluation: cosine trial scoring, equal error rate, trial
//! construction, and linear probes for how much class / nuisance structure
//! an embedding space exposes.
//!
//! The probe is deliberately linear — it measures *linearly accessible*
//! information, the conservative and reproducible choice — and is trained
//! by deterministic full-batch convex optimization so equal inputs and
//! seed always give equal accuracy.

use crate::encoder::Embedding;
use crate::seeds;
use crate::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One dumped embedding with its class and nuisance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub y: usize,
    pub n: usize,
    pub omega: Embedding,
}

/// One verification trial: does `test_id` belong with `enroll_id`?
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub is_target: bool,
    /// Set only after scoring.
    pub score: Option<f64>,
}

/// The one-line evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub class_probe_acc: f64,
    pub nuisance_probe_acc: f64,
    pub n_trials: usize,
}

/// Cosine similarity of two embeddings: the inner product of the
/// length-normalized vectors, clamped to [−1, 1] against rounding.
pub fn cosine_score(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine of a zero vector is undefined".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Equal error rate: the operating rate where the false-acceptance rate
/// (non-targets scored at or above threshold) equals the false-rejection
/// rate (targets scored below threshold).
///
/// The threshold sweep visits every distinct score once, handling tied
/// scores as one group, and interpolates linearly between the two sweep
/// points where the rates cross. Because only score *ranks* enter, the
/// result is exactly invariant under any strictly increasing transform of
/// all scores.
pub fn compute_eer(scores: &[f64], is_target: &[bool]) -> Result<f64> {
    if scores.len() != is_target.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            is_target.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("non-finite score".into()));
    }
    let n_target = is_target.iter().filter(|&&t| t).count();
    let n_nontarget = is_target.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::Domain(
            "EER needs at least one target and one non-target trial".into(),
        ));
    }

    // Sort descending by score; walk thresholds from above the maximum
    // (accept nothing: FAR 0, FRR 1) down through each distinct score
    // (accept everything at or above it) to below the minimum (accept
    // everything: FAR 1, FRR 0).
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut sweep = vec![(0.0f64, 1.0f64)]; // (FAR, FRR) per sweep point
    let mut accepted_targets = 0usize;
    let mut accepted_nontargets = 0usize;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group at this score.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_target[order[i]] {
                accepted_targets += 1;
            } else {
                accepted_nontargets += 1;
            }
            i += 1;
        }
        let far = accepted_nontargets as f64 / n_nontarget as f64;
        let frr = (n_target - accepted_targets) as f64 / n_target as f64;
        sweep.push((far, frr));
    }

    // FRR − FAR starts at 1 and ends at −1 (or 0): find the sign change
    // and interpolate.
    for w in sweep.windows(2) {
        let (far_a, frr_a) = w[0];
        let (far_b, frr_b) = w[1];
        let diff_a = frr_a - far_a;
        let diff_b = frr_b - far_b;
        if diff_b <= 0.0 {
            if diff_a == diff_b {
                return Ok(far_a.max(frr_b));
            }
            let t = diff_a / (diff_a - diff_b);
            return Ok(far_a + (far_b - far_a) * t);
        }
    }
    unreachable!("FRR - FAR must cross zero: it ends at -1 or 0");
}

/// Builds a balanced seeded trial list from an embedding dump:
/// `pairs_per_class` same-class (target) and `pairs_per_class` cross-class
/// (non-target) trials for every class with at least two members. Classes
/// with fewer than two members are skipped; their labels are returned as
/// warnings. Non-target trials need at least two distinct classes.
pub fn build_trials(
    records: &[EmbeddingRecord],
    pairs_per_class: usize,
    seed: u64,
) -> Result<(Vec<Trial>, Vec<String>)> {
    if pairs_per_class == 0 {
        return Err(Error::Config("pairs_per_class must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.y).or_default().push(i);
    }
    let mut warnings = Vec::new();
    let eligible: BTreeMap<usize, &Vec<usize>> = by_class
        .iter()
        .filter(|(y, members)| {
            if members.len() < 2 {
                warnings.push(format!("class {y} has fewer than 2 embeddings; skipped"));
                false
            } else {
                true
            }
        })
        .map(|(y, m)| (*y, m))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Domain("no class has 2 or more embeddings".into()));
    }
    if by_class.len() < 2 {
        return Err(Error::Domain(
            "non-target trials need at least two classes".into(),
        ));
    }

    let mut rng = seeds::stream(seed, "trials");
    let mut trials = Vec::new();
    let all: Vec<usize> = (0..records.len()).collect();
    for (&y, members) in &eligible {
        use rand::Rng;
        for _ in 0..pairs_per_class {
            // Target pair: two distinct members of y.
            let a = members[rng.gen_range(0..members.len())];
            let b = loop {
                let b = members[rng.gen_range(0..members.len())];
                if b != a {
                    break b;
                }
            };
            trials.push(Trial {
                enroll_id: records[a].id.clone(),
                test_id: records[b].id.clone(),
                is_target: true,
                score: None,
            });
            // Non-target pair: one member of y, one of any other class.
            let a = members[rng.gen_range(0..members.len())];
            let b = loop {
                let b = all[rng.gen_range(0..all.len())];
                if records[b].y != y {
                    break b;
                }
            };
            trials.push(Trial {
                enroll_id: records[a].id.clone(),
                test_id: records[b].id.clone(),
                is_target: false,
                score: None,
            });
        }
    }
    Ok((trials, warnings))
}

/// Fills in trial scores by cosine similarity of the referenced
/// embeddings.
pub fn score_trials(trials: &mut [Trial], records: &[EmbeddingRecord]) -> Result<()> {
    let by_id: BTreeMap<&str, &EmbeddingRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    for trial in trials.iter_mut() {
        let enroll = by_id.get(trial.enroll_id.as_str()).ok_or_else(|| {
            Error::Domain(format!("trial references unknown id {:?}", trial.enroll_id))
        })?;
        let test = by_id.get(trial.test_id.as_str()).ok_or_else(|| {
            Error::Domain(format!("trial references unknown id {:?}", trial.test_id))
        })?;
        trial.score = Some(cosine_score(&enroll.omega, &test.omega)?);
    }
    Ok(())
}

/// EER of a scored trial list.
pub fn trial_eer(trials: &[Trial]) -> Result<f64> {
    let mut scores = Vec::with_capacity(trials.len());
    let mut labels = Vec::with_capacity(trials.len());
    for t in trials {
        scores.push(t.score.ok_or_else(|| {
            Error::Domain("trial has no score; call score_trials first".into())
        })?);
        labels.push(t.is_target);
    }
    compute_eer(&scores, &labels)
}

/// Held-out accuracy of a multinomial linear classifier trained on the
/// embeddings by deterministic full-batch optimization.
///
/// Labels that are constant across the input make the probe trivially
/// perfect and return 1.0 immediately. The split is seeded; the optimizer
/// is plain full-batch adaptive gradient descent on the L2-regularized
/// softmax cross-entropy (regularization strength 1/(10·n_train)), run to
/// a fixed gradient tolerance, so the result is a pure function of
/// (inputs, labels, fraction, seed).
pub fn linear_probe(
    embeddings: &[Embedding],
    labels: &[usize],
    holdout_fraction: f64,
    seed: u64,
) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings vs {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.is_empty() {
        return Err(Error::Domain("no embeddings to probe".into()));
    }
    if !(0.0..1.0).contains(&holdout_fraction) || holdout_fraction == 0.0 {
        return Err(Error::Config(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings have mixed dimensions".into()));
    }

    // Map labels to a contiguous 0..L range.
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Ok(1.0); // constant labels: trivially predictable
    }
    let index_of: BTreeMap<usize, usize> =
        distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let l = distinct.len();
    let n = embeddings.len();

    let perm = seeds::permutation(&mut seeds::stream(seed, "probe/split"), n);
    let n_holdout = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
    let (holdout_idx, train_idx) = perm.split_at(n_holdout);
    if train_idx.is_empty() {
        return Err(Error::Domain("degenerate split: empty training side".into()));
    }

    let gather = |idx: &[usize]| -> (Array2<f64>, Vec<usize>) {
        let mut x = Array2::zeros((idx.len(), d));
        let mut y = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            x.row_mut(row).assign(&embeddings[i]);
            y.push(index_of[&labels[i]]);
        }
        (x, y)
    };
    let (x_train, y_train) = gather(train_idx);
    let (x_holdout, y_holdout) = gather(holdout_idx);

    let (w, b) = fit_softmax_regression(&x_train, &y_train, l, 1.0 / (10.0 * x_train.nrows() as f64));

    let logits = x_holdout.dot(&w.t()) + &b;
    let mut correct = 0usize;
    for (row, &label) in logits.rows().into_iter().zip(&y_holdout) {
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("at least one class");
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / y_holdout.len() as f64)
}

/// Full-batch adaptive-moment gradient descent on L2-regularized softmax
/// cross-entropy from a zero initialization. Convex, so the run-to-
/// tolerance result is unique and deterministic.
fn fit_softmax_regression(
    x: &Array2<f64>,
    y: &[usize],
    classes: usize,
    l2: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let mut w = Array2::zeros((classes, d));
    let mut b = Array2::zeros((1, classes));
    let (mut mw, mut vw) = (Array2::<f64>::zeros((classes, d)), Array2::<f64>::zeros((classes, d)));
    let (mut mb, mut vb) = (Array2::<f64>::zeros((1, classes)), Array2::<f64>::zeros((1, classes)));
    let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.05, 0.9, 0.999, 1e-8);
    let inv_n = 1.0 / n as f64;

    for t in 1..=2000u32 {
        // softmax(xWᵀ + b) − onehot(y), row-wise
        let mut p = x.dot(&w.t()) + &b;
        for mut row in p.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        for (row, &label) in p.rows_mut().into_iter().zip(y).take(n) {
            let mut row = row;
            row[label] -= 1.0;
        }
        let gw = p.t().dot(x) * inv_n + &(&w * l2);
        let gb = {
            let s = p.sum_axis(Axis(0)) * inv_n;
            s.insert_axis(Axis(0))
        };

        let ginf = gw
            .iter()
            .chain(gb.iter())
            .fold(0.0f64, |a, g| a.max(g.abs()));
        if ginf < 1e-7 {
            break;
        }

        let tt = t as i32;
        let corr1 = 1.0 - b1.powi(tt);
        let corr2 = 1.0 - b2.powi(tt);
        for (param, grad, m, v) in [(&mut w, &gw, &mut mw, &mut vw), (&mut b, &gb, &mut mb, &mut vb)] {
            m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let update = ndarray::Zip::from(&*m).and(&*v).map_collect(|&m, &v| {
                lr * (m / corr1) / ((v / corr2).sqrt() + eps)
            });
            *param -= &update;
        }
    }
    (w, b)
}

/// Writes one embedding per line: `{"id":..., "y":..., "n":..., "omega":[...]}`.
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        y: usize,
        n: usize,
        omega: Vec<f64>,
    }
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = Line {
            id: &r.id,
            y: r.y,
            n: r.n,
            omega: r.omega.to_vec(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an embedding dump written by [`write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Line {
        id: String,
        y: usize,
        n: usize,
        omega: Vec<f64>,
    }
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if rec.omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "non-finite embedding entry".into(),
            });
        }
        out.push(EmbeddingRecord {
            id: rec.id,
            y: rec.y,
            n: rec.n,
            omega: Array1::from_vec(rec.omega),
        });
    }
    Ok(out)
}

/// Writes trials as text lines `enroll_id test_id {0|1}`, with the score
/// appended when present.
pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for t in trials {
        let flag = if t.is_target { 1 } else { 0 };
        match t.score {
            Some(s) => writeln!(w, "{} {} {} {}", t.enroll_id, t.test_id, flag, s)?,
            None => writeln!(w, "{} {} {}", t.enroll_id, t.test_id, flag)?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a trial file written by [`write_trials`] (scores optional).
pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 && parts.len() != 4 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 3 or 4 fields, got {}", parts.len()),
            });
        }
        let is_target = match parts[2] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("target flag must be 0 or 1, got {other:?}"),
                })
            }
        };
        let score = match parts.get(3) {
            Some(s) => Some(s.parse::<f64>().map_err(|e| Error::Parse {
                line: idx + 1,
                msg: format!("bad score: {e}"),
            })?),
            None => None,
        };
        out.push(Trial {
            enroll_id: parts[0].to_string(),
            test_id: parts[1].to_string(),
            is_target,
            score,
        });
    }
    Ok(out)
}
