//! Factor-controlled synthetic datasets.
//!
//! Every utterance carries a class label `y` (the training target) and a
//! nuisance label `n` (structure the embedding should shed). Frames are
//! built additively: a per-class direction plus a per-nuisance direction
//! plus i.i.d. Gaussian frame noise, so one scalar each controls how
//! separable the two factors are. Labels are drawn independently, which
//! keeps class and nuisance structure uncorrelated by construction.

use crate::seeds;
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Number of classes C (≥ 2).
    pub num_classes: usize,
    /// Number of nuisance values N_n (≥ 2).
    pub num_nuisance: usize,
    /// Frames per utterance T (≥ 1).
    pub frames: usize,
    /// Features per frame F (≥ 2 and even — the flow splits features in half).
    pub feat_dim: usize,
    /// Length of each class direction.
    pub class_scale: f64,
    /// Length of each nuisance direction.
    pub nuisance_scale: f64,
    /// Standard deviation of the per-entry frame noise.
    pub noise_std: f64,
    /// Seed for means, labels, and noise.
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.num_nuisance < 2 {
            return Err(Error::Config("num_nuisance must be >= 2".into()));
        }
        if self.frames < 1 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        if self.feat_dim < 2 || !self.feat_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "feat_dim must be even and >= 2, got {}",
                self.feat_dim
            )));
        }
        for (name, v) in [
            ("class_scale", self.class_scale),
            ("nuisance_scale", self.nuisance_scale),
            ("noise_std", self.noise_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One sample: a T×F frame matrix with its class and nuisance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub y: usize,
    pub n: usize,
    pub frames: Array2<f64>,
}

/// Shape and label-space metadata stored on the first line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "Nn")]
    pub nn: usize,
}

/// A header plus its utterances; what the dataset file round-trips.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Unit-sphere direction scaled by `scale`, one row per factor value.
fn factor_means<R: Rng>(rng: &mut R, count: usize, dim: usize, scale: f64) -> Array2<f64> {
    let mut m = seeds::normal_array(rng, count, dim, 1.0);
    for mut row in m.rows_mut() {
        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        // A zero draw has probability zero; guard anyway.
        let norm = if norm > 0.0 { norm } else { 1.0 };
        row.mapv_inplace(|v| v * scale / norm);
    }
    m
}

/// Generates `count` utterances: frames[t] = μ_class(y) + μ_nuis(n) + ε_t.
///
/// Fully determined by `spec` (including its seed): factor means, labels,
/// and noise each come from their own named stream, so equal inputs give
/// bit-identical datasets.
pub fn sample_dataset(spec: &GeneratorSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count < 1 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    let (t, f) = (spec.frames, spec.feat_dim);
    let class_means = factor_means(
        &mut seeds::stream(spec.seed, "means/class"),
        spec.num_classes,
        f,
        spec.class_scale,
    );
    let nuis_means = factor_means(
        &mut seeds::stream(spec.seed, "means/nuisance"),
        spec.num_nuisance,
        f,
        spec.nuisance_scale,
    );
    let mut label_rng = seeds::stream(spec.seed, "labels");
    let mut noise_rng = seeds::stream(spec.seed, "noise");

    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let y = label_rng.gen_range(0..spec.num_classes);
        let n = label_rng.gen_range(0..spec.num_nuisance);
        let mut frames = seeds::normal_array(&mut noise_rng, t, f, spec.noise_std);
        for mut row in frames.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += class_means[(y, j)] + nuis_means[(n, j)];
            }
        }
        utterances.push(Utterance {
            id: format!("u{i:06}"),
            y,
            n,
            frames,
        });
    }
    Ok(Dataset {
        header: DatasetHeader {
            version: 1,
            t,
            f,
            c: spec.num_classes,
            nn: spec.num_nuisance,
        },
        utterances,
    })
}

#[derive(Serialize, Deserialize)]
struct UtteranceLine {
    id: String,
    y: usize,
    n: usize,
    frames: Vec<Vec<f64>>,
}

/// Writes a dataset as line-oriented JSON: one header line, then one line
/// per utterance. Floats use round-trip-exact decimal form.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &ds.header).map_err(|e| Error::Io(e.to_string()))?;
    w.write_all(b"\n")?;
    for u in &ds.utterances {
        let rec = UtteranceLine {
            id: u.id.clone(),
            y: u.y,
            n: u.n,
            frames: u.frames.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file, validating shapes, label ranges, and finiteness.
/// Errors name the offending line.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file, expected header".into(),
    })?;
    let first = first?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.version != 1 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported version {}", header.version),
        });
    }

    let mut utterances = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.frames.len() != header.t {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} frame rows, got {}", header.t, rec.frames.len()),
            });
        }
        if let Some(bad) = rec.frames.iter().find(|r| r.len() != header.f) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("ragged frame row: expected {} entries, got {}", header.f, bad.len()),
            });
        }
        if rec.y >= header.c || rec.n >= header.nn {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("label out of range: y={} (C={}), n={} (Nn={})", rec.y, header.c, rec.n, header.nn),
            });
        }
        let flat: Vec<f64> = rec.frames.into_iter().flatten().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: lineno,
                msg: "non-finite frame entry".into(),
            });
        }
        let frames = Array2::from_shape_vec((header.t, header.f), flat)
            .expect("shape checked above");
        utterances.push(Utterance {
            id: rec.id,
            y: rec.y,
            n: rec.n,
            frames,
        });
    }
    Ok(Dataset { header, utterances })
}
