//! Discriminative losses and discrete mutual-information oracles.
//!
//! The margin losses are the lower-bound side of the information-bottleneck
//! objective: driving softmax-style cross-entropy down drives a lower bound
//! on I(y; ω) up. [`negce_lower_bound`] is the literal bounded quantity —
//! the negative cross-entropy of an arbitrary positive scorer — and
//! [`exact_discrete_mi`] is the brute-force MI it can never exceed; a test
//! sweeps random joints and scorers against the inequality.

use crate::tape::{NodeId, Tape};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Additive-angular-margin softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct AAMHead {
    /// One row per class, C×D; rows are length-normalized before use.
    pub weights: Array2<f64>,
    /// Logit scale s.
    pub scale: f64,
    /// Additive angular margin m, radians.
    pub margin: f64,
}

impl AAMHead {
    pub fn init<R: Rng>(rng: &mut R, classes: usize, dim: usize, scale: f64, margin: f64) -> Self {
        AAMHead {
            weights: crate::seeds::normal_array(rng, classes, dim, 1.0 / (dim as f64).sqrt()),
            scale,
            margin,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::Config("angular-margin head needs >= 2 classes".into()));
        }
        if self.scale.is_nan() || self.scale <= 0.0 {
            return Err(Error::Config("scale must be positive".into()));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(Error::Config("margin must be >= 0".into()));
        }
        check_nonzero_rows(&self.weights, "head weight")
    }
}

/// One-class softmax head: a single target direction with two margins.
#[derive(Debug, Clone, PartialEq)]
pub struct OCSHead {
    /// Target direction, 1×D; length-normalized before use.
    pub w0: Array2<f64>,
    /// Compactness margin for the target class (label 0).
    pub m0: f64,
    /// Exclusion margin for the non-target class (label 1).
    pub m1: f64,
    /// Score scale k.
    pub k: f64,
}

impl OCSHead {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, k: f64, m0: f64, m1: f64) -> Self {
        OCSHead {
            w0: crate::seeds::normal_array(rng, 1, dim, 1.0 / (dim as f64).sqrt()),
            m0,
            m1,
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m0.is_nan() || self.m1.is_nan() || self.m0 <= self.m1 {
            return Err(Error::Config(format!(
                "one-class margins need m0 > m1, got m0={} m1={}",
                self.m0, self.m1
            )));
        }
        if !(-1.0..=1.0).contains(&self.m0) || !(-1.0..=1.0).contains(&self.m1) {
            return Err(Error::Config("margins must lie in [-1, 1]".into()));
        }
        if self.k.is_nan() || self.k <= 0.0 {
            return Err(Error::Config("scale k must be positive".into()));
        }
        check_nonzero_rows(&self.w0, "target weight")
    }
}

fn check_nonzero_rows(m: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= 0.0 {
            return Err(Error::Domain(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

fn check_embeddings(embeddings: &Array2<f64>, labels_len: usize) -> Result<()> {
    if embeddings.nrows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    if embeddings.nrows() != labels_len {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels_len
        )));
    }
    check_nonzero_rows(embeddings, "embedding")
}

/// Differentiable angular-margin loss: embeddings node (B×D) and weight
/// node (C×D) to mean cross-entropy (1×1). Both sides are normalized on
/// the tape, the label cosine gets the additive margin, everything is
/// scaled by `s`.
pub fn aam_loss_on_tape(
    t: &mut Tape,
    embeddings: NodeId,
    weights: NodeId,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> NodeId {
    let en = t.row_unit(embeddings);
    let wn = t.row_unit(weights);
    let cos = t.matmul_nt(en, wn);
    let margined = t.angular_margin(cos, labels.to_vec(), margin);
    let logits = t.scale(margined, scale);
    t.cross_entropy(logits, labels.to_vec())
}

/// Mean angular-margin softmax loss (nats) over a batch.
pub fn aam_loss(embeddings: &Array2<f64>, labels: &[usize], head: &AAMHead) -> Result<f64> {
    head.validate()?;
    check_embeddings(embeddings, labels.len())?;
    if embeddings.ncols() != head.weights.ncols() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs head dim {}",
            embeddings.ncols(),
            head.weights.ncols()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= head.classes()) {
        return Err(Error::Domain(format!("label {bad} out of range for {} classes", head.classes())));
    }
    let mut t = Tape::new();
    let e = t.leaf(embeddings.clone());
    let w = t.leaf(head.weights.clone());
    let loss = aam_loss_on_tape(&mut t, e, w, labels, head.scale, head.margin);
    Ok(t.scalar(loss))
}

/// Differentiable one-class softplus loss: embeddings node (B×D) and
/// target-direction node (1×D) to mean loss (1×1).
pub fn ocs_loss_on_tape(
    t: &mut Tape,
    embeddings: NodeId,
    w0: NodeId,
    labels: &[u8],
    k: f64,
    m0: f64,
    m1: f64,
) -> NodeId {
    let en = t.row_unit(embeddings);
    let wn = t.row_unit(w0);
    let scores = t.matmul_nt(en, wn);
    t.one_class_softplus(scores, labels.to_vec(), k, m0, m1)
}

/// Mean one-class softmax loss (nats) over a batch with labels in {0, 1};
/// label 0 is the target class.
pub fn ocs_loss(embeddings: &Array2<f64>, labels: &[u8], head: &OCSHead) -> Result<f64> {
    head.validate()?;
    check_embeddings(embeddings, labels.len())?;
    if embeddings.ncols() != head.w0.ncols() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs head dim {}",
            embeddings.ncols(),
            head.w0.ncols()
        )));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Domain("one-class labels must be 0 or 1".into()));
    }
    let mut t = Tape::new();
    let e = t.leaf(embeddings.clone());
    let w = t.leaf(head.w0.clone());
    let loss = ocs_loss_on_tape(&mut t, e, w, labels, head.k, head.m0, head.m1);
    Ok(t.scalar(loss))
}

/// A full probability table over (ω-symbol, y-symbol) pairs: rows are ω
/// symbols, columns are y symbols.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    table: Array2<f64>,
}

impl DiscreteJoint {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        if table.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Domain("joint entries must be finite and >= 0".into()));
        }
        let mass: f64 = table.sum();
        if (mass - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("joint mass must be 1, got {mass}")));
        }
        Ok(DiscreteJoint { table })
    }

    /// Random joint: i.i.d. uniform weights normalized to mass one.
    pub fn random<R: Rng>(rng: &mut R, omega_symbols: usize, y_symbols: usize) -> Self {
        let mut raw = crate::seeds::uniform_array(rng, omega_symbols, y_symbols, 0.0, 1.0);
        let z = raw.sum();
        raw.mapv_inplace(|v| v / z);
        // Renormalize exactly enough for the mass invariant.
        DiscreteJoint { table: raw }
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    fn marginals(&self) -> (Array1<f64>, Array1<f64>) {
        (self.table.sum_axis(Axis(1)), self.table.sum_axis(Axis(0)))
    }
}

/// I(ω; y) in nats by full enumeration, with 0·ln(0/·) = 0.
pub fn exact_discrete_mi(joint: &DiscreteJoint) -> f64 {
    let (p_omega, p_y) = joint.marginals();
    let mut mi = 0.0;
    for ((i, j), &p) in joint.table.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (p_omega[i] * p_y[j])).ln();
        }
    }
    mi
}

/// The negative cross-entropy of scorer `g`:
/// E_{p(ω,y)}[ ln( g(ω,y) / Σ_j g(ω,j) ) ], by exact enumeration. For any
/// strictly positive `g` this never exceeds `exact_discrete_mi(joint)`.
pub fn negce_lower_bound(joint: &DiscreteJoint, g: &Array2<f64>) -> Result<f64> {
    if g.dim() != joint.table.dim() {
        return Err(Error::Shape(format!(
            "scorer shape {:?} vs joint shape {:?}",
            g.dim(),
            joint.table.dim()
        )));
    }
    if g.iter().any(|&v| !v.is_finite() || v <= 0.0) {
        return Err(Error::Domain("scorer must be strictly positive and finite".into()));
    }
    let row_sums = g.sum_axis(Axis(1));
    let mut total = 0.0;
    for ((i, j), &p) in joint.table.indexed_iter() {
        if p > 0.0 {
            total += p * (g[(i, j)] / row_sums[i]).ln();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn aam_reduces_to_softmax_cross_entropy_without_margin() {
        // c=2, ω aligned with class-0 weight, orthogonal to class-1 weight,
        // m=0, s=1, label 0 → ln(1 + e^{-1}).
        let head = AAMHead {
            weights: array![[2.0, 0.0], [0.0, 0.5]],
            scale: 1.0,
            margin: 0.0,
        };
        let emb = array![[3.0, 0.0]];
        let loss = aam_loss(&emb, &[0], &head).unwrap();
        assert_abs_diff_eq!(loss, (1.0 + (-1f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.31326168751822286, epsilon = 1e-12);
    }

    #[test]
    fn aam_batch_mean_and_scale_invariance() {
        let mut rng = seeds::stream(3, "aam");
        let head = AAMHead::init(&mut rng, 3, 4, 30.0, 0.2);
        let e1 = seeds::uniform_array(&mut rng, 1, 4, -1.0, 1.0);
        let e2 = seeds::uniform_array(&mut rng, 1, 4, -1.0, 1.0);
        let l1 = aam_loss(&e1, &[0], &head).unwrap();
        let l2 = aam_loss(&e2, &[2], &head).unwrap();
        let mut both = Array2::zeros((2, 4));
        both.row_mut(0).assign(&e1.row(0));
        both.row_mut(1).assign(&e2.row(0));
        let lb = aam_loss(&both, &[0, 2], &head).unwrap();
        assert_abs_diff_eq!(lb, 0.5 * (l1 + l2), epsilon = 1e-12);

        // Positive rescaling of ω leaves the loss unchanged.
        let scaled = both.mapv(|v| v * 7.3);
        assert_abs_diff_eq!(aam_loss(&scaled, &[0, 2], &head).unwrap(), lb, epsilon = 1e-12);
    }

    #[test]
    fn aam_rejects_zero_norm_inputs() {
        let head = AAMHead {
            weights: array![[1.0, 0.0], [0.0, 1.0]],
            scale: 1.0,
            margin: 0.0,
        };
        let z = array![[0.0, 0.0]];
        assert!(matches!(aam_loss(&z, &[0], &head), Err(Error::Domain(_))));
        let bad_head = AAMHead {
            weights: array![[0.0, 0.0], [0.0, 1.0]],
            scale: 1.0,
            margin: 0.0,
        };
        let e = array![[1.0, 0.0]];
        assert!(matches!(aam_loss(&e, &[0], &bad_head), Err(Error::Domain(_))));
    }

    #[test]
    fn ocs_hand_cases() {
        // Score at the class margin → softplus(0) = ln 2, for both classes.
        let head = OCSHead { w0: array![[1.0, 0.0]], m0: 0.9, m1: 0.2, k: 1.0 };
        let at_m0 = array![[0.9, (1.0f64 - 0.81).sqrt()]];
        assert_abs_diff_eq!(ocs_loss(&at_m0, &[0], &head).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let at_m1 = array![[0.2, (1.0f64 - 0.04).sqrt()]];
        assert_abs_diff_eq!(ocs_loss(&at_m1, &[1], &head).unwrap(), 2f64.ln(), epsilon = 1e-12);

        // y=0, k=1, m0=0.5, score 1.0 → ln(1 + e^{-0.5}).
        let head = OCSHead { w0: array![[1.0, 0.0]], m0: 0.5, m1: 0.2, k: 1.0 };
        let aligned = array![[2.0, 0.0]];
        let loss = ocs_loss(&aligned, &[0], &head).unwrap();
        assert_abs_diff_eq!(loss, (1.0 + (-0.5f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.4740769841801067, epsilon = 1e-12);
    }

    #[test]
    fn ocs_is_monotone_in_the_score() {
        let head = OCSHead { w0: array![[1.0, 0.0]], m0: 0.9, m1: 0.2, k: 20.0 };
        let score = |s: f64| array![[s, (1.0 - s * s).max(0.0).sqrt()]];
        let mut prev0 = f64::INFINITY;
        let mut prev1 = f64::NEG_INFINITY;
        for i in 0..20 {
            let s = -0.95 + 0.1 * i as f64;
            let l0 = ocs_loss(&score(s), &[0], &head).unwrap();
            let l1 = ocs_loss(&score(s), &[1], &head).unwrap();
            assert!(l0 < prev0, "target loss must fall as score rises");
            assert!(l1 > prev1, "non-target loss must rise as score rises");
            prev0 = l0;
            prev1 = l1;
        }
    }

    #[test]
    fn ocs_rejects_inverted_margins() {
        let head = OCSHead { w0: array![[1.0]], m0: 0.1, m1: 0.5, k: 1.0 };
        assert!(matches!(ocs_loss(&array![[1.0]], &[0], &head), Err(Error::Config(_))));
    }

    #[test]
    fn discrete_mi_enumeration() {
        // Independent product table → 0.
        let indep = DiscreteJoint::new(array![[0.25, 0.25], [0.25, 0.25]]).unwrap();
        assert_abs_diff_eq!(exact_discrete_mi(&indep), 0.0, epsilon = 1e-15);

        // Deterministic uniform ω=y → ln 2.
        let det = DiscreteJoint::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        assert_abs_diff_eq!(exact_discrete_mi(&det), 2f64.ln(), epsilon = 1e-15);

        // Nonnegative always.
        let mut rng = seeds::stream(8, "joint");
        for _ in 0..200 {
            let j = DiscreteJoint::random(&mut rng, 4, 3);
            assert!(exact_discrete_mi(&j) >= 0.0);
        }
    }

    #[test]
    fn joint_validation() {
        assert!(DiscreteJoint::new(array![[0.5, 0.6]]).is_err());
        assert!(DiscreteJoint::new(array![[-0.1, 1.1]]).is_err());
    }

    #[test]
    fn negce_uniform_scorer_gives_minus_ln_n() {
        let mut rng = seeds::stream(12, "unif");
        let joint = DiscreteJoint::random(&mut rng, 5, 4);
        let g = Array2::from_elem((5, 4), 1.0);
        let v = negce_lower_bound(&joint, &g).unwrap();
        assert_abs_diff_eq!(v, -(4f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn negce_concentrated_scorer_approaches_mi_from_below() {
        let joint = DiscreteJoint::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        let mi = exact_discrete_mi(&joint);
        let mut prev = f64::NEG_INFINITY;
        for r in [1.0, 10.0, 100.0, 1e6] {
            let g = array![[r, 1.0], [1.0, r]];
            let v = negce_lower_bound(&joint, &g).unwrap();
            // Closed form: ln(r / (r + 1)).
            assert_abs_diff_eq!(v, (r / (r + 1.0)).ln(), epsilon = 1e-12);
            assert!(v <= mi + 1e-9);
            assert!(v > prev);
            prev = v;
        }
        assert!((prev - 0.0).abs() < 1e-5, "ratio 1e6 should be near 0");
    }

    #[test]
    fn negce_never_exceeds_exact_mi() {
        let mut rng = seeds::stream(40, "sweep");
        for _ in 0..100 {
            let joint = DiscreteJoint::random(&mut rng, 6, 5);
            let mi = exact_discrete_mi(&joint);
            let g = seeds::uniform_array(&mut rng, 6, 5, 1e-3, 10.0);
            let v = negce_lower_bound(&joint, &g).unwrap();
            assert!(v <= mi + 1e-9, "bound violated: {v} > {mi}");
        }
    }

    #[test]
    fn negce_rejects_nonpositive_scorers() {
        let joint = DiscreteJoint::new(array![[0.5, 0.5]]).unwrap();
        assert!(negce_lower_bound(&joint, &array![[1.0, 0.0]]).is_err());
        assert!(negce_lower_bound(&joint, &array![[1.0, -2.0]]).is_err());
    }
}
