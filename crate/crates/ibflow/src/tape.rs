//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! A [`Tape`] is a dynamic compute graph: every operation evaluates its
//! value eagerly and appends a node recording its parents, so a single
//! reverse sweep from a scalar node yields exact gradients for every leaf.
//! The op set is exactly what the embedding network, the margin losses, and
//! the conditional flow need — nothing speculative. Each op's backward rule
//! is verified against central finite differences in this module's tests.
//!
//! Shape violations are programming errors and panic; public library APIs
//! validate their inputs before building a graph.

use ndarray::{s, Array2, Axis};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// a · b
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulNT(NodeId, NodeId),
    /// aᵀ · b
    MatMulTN(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// matrix + row vector broadcast over rows
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Exp(NodeId),
    /// cap · tanh(x / cap)
    ScaledTanh(NodeId, f64),
    /// softmax over the rows of a T×1 column
    ColSoftmax(NodeId),
    /// every row rescaled to unit L2 norm
    RowUnit(NodeId),
    /// vertical concatenation
    Rows(Vec<NodeId>),
    /// single-row selection
    Row(NodeId, usize),
    /// column slice [start, end)
    Cols(NodeId, usize, usize),
    /// horizontal concatenation
    HCat(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// sum of standard-normal log densities over all entries
    StdNormalLogPdf(NodeId),
    /// mean softmax cross-entropy of logit rows against class labels
    CrossEntropy(NodeId, Vec<usize>),
    /// additive angular margin on the label entry of each cosine row
    AngularMargin(NodeId, Vec<usize>, f64),
    /// one-class softplus margin loss on a column of cosine scores
    OneClassSoftplus(NodeId, Vec<u8>, f64, f64, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the sweep's root with respect to `id` (zero if the root
    /// does not depend on it).
    pub fn get(&self, id: NodeId, tape: &Tape) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[id.0].value.raw_dim()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-1x1 node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn dim(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Inserts a constant or parameter leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dim(a).1, self.dim(b).0, "matmul inner dims");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// a · bᵀ — the natural product against row-major `[out][in]` weights.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dim(a).1, self.dim(b).1, "matmul_nt inner dims");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a, b))
    }

    /// aᵀ · b — used for pooling a weighted sum of rows.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dim(a).0, self.dim(b).0, "matmul_tn inner dims");
        let v = self.nodes[a.0].value.t().dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMulTN(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dim(a), self.dim(b), "add shapes");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dim(a), self.dim(b), "sub shapes");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dim(a), self.dim(b), "mul shapes");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row` with `row` (1×k) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, k) = self.dim(a);
        assert_eq!(self.dim(row), (1, k), "add_row shapes");
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `cap · tanh(x / cap)`: smooth clamp to (−cap, cap), identity-like
    /// near zero.
    pub fn scaled_tanh(&mut self, a: NodeId, cap: f64) -> NodeId {
        assert!(cap > 0.0);
        let v = self.nodes[a.0].value.mapv(|x| cap * (x / cap).tanh());
        self.push(v, Op::ScaledTanh(a, cap))
    }

    /// Softmax over the entries of a T×1 column.
    pub fn col_softmax(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.dim(a).1, 1, "col_softmax expects a column");
        let x = &self.nodes[a.0].value;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = x.mapv(|v| (v - m).exp());
        let z = e.sum();
        self.push(e.mapv(|v| v / z), Op::ColSoftmax(a))
    }

    /// Rescales every row to unit L2 norm. Rows must be nonzero; callers
    /// validate before building the graph.
    pub fn row_unit(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
            assert!(n > 0.0, "row_unit on zero row");
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::RowUnit(a))
    }

    /// Vertical concatenation of nodes with equal column counts.
    pub fn rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.dim(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.dim(p).0).sum();
        let mut v = Array2::zeros((total, cols));
        let mut at = 0;
        for &p in &parts {
            let (r, c) = self.dim(p);
            assert_eq!(c, cols, "rows column mismatch");
            v.slice_mut(s![at..at + r, ..]).assign(&self.nodes[p.0].value);
            at += r;
        }
        self.push(v, Op::Rows(parts))
    }

    /// Selects row `i` as a 1×k node.
    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let (r, _) = self.dim(a);
        assert!(i < r, "row index out of range");
        let v = self.nodes[a.0].value.slice(s![i..i + 1, ..]).to_owned();
        self.push(v, Op::Row(a, i))
    }

    /// Selects columns [start, end).
    pub fn cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (_, c) = self.dim(a);
        assert!(start < end && end <= c, "cols range");
        let v = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::Cols(a, start, end))
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn hcat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.dim(a);
        let (rb, cb) = self.dim(b);
        assert_eq!(ra, rb, "hcat row mismatch");
        let mut v = Array2::zeros((ra, ca + cb));
        v.slice_mut(s![.., ..ca]).assign(&self.nodes[a.0].value);
        v.slice_mut(s![.., ca..]).assign(&self.nodes[b.0].value);
        self.push(v, Op::HCat(a, b))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    /// Σ over all entries of log N(x; 0, 1) as a 1×1 node.
    pub fn std_normal_logpdf(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let v = -0.5 * x.mapv(|z| z * z).sum() - 0.5 * LN_2PI * x.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::StdNormalLogPdf(a))
    }

    /// Mean softmax cross-entropy (nats) of logit rows against `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let (b, c) = self.dim(logits);
        assert_eq!(labels.len(), b, "cross_entropy label count");
        assert!(labels.iter().all(|&y| y < c), "cross_entropy label range");
        let x = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let v = Array2::from_elem((1, 1), total / b as f64);
        self.push(v, Op::CrossEntropy(logits, labels))
    }

    /// Replaces each row's label entry `c` with
    /// `c·cos(m) − sqrt(clamp(1−c², 0, 1))·sin(m)`, i.e. cos(θ+m) without
    /// ever computing θ. Other entries pass through.
    pub fn angular_margin(&mut self, cosines: NodeId, labels: Vec<usize>, margin: f64) -> NodeId {
        let (b, c) = self.dim(cosines);
        assert_eq!(labels.len(), b, "angular_margin label count");
        assert!(labels.iter().all(|&y| y < c), "angular_margin label range");
        let (cm, sm) = (margin.cos(), margin.sin());
        let mut v = self.nodes[cosines.0].value.clone();
        for (i, &y) in labels.iter().enumerate() {
            let cv = v[(i, y)];
            let sv = (1.0 - cv * cv).clamp(0.0, 1.0).sqrt();
            v[(i, y)] = cv * cm - sv * sm;
        }
        self.push(v, Op::AngularMargin(cosines, labels, margin))
    }

    /// Mean one-class softplus margin loss over a B×1 column of cosine
    /// scores: softplus(k·(m0 − s)) for label 0, softplus(k·(s − m1)) for
    /// label 1.
    pub fn one_class_softplus(
        &mut self,
        scores: NodeId,
        labels: Vec<u8>,
        k: f64,
        m0: f64,
        m1: f64,
    ) -> NodeId {
        let (b, c) = self.dim(scores);
        assert_eq!(c, 1, "one_class_softplus expects a column");
        assert_eq!(labels.len(), b, "one_class_softplus label count");
        assert!(labels.iter().all(|&y| y <= 1), "labels must be 0/1");
        let x = &self.nodes[scores.0].value;
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let u = if y == 0 { k * (m0 - x[(i, 0)]) } else { k * (x[(i, 0)] - m1) };
            total += softplus(u);
        }
        let v = Array2::from_elem((1, 1), total / b as f64);
        self.push(v, Op::OneClassSoftplus(scores, labels, k, m0, m1))
    }

    /// Reverse sweep from scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.dim(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value);
                    let db = g.t().dot(&self.nodes[a.0].value);
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::MatMulTN(a, b) => {
                    let da = self.nodes[b.0].value.dot(&g.t());
                    let db = self.nodes[a.0].value.dot(&g);
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(&mut grads, *a, g);
                    self.accum(&mut grads, *row, dr);
                }
                Op::Scale(a, c) => {
                    self.accum(&mut grads, *a, g.mapv(|x| c * x));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    self.accum(&mut grads, *a, &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    self.accum(&mut grads, *a, &g * y);
                }
                Op::ScaledTanh(a, cap) => {
                    let x = &self.nodes[a.0].value;
                    let d = x.mapv(|v| {
                        let t = (v / cap).tanh();
                        1.0 - t * t
                    });
                    self.accum(&mut grads, *a, &g * &d);
                }
                Op::ColSoftmax(a) => {
                    let y = &self.nodes[i].value;
                    let dot = (&g * y).sum();
                    let da = y * &g - y.mapv(|v| v * dot);
                    self.accum(&mut grads, *a, da);
                }
                Op::RowUnit(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let norm = x.row(r).iter().map(|&v| v * v).sum::<f64>().sqrt();
                        let gy: f64 = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..x.ncols() {
                            da[(r, c)] = (g[(r, c)] - gy * y[(r, c)]) / norm;
                        }
                    }
                    self.accum(&mut grads, *a, da);
                }
                Op::Rows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let r = self.dim(p).0;
                        let dp = g.slice(s![at..at + r, ..]).to_owned();
                        self.accum(&mut grads, p, dp);
                        at += r;
                    }
                }
                Op::Row(a, idx) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    da.slice_mut(s![*idx..idx + 1, ..]).assign(&g);
                    self.accum(&mut grads, *a, da);
                }
                Op::Cols(a, start, end) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    da.slice_mut(s![.., *start..*end]).assign(&g);
                    self.accum(&mut grads, *a, da);
                }
                Op::HCat(a, b) => {
                    let ca = self.dim(*a).1;
                    let da = g.slice(s![.., ..ca]).to_owned();
                    let db = g.slice(s![.., ca..]).to_owned();
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.nodes[a.0].value.raw_dim(), g[(0, 0)]);
                    self.accum(&mut grads, *a, da);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let da = Array2::from_elem(self.nodes[a.0].value.raw_dim(), g[(0, 0)] / n);
                    self.accum(&mut grads, *a, da);
                }
                Op::StdNormalLogPdf(a) => {
                    let da = self.nodes[a.0].value.mapv(|x| -x * g[(0, 0)]);
                    self.accum(&mut grads, *a, da);
                }
                Op::CrossEntropy(a, labels) => {
                    let x = &self.nodes[a.0].value;
                    let b = x.nrows() as f64;
                    let mut da = softmax_rows(x);
                    for (r, &y) in labels.iter().enumerate() {
                        da[(r, y)] -= 1.0;
                    }
                    da.mapv_inplace(|v| v * g[(0, 0)] / b);
                    self.accum(&mut grads, *a, da);
                }
                Op::AngularMargin(a, labels, m) => {
                    let x = &self.nodes[a.0].value;
                    let (cm, sm) = (m.cos(), m.sin());
                    let mut da = g.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let cv = x[(r, y)];
                        let sv = (1.0 - cv * cv).clamp(0.0, 1.0).sqrt().max(1e-9);
                        da[(r, y)] *= cm + sm * cv / sv;
                    }
                    self.accum(&mut grads, *a, da);
                }
                Op::OneClassSoftplus(a, labels, k, m0, m1) => {
                    let x = &self.nodes[a.0].value;
                    let b = x.nrows() as f64;
                    let mut da = Array2::zeros(x.raw_dim());
                    for (r, &y) in labels.iter().enumerate() {
                        let (u, du) = if y == 0 {
                            (k * (m0 - x[(r, 0)]), -k)
                        } else {
                            (k * (x[(r, 0)] - m1), *k)
                        };
                        da[(r, 0)] = sigmoid(u) * du * g[(0, 0)] / b;
                    }
                    self.accum(&mut grads, *a, da);
                }
            }
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    /// Central-difference check of `build`'s gradient w.r.t. every entry of
    /// every input, at tolerance `tol` on the relative error.
    fn fd_check(inputs: &[Array2<f64>], tol: f64, build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let eps = 1e-6;
        let eval = |xs: &[Array2<f64>]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let root = build(&mut t, &ids);
            t.scalar(root)
        };
        let mut t = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let root = build(&mut t, &ids);
        let grads = t.backward(root);

        for (k, x) in inputs.iter().enumerate() {
            let g = grads.get(ids[k], &t);
            for r in 0..x.nrows() {
                for c in 0..x.ncols() {
                    let mut xs: Vec<Array2<f64>> = inputs.to_vec();
                    xs[k][(r, c)] += eps;
                    let up = eval(&xs);
                    xs[k][(r, c)] -= 2.0 * eps;
                    let dn = eval(&xs);
                    let fd = (up - dn) / (2.0 * eps);
                    let an = g[(r, c)];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        rel < tol,
                        "input {k} coord ({r},{c}): fd {fd:.9} vs analytic {an:.9} (rel {rel:.2e})"
                    );
                }
            }
        }
    }

    fn rnd(label: &str, r: usize, c: usize) -> Array2<f64> {
        let mut rng = seeds::stream(90, label);
        seeds::uniform_array(&mut rng, r, c, -1.0, 1.0)
    }

    #[test]
    fn matmul_family_matches_finite_differences() {
        let w = rnd("w", 3, 4);
        fd_check(&[rnd("a", 5, 3), rnd("b", 3, 4), w.clone()], 1e-5, |t, ids| {
            let m = t.matmul(ids[0], ids[1]);
            let wl = t.leaf(rnd("mix", 5, 4));
            let p = t.mul(m, wl);
            t.sum_all(p)
        });
        fd_check(&[rnd("c", 5, 4), w], 1e-5, |t, ids| {
            let m = t.matmul_nt(ids[0], ids[1]);
            let wl = t.leaf(rnd("mix2", 5, 3));
            let p = t.mul(m, wl);
            t.sum_all(p)
        });
        fd_check(&[rnd("d", 6, 2), rnd("e", 6, 3)], 1e-5, |t, ids| {
            let m = t.matmul_tn(ids[0], ids[1]);
            let wl = t.leaf(rnd("mix3", 2, 3));
            let p = t.mul(m, wl);
            t.sum_all(p)
        });
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let weight = rnd("mix", 4, 3);
        for op in ["add", "sub", "mul", "tanh", "exp", "stanh", "scale"] {
            let w = weight.clone();
            fd_check(&[rnd("x", 4, 3), rnd("y", 4, 3)], 1e-5, move |t, ids| {
                let z = match op {
                    "add" => t.add(ids[0], ids[1]),
                    "sub" => t.sub(ids[0], ids[1]),
                    "mul" => t.mul(ids[0], ids[1]),
                    "tanh" => t.tanh(ids[0]),
                    "exp" => t.exp(ids[0]),
                    "stanh" => t.scaled_tanh(ids[0], 0.8),
                    _ => t.scale(ids[0], -2.5),
                };
                let wl = t.leaf(w.clone());
                let p = t.mul(z, wl);
                t.sum_all(p)
            });
        }
    }

    #[test]
    fn broadcast_softmax_and_normalize_match_finite_differences() {
        fd_check(&[rnd("m", 4, 3), rnd("r", 1, 3)], 1e-5, |t, ids| {
            let z = t.add_row(ids[0], ids[1]);
            let wl = t.leaf(rnd("mix", 4, 3));
            let p = t.mul(z, wl);
            t.sum_all(p)
        });
        fd_check(&[rnd("s", 5, 1)], 1e-5, |t, ids| {
            let a = t.col_softmax(ids[0]);
            let wl = t.leaf(rnd("mix2", 5, 1));
            let p = t.mul(a, wl);
            t.sum_all(p)
        });
        fd_check(&[rnd("n", 4, 3)], 1e-4, |t, ids| {
            let u = t.row_unit(ids[0]);
            let wl = t.leaf(rnd("mix3", 4, 3));
            let p = t.mul(u, wl);
            t.sum_all(p)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        fd_check(&[rnd("p", 2, 3), rnd("q", 3, 3)], 1e-5, |t, ids| {
            let z = t.rows(vec![ids[0], ids[1], ids[0]]);
            let wl = t.leaf(rnd("mix", 7, 3));
            let p = t.mul(z, wl);
            t.sum_all(p)
        });
        fd_check(&[rnd("h", 4, 6)], 1e-5, |t, ids| {
            let left = t.cols(ids[0], 0, 2);
            let right = t.cols(ids[0], 2, 6);
            let rw = t.leaf(rnd("mix2", 4, 4));
            let rp = t.mul(right, rw);
            let rs = t.sum_all(rp);
            let row = t.row(left, 2);
            let rowsum = t.sum_all(row);
            let both = t.add(rs, rowsum);
            let cat = t.hcat(left, ids[0]);
            let cw = t.leaf(rnd("mix3", 4, 8));
            let cp = t.mul(cat, cw);
            let cs = t.mean_all(cp);
            t.add(both, cs)
        });
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        fd_check(&[rnd("z", 3, 4)], 1e-5, |t, ids| t.std_normal_logpdf(ids[0]));
        fd_check(&[rnd("l", 4, 5)], 1e-5, |t, ids| {
            t.cross_entropy(ids[0], vec![0, 3, 2, 4])
        });
        // Keep cosines strictly inside (−1, 1) so the margin path is smooth.
        let cosines = rnd("cos", 4, 3).mapv(|v| 0.9 * v);
        fd_check(&[cosines], 1e-4, |t, ids| {
            let m = t.angular_margin(ids[0], vec![2, 0, 1, 2], 0.3);
            let sc = t.scale(m, 7.0);
            t.cross_entropy(sc, vec![2, 0, 1, 2])
        });
        fd_check(&[rnd("oc", 5, 1)], 1e-4, |t, ids| {
            t.one_class_softplus(ids[0], vec![0, 1, 0, 1, 1], 3.0, 0.9, 0.2)
        });
    }

    #[test]
    fn reused_nodes_accumulate_gradients() {
        // loss = sum((x + x) ⊙ x) = 2·sum(x²) → d/dx = 4x.
        let x = rnd("acc", 3, 2);
        let mut t = Tape::new();
        let xi = t.leaf(x.clone());
        let d = t.add(xi, xi);
        let p = t.mul(d, xi);
        let root = t.sum_all(p);
        let g = t.backward(root).get(xi, &t);
        for (gv, xv) in g.iter().zip(x.iter()) {
            assert!((gv - 4.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn known_values() {
        let mut t = Tape::new();
        let zero = t.leaf(Array2::zeros((1, 2)));
        let lp = t.std_normal_logpdf(zero);
        assert!((t.scalar(lp) + LN_2PI).abs() < 1e-12);

        let logits = t.leaf(ndarray::array![[0.0, 3f64.ln()]]);
        let ce = t.cross_entropy(logits, vec![1]);
        assert!((t.scalar(ce) - (4.0f64 / 3.0).ln()).abs() < 1e-12);

        let col = t.leaf(ndarray::array![[0.0], [3f64.ln()]]);
        let sm = t.col_softmax(col);
        let v = t.value(sm);
        assert!((v[(0, 0)] - 0.25).abs() < 1e-12 && (v[(1, 0)] - 0.75).abs() < 1e-12);
    }
}
