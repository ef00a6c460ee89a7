//! Reverse-mode tape over whole matrices.
//!
//! A forward pass appends nodes (values plus the op that produced them);
//! `backward` walks the tape once in reverse, accumulating a gradient matrix
//! per node. Ops cover exactly what the teachers, students, and losses
//! compose — this is not a general autodiff.

use std::sync::Arc;

use crate::mat::Mat;
use crate::nn::{softmax_rows, PROB_FLOOR};

pub type NodeId = usize;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    /// matrix + row-broadcast bias (1 x k)
    AddBiasRow(NodeId, NodeId),
    /// k*x + c elementwise (the constant is applied at construction)
    Affine(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// elementwise product with a constant matrix (dropout mask)
    HadamardConst(NodeId, Arc<Mat>),
    ConcatCols(NodeId, NodeId),
    /// (col n x 1) broadcast-multiplied across the columns of (mat n x k)
    MulColBroadcast(NodeId, NodeId),
    SoftmaxRows(NodeId),
    CrossEntropy {
        probs: NodeId,
        labels: Arc<Vec<usize>>,
        mask: Arc<Vec<bool>>,
    },
    KlDiv {
        teacher: Arc<Mat>,
        student: NodeId,
        mask: Arc<Vec<bool>>,
    },
    /// wa*a + wb*b for 1x1 scalars
    WeightedSum(NodeId, NodeId, f64, f64),
}

pub struct Tape {
    values: Vec<Arc<Mat>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.values.push(Arc::new(value));
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.values[id]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Mat) -> NodeId {
        self.push(value.clone(), Op::Leaf)
    }

    /// Non-trainable leaf that shares the caller's allocation.
    pub fn constant(&mut self, value: Arc<Mat>) -> NodeId {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.values.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].matmul(&self.values[b]);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].add(&self.values[b]);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_n(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let mut v = (*self.values[ids[0]]).clone();
        for &id in &ids[1..] {
            v.add_assign(&self.values[id]);
        }
        self.push(v, Op::AddN(ids.to_vec()))
    }

    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = self.values[bias].clone();
        assert_eq!(b.rows(), 1);
        let mut v = (*self.values[a]).clone();
        assert_eq!(v.cols(), b.cols());
        for i in 0..v.rows() {
            for (o, &bv) in v.row_mut(i).iter_mut().zip(b.row(0)) {
                *o += bv;
            }
        }
        self.push(v, Op::AddBiasRow(a, bias))
    }

    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> NodeId {
        let v = self.values[a].map(|x| k * x + c);
        self.push(v, Op::Affine(a, k))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -1.0, 1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].map(crate::nn::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn hadamard_const(&mut self, a: NodeId, mask: Arc<Mat>) -> NodeId {
        let v = self.values[a].hadamard(&mask);
        self.push(v, Op::HadamardConst(a, mask))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.values[a], &self.values[b]);
        assert_eq!(va.rows(), vb.rows());
        let (n, ka, kb) = (va.rows(), va.cols(), vb.cols());
        let mut v = Mat::zeros(n, ka + kb);
        for i in 0..n {
            v.row_mut(i)[..ka].copy_from_slice(va.row(i));
            v.row_mut(i)[ka..].copy_from_slice(vb.row(i));
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn mul_col_broadcast(&mut self, col: NodeId, mat: NodeId) -> NodeId {
        let (vc, vm) = (&self.values[col], &self.values[mat]);
        assert_eq!(vc.cols(), 1);
        assert_eq!(vc.rows(), vm.rows());
        let mut v = (**vm).clone();
        for i in 0..v.rows() {
            let s = vc.get(i, 0);
            for o in v.row_mut(i) {
                *o *= s;
            }
        }
        self.push(v, Op::MulColBroadcast(col, mat))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(&self.values[a]);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn cross_entropy(
        &mut self,
        probs: NodeId,
        labels: Arc<Vec<usize>>,
        mask: Arc<Vec<bool>>,
    ) -> NodeId {
        let loss = crate::nn::cross_entropy(&self.values[probs], &labels, &mask)
            .expect("cross_entropy mask must be non-empty");
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                probs,
                labels,
                mask,
            },
        )
    }

    pub fn kl_divergence(
        &mut self,
        teacher: Arc<Mat>,
        student: NodeId,
        mask: Arc<Vec<bool>>,
    ) -> NodeId {
        let loss = crate::nn::kl_divergence(&teacher, &self.values[student], &mask)
            .expect("kl mask must be non-empty");
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::KlDiv {
                teacher,
                student,
                mask,
            },
        )
    }

    pub fn weighted_sum(&mut self, a: NodeId, b: NodeId, wa: f64, wb: f64) -> NodeId {
        let v = wa * self.scalar(a) + wb * self.scalar(b);
        self.push(Mat::from_vec(1, 1, vec![v]), Op::WeightedSum(a, b, wa, wb))
    }

    /// Affine map helper: x·W (+ bias).
    pub fn dense(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> NodeId {
        let xw = self.matmul(x, w);
        match bias {
            Some(b) => self.add_bias_row(xw, b),
            None => xw,
        }
    }

    /// Gradient of the scalar at `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.values[loss].shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        grads[loss] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, id: NodeId, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut bump = |node: NodeId, delta: Mat| match &mut grads[node] {
            Some(acc) => acc.add_assign(&delta),
            slot => *slot = Some(delta),
        };
        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                bump(*a, g.matmul_t(&self.values[*b]));
                bump(*b, self.values[*a].t_matmul(g));
            }
            Op::Add(a, b) => {
                bump(*a, g.clone());
                bump(*b, g.clone());
            }
            Op::AddN(ids) => {
                for &a in ids {
                    bump(a, g.clone());
                }
            }
            Op::AddBiasRow(a, bias) => {
                bump(*a, g.clone());
                let mut db = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &gv) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += gv;
                    }
                }
                bump(*bias, db);
            }
            Op::Affine(a, k) => bump(*a, g.scale(*k)),
            Op::Relu(a) => {
                let mut d = g.clone();
                let input = &self.values[*a];
                for (dv, &x) in d.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *dv = 0.0;
                    }
                }
                bump(*a, d);
            }
            Op::Sigmoid(a) => {
                let s = &self.values[id];
                let mut d = g.clone();
                for (dv, &sv) in d.data_mut().iter_mut().zip(s.data()) {
                    *dv *= sv * (1.0 - sv);
                }
                bump(*a, d);
            }
            Op::HadamardConst(a, mask) => bump(*a, g.hadamard(mask)),
            Op::ConcatCols(a, b) => {
                let ka = self.values[*a].cols();
                let kb = self.values[*b].cols();
                let n = g.rows();
                let mut da = Mat::zeros(n, ka);
                let mut db = Mat::zeros(n, kb);
                for i in 0..n {
                    da.row_mut(i).copy_from_slice(&g.row(i)[..ka]);
                    db.row_mut(i).copy_from_slice(&g.row(i)[ka..]);
                }
                bump(*a, da);
                bump(*b, db);
            }
            Op::MulColBroadcast(col, mat) => {
                let vc = &self.values[*col];
                let vm = &self.values[*mat];
                let mut dcol = Mat::zeros(vc.rows(), 1);
                let mut dmat = g.clone();
                for i in 0..vm.rows() {
                    let mut acc = 0.0;
                    for (j, &gv) in g.row(i).iter().enumerate() {
                        acc += gv * vm.get(i, j);
                    }
                    dcol.set(i, 0, acc);
                    let s = vc.get(i, 0);
                    for dv in dmat.row_mut(i) {
                        *dv *= s;
                    }
                }
                bump(*col, dcol);
                bump(*mat, dmat);
            }
            Op::SoftmaxRows(a) => {
                let p = &self.values[id];
                let mut dz = g.clone();
                for i in 0..p.rows() {
                    let prow = p.row(i);
                    let inner: f64 = g.row(i).iter().zip(prow).map(|(gv, pv)| gv * pv).sum();
                    for (dv, &pv) in dz.row_mut(i).iter_mut().zip(prow) {
                        *dv = pv * (*dv - inner);
                    }
                }
                bump(*a, dz);
            }
            Op::CrossEntropy {
                probs,
                labels,
                mask,
            } => {
                let scale = g.get(0, 0);
                let p = &self.values[*probs];
                let m = mask.iter().filter(|&&b| b).count() as f64;
                let mut dp = Mat::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    if mask[i] {
                        let pv = p.get(i, labels[i]);
                        if pv > PROB_FLOOR {
                            dp.set(i, labels[i], -scale / (m * pv));
                        }
                    }
                }
                bump(*probs, dp);
            }
            Op::KlDiv {
                teacher,
                student,
                mask,
            } => {
                let scale = g.get(0, 0);
                let s = &self.values[*student];
                let m = mask.iter().filter(|&&b| b).count() as f64;
                let mut ds = Mat::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    if !mask[i] {
                        continue;
                    }
                    for k in 0..s.cols() {
                        let t = teacher.get(i, k);
                        let sv = s.get(i, k);
                        if t > 0.0 && sv > PROB_FLOOR {
                            ds.set(i, k, -scale * t / (m * sv));
                        }
                    }
                }
                bump(*student, ds);
            }
            Op::WeightedSum(a, b, wa, wb) => {
                bump(*a, g.scale(*wa));
                bump(*b, g.scale(*wb));
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for a node; zeros if the loss does not depend on it.
    pub fn get(&self, id: NodeId, shape_like: &Mat) -> Mat {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Mat::zeros(shape_like.rows(), shape_like.cols()),
        }
    }
}

/// Central-difference gradients of `f` with respect to each `params[i]`
/// entry (step 1e-5). `f` must be a pure function of the parameter values.
pub fn central_diff_grads(
    params: &[Mat],
    mut f: impl FnMut(&[Mat]) -> f64,
    step: f64,
) -> Vec<Mat> {
    let mut work: Vec<Mat> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Mat::zeros(params[pi].rows(), params[pi].cols());
        for k in 0..params[pi].data().len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let up = f(&work);
            work[pi].data_mut()[k] = orig - step;
            let down = f(&work);
            work[pi].data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Max relative error between analytic and numeric gradients, with a 1e-7
/// absolute floor in the denominator.
pub fn max_relative_error(analytic: &[Mat], numeric: &[Mat]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(1e-7);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::glorot;
    use crate::rng::substream;

    fn check_grads(params: &[Mat], f: impl Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &ids);
        let grads = tape.backward(loss);
        let analytic: Vec<Mat> = ids
            .iter()
            .zip(params)
            .map(|(&id, p)| grads.get(id, p))
            .collect();
        let numeric = central_diff_grads(
            params,
            |ps| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = ps.iter().map(|p| t.param(p)).collect();
                let l = f(&mut t, &ids);
                t.scalar(l)
            },
            1e-5,
        );
        max_relative_error(&analytic, &numeric)
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut rng = substream(1, "fd");
        let w = glorot(&mut rng, 4, 3);
        let b = glorot(&mut rng, 1, 3);
        let x = Arc::new(glorot(&mut rng, 5, 4));
        let labels = Arc::new(vec![0usize, 1, 2, 1, 0]);
        let mask = Arc::new(vec![true; 5]);
        let err = check_grads(&[w, b], move |t, ids| {
            let xc = t.constant(x.clone());
            let out = t.dense(xc, ids[0], Some(ids[1]));
            let probs = t.softmax_rows(out);
            t.cross_entropy(probs, labels.clone(), mask.clone())
        });
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn gated_mixture_gradient_matches_finite_differences() {
        // The sigmoid-gated convex combination used by the student decoders:
        // out = α·H + (1−α)·Q with α = sigmoid([Q ‖ H] P + b).
        let mut rng = substream(2, "fd2");
        let q_w = glorot(&mut rng, 4, 4);
        let h_w = glorot(&mut rng, 4, 4);
        let p = glorot(&mut rng, 8, 1);
        let b = Mat::zeros(1, 1);
        let x = Arc::new(glorot(&mut rng, 6, 4));
        let a = Arc::new(glorot(&mut rng, 6, 4));
        let labels = Arc::new(vec![0usize, 1, 2, 3, 0, 1]);
        let mask = Arc::new(vec![true, true, false, true, true, true]);
        let err = check_grads(&[q_w, h_w, p, b], move |t, ids| {
            let xc = t.constant(x.clone());
            let ac = t.constant(a.clone());
            let q = t.matmul(ac, ids[0]);
            let h = t.matmul(xc, ids[1]);
            let cat = t.concat_cols(q, h);
            let score = t.dense(cat, ids[2], Some(ids[3]));
            let alpha = t.sigmoid(score);
            let one_m = t.one_minus(alpha);
            let ah = t.mul_col_broadcast(alpha, h);
            let aq = t.mul_col_broadcast(one_m, q);
            let mixed = t.add(ah, aq);
            let probs = t.softmax_rows(mixed);
            t.cross_entropy(probs, labels.clone(), mask.clone())
        });
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn kl_through_softmax_matches_finite_differences() {
        let mut rng = substream(3, "fd3");
        let w = glorot(&mut rng, 3, 3);
        let x = Arc::new(glorot(&mut rng, 4, 3));
        let teacher = Arc::new(softmax_rows(&glorot(&mut rng, 4, 3)));
        let mask = Arc::new(vec![true; 4]);
        let labels = Arc::new(vec![0usize, 1, 2, 0]);
        let err = check_grads(&[w], move |t, ids| {
            let xc = t.constant(x.clone());
            let out = t.matmul(xc, ids[0]);
            let probs = t.softmax_rows(out);
            let ce = t.cross_entropy(probs, labels.clone(), mask.clone());
            let kl = t.kl_divergence(teacher.clone(), probs, mask.clone());
            t.weighted_sum(ce, kl, 0.5, 0.5)
        });
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn relu_and_addn_gradients() {
        let mut rng = substream(4, "fd4");
        let w1 = glorot(&mut rng, 3, 3);
        let w2 = glorot(&mut rng, 3, 3);
        let x = Arc::new(glorot(&mut rng, 5, 3));
        let labels = Arc::new(vec![0usize, 1, 2, 1, 0]);
        let mask = Arc::new(vec![true; 5]);
        let err = check_grads(&[w1, w2], move |t, ids| {
            let xc = t.constant(x.clone());
            let a = t.matmul(xc, ids[0]);
            let a = t.relu(a);
            let b = t.matmul(xc, ids[1]);
            let s = t.add_n(&[a, b]);
            let probs = t.softmax_rows(s);
            t.cross_entropy(probs, labels.clone(), mask.clone())
        });
        assert!(err <= 1e-4, "relative error {err}");
    }
}
