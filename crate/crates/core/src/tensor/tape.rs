use std::sync::Arc;

use super::kernels::{self, Neighbors, NORM_CLAMP};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Powf(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    NeighborMean(Var, Arc<Neighbors>),
    SoftmaxRows(Var),
    RowCosine(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    ConcatCols(Vec<Var>),
    StopGradient,
    StraightThrough(Var),
    PairDot(Var, Arc<[(usize, usize)]>),
    SoftmaxCrossEntropy(Var, Arc<[usize]>),
    MaskedBce(Var, Arc<Tensor<S>>),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::AddRow(..) => "add_row",
            Op::Affine(..) => "affine",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Powf(..) => "powf",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::NeighborMean(..) => "neighbor_mean",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::RowCosine(..) => "row_cosine",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough(..) => "straight_through",
            Op::PairDot(..) => "pair_dot",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::MaskedBce(..) => "masked_bce",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    is_param: bool,
    requires_grad: bool,
}

/// Values produced by the stop-gradient edges of a recorded pass.
///
/// Feeding them back through [`Tape::replaying`] turns every stop-gradient
/// output into a constant, which is the surrogate function whose true
/// gradient equals the recorded one. Finite-difference checks use this.
#[derive(Debug, Clone, Default)]
pub struct Replay<S> {
    values: Vec<Tensor<S>>,
}

impl<S> Replay<S> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Records primitive operations in execution order for reverse-mode
/// differentiation. A tape is single-threaded and discarded after backward.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    replay: Option<Replay<S>>,
    replay_cursor: usize,
    captured: Vec<Tensor<S>>,
    regime: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[inline]
fn fnv(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(FNV_PRIME)
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            replay: None,
            replay_cursor: 0,
            captured: Vec::new(),
            regime: FNV_OFFSET,
        }
    }

    /// A tape whose stop-gradient edges emit the given frozen values.
    pub fn replaying(replay: Replay<S>) -> Self {
        Self {
            replay: Some(replay),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Stop-gradient outputs captured so far, in recording order.
    pub fn captured(&self) -> Replay<S> {
        Replay {
            values: self.captured.clone(),
        }
    }

    /// Digest of the discrete choices made during the pass (ReLU masks and
    /// any noted indices). Two evaluations with different digests lie on
    /// different smooth pieces of the function.
    pub fn regime(&self) -> u64 {
        self.regime
    }

    pub fn note_regime(&mut self, choices: &[usize]) {
        for &c in choices {
            self.regime = fnv(self.regime, c as u64);
        }
        self.regime = fnv(self.regime, u64::MAX);
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor<S>, is_param: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            is_param,
            requires_grad: is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::numeric(
                "tape",
                id,
                format!("non-finite output from {}", op.name()),
            ));
        }
        self.nodes.push(Node {
            op,
            value,
            is_param: false,
            requires_grad,
        });
        Ok(Var(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), v, rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulNt(a, b), v, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::sub(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), v, rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::hadamard(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Hadamard(a, b), v, rg)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = kernels::add_row(self.value(a), self.value(bias))?;
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddRow(a, bias), v, rg)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = kernels::affine(self.value(a), scale, shift);
        let rg = self.rg(a);
        self.push(Op::Affine(a, scale), v, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut h = self.regime;
        for &v in self.value(a).data() {
            h = fnv(h, (v > S::zero()) as u64);
        }
        self.regime = h;
        let v = kernels::relu(self.value(a));
        let rg = self.rg(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = kernels::sigmoid(self.value(a));
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    /// `max(a, 0)^p` elementwise.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let v = self
            .value(a)
            .map(|x| S::from_f64_lossy(x.f64().max(0.0).powf(p)));
        let rg = self.rg(a);
        self.push(Op::Powf(a, p), v, rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(Op::Square(a), v, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(S::from_f64_lossy(kernels::sum(self.value(a))));
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let v = Tensor::scalar(S::from_f64_lossy(kernels::sum(x) / x.len() as f64));
        let rg = self.rg(a);
        self.push(Op::Mean(a), v, rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = kernels::mean_rows(self.value(a))?;
        let rg = self.rg(a);
        self.push(Op::MeanRows(a), v, rg)
    }

    pub fn neighbor_mean(&mut self, a: Var, nb: Arc<Neighbors>) -> Result<Var> {
        let v = kernels::neighbor_mean(self.value(a), &nb)?;
        let rg = self.rg(a);
        self.push(Op::NeighborMean(a, nb), v, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = kernels::softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), v, rg)
    }

    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::row_cosine(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::RowCosine(a, b), v, rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let v = kernels::gather_rows(self.value(a), &idx)?;
        let rg = self.rg(a);
        self.push(Op::GatherRows(a, idx), v, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat_cols(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, rg)
    }

    fn next_frozen(&mut self, shape: &[usize]) -> Result<Option<Tensor<S>>> {
        let Some(replay) = &self.replay else {
            return Ok(None);
        };
        let t = replay.values.get(self.replay_cursor).cloned().ok_or_else(|| {
            Error::contract("replay exhausted: pass records more stop-gradients than captured")
        })?;
        if t.shape() != shape {
            return Err(Error::contract(format!(
                "replay shape {:?} does not match {:?}",
                t.shape(),
                shape
            )));
        }
        self.replay_cursor += 1;
        Ok(Some(t))
    }

    /// Forward identity, zero gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let v = match self.next_frozen(&shape)? {
            Some(t) => t,
            None => self.value(a).clone(),
        };
        self.captured.push(v.clone());
        self.push(Op::StopGradient, v, false)
    }

    /// Forward value `z_q`; backward routes the incoming gradient to `z`
    /// unchanged, i.e. `z + sg[z_q − z]`.
    pub fn straight_through(&mut self, z: Var, zq: Var) -> Result<Var> {
        let (zv, zqv) = (self.value(z), self.value(zq));
        if zv.shape() != zqv.shape() {
            return Err(Error::contract(format!(
                "straight_through: {:?} vs {:?}",
                zv.shape(),
                zqv.shape()
            )));
        }
        let shape = zv.shape().to_vec();
        let v = match self.next_frozen(&shape)? {
            Some(offset) => {
                let v = kernels::add(self.value(z), &offset)?;
                self.captured.push(offset);
                v
            }
            None => {
                let offset = kernels::sub(self.value(zq), self.value(z))?;
                self.captured.push(offset);
                self.value(zq).clone()
            }
        };
        let rg = self.rg(z);
        self.push(Op::StraightThrough(z), v, rg)
    }

    pub fn pair_dot(&mut self, a: Var, pairs: Arc<[(usize, usize)]>) -> Result<Var> {
        let v = kernels::pair_dot(self.value(a), &pairs)?;
        let rg = self.rg(a);
        self.push(Op::PairDot(a, pairs), v, rg)
    }

    /// Mean cross-entropy of row-softmax(`logits`) against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        let x = self.value(logits);
        if labels.len() != x.rows() || x.rows() == 0 {
            return Err(Error::contract(format!(
                "cross entropy: {} labels for {} rows",
                labels.len(),
                x.rows()
            )));
        }
        let c = x.cols();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::contract(format!("label {y} out of {c} classes")));
            }
            let row = x.row(i);
            let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v.f64() - mx).exp()).sum::<f64>().ln();
            total += lse - row[y].f64();
        }
        let v = Tensor::scalar(S::from_f64_lossy(total / labels.len() as f64));
        let rg = self.rg(logits);
        self.push(Op::SoftmaxCrossEntropy(logits, labels), v, rg)
    }

    /// Mean binary cross-entropy with logits over the non-NaN targets.
    pub fn masked_bce(&mut self, logits: Var, targets: Arc<Tensor<S>>) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(Error::contract("masked_bce: logits and targets differ in shape"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (&l, &t) in x.data().iter().zip(targets.data()) {
            if t.is_nan() {
                continue;
            }
            let (l, t) = (l.f64(), t.f64());
            total += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
            count += 1;
        }
        let v = Tensor::scalar(S::from_f64_lossy(if count == 0 {
            0.0
        } else {
            total / count as f64
        }));
        let rg = self.rg(logits);
        self.push(Op::MaskedBce(logits, targets), v, rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), S::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(Error::numeric(
                    "backward",
                    id,
                    format!("non-finite gradient at {}", self.nodes[id].op.name()),
                ));
            }
            let node = &self.nodes[id];
            for (input, contrib) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Leaves keep their gradient; interior nodes are needed only in
            // the reverse sweep but are retained for inspection.
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| n.is_param)
                .map(|(i, _)| Var(i))
                .collect(),
        })
    }

    fn local_grads(&self, node: &Node<S>, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    res.push((*a, kernels::matmul_nt(g, val(*b))?));
                }
                if self.rg(*b) {
                    res.push((*b, kernels::matmul_tn(val(*a), g)?));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    res.push((*a, kernels::matmul(g, val(*b))?));
                }
                if self.rg(*b) {
                    res.push((*b, kernels::matmul_tn(g, val(*a))?));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|x| -x)));
            }
            Op::Hadamard(a, b) => {
                res.push((*a, kernels::hadamard(g, val(*b))?));
                res.push((*b, kernels::hadamard(g, val(*a))?));
            }
            Op::AddRow(a, bias) => {
                res.push((*a, g.clone()));
                if self.rg(*bias) {
                    let mut col = vec![0.0f64; g.cols()];
                    for i in 0..g.rows() {
                        for (c, &v) in col.iter_mut().zip(g.row(i)) {
                            *c += v.f64();
                        }
                    }
                    let t = Tensor::new(
                        val(*bias).shape().to_vec(),
                        col.into_iter().map(S::from_f64_lossy).collect(),
                    )?;
                    res.push((*bias, t));
                }
            }
            Op::Affine(a, scale) => {
                let sc = S::from_f64_lossy(*scale);
                res.push((*a, g.map(|x| x * sc)));
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (S::one() - y))
                    .collect();
                res.push((*a, Tensor::new(out.shape().to_vec(), d)?));
            }
            Op::Powf(a, p) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| {
                        let xv = xv.f64();
                        if xv > 0.0 {
                            S::from_f64_lossy(gv.f64() * p * xv.powf(p - 1.0))
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::Square(a) => {
                let x = val(*a);
                let two = S::from_f64_lossy(2.0);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| two * xv * gv)
                    .collect();
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::Sum(a) => {
                res.push((*a, Tensor::full(val(*a).shape(), g.item())));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gv = S::from_f64_lossy(g.item().f64() / x.len() as f64);
                res.push((*a, Tensor::full(x.shape(), gv)));
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let n = x.rows() as f64;
                let row: Vec<S> = g
                    .data()
                    .iter()
                    .map(|v| S::from_f64_lossy(v.f64() / n))
                    .collect();
                let mut d = Vec::with_capacity(x.len());
                for _ in 0..x.rows() {
                    d.extend_from_slice(&row);
                }
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::NeighborMean(a, nb) => {
                let x = val(*a);
                let c = x.cols();
                let mut acc = vec![0.0f64; x.len()];
                for i in 0..x.rows() {
                    let ns = nb.of(i);
                    if ns.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / ns.len() as f64;
                    let gi = g.row(i);
                    for &j in ns {
                        for (o, &v) in acc[j * c..(j + 1) * c].iter_mut().zip(gi) {
                            *o += v.f64() * inv;
                        }
                    }
                }
                res.push((
                    *a,
                    Tensor::new(
                        x.shape().to_vec(),
                        acc.into_iter().map(S::from_f64_lossy).collect(),
                    )?,
                ));
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for i in 0..out.rows() {
                    let (y, gi) = (out.row(i), g.row(i));
                    let inner = kernels::dot(y, gi);
                    d.extend(
                        y.iter()
                            .zip(gi)
                            .map(|(&yv, &gv)| S::from_f64_lossy(yv.f64() * (gv.f64() - inner))),
                    );
                }
                debug_assert_eq!(d.len(), out.rows() * c);
                res.push((*a, Tensor::new(out.shape().to_vec(), d)?));
            }
            Op::RowCosine(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let c = xa.cols();
                let mut da = Vec::with_capacity(xa.len());
                let mut db = Vec::with_capacity(xb.len());
                for i in 0..xa.rows() {
                    let (ra, rb) = (xa.row(i), xb.row(i));
                    let gi = g.data()[i].f64();
                    let dotv = kernels::dot(ra, rb);
                    let (na_raw, nb_raw) = (kernels::norm(ra), kernels::norm(rb));
                    let (na, nbn) = (na_raw.max(NORM_CLAMP), nb_raw.max(NORM_CLAMP));
                    let base = gi / (na * nbn);
                    // When a norm sits at the clamp it is constant in the input.
                    let ka = if na_raw > NORM_CLAMP { dotv / (na * na) } else { 0.0 };
                    let kb = if nb_raw > NORM_CLAMP { dotv / (nbn * nbn) } else { 0.0 };
                    for j in 0..c {
                        let (av, bv) = (ra[j].f64(), rb[j].f64());
                        da.push(S::from_f64_lossy(base * (bv - ka * av)));
                        db.push(S::from_f64_lossy(base * (av - kb * bv)));
                    }
                }
                if self.rg(*a) {
                    res.push((*a, Tensor::new(xa.shape().to_vec(), da)?));
                }
                if self.rg(*b) {
                    res.push((*b, Tensor::new(xb.shape().to_vec(), db)?));
                }
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let c = x.cols();
                let mut acc = vec![0.0f64; x.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in acc[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += v.f64();
                    }
                }
                res.push((
                    *a,
                    Tensor::new(
                        x.shape().to_vec(),
                        acc.into_iter().map(S::from_f64_lossy).collect(),
                    )?,
                ));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let x = val(p);
                    let c = x.cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(x.len());
                        for i in 0..g.rows() {
                            d.extend_from_slice(&g.row(i)[start..start + c]);
                        }
                        res.push((p, Tensor::new(x.shape().to_vec(), d)?));
                    }
                    start += c;
                }
            }
            Op::StraightThrough(z) => {
                res.push((*z, g.clone()));
            }
            Op::PairDot(a, pairs) => {
                let x = val(*a);
                let c = x.cols();
                let mut acc = vec![0.0f64; x.len()];
                for (p, &(u, v)) in pairs.iter().enumerate() {
                    let gp = g.data()[p].f64();
                    let (ru, rv) = (x.row(u), x.row(v));
                    for j in 0..c {
                        acc[u * c + j] += gp * rv[j].f64();
                        acc[v * c + j] += gp * ru[j].f64();
                    }
                }
                res.push((
                    *a,
                    Tensor::new(
                        x.shape().to_vec(),
                        acc.into_iter().map(S::from_f64_lossy).collect(),
                    )?,
                ));
            }
            Op::SoftmaxCrossEntropy(a, labels) => {
                let x = val(*a);
                let sm = kernels::softmax_rows(x);
                let scale = g.item().f64() / labels.len() as f64;
                let c = x.cols();
                let mut d: Vec<S> = sm
                    .data()
                    .iter()
                    .map(|&p| S::from_f64_lossy(p.f64() * scale))
                    .collect();
                for (i, &y) in labels.iter().enumerate() {
                    let cell = &mut d[i * c + y];
                    *cell = S::from_f64_lossy(cell.f64() - scale);
                }
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::MaskedBce(a, targets) => {
                let x = val(*a);
                let count = targets.data().iter().filter(|t| !t.is_nan()).count();
                let scale = if count == 0 {
                    0.0
                } else {
                    g.item().f64() / count as f64
                };
                let d = x
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&l, &t)| {
                        if t.is_nan() {
                            S::zero()
                        } else {
                            S::from_f64_lossy(scale * (kernels::sigmoid_scalar(l.f64()) - t.f64()))
                        }
                    })
                    .collect();
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
        }
        Ok(res)
    }
}

/// Result of a reverse sweep. Parameters that did not influence the loss
/// read back as all-zero gradients.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to any recorded value.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (Var, Tensor<S>)> + '_ {
        self.params.iter().map(|&p| (p, self.wrt(p)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_w() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::scalar(3.0));
        let y = t.square(w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(w).item(), 6.0);
    }

    #[test]
    fn sum_of_zero_vector_has_unit_gradient() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::zeros(&[5]));
        let y = t.sum(w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0; 5]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::scalar(2.0));
        let unused = t.param(Tensor::zeros(&[3]));
        let y = t.square(w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
        assert_eq!(g.params().len(), 2);
    }

    #[test]
    fn stop_gradient_forward_identity_and_zero_grad() {
        let mut t = Tape::<f64>::new();
        let v = Tensor::from_f64(&[3], &[0.1, -2.0, 7.5]).unwrap();
        let z = t.param(v.clone());
        let sg = t.stop_gradient(z).unwrap();
        assert!(t.value(sg).bitwise_eq(&v));
        let zq = t.param(Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap());
        let diff = t.sub(sg, zq).unwrap();
        let sq = t.square(diff).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(z).data(), &[0.0; 3]);
        // d/dz_q ||sg[z] - z_q||^2 = 2 (z_q - z)
        assert_eq!(g.wrt(zq).data(), &[1.8, 6.0, -13.0]);
    }

    #[test]
    fn straight_through_forward_is_zq_and_routes_to_z() {
        let mut t = Tape::<f64>::new();
        let z = t.param(Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap());
        let zq_val = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let zq = t.param(zq_val.clone());
        let y = t.straight_through(z, zq).unwrap();
        assert!(t.value(y).bitwise_eq(&zq_val));
        let sq = t.square(y).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(z).data(), &[2.0, 4.0]);
        assert_eq!(g.wrt(zq).data(), &[0.0, 0.0]);
    }

    #[test]
    fn straight_through_rejects_shape_mismatch() {
        let mut t = Tape::<f64>::new();
        let z = t.param(Tensor::zeros(&[2]));
        let zq = t.param(Tensor::zeros(&[3]));
        assert!(t.straight_through(z, zq).is_err());
    }

    #[test]
    fn non_finite_forward_reports_op_id() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::scalar(1e300));
        match t.square(w) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn replay_freezes_stop_gradient_values() {
        let mut t = Tape::<f64>::new();
        let z = t.param(Tensor::scalar(2.0));
        t.stop_gradient(z).unwrap();
        let replay = t.captured();
        let mut r = Tape::replaying(replay);
        let z2 = r.param(Tensor::scalar(5.0));
        let sg = r.stop_gradient(z2).unwrap();
        assert_eq!(r.value(sg).item(), 2.0);
    }
}
