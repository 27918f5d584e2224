//! Dense double-precision tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a flat tape of eagerly evaluated nodes. Every operation
//! appends one node holding its forward value; [`Graph::backward`] walks the
//! tape in reverse and accumulates adjoints into the gradient slots of all
//! nodes that require gradients. The walk order is the reverse of construction
//! order, so repeated backward passes over the same graph produce bit-identical
//! gradients.
//!
//! The primitive set is closed: affine maps, elementwise activations
//! (sigmoid, tanh, ELU, ReLU), softmax weighting, log-softmax, per-vector
//! moments (mean and biased standard deviation), dot product, cosine
//! similarity, concatenation, weighted sums over column lists, scalar
//! broadcast arithmetic, and reductions. The whole model compiles to these.
//!
//! Denominators that can vanish (standard deviation, vector norms, scalar
//! division) are guarded by clamping to [`EPS`]; guard activations are counted
//! in [`Diagnostics`]. The guard is a clamp rather than an additive term so
//! that well-conditioned inputs are computed exactly.

use crate::{C3mError, Result};

/// Floor applied to every standard-deviation and norm denominator.
pub const EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// Dense row-major tensor. Doubles as a standalone parameter holder and as
/// the value storage of a graph node.
///
/// The gradient slot is allocated exactly when `requires_grad` is set.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(C3mError::dim(format!(
                "tensor shape {:?} expects {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        let grad = requires_grad.then(|| vec![0.0; values.len()]);
        Ok(Tensor { shape, values, requires_grad, grad })
    }

    pub fn vector(values: Vec<f64>, requires_grad: bool) -> Self {
        let n = values.len();
        Tensor::new(vec![n], values, requires_grad).expect("vector shape is consistent")
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n], requires_grad).expect("zeros shape is consistent")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Mean and standard deviation of one vector. The standard deviation is the
/// biased one: sqrt of the mean squared deviation (divide by n, not n-1).
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

/// Two-pass moments of a plain slice.
pub fn moments(values: &[f64]) -> Result<Moments> {
    if values.is_empty() {
        return Err(C3mError::contract("moments of an empty vector"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Moments { mean, std: var.sqrt() })
}

/// Counters for numeric guard activations, plus the smallest observed distance
/// to a non-differentiable boundary (hinge and ELU kinks, attention-threshold
/// selections). Gradient checking uses the margin to reject samples whose
/// finite differences would straddle a kink.
#[derive(Copy, Clone, Debug)]
pub struct Diagnostics {
    pub eps_guard_hits: u64,
    pub kink_margin: f64,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Diagnostics { eps_guard_hits: 0, kink_margin: f64::INFINITY }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { w: TensorId, x: TensorId, b: Option<TensorId> },
    Sigmoid(TensorId),
    Tanh(TensorId),
    Elu(TensorId),
    Relu(TensorId),
    SoftmaxWeights(TensorId),
    LogSoftmax(TensorId),
    Mean(TensorId),
    Std(TensorId),
    Dot(TensorId, TensorId),
    Cosine(TensorId, TensorId),
    Concat(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale { x: TensorId, s: TensorId },
    Offset { x: TensorId, s: TensorId },
    DivScalar { x: TensorId, s: TensorId },
    MulConst { x: TensorId, c: f64 },
    AddConst(TensorId),
    Sum(TensorId),
    AddN(Vec<TensorId>),
    FromScalars(Vec<TensorId>),
    Select { x: TensorId, index: usize },
    WeightedSum { weights: TensorId, cols: Vec<TensorId>, selected: Vec<usize> },
}

/// Eagerly evaluated computation tape.
pub struct Graph {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
    diagnostics: Diagnostics,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { tensors: Vec::new(), ops: Vec::new(), diagnostics: Diagnostics::default() }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    /// Records a data-dependent distance to a selection boundary.
    pub fn note_kink_margin(&mut self, distance: f64) {
        if distance < self.diagnostics.kink_margin {
            self.diagnostics.kink_margin = distance;
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        let grad = requires_grad.then(|| vec![0.0; values.len()]);
        self.tensors.push(Tensor { shape, values, requires_grad, grad });
        self.ops.push(op);
        TensorId(self.tensors.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.tensors[id.0].requires_grad)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].values
    }

    /// Value of a scalar node.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.tensors[id.0].values.len(), 1);
        self.tensors[id.0].values[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    // ====== node constructors ======

    pub fn leaf(&mut self, tensor: &Tensor) -> TensorId {
        self.push(tensor.shape.clone(), tensor.values.clone(), tensor.requires_grad, Op::Leaf)
    }

    pub fn leaf_vec(&mut self, values: Vec<f64>, requires_grad: bool) -> TensorId {
        let n = values.len();
        self.push(vec![n], values, requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    /// y = W x + b with W of shape [out, in], x of shape [in], b of shape [out].
    pub fn affine(&mut self, w: TensorId, x: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(C3mError::dim(format!("affine weight must be 2-d, got {ws:?}")));
        }
        let (out, inp) = (ws[0], ws[1]);
        if self.values(x).len() != inp {
            return Err(C3mError::dim(format!(
                "affine input length {} does not match weight columns {}",
                self.values(x).len(),
                inp
            )));
        }
        if let Some(b) = b {
            if self.values(b).len() != out {
                return Err(C3mError::dim(format!(
                    "affine bias length {} does not match weight rows {}",
                    self.values(b).len(),
                    out
                )));
            }
        }
        let mut y = vec![0.0; out];
        {
            let wv = self.values(w);
            let xv = self.values(x);
            for r in 0..out {
                let mut acc = 0.0;
                for c in 0..inp {
                    acc += wv[r * inp + c] * xv[c];
                }
                y[r] = acc;
            }
        }
        if let Some(b) = b {
            let bv = self.values(b);
            for r in 0..out {
                y[r] += bv[r];
            }
        }
        let mut needs = self.needs(&[w, x]);
        if let Some(b) = b {
            needs |= self.needs(&[b]);
        }
        Ok(self.push(vec![out], y, needs, Op::Affine { w, x, b }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let y: Vec<f64> = self.values(x).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, y, needs, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let y: Vec<f64> = self.values(x).iter().map(|&v| v.tanh()).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, y, needs, Op::Tanh(x))
    }

    pub fn elu(&mut self, x: TensorId) -> TensorId {
        let mut margin = f64::INFINITY;
        let y: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| {
                margin = margin.min(v.abs());
                if v >= 0.0 {
                    v
                } else {
                    v.exp() - 1.0
                }
            })
            .collect();
        self.note_kink_margin(margin);
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, y, needs, Op::Elu(x))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let mut margin = f64::INFINITY;
        let y: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| {
                margin = margin.min(v.abs());
                v.max(0.0)
            })
            .collect();
        self.note_kink_margin(margin);
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, y, needs, Op::Relu(x))
    }

    /// Max-subtracted softmax over a 1-d score vector.
    pub fn softmax_weights(&mut self, scores: TensorId) -> Result<TensorId> {
        let v = self.values(scores);
        if v.is_empty() {
            return Err(C3mError::contract("softmax over an empty score vector"));
        }
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|&s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let y: Vec<f64> = exps.iter().map(|&e| e / total).collect();
        let needs = self.needs(&[scores]);
        let n = y.len();
        Ok(self.push(vec![n], y, needs, Op::SoftmaxWeights(scores)))
    }

    pub fn log_softmax(&mut self, logits: TensorId) -> Result<TensorId> {
        let v = self.values(logits);
        if v.is_empty() {
            return Err(C3mError::contract("log-softmax over an empty logit vector"));
        }
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        let y: Vec<f64> = v.iter().map(|&s| s - lse).collect();
        let needs = self.needs(&[logits]);
        let n = y.len();
        Ok(self.push(vec![n], y, needs, Op::LogSoftmax(logits)))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.values(x);
        if v.is_empty() {
            return Err(C3mError::contract("mean of an empty vector"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[x]);
        Ok(self.push(vec![1], vec![m], needs, Op::Mean(x)))
    }

    /// Biased standard deviation (divide by n).
    pub fn std_dev(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.values(x);
        if v.is_empty() {
            return Err(C3mError::contract("std of an empty vector"));
        }
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / n;
        let needs = self.needs(&[x]);
        Ok(self.push(vec![1], vec![var.sqrt()], needs, Op::Std(x)))
    }

    /// Mean and biased standard deviation as two scalar nodes.
    pub fn moments(&mut self, x: TensorId) -> Result<(TensorId, TensorId)> {
        Ok((self.mean(x)?, self.std_dev(x)?))
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_len(a, b, "dot")?;
        let d: f64 = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).sum();
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![1], vec![d], needs, Op::Dot(a, b)))
    }

    /// Cosine similarity with the norm-product denominator clamped to [`EPS`].
    /// The result is clamped into [-1, 1] to absorb rounding.
    pub fn cosine(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_len(a, b, "cosine")?;
        let (dot, na, nb) = {
            let av = self.values(a);
            let bv = self.values(b);
            let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
            let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot, na, nb)
        };
        let denom = na * nb;
        if denom < EPS {
            self.diagnostics.eps_guard_hits += 1;
        }
        let c = (dot / denom.max(EPS)).clamp(-1.0, 1.0);
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![1], vec![c], needs, Op::Cosine(a, b)))
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a).len() != 1 || self.shape(b).len() != 1 {
            return Err(C3mError::dim("concat expects 1-d tensors"));
        }
        let mut y = self.values(a).to_vec();
        y.extend_from_slice(self.values(b));
        let needs = self.needs(&[a, b]);
        let n = y.len();
        Ok(self.push(vec![n], y, needs, Op::Concat(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_len(a, b, "add")?;
        let y: Vec<f64> = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, y, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_len(a, b, "sub")?;
        let y: Vec<f64> = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x - y).collect();
        let needs = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, y, needs, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_len(a, b, "mul")?;
        let y: Vec<f64> = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, y, needs, Op::Mul(a, b)))
    }

    /// x * s with s a scalar node.
    pub fn scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.check_scalar(s, "scale")?;
        let sv = self.value(s);
        let y: Vec<f64> = self.values(x).iter().map(|&v| v * sv).collect();
        let needs = self.needs(&[x, s]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, y, needs, Op::Scale { x, s }))
    }

    /// x + s broadcast, with s a scalar node.
    pub fn offset(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.check_scalar(s, "offset")?;
        let sv = self.value(s);
        let y: Vec<f64> = self.values(x).iter().map(|&v| v + sv).collect();
        let needs = self.needs(&[x, s]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, y, needs, Op::Offset { x, s }))
    }

    /// x / max(s, EPS) with s a scalar node.
    pub fn div_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.check_scalar(s, "div_scalar")?;
        let sv = self.value(s);
        if sv < EPS {
            self.diagnostics.eps_guard_hits += 1;
        }
        let m = sv.max(EPS);
        let y: Vec<f64> = self.values(x).iter().map(|&v| v / m).collect();
        let needs = self.needs(&[x, s]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, y, needs, Op::DivScalar { x, s }))
    }

    pub fn mul_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let y: Vec<f64> = self.values(x).iter().map(|&v| v * c).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, y, needs, Op::MulConst { x, c })
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let y: Vec<f64> = self.values(x).iter().map(|&v| v + c).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, y, needs, Op::AddConst(x))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.values(x).iter().sum();
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], needs, Op::Sum(x))
    }

    /// Elementwise sum of any number of same-shape tensors, in input order.
    pub fn add_n(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        let Some(&first) = xs.first() else {
            return Err(C3mError::contract("add_n over an empty list"));
        };
        let len = self.values(first).len();
        let mut y = vec![0.0; len];
        for &x in xs {
            let v = self.values(x);
            if v.len() != len {
                return Err(C3mError::dim("add_n over tensors of different lengths"));
            }
            for (acc, &a) in y.iter_mut().zip(v) {
                *acc += a;
            }
        }
        let needs = self.needs(xs);
        let shape = self.shape(first).to_vec();
        Ok(self.push(shape, y, needs, Op::AddN(xs.to_vec())))
    }

    /// Gathers scalar nodes into one vector node.
    pub fn from_scalars(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(C3mError::contract("from_scalars over an empty list"));
        }
        let mut y = Vec::with_capacity(xs.len());
        for &x in xs {
            self.check_scalar(x, "from_scalars")?;
            y.push(self.value(x));
        }
        let needs = self.needs(xs);
        let n = y.len();
        Ok(self.push(vec![n], y, needs, Op::FromScalars(xs.to_vec())))
    }

    pub fn select(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let v = self.values(x);
        if index >= v.len() {
            return Err(C3mError::contract(format!(
                "select index {index} out of bounds for length {}",
                v.len()
            )));
        }
        let y = v[index];
        let needs = self.needs(&[x]);
        Ok(self.push(vec![1], vec![y], needs, Op::Select { x, index }))
    }

    /// Sum of `weights[i] * cols[i]` over the listed indices. `selected = None`
    /// sums over all columns.
    pub fn weighted_sum(
        &mut self,
        weights: TensorId,
        cols: &[TensorId],
        selected: Option<&[usize]>,
    ) -> Result<TensorId> {
        let wv = self.values(weights).to_vec();
        if wv.len() != cols.len() {
            return Err(C3mError::dim(format!(
                "weighted_sum has {} weights for {} columns",
                wv.len(),
                cols.len()
            )));
        }
        if cols.is_empty() {
            return Err(C3mError::contract("weighted_sum over an empty column list"));
        }
        let len = self.values(cols[0]).len();
        for &c in cols {
            if self.values(c).len() != len {
                return Err(C3mError::dim("weighted_sum columns differ in length"));
            }
        }
        let selected: Vec<usize> = match selected {
            Some(s) => {
                if let Some(&bad) = s.iter().find(|&&i| i >= cols.len()) {
                    return Err(C3mError::contract(format!(
                        "weighted_sum selection index {bad} out of bounds"
                    )));
                }
                s.to_vec()
            }
            None => (0..cols.len()).collect(),
        };
        let mut y = vec![0.0; len];
        for &i in &selected {
            let col = self.values(cols[i]);
            for (acc, &v) in y.iter_mut().zip(col) {
                *acc += wv[i] * v;
            }
        }
        let mut ids = cols.to_vec();
        ids.push(weights);
        let needs = self.needs(&ids);
        Ok(self.push(vec![len], y, needs, Op::WeightedSum { weights, cols: cols.to_vec(), selected }))
    }

    fn check_same_len(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        let (la, lb) = (self.values(a).len(), self.values(b).len());
        if la != lb {
            return Err(C3mError::dim(format!("{what} over lengths {la} and {lb}")));
        }
        Ok(())
    }

    fn check_scalar(&self, s: TensorId, what: &str) -> Result<()> {
        if self.values(s).len() != 1 {
            return Err(C3mError::dim(format!(
                "{what} expects a scalar, got length {}",
                self.values(s).len()
            )));
        }
        Ok(())
    }

    // ====== reverse pass ======

    /// Accumulates d(output)/d(node) into the gradient slot of every node that
    /// requires gradients. The output must be a scalar.
    pub fn backward(&mut self, output: TensorId) -> Result<()> {
        if self.values(output).len() != 1 {
            return Err(C3mError::contract("backward requires a scalar output"));
        }
        if !self.tensors[output.0].requires_grad {
            return Err(C3mError::contract("backward output does not require gradients"));
        }
        let n = output.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        adj[output.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if let Some(slot) = &mut self.tensors[i].grad {
                for (s, &d) in slot.iter_mut().zip(&g) {
                    *s += d;
                }
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn bump(&self, adj: &mut [Option<Vec<f64>>], id: TensorId) -> bool {
        if !self.tensors[id.0].requires_grad {
            return false;
        }
        if adj[id.0].is_none() {
            adj[id.0] = Some(vec![0.0; self.tensors[id.0].values.len()]);
        }
        true
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Affine { w, x, b } => {
                let (out, inp) = (self.tensors[i].values.len(), self.values(*x).len());
                if self.bump(adj, *w) {
                    let xv = &self.tensors[x.0].values;
                    let dw = adj[w.0].as_mut().unwrap();
                    for r in 0..out {
                        for c in 0..inp {
                            dw[r * inp + c] += g[r] * xv[c];
                        }
                    }
                }
                if self.bump(adj, *x) {
                    let wv = &self.tensors[w.0].values;
                    let dx = adj[x.0].as_mut().unwrap();
                    for r in 0..out {
                        for c in 0..inp {
                            dx[c] += g[r] * wv[r * inp + c];
                        }
                    }
                }
                if let Some(b) = b {
                    if self.bump(adj, *b) {
                        let db = adj[b.0].as_mut().unwrap();
                        for r in 0..out {
                            db[r] += g[r];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.bump(adj, *x) {
                    let y = &self.tensors[i].values;
                    let dx = adj[x.0].as_mut().unwrap();
                    for (k, &gk) in g.iter().enumerate() {
                        dx[k] += gk * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.bump(adj, *x) {
                    let y = &self.tensors[i].values;
                    let dx = adj[x.0].as_mut().unwrap();
                    for (k, &gk) in g.iter().enumerate() {
                        dx[k] += gk * (1.0 - y[k] * y[k]);
                    }
                }
            }
            Op::Elu(x) => {
                if self.bump(adj, *x) {
                    let xv = &self.tensors[x.0].values;
                    let y = &self.tensors[i].values;
                    let dx = adj[x.0].as_mut().unwrap();
                    for (k, &gk) in g.iter().enumerate() {
                        let d = if xv[k] >= 0.0 { 1.0 } else { y[k] + 1.0 };
                        dx[k] += gk * d;
                    }
                }
            }
            Op::Relu(x) => {
                if self.bump(adj, *x) {
                    let xv = &self.tensors[x.0].values;
                    let dx = adj[x.0].as_mut().unwrap();
                    for (k, &gk) in g.iter().enumerate() {
                        if xv[k] > 0.0 {
                            dx[k] += gk;
                        }
                    }
                }
            }
            Op::SoftmaxWeights(x) => {
                if self.bump(adj, *x) {
                    let w = &self.tensors[i].values;
                    let inner: f64 = g.iter().zip(w).map(|(gk, wk)| gk * wk).sum();
                    let dx = adj[x.0].as_mut().unwrap();
                    for k in 0..w.len() {
                        dx[k] += w[k] * (g[k] - inner);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.bump(adj, *x) {
                    let y = &self.tensors[i].values;
                    let gsum: f64 = g.iter().sum();
                    let dx = adj[x.0].as_mut().unwrap();
                    for k in 0..y.len() {
                        dx[k] += g[k] - y[k].exp() * gsum;
                    }
                }
            }
            Op::Mean(x) => {
                if self.bump(adj, *x) {
                    let n = self.values(*x).len() as f64;
                    let dx = adj[x.0].as_mut().unwrap();
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Std(x) => {
                if self.bump(adj, *x) {
                    let xv = &self.tensors[x.0].values;
                    let n = xv.len() as f64;
                    let m = xv.iter().sum::<f64>() / n;
                    let sd = self.tensors[i].values[0].max(EPS);
                    let dx = adj[x.0].as_mut().unwrap();
                    for (k, &v) in xv.iter().enumerate() {
                        dx[k] += g[0] * (v - m) / (n * sd);
                    }
                }
            }
            Op::Dot(a, b) => {
                if self.bump(adj, *a) {
                    let bv = &self.tensors[b.0].values;
                    let da = adj[a.0].as_mut().unwrap();
                    for (k, &v) in bv.iter().enumerate() {
                        da[k] += g[0] * v;
                    }
                }
                if self.bump(adj, *b) {
                    let av = &self.tensors[a.0].values;
                    let db = adj[b.0].as_mut().unwrap();
                    for (k, &v) in av.iter().enumerate() {
                        db[k] += g[0] * v;
                    }
                }
            }
            Op::Cosine(a, b) => {
                let av = &self.tensors[a.0].values;
                let bv = &self.tensors[b.0].values;
                let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
                let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let denom = na * nb;
                if denom < EPS {
                    if self.bump(adj, *a) {
                        let da = adj[a.0].as_mut().unwrap();
                        for (k, &v) in bv.iter().enumerate() {
                            da[k] += g[0] * v / EPS;
                        }
                    }
                    if self.bump(adj, *b) {
                        let db = adj[b.0].as_mut().unwrap();
                        for (k, &v) in av.iter().enumerate() {
                            db[k] += g[0] * v / EPS;
                        }
                    }
                } else {
                    let c = dot / denom;
                    if self.bump(adj, *a) {
                        let na2 = na * na;
                        let da = adj[a.0].as_mut().unwrap();
                        for k in 0..av.len() {
                            da[k] += g[0] * (bv[k] / denom - c * av[k] / na2);
                        }
                    }
                    if self.bump(adj, *b) {
                        let nb2 = nb * nb;
                        let db = adj[b.0].as_mut().unwrap();
                        for k in 0..bv.len() {
                            db[k] += g[0] * (av[k] / denom - c * bv[k] / nb2);
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let la = self.values(*a).len();
                if self.bump(adj, *a) {
                    let da = adj[a.0].as_mut().unwrap();
                    for k in 0..la {
                        da[k] += g[k];
                    }
                }
                if self.bump(adj, *b) {
                    let db = adj[b.0].as_mut().unwrap();
                    for k in 0..db.len() {
                        db[k] += g[la + k];
                    }
                }
            }
            Op::Add(a, b) => {
                for &t in &[*a, *b] {
                    if self.bump(adj, t) {
                        let dt = adj[t.0].as_mut().unwrap();
                        for (d, &gk) in dt.iter_mut().zip(g) {
                            *d += gk;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.bump(adj, *a) {
                    let da = adj[a.0].as_mut().unwrap();
                    for (d, &gk) in da.iter_mut().zip(g) {
                        *d += gk;
                    }
                }
                if self.bump(adj, *b) {
                    let db = adj[b.0].as_mut().unwrap();
                    for (d, &gk) in db.iter_mut().zip(g) {
                        *d -= gk;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.bump(adj, *a) {
                    let bv = &self.tensors[b.0].values;
                    let da = adj[a.0].as_mut().unwrap();
                    for (k, &gk) in g.iter().enumerate() {
                        da[k] += gk * bv[k];
                    }
                }
                if self.bump(adj, *b) {
                    let av = &self.tensors[a.0].values;
                    let db = adj[b.0].as_mut().unwrap();
                    for (k, &gk) in g.iter().enumerate() {
                        db[k] += gk * av[k];
                    }
                }
            }
            Op::Scale { x, s } => {
                let sv = self.tensors[s.0].values[0];
                if self.bump(adj, *x) {
                    let dx = adj[x.0].as_mut().unwrap();
                    for (d, &gk) in dx.iter_mut().zip(g) {
                        *d += gk * sv;
                    }
                }
                if self.bump(adj, *s) {
                    let xv = &self.tensors[x.0].values;
                    let ds = adj[s.0].as_mut().unwrap();
                    ds[0] += g.iter().zip(xv).map(|(gk, xk)| gk * xk).sum::<f64>();
                }
            }
            Op::Offset { x, s } => {
                if self.bump(adj, *x) {
                    let dx = adj[x.0].as_mut().unwrap();
                    for (d, &gk) in dx.iter_mut().zip(g) {
                        *d += gk;
                    }
                }
                if self.bump(adj, *s) {
                    let ds = adj[s.0].as_mut().unwrap();
                    ds[0] += g.iter().sum::<f64>();
                }
            }
            Op::DivScalar { x, s } => {
                let sv = self.tensors[s.0].values[0];
                let m = sv.max(EPS);
                if self.bump(adj, *x) {
                    let dx = adj[x.0].as_mut().unwrap();
                    for (d, &gk) in dx.iter_mut().zip(g) {
                        *d += gk / m;
                    }
                }
                if sv > EPS && self.bump(adj, *s) {
                    let xv = &self.tensors[x.0].values;
                    let ds = adj[s.0].as_mut().unwrap();
                    ds[0] -= g.iter().zip(xv).map(|(gk, xk)| gk * xk).sum::<f64>() / (m * m);
                }
            }
            Op::MulConst { x, c } => {
                if self.bump(adj, *x) {
                    let dx = adj[x.0].as_mut().unwrap();
                    for (d, &gk) in dx.iter_mut().zip(g) {
                        *d += gk * c;
                    }
                }
            }
            Op::AddConst(x) => {
                if self.bump(adj, *x) {
                    let dx = adj[x.0].as_mut().unwrap();
                    for (d, &gk) in dx.iter_mut().zip(g) {
                        *d += gk;
                    }
                }
            }
            Op::Sum(x) => {
                if self.bump(adj, *x) {
                    let dx = adj[x.0].as_mut().unwrap();
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::AddN(xs) => {
                for &x in xs {
                    if self.bump(adj, x) {
                        let dx = adj[x.0].as_mut().unwrap();
                        for (d, &gk) in dx.iter_mut().zip(g) {
                            *d += gk;
                        }
                    }
                }
            }
            Op::FromScalars(xs) => {
                for (k, &x) in xs.iter().enumerate() {
                    if self.bump(adj, x) {
                        adj[x.0].as_mut().unwrap()[0] += g[k];
                    }
                }
            }
            Op::Select { x, index } => {
                if self.bump(adj, *x) {
                    adj[x.0].as_mut().unwrap()[*index] += g[0];
                }
            }
            Op::WeightedSum { weights, cols, selected } => {
                let wv = self.tensors[weights.0].values.clone();
                for &k in selected {
                    let col = cols[k];
                    if self.bump(adj, col) {
                        let dcol = adj[col.0].as_mut().unwrap();
                        for (d, &gk) in dcol.iter_mut().zip(g) {
                            *d += gk * wv[k];
                        }
                    }
                }
                if self.bump(adj, *weights) {
                    for &k in selected {
                        let colv = &self.tensors[cols[k].0].values;
                        let dw_k: f64 = g.iter().zip(colv).map(|(gk, ck)| gk * ck).sum();
                        adj[weights.0].as_mut().unwrap()[k] += dw_k;
                    }
                }
            }
        }
    }
}

// ====== finite-difference gradient checking ======

/// Settings for [`finite_difference_check`]: central differences with step `h`,
/// relative tolerance `rel_tol`, and a floor under the relative-error
/// denominator so near-zero gradients are judged on an absolute scale.
#[derive(Copy, Clone, Debug)]
pub struct FdConfig {
    pub h: f64,
    pub rel_tol: f64,
    pub denom_floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { h: 1e-5, rel_tol: 1e-4, denom_floor: 1e-4 }
    }
}

/// Outcome of one finite-difference check.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares an analytic gradient against central finite differences of a
/// scalar function, coordinate by coordinate.
///
/// `value_fn` evaluates the function; `grad_fn` produces the analytic gradient
/// at `theta` (normally by building a graph and calling backward). The
/// relative error at coordinate i is |a_i - n_i| / max(|a_i|, |n_i|, floor).
pub fn finite_difference_check(
    value_fn: &dyn Fn(&[f64]) -> Result<f64>,
    grad_fn: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    cfg: &FdConfig,
) -> Result<FdReport> {
    let analytic = grad_fn(theta)?;
    if analytic.len() != theta.len() {
        return Err(C3mError::dim(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut work = theta.to_vec();
    let mut max_rel_err = 0.0_f64;
    let mut worst_index = 0;
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + cfg.h;
        let up = value_fn(&work)?;
        work[i] = orig - cfg.h;
        let down = value_fn(&work)?;
        work[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.h);
        let denom = analytic[i].abs().max(numeric.abs()).max(cfg.denom_floor);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(FdReport { max_rel_err, worst_index, passed: max_rel_err <= cfg.rel_tol })
}
