//! Reverse-mode differentiation over a linear record of ops.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::backend::{check_log_domain, mean_of, Backend};
use super::params::{GradMap, ParamId, ParamStore};
use super::tensor::{self, broadcast, Bcast, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Square(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Select(Tensor, usize, usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    GatherCols(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of ops; inputs of every node precede it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: &Var) -> usize {
        assert_eq!(
            v.tape, self.id,
            "variable recorded on tape {} used with tape {}",
            v.tape, self.id
        );
        v.index
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn unary(&mut self, a: &Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var {
        let i = self.idx(a);
        let out = self.val(i).map(f);
        self.push(out, op(i))
    }

    /// Runs the backward pass from a scalar `loss`.
    ///
    /// Fails if `loss` was not recorded on this tape or is not a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "loss belongs to tape {} but backward was called on tape {}",
                loss.tape, self.id
            )));
        }
        let root = &self.nodes[loss.index].value;
        if root.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                root.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor::full(root.shape(), 1.0));

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape: self.id,
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (ka, kb) = self.bcast_kinds(*a, *b);
                accumulate_reduced(grads, *a, self.val(*a).shape(), g, ka, |_, gi| gi);
                accumulate_reduced(grads, *b, self.val(*b).shape(), g, kb, |_, gi| sign * gi);
            }
            Op::Mul(a, b) => {
                let (ka, kb) = self.bcast_kinds(*a, *b);
                let (va, vb) = (self.val(*a), self.val(*b));
                let cols = y.cols();
                let ga = |k: usize, gi: f64| gi * vb.data()[kb.index(k, cols)];
                accumulate_reduced(grads, *a, va.shape(), g, ka, ga);
                let gb = |k: usize, gi: f64| gi * va.data()[ka.index(k, cols)];
                accumulate_reduced(grads, *b, vb.shape(), g, kb, gb);
            }
            Op::MatMul(a, b) => {
                let ga = tensor::gemm(g, false, self.val(*b), true).expect("matmul grad");
                let gb = tensor::gemm(self.val(*a), true, g, false).expect("matmul grad");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let va = self.val(*a);
                let gv = g.data()[0] / va.len() as f64;
                accumulate(grads, *a, Tensor::full(va.shape(), gv));
            }
            Op::SumRows(a) => {
                let va = self.val(*a);
                let d = va.cols();
                let data = (0..va.len()).map(|k| g.data()[k / d]).collect();
                accumulate(grads, *a, Tensor::new(va.shape().to_vec(), data).unwrap());
            }
            Op::Exp(a) => accumulate(grads, *a, zip_map(g, y, |gi, yi| gi * yi)),
            Op::Log(a) => accumulate(grads, *a, zip_map(g, self.val(*a), |gi, xi| gi / xi)),
            Op::Tanh(a) => accumulate(grads, *a, zip_map(g, y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Sigmoid(a) => {
                accumulate(grads, *a, zip_map(g, y, |gi, yi| gi * yi * (1.0 - yi)))
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let f = |gi: f64, xi: f64| if xi > 0.0 { gi } else { s * gi };
                accumulate(grads, *a, zip_map(g, self.val(*a), f));
            }
            Op::Square(a) => {
                accumulate(grads, *a, zip_map(g, self.val(*a), |gi, xi| 2.0 * xi * gi))
            }
            Op::Abs(a) => {
                let f = |gi: f64, xi: f64| gi * xi.signum() * f64::from(xi != 0.0);
                accumulate(grads, *a, zip_map(g, self.val(*a), f));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let f = |gi: f64, xi: f64| if xi > lo && xi < hi { gi } else { 0.0 };
                accumulate(grads, *a, zip_map(g, self.val(*a), f));
            }
            Op::Select(mask, a, b) => {
                let zero = Tensor::zeros(g.shape());
                let ga = tensor::select(mask, g, &zero).expect("select grad");
                let gb = tensor::select(mask, &zero, g).expect("select grad");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::ConcatCols(a, b) => {
                let da = self.val(*a).cols();
                let d = g.cols();
                accumulate(grads, *a, tensor::slice_cols(g, 0, da).expect("concat grad"));
                accumulate(grads, *b, tensor::slice_cols(g, da, d).expect("concat grad"));
            }
            Op::SliceCols(a, start) => {
                let va = self.val(*a);
                let (n, d) = (va.rows(), va.cols());
                let w = g.cols();
                let mut out = Tensor::zeros(va.shape());
                let od = out.data_mut();
                for r in 0..n {
                    od[r * d + start..r * d + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, out);
            }
            Op::GatherCols(a, idx) => {
                let va = self.val(*a);
                let (n, d) = (va.rows(), va.cols());
                let mut out = Tensor::zeros(va.shape());
                let od = out.data_mut();
                for r in 0..n {
                    let gr = g.row(r);
                    for (j, &src) in idx.iter().enumerate() {
                        od[r * d + src] += gr[j];
                    }
                }
                accumulate(grads, *a, out);
            }
        }
    }

    fn bcast_kinds(&self, a: usize, b: usize) -> (Bcast, Bcast) {
        let (_, ka, kb) =
            broadcast("backward", self.val(a).shape(), self.val(b).shape()).expect("recorded op");
        (ka, kb)
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| f(gi, xi)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Accumulates `f(k, g[k])` into the operand slot `k` maps to under `kind`.
fn accumulate_reduced(
    grads: &mut [Option<Tensor>],
    i: usize,
    shape: &[usize],
    g: &Tensor,
    kind: Bcast,
    f: impl Fn(usize, f64) -> f64,
) {
    let cols = g.cols();
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (k, &gi) in g.data().iter().enumerate() {
        od[kind.index(k, cols)] += f(k, gi);
    }
    accumulate(grads, i, out);
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: HashMap<(u64, ParamId), usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a recorded value, if it lies on the loss path.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Dense gradients for every parameter of `store`; parameters that did not
    /// take part in the loss receive zeros.
    pub fn for_store(&self, store: &ParamStore) -> GradMap {
        let mut out = GradMap::zeros_like(store);
        for id in store.ids() {
            if let Some(&node) = self.params.get(&(store.uid(), id)) {
                if let Some(Some(g)) = self.grads.get(node) {
                    out.0[id.0] = g.clone();
                }
            }
        }
        out
    }
}

impl Backend for Tape {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&index) = self.params.get(&key) {
            return Var {
                tape: self.id,
                index,
            };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(key, v.index);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(self.idx(v))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (i, j) = (self.idx(a), self.idx(b));
        let out = tensor::binary("add", self.val(i), self.val(j), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(i, j)))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (i, j) = (self.idx(a), self.idx(b));
        let out = tensor::binary("sub", self.val(i), self.val(j), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(i, j)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (i, j) = (self.idx(a), self.idx(b));
        let out = tensor::binary("mul", self.val(i), self.val(j), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(i, j)))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (i, j) = (self.idx(a), self.idx(b));
        let out = tensor::gemm(self.val(i), false, self.val(j), false)?;
        Ok(self.push(out, Op::MatMul(i, j)))
    }

    fn neg(&mut self, a: &Var) -> Var {
        self.unary(a, |x| -x, Op::Neg)
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        self.unary(a, |x| x * c, |i| Op::Scale(i, c))
    }

    fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    fn sum(&mut self, a: &Var) -> Var {
        let i = self.idx(a);
        let out = Tensor::scalar(self.val(i).data().iter().sum());
        self.push(out, Op::Sum(i))
    }

    fn mean(&mut self, a: &Var) -> Result<Var> {
        let i = self.idx(a);
        let out = Tensor::scalar(mean_of(self.val(i))?);
        Ok(self.push(out, Op::Mean(i)))
    }

    fn sum_rows(&mut self, a: &Var) -> Result<Var> {
        let i = self.idx(a);
        let out = tensor::sum_rows(self.val(i))?;
        Ok(self.push(out, Op::SumRows(i)))
    }

    fn exp(&mut self, a: &Var) -> Var {
        self.unary(a, f64::exp, Op::Exp)
    }

    fn log(&mut self, a: &Var) -> Result<Var> {
        let i = self.idx(a);
        check_log_domain(self.val(i))?;
        Ok(self.unary(a, f64::ln, Op::Log))
    }

    fn tanh(&mut self, a: &Var) -> Var {
        self.unary(a, tensor::tanh, Op::Tanh)
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        self.unary(a, tensor::sigmoid, Op::Sigmoid)
    }

    fn leaky_relu(&mut self, a: &Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            |i| Op::LeakyRelu(i, slope),
        )
    }

    fn square(&mut self, a: &Var) -> Var {
        self.unary(a, |x| x * x, Op::Square)
    }

    fn abs(&mut self, a: &Var) -> Var {
        self.unary(a, f64::abs, Op::Abs)
    }

    fn clamp(&mut self, a: &Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), |i| Op::Clamp(i, lo, hi))
    }

    fn select(&mut self, mask: &Tensor, a: &Var, b: &Var) -> Result<Var> {
        let (i, j) = (self.idx(a), self.idx(b));
        let out = tensor::select(mask, self.val(i), self.val(j))?;
        Ok(self.push(out, Op::Select(mask.clone(), i, j)))
    }

    fn concat_cols(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (i, j) = (self.idx(a), self.idx(b));
        let out = tensor::concat_cols(self.val(i), self.val(j))?;
        Ok(self.push(out, Op::ConcatCols(i, j)))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let i = self.idx(a);
        let out = tensor::slice_cols(self.val(i), start, end)?;
        Ok(self.push(out, Op::SliceCols(i, start)))
    }

    fn gather_cols(&mut self, a: &Var, idx: &[usize]) -> Result<Var> {
        let i = self.idx(a);
        let out = tensor::gather_cols(self.val(i), idx)?;
        Ok(self.push(out, Op::GatherCols(i, idx.to_vec())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let v = t.constant(Tensor::matrix(2, 1, vec![3., 4.]).unwrap());
        let p = t.matmul(&eye, &v).unwrap();
        assert_eq!(t.value(&p).data(), &[3., 4.]);

        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(&z);
        assert_eq!(t.value(&s).item().unwrap(), 0.5);

        let zeros = t.constant(Tensor::vector(vec![0.0; 3]));
        let e = t.exp(&zeros);
        let total = t.sum(&e);
        assert_eq!(t.value(&total).item().unwrap(), 3.0);
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        let err = t.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(&a), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn square_sum_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1., 2., 3.]));
        let mut t = Tape::new();
        let pv = t.param(&store, p);
        let sq = t.mul(&pv, &pv).unwrap();
        let loss = t.sum(&sq);
        let g = t.backward(loss).unwrap().for_store(&store);
        assert_eq!(g.0[0].data(), &[2., 4., 6.]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let wv = t.param(&store, w);
        let h = t.matmul(&x, &wv).unwrap();
        let s = t.sigmoid(&h);
        let loss = t.sum(&s);
        let g = t.backward(loss).unwrap().for_store(&store);
        assert_eq!(g.0[0].data(), &[0.25]);
    }

    #[test]
    fn off_path_parameters_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::vector(vec![1.0]));
        store.add("unused", Tensor::vector(vec![5.0, 6.0]));
        let mut t = Tape::new();
        let u = t.param(&store, used);
        let loss = t.sum(&u);
        let g = t.backward(loss).unwrap().for_store(&store);
        assert_eq!(g.0[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(3.0));
        let mut t = Tape::new();
        let a = t.param(&store, p);
        let b = t.param(&store, p);
        assert_eq!(a, b);
        let prod = t.mul(&a, &b).unwrap();
        let g = t.backward(prod).unwrap().for_store(&store);
        assert_eq!(g.0[0].data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(Error::Tape(_))));

        let mut other = Tape::new();
        let s = other.constant(Tensor::scalar(1.0));
        assert!(matches!(t.backward(s), Err(Error::Tape(_))));
    }
}
