//! Dynamically recorded reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value; [`Tape::backward`]
//! walks the nodes in reverse recording order. Parameters are borrowed from a
//! [`ParamStore`] rather than copied, and embedding lookups produce sparse
//! row gradients.

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, SeqLayout};
use super::{gemm, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
pub trait BackwardOp<T: Scalar>: Send {
    /// Returns one gradient per input (in input order); `None` where the
    /// input does not need one.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    MatMul { ta: bool, tb: bool, m: usize, k: usize, n: usize },
    AddBias,
    Add,
    Sub,
    Mul,
    Scale(T),
    Exp,
    Silu,
    Softplus,
    Gelu,
    Fourier,
    CausalConv { k: usize, seq_len: usize },
    RmsNorm { inv: Vec<T> },
    LayerNorm { xhat: Vec<T>, inv: Vec<T> },
    SliceCols { start: usize },
    ConcatCols,
    Attention { heads: usize, layout: SeqLayout, probs: Vec<T> },
    MeanPool { layout: SeqLayout },
    Gather { table: ParamId, indices: Vec<usize> },
    SumAll,
    MeanAll,
    Custom(Box<dyn BackwardOp<T>>),
}

struct Node<'p, T: Scalar> {
    value: Value<'p, T>,
    op: Op<T>,
    parents: Vec<Var>,
    needs_grad: bool,
}

/// Gradient of one parameter produced by a single backward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad<T> {
    Dense(Vec<T>),
    /// Sparse row gradients of a `rows × cols` table.
    Rows { cols: usize, rows: BTreeMap<usize, Vec<T>> },
}

impl<T: Scalar> ParamGrad<T> {
    pub fn to_dense(&self, numel: usize) -> Vec<T> {
        let mut out = vec![T::zero(); numel];
        self.add_into(&mut out);
        out
    }

    pub fn add_into(&self, dst: &mut [T]) {
        match self {
            ParamGrad::Dense(g) => dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v),
            ParamGrad::Rows { cols, rows } => {
                for (&r, g) in rows {
                    dst[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: BTreeMap<ParamId, ParamGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node, if it received one.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ParamGrad<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

/// Dense per-parameter gradient sums, accumulated in call order.
#[derive(Clone, Debug)]
pub struct GradAccum<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradAccum<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn add_param(&mut self, store: &ParamStore<T>, id: ParamId, g: &ParamGrad<T>) {
        let slot = self.grads[id.0].get_or_insert_with(|| vec![T::zero(); store.get(id).numel()]);
        g.add_into(slot);
    }

    pub fn add(&mut self, store: &ParamStore<T>, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            self.add_param(store, id, g);
        }
    }

    pub fn merge(&mut self, other: &GradAccum<T>) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }
}

fn matrix(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, shape, &[0, 0])),
    }
}

/// Operation recorder. Single-threaded; one tape per forward pass.
pub struct Tape<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    trainable: Vec<bool>,
    nodes: RefCell<Vec<Node<'p, T>>>,
    bound: RefCell<HashMap<ParamId, Var>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Tape whose parameters all receive gradients.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self::with_trainable(store, vec![true; store.len()])
    }

    /// Tape for inference: parameters are bound as constants.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self::with_trainable(store, vec![false; store.len()])
    }

    pub fn with_trainable(store: &'p ParamStore<T>, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len());
        Self {
            store: Some(store),
            trainable,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    /// Tape without parameters, for free-standing computations.
    pub fn standalone() -> Self {
        Self {
            store: None,
            trainable: Vec::new(),
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.get())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.value(v).clone()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Value<'p, T>, op: Op<T>, parents: Vec<Var>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn derived(&self, value: Tensor<T>, op: Op<T>, parents: Vec<Var>) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push(Value::Owned(value), op, parents, needs)
    }

    pub fn input(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Value::Owned(t), Op::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.push(
            Value::Borrowed(store.get(id)),
            Op::Param(id),
            Vec::new(),
            self.trainable[id.0],
        );
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = {
            let av = self.value(a);
            let bv = self.value(b);
            let (ar, ac) = matrix(av.shape(), "matmul")?;
            let (br, bc) = matrix(bv.shape(), "matmul")?;
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if tb { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(Error::dim("matmul", av.shape(), bv.shape()));
            }
            let mut c = vec![T::zero(); m * n];
            gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut c, false);
            (Tensor::new([m, n], c)?, m, k, n)
        };
        let (t, m, k, n) = out;
        Ok(self.derived(t, Op::MatMul { ta, tb, m, k, n }, vec![a, b]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `x W (+ bias)` with `W: in × out`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        {
            let xs = self.shape(x);
            let ws = self.shape(w);
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
                return Err(Error::dim("linear", &xs, &ws));
            }
        }
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Adds a length-`c` vector to every row of an `r × c` matrix.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let bv = self.value(b);
            let c = xv.cols();
            if bv.numel() != c {
                return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
            }
            let mut d = xv.data().to_vec();
            for row in d.chunks_mut(c) {
                row.iter_mut().zip(bv.data()).for_each(|(v, &bb)| *v += bb);
            }
            Tensor::new(xv.shape().to_vec(), d)?
        };
        Ok(self.derived(out, Op::AddBias, vec![x, b]))
    }

    fn zip_op(&self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let out = {
            let av = self.value(a);
            let bv = self.value(b);
            if av.shape() != bv.shape() {
                return Err(Error::dim(name, av.shape(), bv.shape()));
            }
            let d = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), d)?
        };
        Ok(self.derived(out, op, vec![a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    fn map_op(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = {
            let xv = self.value(x);
            let d = xv.data().iter().map(|&v| f(v)).collect();
            Tensor::new(xv.shape().to_vec(), d).expect("same shape")
        };
        self.derived(out, op, vec![x])
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        self.map_op(x, Op::Scale(c), |v| v * c)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.map_op(x, Op::Exp, |v| v.exp())
    }

    pub fn silu(&self, x: Var) -> Var {
        self.map_op(x, Op::Silu, kernels::silu)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.map_op(x, Op::Softplus, kernels::softplus)
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.map_op(x, Op::Gelu, kernels::gelu)
    }

    /// `x: rows × 1` (or `[rows]`), `freqs, phases: [F]` → `rows × 2F`.
    pub fn fourier(&self, x: Var, freqs: Var, phases: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let fv = self.value(freqs);
            let pv = self.value(phases);
            if fv.numel() != pv.numel() || fv.numel() == 0 {
                return Err(Error::dim("fourier", fv.shape(), pv.shape()));
            }
            if xv.cols() != 1 && xv.shape().len() != 1 {
                return Err(Error::dim("fourier", xv.shape(), &[xv.rows(), 1]));
            }
            let rows = xv.numel();
            let d = kernels::fourier(xv.data(), fv.data(), pv.data());
            Tensor::new([rows, 2 * fv.numel()], d)?
        };
        Ok(self.derived(out, Op::Fourier, vec![x, freqs, phases]))
    }

    /// Depthwise causal convolution; `kernels: d × k`.
    pub fn causal_conv(&self, x: Var, kernels: Var, seq_len: usize) -> Result<Var> {
        let (out, k) = {
            let xv = self.value(x);
            let kv = self.value(kernels);
            let (rows, d) = matrix(xv.shape(), "causal_conv")?;
            let (kd, k) = matrix(kv.shape(), "causal_conv")?;
            if kd != d || k == 0 || seq_len == 0 || rows % seq_len != 0 {
                return Err(Error::dim("causal_conv", xv.shape(), kv.shape()));
            }
            let y = kernels::causal_conv(xv.data(), d, kv.data(), k, seq_len);
            (Tensor::new([rows, d], y)?, k)
        };
        Ok(self.derived(out, Op::CausalConv { k, seq_len }, vec![x, kernels]))
    }

    pub fn rmsnorm(&self, x: Var, gain: Var) -> Result<Var> {
        let (out, inv) = {
            let xv = self.value(x);
            let gv = self.value(gain);
            if xv.cols() != gv.numel() {
                return Err(Error::dim("rmsnorm", xv.shape(), gv.shape()));
            }
            let (y, inv) = kernels::rmsnorm(xv.data(), gv.data());
            (Tensor::new(xv.shape().to_vec(), y)?, inv)
        };
        Ok(self.derived(out, Op::RmsNorm { inv }, vec![x, gain]))
    }

    pub fn layernorm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, xhat, inv) = {
            let xv = self.value(x);
            let gv = self.value(gain);
            let bv = self.value(bias);
            if xv.cols() != gv.numel() || gv.numel() != bv.numel() {
                return Err(Error::dim("layernorm", xv.shape(), gv.shape()));
            }
            let (y, xhat, inv) = kernels::layernorm(xv.data(), gv.data(), bv.data());
            (Tensor::new(xv.shape().to_vec(), y)?, xhat, inv)
        };
        Ok(self.derived(out, Op::LayerNorm { xhat, inv }, vec![x, gain, bias]))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (rows, cols) = matrix(xv.shape(), "slice_cols")?;
            if start + len > cols {
                return Err(Error::dim("slice_cols", xv.shape(), &[start, len]));
            }
            let mut d = Vec::with_capacity(rows * len);
            for r in 0..rows {
                d.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
            }
            Tensor::new([rows, len], d)?
        };
        Ok(self.derived(out, Op::SliceCols { start }, vec![x]))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let (rows, _) = matrix(vals[0].shape(), "concat_cols")?;
            let mut total = 0;
            for v in &vals {
                let (r, c) = matrix(v.shape(), "concat_cols")?;
                if r != rows {
                    return Err(Error::dim("concat_cols", vals[0].shape(), v.shape()));
                }
                total += c;
            }
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    d.extend_from_slice(v.row(r));
                }
            }
            Tensor::new([rows, total], d)?
        };
        Ok(self.derived(out, Op::ConcatCols, parts.to_vec()))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, layout: &SeqLayout) -> Result<Var> {
        let (out, probs) = {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            let (rows, d) = matrix(qv.shape(), "attention")?;
            if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
                return Err(Error::dim("attention", qv.shape(), kv.shape()));
            }
            if heads == 0 || d % heads != 0 || rows != layout.rows() {
                return Err(Error::dim("attention", qv.shape(), &[layout.rows(), heads]));
            }
            if layout.lens.iter().any(|&l| l == 0 || l > layout.seq_len) {
                return Err(Error::Input("attention: sequence lengths must be in 1..=seq_len".into()));
            }
            let (o, p) = kernels::attention(qv.data(), kv.data(), vv.data(), d, heads, layout);
            (Tensor::new([rows, d], o)?, p)
        };
        Ok(self.derived(
            out,
            Op::Attention {
                heads,
                layout: layout.clone(),
                probs,
            },
            vec![q, k, v],
        ))
    }

    pub fn mean_pool(&self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (rows, d) = matrix(xv.shape(), "mean_pool")?;
            if rows != layout.rows() {
                return Err(Error::dim("mean_pool", xv.shape(), &[layout.rows(), d]));
            }
            Tensor::new([layout.batch(), d], kernels::mean_pool(xv.data(), d, layout))?
        };
        Ok(self.derived(
            out,
            Op::MeanPool {
                layout: layout.clone(),
            },
            vec![x],
        ))
    }

    /// Row lookup into a parameter table (`rows × cols`).
    pub fn gather(&self, table: ParamId, indices: &[usize]) -> Result<Var> {
        let store = self.store.expect("tape has no parameter store");
        let t = store.get(table);
        let (n, cols) = matrix(t.shape(), "gather")?;
        let mut d = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= n {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    len: n,
                });
            }
            d.extend_from_slice(t.row(i));
        }
        let out = Tensor::new([indices.len(), cols], d)?;
        let needs = self.trainable[table.0];
        Ok(self.push(
            Value::Owned(out),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            Vec::new(),
            needs,
        ))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s = {
            let xv = self.value(x);
            xv.data().iter().copied().sum::<T>()
        };
        self.derived(Tensor::scalar(s), Op::SumAll, vec![x])
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let s = {
            let xv = self.value(x);
            xv.data().iter().copied().sum::<T>() / T::of(xv.numel().max(1) as f64)
        };
        self.derived(Tensor::scalar(s), Op::MeanAll, vec![x])
    }

    /// Records an externally computed `output` of `inputs` with its backward rule.
    pub fn custom(&self, inputs: &[Var], output: Tensor<T>, op: Box<dyn BackwardOp<T>>) -> Var {
        self.derived(output, Op::Custom(op), inputs.to_vec())
    }

    /// Reverse pass from a scalar node with seed 1.
    pub fn backward_scalar(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(Error::dim("backward", &[n], &[1]));
        }
        self.backward(&[(loss, vec![T::one()])])
    }

    /// Reverse pass seeded with explicit output gradients.
    pub fn backward(&self, seeds: &[(Var, Vec<T>)]) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            let numel = nodes[v.0].value.get().numel();
            if g.len() != numel {
                return Err(Error::dim("backward seed", &[numel], &[g.len()]));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut params: BTreeMap<ParamId, ParamGrad<T>> = BTreeMap::new();

        for id in (0..nodes.len()).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let out = node.value.get();
            let pv = |i: usize| nodes[node.parents[i].0].value.get();
            let pn = |i: usize| nodes[node.parents[i].0].needs_grad;
            let mut outs: Vec<(usize, Vec<T>)> = Vec::new();
            let mut keep = None;
            let mut send = |i: usize, d: Vec<T>| outs.push((i, d));
            match &node.op {
                Op::Leaf => keep = Some(g),
                Op::Param(pid) => {
                    merge_param(&mut params, *pid, ParamGrad::Dense(g.clone()));
                    keep = Some(g);
                }
                Op::MatMul { ta, tb, m, k, n } => {
                    let (a, b) = (pv(0), pv(1));
                    if pn(0) {
                        let mut da = vec![T::zero(); m * k];
                        if !*ta {
                            // dA (m×k) = dC · op(B)^T
                            gemm(*m, *n, *k, &g, false, b.data(), !*tb, &mut da, false);
                        } else {
                            // A stored k×m: dA = op(B) · dC^T
                            gemm(*k, *n, *m, b.data(), *tb, &g, true, &mut da, false);
                        }
                        send(0, da);
                    }
                    if pn(1) {
                        let mut db = vec![T::zero(); k * n];
                        if !*tb {
                            // dB (k×n) = op(A)^T · dC
                            gemm(*k, *m, *n, a.data(), !*ta, &g, false, &mut db, false);
                        } else {
                            // B stored n×k: dB = dC^T · op(A)
                            gemm(*n, *m, *k, &g, true, a.data(), *ta, &mut db, false);
                        }
                        send(1, db);
                    }
                }
                Op::AddBias => {
                    if pn(1) {
                        let c = pv(1).numel();
                        let mut db = vec![T::zero(); c];
                        for row in g.chunks(c) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        send(1, db);
                    }
                    send(0, g);
                }
                Op::Add => {
                    send(1, g.clone());
                    send(0, g);
                }
                Op::Sub => {
                    send(1, g.iter().map(|&v| -v).collect());
                    send(0, g);
                }
                Op::Mul => {
                    let (a, b) = (pv(0), pv(1));
                    if pn(0) {
                        send(0, g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect());
                    }
                    if pn(1) {
                        send(1, g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect());
                    }
                }
                Op::Scale(c) => send(0, g.iter().map(|&v| v * *c).collect()),
                Op::Exp => send(0, g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect()),
                Op::Silu => send(
                    0,
                    g.iter()
                        .zip(pv(0).data())
                        .map(|(&gv, &x)| gv * kernels::silu_grad(x))
                        .collect(),
                ),
                Op::Softplus => send(
                    0,
                    g.iter()
                        .zip(pv(0).data())
                        .map(|(&gv, &x)| gv * kernels::sigmoid(x))
                        .collect(),
                ),
                Op::Gelu => send(
                    0,
                    g.iter()
                        .zip(pv(0).data())
                        .map(|(&gv, &x)| gv * kernels::gelu_grad(x))
                        .collect(),
                ),
                Op::Fourier => {
                    let (dx, df, dp) = kernels::fourier_backward(pv(0).data(), pv(1).data(), pv(2).data(), &g);
                    send(0, dx);
                    send(1, df);
                    send(2, dp);
                }
                Op::CausalConv { k, seq_len } => {
                    let x = pv(0);
                    let d = x.cols();
                    let (dx, dk) = kernels::causal_conv_backward(x.data(), d, pv(1).data(), *k, *seq_len, &g);
                    send(0, dx);
                    send(1, dk);
                }
                Op::RmsNorm { inv } => {
                    let (dx, dg) = kernels::rmsnorm_backward(pv(0).data(), pv(1).data(), inv, &g);
                    send(0, dx);
                    send(1, dg);
                }
                Op::LayerNorm { xhat, inv } => {
                    let (dx, dg, db) = kernels::layernorm_backward(xhat, pv(1).data(), inv, &g);
                    send(0, dx);
                    send(1, dg);
                    send(2, db);
                }
                Op::SliceCols { start } => {
                    let x = pv(0);
                    let cols = x.cols();
                    let len = out.cols();
                    let mut dx = vec![T::zero(); x.numel()];
                    for (r, row) in g.chunks(len).enumerate() {
                        dx[r * cols + start..r * cols + start + len].copy_from_slice(row);
                    }
                    send(0, dx);
                }
                Op::ConcatCols => {
                    let total = out.cols();
                    let mut off = 0;
                    for i in 0..node.parents.len() {
                        let c = pv(i).cols();
                        if pn(i) {
                            let mut d = Vec::with_capacity(pv(i).numel());
                            for row in g.chunks(total) {
                                d.extend_from_slice(&row[off..off + c]);
                            }
                            send(i, d);
                        }
                        off += c;
                    }
                }
                Op::Attention { heads, layout, probs } => {
                    let (q, k, v) = (pv(0), pv(1), pv(2));
                    let (dq, dk, dv) = kernels::attention_backward(
                        q.data(),
                        k.data(),
                        v.data(),
                        probs,
                        q.cols(),
                        *heads,
                        layout,
                        &g,
                    );
                    send(0, dq);
                    send(1, dk);
                    send(2, dv);
                }
                Op::MeanPool { layout } => {
                    send(0, kernels::mean_pool_backward(&g, out.cols(), layout));
                }
                Op::Gather { table, indices } => {
                    let cols = out.cols();
                    let mut rows: BTreeMap<usize, Vec<T>> = BTreeMap::new();
                    for (r, &i) in indices.iter().enumerate() {
                        let e = rows.entry(i).or_insert_with(|| vec![T::zero(); cols]);
                        e.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(d, &v)| *d += v);
                    }
                    merge_param(&mut params, *table, ParamGrad::Rows { cols, rows });
                }
                Op::SumAll => {
                    let n = pv(0).numel();
                    send(0, vec![g[0]; n]);
                }
                Op::MeanAll => {
                    let n = pv(0).numel();
                    send(0, vec![g[0] / T::of(n.max(1) as f64); n]);
                }
                Op::Custom(op) => {
                    let inputs: Vec<&Tensor<T>> = (0..node.parents.len()).map(pv).collect();
                    let needs: Vec<bool> = (0..node.parents.len()).map(pn).collect();
                    let ds = op.backward(&inputs, out, &g, &needs);
                    for (i, d) in ds.into_iter().enumerate() {
                        if let Some(d) = d {
                            send(i, d);
                        }
                    }
                }
            }
            for (i, d) in outs {
                let p = node.parents[i].0;
                if nodes[p].needs_grad {
                    accumulate(&mut grads[p], &d);
                }
            }
            grads[id] = keep;
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(s) => s.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn merge_param<T: Scalar>(params: &mut BTreeMap<ParamId, ParamGrad<T>>, id: ParamId, g: ParamGrad<T>) {
    use std::collections::btree_map::Entry;
    match params.entry(id) {
        Entry::Vacant(e) => {
            e.insert(g);
        }
        Entry::Occupied(mut e) => {
            let cur = e.get_mut();
            match (cur, g) {
                (ParamGrad::Dense(d), other) => other.add_into(d),
                (ParamGrad::Rows { cols, rows }, ParamGrad::Rows { rows: more, .. }) => {
                    let c = *cols;
                    for (r, v) in more {
                        let e = rows.entry(r).or_insert_with(|| vec![T::zero(); c]);
                        e.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                    }
                }
                (cur @ ParamGrad::Rows { .. }, ParamGrad::Dense(mut d)) => {
                    cur.add_into(&mut d);
                    *cur = ParamGrad::Dense(d);
                }
            }
        }
    }
}
