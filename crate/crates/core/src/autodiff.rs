//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Leaves are
//! either constants or parameters tagged with a [`ParamId`]; calling
//! [`Tape::backward`] on a scalar returns the gradient of that scalar with
//! respect to every parameter leaf it depends on. A tape supports a single
//! backward pass and is rebuilt for every training step.
//!
//! Besides the usual arithmetic the tape provides the two quantization
//! helpers vector-quantized models need: [`Tape::stop_gradient`] and
//! [`Tape::straight_through`].
//!
//! The gradient those helpers produce is the gradient of the graph with
//! every detached quantity held constant. [`Tape::recording`] and
//! [`Tape::replaying`] make that function evaluable: a replaying tape
//! substitutes the recorded detached values, so finite differences taken
//! on it can be compared against [`Tape::backward`].

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => self.data.len(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn reshaped(&self, shape: Vec<usize>) -> Self {
        Self {
            shape,
            data: self.data.clone(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    // A is stored as (m x k) or, when transposed, as (k x m).
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every stride pair addresses a buffer of exactly the stated
    // element count, which callers check through tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fixed sparse linear map `out[o] = sum w * in[i]` over its entries.
///
/// Framing (with padding) and overlap-add are both instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    in_len: usize,
    out_len: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl SparseMap {
    /// Entries are `(out_index, in_index, weight)`.
    pub fn new(in_len: usize, out_len: usize, entries: Vec<(u32, u32, f64)>) -> Result<Self> {
        if let Some(&(o, i, _)) = entries
            .iter()
            .find(|&&(o, i, _)| o as usize >= out_len || i as usize >= in_len)
        {
            return Err(Error::arg(format!(
                "sparse map entry ({o}, {i}) outside {out_len}x{in_len}"
            )));
        }
        Ok(Self {
            in_len,
            out_len,
            entries,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_len];
        for &(o, i, w) in &self.entries {
            out[o as usize] += w * input[i as usize];
        }
        out
    }

    fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for &(o, i, w) in &self.entries {
            grad_in[i as usize] += w * grad_out[o as usize];
        }
    }
}

/// Index of a trainable parameter in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Square(Var),
    Sqrt(Var),
    Ln(Var),
    Abs(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Mse(Var, Var),
    L2NormRows(Var),
    ScaleRows(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    LinearMap(Var, Arc<SparseMap>),
    Reshape(Var),
    StopGradient,
    StraightThrough(Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation record; see the module documentation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    detached: RefCell<Detached>,
}

#[derive(Default)]
enum Detached {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.by_param.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.by_param.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that remembers every detached value it produces.
    pub fn recording() -> Self {
        Self {
            detached: RefCell::new(Detached::Record(Vec::new())),
            ..Self::default()
        }
    }

    /// A tape that reuses `values` from [`Tape::take_detached`], in order,
    /// for its detached quantities. A value whose shape no longer fits is
    /// recomputed instead.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Self {
            detached: RefCell::new(Detached::Replay(values, 0)),
            ..Self::default()
        }
    }

    /// The values recorded so far (empty unless recording).
    pub fn take_detached(&self) -> Vec<Tensor> {
        match &mut *self.detached.borrow_mut() {
            Detached::Record(v) => std::mem::take(v),
            _ => Vec::new(),
        }
    }

    fn detached_value(&self, fresh: Tensor) -> Tensor {
        match &mut *self.detached.borrow_mut() {
            Detached::Off => fresh,
            Detached::Record(v) => {
                v.push(fresh.clone());
                fresh
            }
            Detached::Replay(v, i) => {
                let out = match v.get(*i) {
                    Some(t) if t.shape == fresh.shape => t.clone(),
                    _ => fresh,
                };
                *i += 1;
                out
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_checked(&self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", &av)?;
        let (k2, n) = matrix_dims("matmul", &bv)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &av.data, false, &bv.data, false, &mut out, 0.0);
        let ng = self.grad_flag(&[a, b]);
        self.push_checked("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), ng)
    }

    /// `x W + b` with `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = matrix_dims("affine", &xv)?;
        let (k2, n) = matrix_dims("affine", &wv)?;
        if k != k2 || bv.numel() != n {
            return Err(Error::shape(
                "affine",
                format!("x [{m},{k}], W [{k2},{n}], b {:?}", bv.shape),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&bv.data);
        }
        gemm(m, k, n, &xv.data, false, &wv.data, false, &mut out, 1.0);
        let ng = self.grad_flag(&[x, w, b]);
        self.push_checked("affine", Tensor { shape: vec![m, n], data: out }, Op::Affine(x, w, b), ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", &av, &bv)?;
        let ng = self.grad_flag(&[a, b]);
        self.push_checked("add", av.zip_map(&bv, |x, y| x + y), Op::Add(a, b), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", &av, &bv)?;
        let ng = self.grad_flag(&[a, b]);
        self.push_checked("sub", av.zip_map(&bv, |x, y| x - y), Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", &av, &bv)?;
        let ng = self.grad_flag(&[a, b]);
        self.push_checked("mul", av.zip_map(&bv, |x, y| x * y), Op::Mul(a, b), ng)
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let ng = self.grad_flag(&[x]);
        self.push_checked("scale", xv.map(|v| v * c), Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let ng = self.grad_flag(&[x]);
        self.push_checked("add_scalar", xv.map(|v| v + c), Op::AddScalar(x), ng)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let ng = self.grad_flag(&[x]);
        self.push_checked("tanh", xv.map(f64::tanh), Op::Tanh(x), ng)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let ng = self.grad_flag(&[x]);
        self.push_checked("square", xv.map(|v| v * v), Op::Square(x), ng)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let ng = self.grad_flag(&[x]);
        self.push_checked("sqrt", xv.map(f64::sqrt), Op::Sqrt(x), ng)
    }

    pub fn ln(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let ng = self.grad_flag(&[x]);
        self.push_checked("ln", xv.map(f64::ln), Op::Ln(x), ng)
    }

    /// Absolute value; the gradient at zero is taken as zero.
    pub fn abs(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let ng = self.grad_flag(&[x]);
        self.push_checked("abs", xv.map(f64::abs), Op::Abs(x), ng)
    }

    pub fn recip(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let ng = self.grad_flag(&[x]);
        self.push_checked("recip", xv.map(|v| 1.0 / v), Op::Recip(x), ng)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let ng = self.grad_flag(&[x]);
        self.push_checked("sum", Tensor::scalar(xv.data.iter().sum()), Op::Sum(x), ng)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel() as f64;
        let ng = self.grad_flag(&[x]);
        self.push_checked("mean", Tensor::scalar(xv.data.iter().sum::<f64>() / n), Op::Mean(x), ng)
    }

    /// Mean of a matrix over rows (`axis = 0`, giving one value per column)
    /// or over columns (`axis = 1`, one value per row).
    pub fn mean_over_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = matrix_dims("mean_over_axis", &xv)?;
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; n];
                for r in 0..m {
                    for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                        *a += v;
                    }
                }
                acc.iter().map(|a| a / m as f64).collect()
            }
            1 => (0..m).map(|r| xv.row(r).iter().sum::<f64>() / n as f64).collect(),
            _ => return Err(Error::shape("mean_over_axis", format!("axis {axis} of a matrix"))),
        };
        let ng = self.grad_flag(&[x]);
        self.push_checked("mean_over_axis", Tensor::vector(out), Op::MeanAxis(x, axis), ng)
    }

    /// Mean squared difference.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mse", &av, &bv)?;
        let n = av.numel() as f64;
        let v: f64 = av.data.iter().zip(&bv.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let ng = self.grad_flag(&[a, b]);
        self.push_checked("mse", Tensor::scalar(v), Op::Mse(a, b), ng)
    }

    /// Euclidean norm of every row; the gradient at a zero row is zero.
    pub fn l2_norm_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, _) = matrix_dims("l2_norm_rows", &xv)?;
        let out = (0..m).map(|r| xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let ng = self.grad_flag(&[x]);
        self.push_checked("l2_norm_rows", Tensor::vector(out), Op::L2NormRows(x), ng)
    }

    /// Multiplies row `i` of `x: [m, n]` by `g[i]`.
    pub fn scale_rows(&self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        let (m, n) = matrix_dims("scale_rows", &xv)?;
        if gv.numel() != m {
            return Err(Error::shape("scale_rows", format!("{m} rows, {} gains", gv.numel())));
        }
        let mut out = xv.data.clone();
        for (r, chunk) in out.chunks_mut(n.max(1)).enumerate() {
            let gain = gv.data[r];
            chunk.iter_mut().for_each(|v| *v *= gain);
        }
        let ng = self.grad_flag(&[x, g]);
        self.push_checked("scale_rows", Tensor { shape: vec![m, n], data: out }, Op::ScaleRows(x, g), ng)
    }

    /// Stacks matrices with equal column counts (or vectors) along rows.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = &values[0];
        let vector = first.shape.len() == 1;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &values {
            if (v.shape.len() == 1) != vector || (!vector && v.cols() != cols) {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", first.shape, v.shape)));
            }
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        let shape = if vector { vec![data.len()] } else { vec![rows, cols] };
        let ng = self.grad_flag(parts);
        self.push_checked("concat", Tensor { shape, data }, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Selects rows of `x: [K, d]` by index, giving `[indices.len(), d]`.
    pub fn gather_rows(&self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (k, d) = matrix_dims("gather_rows", &xv)?;
        if let Some(bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {k}")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            data.extend_from_slice(xv.row(i));
        }
        let ng = self.grad_flag(&[x]);
        let shape = vec![indices.len(), d];
        self.push_checked("gather_rows", Tensor { shape, data }, Op::GatherRows(x, Rc::new(indices)), ng)
    }

    pub fn linear_map(&self, x: Var, map: Arc<SparseMap>, out_shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != map.in_len || out_shape.iter().product::<usize>() != map.out_len {
            return Err(Error::shape(
                "linear_map",
                format!(
                    "map {}->{} applied to {:?} giving {:?}",
                    map.in_len, map.out_len, xv.shape, out_shape
                ),
            ));
        }
        let data = map.apply(&xv.data);
        let ng = self.grad_flag(&[x]);
        let t = Tensor { shape: out_shape.to_vec(), data };
        self.push_checked("linear_map", t, Op::LinearMap(x, map), ng)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(Error::shape("reshape", format!("{:?} to {shape:?}", xv.shape)));
        }
        let ng = self.grad_flag(&[x]);
        Ok(self.push(xv.reshaped(shape.to_vec()), Op::Reshape(x), ng))
    }

    /// Identity in the forward pass; blocks all gradient.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let xv = self.detached_value((*self.value(x)).clone());
        self.push(xv, Op::StopGradient, false)
    }

    /// Forward value is exactly `quantized`; the backward pass routes the
    /// incoming gradient unchanged to `continuous`. Equivalent to
    /// `continuous + stop_gradient(quantized - continuous)`.
    pub fn straight_through(&self, continuous: Var, quantized: Var) -> Result<Var> {
        let (cv, qv) = (self.value(continuous), self.value(quantized));
        same_shape("straight_through", &cv, &qv)?;
        let ng = self.grad_flag(&[continuous]);
        if matches!(*self.detached.borrow(), Detached::Off) {
            return Ok(self.push((*qv).clone(), Op::StraightThrough(continuous), ng));
        }
        let offset = self.detached_value(qv.zip_map(&cv, |q, c| q - c));
        let value = cv.zip_map(&offset, |c, o| c + o);
        self.push_checked("straight_through", value, Op::StraightThrough(continuous), ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            self.consumed.set(false);
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.0].value.shape),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&nodes[loss.0].value.shape, 1.0));
        let mut out = Gradients::default();

        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, delta: Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let wants = |v: Var| nodes[v.0].needs_grad;

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant | Op::StopGradient => {}
                Op::Param(pid) => match out.by_param.get_mut(pid) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert(*pid, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (av.shape[0], av.shape[1]);
                    let n = bv.shape[1];
                    if wants(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &g.data, false, &bv.data, true, &mut ga, 0.0);
                        accumulate(&mut grads, *a, Tensor { shape: vec![m, k], data: ga });
                    }
                    if wants(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, &av.data, true, &g.data, false, &mut gb, 0.0);
                        accumulate(&mut grads, *b, Tensor { shape: vec![k, n], data: gb });
                    }
                }
                Op::Affine(x, w, b) => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (m, k) = (xv.shape[0], xv.shape[1]);
                    let n = wv.shape[1];
                    if wants(*x) {
                        let mut gx = vec![0.0; m * k];
                        gemm(m, n, k, &g.data, false, &wv.data, true, &mut gx, 0.0);
                        accumulate(&mut grads, *x, Tensor { shape: vec![m, k], data: gx });
                    }
                    if wants(*w) {
                        let mut gw = vec![0.0; k * n];
                        gemm(k, m, n, &xv.data, true, &g.data, false, &mut gw, 0.0);
                        accumulate(&mut grads, *w, Tensor { shape: vec![k, n], data: gw });
                    }
                    if wants(*b) {
                        let mut gb = vec![0.0; n];
                        for r in 0..m {
                            for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        let shape = nodes[b.0].value.shape.clone();
                        accumulate(&mut grads, *b, Tensor { shape, data: gb });
                    }
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::AddScalar(x) | Op::StraightThrough(x) => accumulate(&mut grads, *x, g),
                Op::Reshape(x) => {
                    let shape = nodes[x.0].value.shape.clone();
                    accumulate(&mut grads, *x, g.reshaped(shape));
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    accumulate(&mut grads, *x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Square(x) => {
                    let xv = &nodes[x.0].value;
                    accumulate(&mut grads, *x, g.zip_map(xv, |gv, v| 2.0 * gv * v));
                }
                Op::Sqrt(x) => {
                    let y = &node.value;
                    accumulate(&mut grads, *x, g.zip_map(y, |gv, yv| {
                        if yv > 0.0 { 0.5 * gv / yv } else { 0.0 }
                    }));
                }
                Op::Ln(x) => {
                    let xv = &nodes[x.0].value;
                    accumulate(&mut grads, *x, g.zip_map(xv, |gv, v| gv / v));
                }
                Op::Abs(x) => {
                    let xv = &nodes[x.0].value;
                    accumulate(&mut grads, *x, g.zip_map(xv, |gv, v| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }));
                }
                Op::Recip(x) => {
                    let y = &node.value;
                    accumulate(&mut grads, *x, g.zip_map(y, |gv, yv| -gv * yv * yv));
                }
                Op::Sum(x) => {
                    let shape = nodes[x.0].value.shape.clone();
                    accumulate(&mut grads, *x, Tensor::full(&shape, g.data[0]));
                }
                Op::Mean(x) => {
                    let xv = &nodes[x.0].value;
                    let v = g.data[0] / xv.numel() as f64;
                    accumulate(&mut grads, *x, Tensor::full(&xv.shape, v));
                }
                Op::MeanAxis(x, axis) => {
                    let xv = &nodes[x.0].value;
                    let (m, n) = (xv.shape[0], xv.shape[1]);
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] = if *axis == 0 {
                                g.data[c] / m as f64
                            } else {
                                g.data[r] / n as f64
                            };
                        }
                    }
                    accumulate(&mut grads, *x, Tensor { shape: vec![m, n], data: gx });
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let c = 2.0 * g.data[0] / av.numel() as f64;
                    let diff = av.zip_map(bv, |x, y| c * (x - y));
                    if wants(*b) {
                        accumulate(&mut grads, *b, diff.map(|v| -v));
                    }
                    accumulate(&mut grads, *a, diff);
                }
                Op::L2NormRows(x) => {
                    let xv = &nodes[x.0].value;
                    let n = xv.shape[1];
                    let norms = &node.value;
                    let mut gx = vec![0.0; xv.numel()];
                    for (r, chunk) in gx.chunks_mut(n.max(1)).enumerate() {
                        let norm = norms.data[r];
                        if norm > 0.0 {
                            let s = g.data[r] / norm;
                            for (o, v) in chunk.iter_mut().zip(xv.row(r)) {
                                *o = s * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape.clone(), data: gx });
                }
                Op::ScaleRows(x, gains) => {
                    let (xv, gv) = (&nodes[x.0].value, &nodes[gains.0].value);
                    let n = xv.shape[1];
                    if wants(*x) {
                        let mut gx = g.data.clone();
                        for (r, chunk) in gx.chunks_mut(n.max(1)).enumerate() {
                            let s = gv.data[r];
                            chunk.iter_mut().for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads, *x, Tensor { shape: xv.shape.clone(), data: gx });
                    }
                    if wants(*gains) {
                        let gg: Vec<f64> = (0..xv.shape[0])
                            .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                            .collect();
                        accumulate(&mut grads, *gains, Tensor { shape: gv.shape.clone(), data: gg });
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = &nodes[p.0].value;
                        let len = pv.numel();
                        if wants(*p) {
                            let data = g.data[offset..offset + len].to_vec();
                            accumulate(&mut grads, *p, Tensor { shape: pv.shape.clone(), data });
                        }
                        offset += len;
                    }
                }
                Op::GatherRows(x, indices) => {
                    let xv = &nodes[x.0].value;
                    let d = xv.shape[1];
                    let mut gx = vec![0.0; xv.numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, v) in gx[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape.clone(), data: gx });
                }
                Op::LinearMap(x, map) => {
                    let xv = &nodes[x.0].value;
                    let mut gx = vec![0.0; xv.numel()];
                    map.apply_transpose(&g.data, &mut gx);
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape.clone(), data: gx });
                }
            }
        }
        Ok(out)
    }
}
