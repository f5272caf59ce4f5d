use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{self, Tensor};
use super::Parameter;
use crate::error::{Error, Result};

/// Rows with a Euclidean norm below this are rejected by normalizing ops.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CosineSim {
        a: Var,
        b: Var,
        a_unit: Tensor,
        b_unit: Tensor,
        a_norms: Vec<f64>,
        b_norms: Vec<f64>,
    },
    EuclideanDist(Var, Var),
    LogSoftmax(Var),
    Gather {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    PadCols(Var),
    SliceCols(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of forward computations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] walks it once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable parameter's current value.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.value.clone(), true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(Error::shape("transpose", format!("{:?}", xv.shape())));
        }
        let out = xv.transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// `x + b` with `b` a single row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if !xv.is_matrix() || bv.numel() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for i in 0..xv.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        debug_assert_eq!(out.cols(), c);
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(Error::shape("l2_normalize", format!("{:?}", xv.shape())));
        }
        let (out, norms) = unit_rows("l2_normalize", xv)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// Pairwise cosine similarities between the rows of `a` and `b`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.cols() {
            return Err(Error::shape(
                "cosine_sim",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let (a_unit, a_norms) = unit_rows("cosine_sim", av)?;
        let (b_unit, b_norms) = unit_rows("cosine_sim", bv)?;
        let out = tensor::matmul_nt(&a_unit, &b_unit)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::CosineSim {
                a,
                b,
                a_unit,
                b_unit,
                a_norms,
                b_norms,
            },
            rg,
        ))
    }

    /// Pairwise Euclidean distances between the rows of `a` and `b`.
    pub fn euclidean_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.cols() {
            return Err(Error::shape(
                "euclidean_dist",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = distance_matrix(av, bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::EuclideanDist(a, b), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(Error::shape("log_softmax", format!("{:?}", xv.shape())));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Picks `x[r, c]` for each pair, producing a rank-1 tensor.
    pub fn gather(&mut self, x: Var, idx: Vec<(usize, usize)>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in &idx {
            if i >= r || j >= c {
                return Err(Error::shape("gather", format!("({i}, {j}) in {r}x{c}")));
            }
            data.push(xv.get(i, j));
        }
        if data.is_empty() {
            return Err(Error::shape("gather", "empty index"));
        }
        let out = Tensor::new(vec![data.len()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { x, idx }, rg))
    }

    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let out = self.value(x).select_rows(&idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SelectRows { x, idx }, rg))
    }

    /// Zero-pads rows on the right up to `width` columns.
    pub fn pad_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        if self.value(x).cols() == width {
            return Ok(x);
        }
        let out = self.value(x).pad_cols(width)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::PadCols(x), rg))
    }

    /// Keeps the first `width` columns.
    pub fn slice_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if width == c {
            return Ok(x);
        }
        if width > c || width == 0 {
            return Err(Error::shape("slice_cols", format!("{c} -> {width}")));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[..width]);
        }
        let out = Tensor::matrix(r, width, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols(x), rg))
    }

    /// Pads or truncates columns so the result has exactly `width` of them.
    pub fn fit_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        if self.value(x).cols() < width {
            self.pad_cols(x, width)
        } else {
            self.slice_cols(x, width)
        }
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.pullback(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn pullback(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, tensor::matmul_nt(g, self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    acc(*b, tensor::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                let bv = self.value(*b);
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..g.rows() {
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, hadamard(g, bv));
                acc(*b, hadamard(g, av));
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                }
                acc(*x, gx);
            }
            Op::L2Normalize { x, norms } => {
                acc(*x, unit_rows_pullback(&node.value, norms, g));
            }
            Op::CosineSim {
                a,
                b,
                a_unit,
                b_unit,
                a_norms,
                b_norms,
            } => {
                if self.requires_grad(*a) {
                    let ga_unit = tensor::matmul(g, b_unit)?;
                    acc(*a, unit_rows_pullback(a_unit, a_norms, &ga_unit));
                }
                if self.requires_grad(*b) {
                    let gb_unit = tensor::matmul_tn(g, a_unit)?;
                    acc(*b, unit_rows_pullback(b_unit, b_norms, &gb_unit));
                }
            }
            Op::EuclideanDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = &node.value;
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let dij = d.get(i, j);
                        let gij = g.get(i, j);
                        if dij == 0.0 || gij == 0.0 {
                            continue;
                        }
                        let w = gij / dij;
                        let (ar, br) = (av.row(i), bv.row(j));
                        for k in 0..ar.len() {
                            let diff = w * (ar[k] - br[k]);
                            ga.row_mut(i)[k] += diff;
                            gb.row_mut(j)[k] -= diff;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let gs: f64 = g.row(i).iter().sum();
                    for (o, &yv) in gx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *o -= libm::exp(yv) * gs;
                    }
                }
                acc(*x, gx);
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                for (k, &(i, j)) in idx.iter().enumerate() {
                    gx.data_mut()[i * c + j] += g.data()[k];
                }
                acc(*x, gx);
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, gx);
            }
            Op::PadCols(x) => {
                let w = self.value(*x).cols();
                let mut data = Vec::with_capacity(g.rows() * w);
                for i in 0..g.rows() {
                    data.extend_from_slice(&g.row(i)[..w]);
                }
                acc(*x, Tensor::matrix(g.rows(), w, data)?);
            }
            Op::SliceCols(x) => {
                let w = self.value(*x).cols();
                acc(*x, g.pad_cols(w)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.clone().reshaped(shape)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.data()[0] / xv.numel() as f64;
                acc(*x, Tensor::full(xv.shape(), gv));
            }
        }
        Ok(())
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn unit_rows(op: &'static str, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = tensor::norm(x.row(i));
        if !(n >= NORM_EPS) {
            return Err(Error::DegenerateVector { op, row: i });
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Gradient of `x / ‖x‖` per row given the unit rows and upstream `g`.
fn unit_rows_pullback(unit: &Tensor, norms: &[f64], g: &Tensor) -> Tensor {
    let mut gx = g.clone();
    for i in 0..unit.rows() {
        let u = unit.row(i);
        let proj = tensor::dot(u, g.row(i));
        for (o, &uv) in gx.row_mut(i).iter_mut().zip(u) {
            *o = (*o - uv * proj) / norms[i];
        }
    }
    gx
}

/// Direct-difference Euclidean distances; exactly zero for identical rows.
pub fn distance_matrix(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let sq = tensor::squared_distance(a.row(i), b.row(j));
            out.push(libm::sqrt(sq.max(0.0)));
        }
    }
    Tensor::matrix(n, m, out).expect("nonempty operands")
}
