//! Minimal reverse-mode differentiation engine over dense f64 matrices,
//! plus the Adam/SGD optimizers used for GCN and generator training.
//!
//! All tensors are rank-2; scalars are 1x1 matrices. A [`Tape`] records the
//! forward ops in execution order and [`Tape::backward`] replays them in
//! exact reverse, accumulating gradients additively.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FedTadError, Result};
use crate::graph::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Spmm(Rc<CsrMatrix>, usize),
    Add(usize, usize),
    /// matrix + broadcast row vector (1 x cols)
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    /// mask is pre-scaled by 1/(1-p)
    Dropout(usize, Array2<f64>),
    RowSoftmax(usize),
    Log(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    ConcatRows(Vec<usize>),
    /// pairwise cosine similarity matrix of the input rows
    CosineSim(usize),
    SelectRows(usize, Vec<usize>),
    /// out[i, 0] = x[i, cols[i]]
    GatherCols(usize, Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

const NORM_EPS: f64 = 1e-12;

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> FedTadError {
    FedTadError::ShapeMismatch {
        op,
        lhs: format!("{}x{}", a.0, a.1),
        rhs: format!("{}x{}", b.0, b.1),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        let op_name = match &op {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Spmm(..) => "spmm",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Dropout(..) => "dropout",
            Op::RowSoftmax(..) => "row_softmax",
            Op::Log(..) => "log",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatRows(..) => "concat_rows",
            Op::CosineSim(..) => "cosine_sim",
            Op::SelectRows(..) => "select_rows",
            Op::GatherCols(..) => "gather_cols",
        };
        if !value.iter().all(|v| v.is_finite()) {
            return Err(FedTadError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false).expect("constant leaf")
    }

    /// Differentiable leaf (a trainable parameter or generator output probe).
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true).expect("grad leaf")
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let d = nodes[v.0].value.dim();
        d
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[[0, 0]]
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va.dim(), vb.dim()));
        }
        let out = va.dot(&vb);
        self.push(out, Op::MatMul(a.0, b.0), self.requires(&[a.0, b.0]))
    }

    pub fn spmm(&self, sparse: Rc<CsrMatrix>, x: Var) -> Result<Var> {
        let vx = self.nodes.borrow()[x.0].value.clone();
        if sparse.n_cols != vx.nrows() {
            return Err(shape_err("spmm", (sparse.n_rows, sparse.n_cols), vx.dim()));
        }
        let out = sparse.matmul_dense(&vx.view());
        let req = self.requires(&[x.0]);
        self.push(out, Op::Spmm(sparse, x.0), req)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        if va.dim() != vb.dim() {
            return Err(shape_err("add", va.dim(), vb.dim()));
        }
        self.push(va + vb, Op::Add(a.0, b.0), self.requires(&[a.0, b.0]))
    }

    /// `a + row`, broadcasting a 1xC row vector over every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[row.0].value.clone())
        };
        if vr.nrows() != 1 || va.ncols() != vr.ncols() {
            return Err(shape_err("add_row", va.dim(), vr.dim()));
        }
        let out = &va + &vr.row(0);
        self.push(out, Op::AddRow(a.0, row.0), self.requires(&[a.0, row.0]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        if va.dim() != vb.dim() {
            return Err(shape_err("sub", va.dim(), vb.dim()));
        }
        self.push(va - vb, Op::Sub(a.0, b.0), self.requires(&[a.0, b.0]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        if va.dim() != vb.dim() {
            return Err(shape_err("mul", va.dim(), vb.dim()));
        }
        self.push(va * vb, Op::Mul(a.0, b.0), self.requires(&[a.0, b.0]))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.clone();
        self.push(va * factor, Op::Scale(a.0, factor), self.requires(&[a.0]))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.mapv(|v| v.max(0.0));
        self.push(va, Op::Relu(a.0), self.requires(&[a.0]))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let va = self.nodes.borrow()[a.0]
            .value
            .mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(va, Op::Sigmoid(a.0), self.requires(&[a.0]))
    }

    /// Inverted dropout: surviving entries scaled by 1/(1-p) at train time.
    /// `p = 0` is the identity.
    pub fn dropout(&self, a: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if p == 0.0 {
            return self.scale(a, 1.0);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(FedTadError::Tensor(format!(
                "dropout probability {} outside [0, 1)",
                p
            )));
        }
        let va = self.nodes.borrow()[a.0].value.clone();
        let keep = 1.0 - p;
        let mask = Array2::from_shape_fn(va.dim(), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let out = &va * &mask;
        let req = self.requires(&[a.0]);
        self.push(out, Op::Dropout(a.0, mask), req)
    }

    pub fn row_softmax(&self, a: Var) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.clone();
        let mut out = va;
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::RowSoftmax(a.0), self.requires(&[a.0]))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.mapv(f64::ln);
        self.push(va, Op::Log(a.0), self.requires(&[a.0]))
    }

    pub fn clamp_min(&self, a: Var, min: f64) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.mapv(|v| v.max(min));
        self.push(va, Op::ClampMin(a.0, min), self.requires(&[a.0]))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.nodes.borrow()[a.0].value.sum();
        self.push(
            Array2::from_elem((1, 1), s),
            Op::Sum(a.0),
            self.requires(&[a.0]),
        )
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let m = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            va.sum() / va.len() as f64
        };
        let m = Array2::from_elem((1, 1), m);
        self.push(m, Op::Mean(a.0), self.requires(&[a.0]))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(FedTadError::Tensor("concat_rows of zero parts".into()));
        }
        let values: Vec<Array2<f64>> = {
            let nodes = self.nodes.borrow();
            parts.iter().map(|v| nodes[v.0].value.clone()).collect()
        };
        let cols = values[0].ncols();
        for v in &values {
            if v.ncols() != cols {
                return Err(shape_err("concat_rows", values[0].dim(), v.dim()));
            }
        }
        let total: usize = values.iter().map(|v| v.nrows()).sum();
        let mut out = Array2::zeros((total, cols));
        let mut offset = 0;
        for v in &values {
            out.slice_mut(ndarray::s![offset..offset + v.nrows(), ..])
                .assign(v);
            offset += v.nrows();
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let req = self.requires(&ids);
        self.push(out, Op::ConcatRows(ids), req)
    }

    /// Pairwise cosine similarity matrix of the rows of `a`, with a 1e-12
    /// guard added to the row norms.
    pub fn cosine_similarity_matrix(&self, a: Var) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.clone();
        let unit = normalized_rows(&va);
        let out = unit.dot(&unit.t());
        self.push(out, Op::CosineSim(a.0), self.requires(&[a.0]))
    }

    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.clone();
        for &r in rows {
            if r >= va.nrows() {
                return Err(FedTadError::Tensor(format!(
                    "select_rows index {} out of range for {} rows",
                    r,
                    va.nrows()
                )));
            }
        }
        let out = va.select(Axis(0), rows);
        let req = self.requires(&[a.0]);
        self.push(out, Op::SelectRows(a.0, rows.to_vec()), req)
    }

    /// out[i, 0] = a[i, cols[i]]
    pub fn gather_cols(&self, a: Var, cols: &[usize]) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.clone();
        if cols.len() != va.nrows() {
            return Err(FedTadError::Tensor(format!(
                "gather_cols: {} indices for {} rows",
                cols.len(),
                va.nrows()
            )));
        }
        let mut out = Array2::zeros((va.nrows(), 1));
        for (i, &c) in cols.iter().enumerate() {
            if c >= va.ncols() {
                return Err(FedTadError::Tensor(format!(
                    "gather_cols index {} out of range for {} cols",
                    c,
                    va.ncols()
                )));
            }
            out[[i, 0]] = va[[i, c]];
        }
        let req = self.requires(&[a.0]);
        self.push(out, Op::GatherCols(a.0, cols.to_vec()), req)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively, so
    /// a second call without a fresh tape doubles them.
    pub fn backward(&self, loss: Var) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            if nodes[loss.0].value.dim() != (1, 1) {
                return Err(FedTadError::Tensor(format!(
                    "backward requires a scalar loss, got {}x{}",
                    nodes[loss.0].value.nrows(),
                    nodes[loss.0].value.ncols()
                )));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut seeds: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        seeds[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.0).rev() {
            let g = match seeds[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[id].requires_grad {
                continue;
            }
            match nodes[id].grad.as_mut() {
                Some(acc) => *acc += &g,
                None => nodes[id].grad = Some(g.clone()),
            }
            let send = |seeds: &mut Vec<Option<Array2<f64>>>, tgt: usize, inc: Array2<f64>| {
                match seeds[tgt].as_mut() {
                    Some(acc) => *acc += &inc,
                    None => seeds[tgt] = Some(inc),
                }
            };
            match &nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&nodes[*b].value.t());
                    let db = nodes[*a].value.t().dot(&g);
                    send(&mut seeds, *a, da);
                    send(&mut seeds, *b, db);
                }
                Op::Spmm(s, x) => {
                    let dx = s.transpose().matmul_dense(&g.view());
                    send(&mut seeds, *x, dx);
                }
                Op::Add(a, b) => {
                    send(&mut seeds, *a, g.clone());
                    send(&mut seeds, *b, g);
                }
                Op::AddRow(a, r) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(&mut seeds, *a, g);
                    send(&mut seeds, *r, dr);
                }
                Op::Sub(a, b) => {
                    send(&mut seeds, *a, g.clone());
                    send(&mut seeds, *b, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &nodes[*b].value;
                    let db = &g * &nodes[*a].value;
                    send(&mut seeds, *a, da);
                    send(&mut seeds, *b, db);
                }
                Op::Scale(a, f) => send(&mut seeds, *a, g * *f),
                Op::Relu(a) => {
                    let dx = &g * &nodes[*a].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    send(&mut seeds, *a, dx);
                }
                Op::Sigmoid(a) => {
                    let s = &nodes[id].value;
                    let dx = &g * &(s * &s.mapv(|v| 1.0 - v));
                    send(&mut seeds, *a, dx);
                }
                Op::Dropout(a, mask) => send(&mut seeds, *a, &g * mask),
                Op::RowSoftmax(a) => {
                    let s = &nodes[id].value;
                    let mut dx = Array2::zeros(s.dim());
                    for i in 0..s.nrows() {
                        let srow = s.row(i);
                        let grow = g.row(i);
                        let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        for j in 0..s.ncols() {
                            dx[[i, j]] = srow[j] * (grow[j] - dot);
                        }
                    }
                    send(&mut seeds, *a, dx);
                }
                Op::Log(a) => {
                    let dx = &g / &nodes[*a].value;
                    send(&mut seeds, *a, dx);
                }
                Op::ClampMin(a, min) => {
                    let dx = &g * &nodes[*a].value.mapv(|v| if v > *min { 1.0 } else { 0.0 });
                    send(&mut seeds, *a, dx);
                }
                Op::Sum(a) => {
                    let dx = Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]]);
                    send(&mut seeds, *a, dx);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len() as f64;
                    let dx = Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]] / n);
                    send(&mut seeds, *a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let splits: Vec<(usize, usize)> = parts
                        .iter()
                        .map(|&p| {
                            let n = nodes[p].value.nrows();
                            let span = (offset, n);
                            offset += n;
                            span
                        })
                        .collect();
                    for (&p, &(start, n)) in parts.iter().zip(&splits) {
                        let dg = g.slice(ndarray::s![start..start + n, ..]).to_owned();
                        send(&mut seeds, p, dg);
                    }
                }
                Op::CosineSim(a) => {
                    let x = &nodes[*a].value;
                    let unit = normalized_rows(x);
                    // dU = (G + G^T) U, then pull back through row normalization
                    let gu = (&g + &g.t()).dot(&unit);
                    let mut dx = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let xi = x.row(i);
                        let n = xi.dot(&xi).sqrt();
                        let d = n + NORM_EPS;
                        let gui = gu.row(i);
                        let proj: f64 = xi.dot(&gui);
                        let nsafe = n.max(NORM_EPS);
                        for j in 0..x.ncols() {
                            dx[[i, j]] = gui[j] / d - xi[j] * proj / (nsafe * d * d);
                        }
                    }
                    send(&mut seeds, *a, dx);
                }
                Op::SelectRows(a, rows) => {
                    let mut dx = Array2::zeros(nodes[*a].value.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut row = dx.row_mut(r);
                        row += &g.row(i);
                    }
                    send(&mut seeds, *a, dx);
                }
                Op::GatherCols(a, cols) => {
                    let mut dx = Array2::zeros(nodes[*a].value.dim());
                    for (i, &c) in cols.iter().enumerate() {
                        dx[[i, c]] += g[[i, 0]];
                    }
                    send(&mut seeds, *a, dx);
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<Array2<f64>> {
        self.nodes.borrow()[v.0]
            .grad
            .clone()
            .ok_or_else(|| FedTadError::Tensor("gradient not populated".into()))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn normalized_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt() + NORM_EPS;
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// Which update rule to use; Adam is the default throughout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Adam,
    Sgd,
}

/// Optimizer with decoupled weight decay (applied as `w -= lr * wd * w`
/// before the adaptive update).
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
}

impl Optimizer {
    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind: OptimKind::Adam,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind: OptimKind::Sgd,
            learning_rate,
            weight_decay,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(FedTadError::Tensor(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.dim() != g.dim() {
                return Err(shape_err("optimizer_step", p.dim(), g.dim()));
            }
        }
        if self.kind == OptimKind::Adam && self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Array2::zeros(p.dim())).collect();
            self.second_moment = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if self.weight_decay > 0.0 {
                p.mapv_inplace(|w| w - lr * self.weight_decay * w);
            }
            match self.kind {
                OptimKind::Sgd => {
                    p.scaled_add(-lr, g);
                }
                OptimKind::Adam => {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
                    v.zip_mut_with(g, |vv, &gv| {
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
                    });
                    let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
                    ndarray::Zip::from(&mut *p)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|w, &mv, &vv| {
                            let mhat = mv / bc1;
                            let vhat = vv / bc2;
                            *w -= lr * mhat / (vhat.sqrt() + self.eps);
                        });
                }
            }
        }
        Ok(())
    }
}
