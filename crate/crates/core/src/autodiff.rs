//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! A [`Graph`] owns a tape of primitive applications. Every forward op
//! appends one node holding its output values; [`Var::backward`] replays the
//! tape in reverse, accumulating vector-Jacobian products into each node's
//! gradient buffer. Graphs are rebuilt per forward pass (decode lengths vary
//! sample to sample) and are confined to a single thread: `Var` is `!Send`
//! by construction.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};

/// One recorded primitive application. Input node ids always precede the
/// output node id, so the tape is topologically ordered by construction.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    MatMul { lhs: usize, rhs: usize },
    /// `lhs . rhs^T`; the layout used by every linear layer.
    MatMulNT { lhs: usize, rhs: usize },
    Tanh { input: usize },
    Sigmoid { input: usize },
    SoftmaxRows { input: usize },
    Transpose { input: usize },
    SliceCols { input: usize, start: usize },
    SliceRows { input: usize, start: usize },
    ConcatCols { inputs: Vec<usize> },
    ConcatRows { inputs: Vec<usize> },
    /// Row gather from an embedding table.
    EmbedRows { table: usize, ids: Vec<u32> },
    /// Inverted dropout; the mask holds `0` or `1/(1-p)`.
    Dropout { input: usize, mask: Vec<f64> },
    /// Sum of `-ln(probs[t, target_t])` over unmasked targets.
    NllGather { probs: usize, targets: Vec<Option<usize>> },
    Scale { input: usize, factor: f64 },
    SumAll { input: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Handle to a recording tape. Cloning shares the same tape.
#[derive(Clone, Default)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

/// A value recorded on a [`Graph`]. Cheap to clone; all clones alias the
/// same tape node.
#[derive(Clone, Debug)]
pub struct Var {
    tape: Rc<RefCell<Tape>>,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Differentiable leaves (parameters, probed inputs)
    /// receive a gradient buffer during backward; constants do not.
    pub fn leaf(&self, value: Tensor, needs_grad: bool) -> Var {
        let id = {
            let mut t = self.tape.borrow_mut();
            t.nodes.push(Node {
                op: Op::Leaf,
                value,
                grad: None,
                needs_grad,
            });
            t.nodes.len() - 1
        };
        Var {
            tape: Rc::clone(&self.tape),
            id,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    /// Column-wise concatenation of row-count-matched tensors.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, false)
    }

    /// Row-wise stacking of column-count-matched tensors.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, true)
    }

    fn concat(&self, parts: &[Var], rows: bool) -> Result<Var> {
        let op_name: &'static str = if rows { "concat_rows" } else { "concat_cols" };
        if parts.is_empty() {
            return Err(Error::shape(op_name, "at least one input", "0 inputs"));
        }
        for p in parts {
            if !Rc::ptr_eq(&p.tape, &self.tape) {
                return Err(Error::Graph(format!("{op_name}: input from a different graph")));
            }
        }
        let tape = self.tape.borrow();
        let first = &tape.nodes[parts[0].id].value;
        let (fr, fc) = (first.rows(), first.cols());
        let mut total = 0usize;
        for p in parts {
            let v = &tape.nodes[p.id].value;
            let ok = if rows { v.cols() == fc } else { v.rows() == fr };
            if !ok {
                return Err(Error::shape(
                    op_name,
                    format!("{:?}-compatible", first.shape()),
                    format!("{:?}", v.shape()),
                ));
            }
            total += if rows { v.rows() } else { v.cols() };
        }
        let (out_r, out_c) = if rows { (total, fc) } else { (fr, total) };
        let mut values = vec![0.0; out_r * out_c];
        if rows {
            let mut at = 0usize;
            for p in parts {
                let v = &tape.nodes[p.id].value;
                values[at..at + v.numel()].copy_from_slice(v.values());
                at += v.numel();
            }
        } else {
            let mut col_at = 0usize;
            for p in parts {
                let v = &tape.nodes[p.id].value;
                let c = v.cols();
                for r in 0..out_r {
                    values[r * out_c + col_at..r * out_c + col_at + c]
                        .copy_from_slice(v.row_slice(r));
                }
                col_at += c;
            }
        }
        let needs = parts.iter().any(|p| tape.nodes[p.id].needs_grad);
        drop(tape);
        let ids = parts.iter().map(|p| p.id).collect();
        let op = if rows {
            Op::ConcatRows { inputs: ids }
        } else {
            Op::ConcatCols { inputs: ids }
        };
        Ok(self.push(op, Tensor::new(vec![out_r, out_c], values)?, needs))
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        debug_assert!(
            value.values().iter().all(|v| v.is_finite()),
            "non-finite output from {op:?}"
        );
        let id = {
            let mut t = self.tape.borrow_mut();
            t.nodes.push(Node {
                op,
                value,
                grad: None,
                needs_grad,
            });
            t.nodes.len() - 1
        };
        Var {
            tape: Rc::clone(&self.tape),
            id,
        }
    }
}

impl Var {
    /// Handle to the graph this value is recorded on.
    pub fn graph(&self) -> Graph {
        Graph {
            tape: Rc::clone(&self.tape),
        }
    }

    fn check_same_tape(&self, other: &Var, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(Error::Graph(format!("{op}: operands from different graphs")))
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.borrow().nodes[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.borrow().nodes[self.id].value.cols()
    }

    pub fn value(&self) -> Tensor {
        self.tape.borrow().nodes[self.id].value.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.borrow().nodes[self.id].value.values().to_vec()
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f64> {
        let t = self.tape.borrow();
        let v = &t.nodes[self.id].value;
        if v.is_scalar() {
            Ok(v.values()[0])
        } else {
            Err(Error::shape("item", "1x1", format!("{:?}", v.shape())))
        }
    }

    /// Accumulated gradient after [`Var::backward`]; `None` when the node was
    /// not reached or does not require gradients.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.borrow().nodes[self.id].grad.clone()
    }

    /// A constant leaf on the same tape as `self`.
    pub fn constant_like(&self, value: Tensor) -> Var {
        self.graph().constant(value)
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.check_same_tape(rhs, "add")?;
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let b = &tape.nodes[rhs.id].value;
            let value = broadcast_zip("add", a, b, |x, y| x + y)?;
            (value, tape.nodes[self.id].needs_grad || tape.nodes[rhs.id].needs_grad)
        };
        Ok(self.graph().push(
            Op::Add {
                lhs: self.id,
                rhs: rhs.id,
            },
            value,
            needs,
        ))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        self.check_same_tape(rhs, "mul")?;
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let b = &tape.nodes[rhs.id].value;
            let value = broadcast_zip("mul", a, b, |x, y| x * y)?;
            (value, tape.nodes[self.id].needs_grad || tape.nodes[rhs.id].needs_grad)
        };
        Ok(self.graph().push(
            Op::Mul {
                lhs: self.id,
                rhs: rhs.id,
            },
            value,
            needs,
        ))
    }

    /// `self (m x k) . rhs (k x n)`.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.check_same_tape(rhs, "matmul")?;
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let b = &tape.nodes[rhs.id].value;
            let (m, k) = (a.rows(), a.cols());
            if b.rows() != k {
                return Err(Error::shape(
                    "matmul",
                    format!("[{k}, n] to match lhs {:?}", a.shape()),
                    format!("{:?}", b.shape()),
                ));
            }
            let n = b.cols();
            let values = mm_nn(a.values(), b.values(), m, k, n);
            (
                Tensor::new(vec![m, n], values)?,
                tape.nodes[self.id].needs_grad || tape.nodes[rhs.id].needs_grad,
            )
        };
        Ok(self.graph().push(
            Op::MatMul {
                lhs: self.id,
                rhs: rhs.id,
            },
            value,
            needs,
        ))
    }

    /// `self (m x k) . rhs^T` with `rhs (n x k)`: the linear-layer product.
    pub fn matmul_nt(&self, rhs: &Var) -> Result<Var> {
        self.check_same_tape(rhs, "matmul_nt")?;
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let b = &tape.nodes[rhs.id].value;
            let (m, k) = (a.rows(), a.cols());
            if b.cols() != k {
                return Err(Error::shape(
                    "matmul_nt",
                    format!("[n, {k}] to match lhs {:?}", a.shape()),
                    format!("{:?}", b.shape()),
                ));
            }
            let n = b.rows();
            let values = mm_nt(a.values(), b.values(), m, k, n);
            (
                Tensor::new(vec![m, n], values)?,
                tape.nodes[self.id].needs_grad || tape.nodes[rhs.id].needs_grad,
            )
        };
        Ok(self.graph().push(
            Op::MatMulNT {
                lhs: self.id,
                rhs: rhs.id,
            },
            value,
            needs,
        ))
    }

    pub fn tanh(&self) -> Var {
        self.unary(|x| x.tanh(), |id| Op::Tanh { input: id })
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |id| Op::Sigmoid { input: id })
    }

    pub fn scale(&self, factor: f64) -> Var {
        self.unary(|x| x * factor, |id| Op::Scale { input: id, factor })
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Var {
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let values = a.values().iter().map(|&x| f(x)).collect();
            (
                Tensor::new(a.shape().to_vec(), values).expect("shape preserved"),
                tape.nodes[self.id].needs_grad,
            )
        };
        self.graph().push(op(self.id), value, needs)
    }

    /// Softmax along the last axis, max-subtracted for stability. Output rows
    /// are nonnegative and sum to 1.
    pub fn softmax_rows(&self) -> Var {
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let (r, c) = (a.rows(), a.cols());
            let mut values = vec![0.0; r * c];
            for i in 0..r {
                let row = a.row_slice(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - max).exp();
                    values[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    values[i * c + j] /= sum;
                }
            }
            (
                Tensor::new(vec![r, c], values).expect("shape preserved"),
                tape.nodes[self.id].needs_grad,
            )
        };
        self.graph()
            .push(Op::SoftmaxRows { input: self.id }, value, needs)
    }

    pub fn transpose(&self) -> Var {
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let (r, c) = (a.rows(), a.cols());
            let mut values = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    values[j * r + i] = a.values()[i * c + j];
                }
            }
            (
                Tensor::new(vec![c, r], values).expect("transposed shape"),
                tape.nodes[self.id].needs_grad,
            )
        };
        self.graph()
            .push(Op::Transpose { input: self.id }, value, needs)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let (r, c) = (a.rows(), a.cols());
            if start + len > c || len == 0 {
                return Err(Error::shape(
                    "slice_cols",
                    format!("range within {c} columns"),
                    format!("[{start}, {})", start + len),
                ));
            }
            let mut values = Vec::with_capacity(r * len);
            for i in 0..r {
                values.extend_from_slice(&a.row_slice(i)[start..start + len]);
            }
            (
                Tensor::new(vec![r, len], values)?,
                tape.nodes[self.id].needs_grad,
            )
        };
        Ok(self.graph().push(
            Op::SliceCols {
                input: self.id,
                start,
            },
            value,
            needs,
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let (r, c) = (a.rows(), a.cols());
            if start + len > r || len == 0 {
                return Err(Error::shape(
                    "slice_rows",
                    format!("range within {r} rows"),
                    format!("[{start}, {})", start + len),
                ));
            }
            let values = a.values()[start * c..(start + len) * c].to_vec();
            (
                Tensor::new(vec![len, c], values)?,
                tape.nodes[self.id].needs_grad,
            )
        };
        Ok(self.graph().push(
            Op::SliceRows {
                input: self.id,
                start,
            },
            value,
            needs,
        ))
    }

    /// Gathers rows of an embedding table: `self` is the `(V x d)` table.
    pub fn embed_rows(&self, ids: &[u32]) -> Result<Var> {
        let (value, needs) = {
            let tape = self.tape.borrow();
            let table = &tape.nodes[self.id].value;
            let (v, d) = (table.rows(), table.cols());
            if ids.is_empty() {
                return Err(Error::shape("embed_rows", "at least one id", "0 ids"));
            }
            let mut values = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id as usize >= v {
                    return Err(Error::Data(format!(
                        "embed_rows: word id {id} outside vocabulary of size {v}"
                    )));
                }
                values.extend_from_slice(table.row_slice(id as usize));
            }
            (
                Tensor::new(vec![ids.len(), d], values)?,
                tape.nodes[self.id].needs_grad,
            )
        };
        Ok(self.graph().push(
            Op::EmbedRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            value,
            needs,
        ))
    }

    /// Inverted dropout: keeps entries with probability `1 - p`, scaling
    /// survivors by `1/(1-p)` so inference needs no rescaling. `p == 0`
    /// returns `self` unchanged and draws nothing from the rng.
    pub fn dropout(&self, p: f64, rng: &mut ChaCha8Rng) -> Var {
        if p == 0.0 {
            return self.clone();
        }
        let keep = 1.0 / (1.0 - p);
        let (mask, value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let mask: Vec<f64> = (0..a.numel())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect();
            let values = a.values().iter().zip(&mask).map(|(x, m)| x * m).collect();
            (
                mask,
                Tensor::new(a.shape().to_vec(), values).expect("shape preserved"),
                tape.nodes[self.id].needs_grad,
            )
        };
        self.graph().push(
            Op::Dropout {
                input: self.id,
                mask,
            },
            value,
            needs,
        )
    }

    /// Negative log-likelihood gather over rows of a probability matrix:
    /// row `t` contributes `-ln(self[t, targets[t]])`; `None` targets are
    /// excluded from the sum (padding).
    pub fn nll(&self, targets: &[Option<usize>]) -> Result<Var> {
        let (value, needs) = {
            let tape = self.tape.borrow();
            let p = &tape.nodes[self.id].value;
            let (r, c) = (p.rows(), p.cols());
            if targets.len() != r {
                return Err(Error::shape(
                    "nll",
                    format!("{r} targets for {r} rows"),
                    format!("{} targets", targets.len()),
                ));
            }
            let mut loss = 0.0;
            for (t, tgt) in targets.iter().enumerate() {
                if let Some(idx) = tgt {
                    if *idx >= c {
                        return Err(Error::Data(format!(
                            "nll: target id {idx} outside distribution of size {c}"
                        )));
                    }
                    loss -= p.values()[t * c + idx].ln();
                }
            }
            (Tensor::scalar(loss), tape.nodes[self.id].needs_grad)
        };
        Ok(self.graph().push(
            Op::NllGather {
                probs: self.id,
                targets: targets.to_vec(),
            },
            value,
            needs,
        ))
    }

    pub fn sum_all(&self) -> Var {
        let (value, needs) = {
            let tape = self.tape.borrow();
            let a = &tape.nodes[self.id].value;
            (
                Tensor::scalar(a.values().iter().sum()),
                tape.nodes[self.id].needs_grad,
            )
        };
        self.graph()
            .push(Op::SumAll { input: self.id }, value, needs)
    }

    /// Runs the reverse pass from a scalar loss, filling gradients of every
    /// differentiable node that contributed to it. A tape supports exactly
    /// one backward pass; record a fresh graph to compute another gradient.
    pub fn backward(&self) -> Result<()> {
        let mut tape = self.tape.borrow_mut();
        if tape.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; rebuild the graph to differentiate again".into(),
            ));
        }
        if tape.nodes.is_empty() {
            return Err(Error::Graph("backward on an empty graph".into()));
        }
        let loss_shape = tape.nodes[self.id].value.shape().to_vec();
        if loss_shape != [1, 1] {
            return Err(Error::shape("backward", "scalar loss (1x1)", format!("{loss_shape:?}")));
        }
        tape.backward_done = true;
        tape.nodes[self.id].grad = Some(vec![1.0]);

        for i in (0..=self.id).rev() {
            let Some(g) = tape.nodes[i].grad.clone() else {
                continue;
            };
            let op = tape.nodes[i].op.clone();
            backprop_one(&mut tape.nodes, i, &op, &g);
        }
        Ok(())
    }
}

/// Elementwise combine with the broadcast rules the model needs: identical
/// shapes, a `1 x c` row against an `r x c` matrix, or a `1 x 1` scalar
/// against anything.
fn broadcast_zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    if (ar, ac) == (br, bc) {
        let values = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(vec![ar, ac], values);
    }
    if b.is_scalar() {
        let y = b.values()[0];
        let values = a.values().iter().map(|&x| f(x, y)).collect();
        return Tensor::new(vec![ar, ac], values);
    }
    if a.is_scalar() {
        let x = a.values()[0];
        let values = b.values().iter().map(|&y| f(x, y)).collect();
        return Tensor::new(vec![br, bc], values);
    }
    if br == 1 && bc == ac {
        let mut values = Vec::with_capacity(ar * ac);
        for r in 0..ar {
            for (x, y) in a.row_slice(r).iter().zip(b.values()) {
                values.push(f(*x, *y));
            }
        }
        return Tensor::new(vec![ar, ac], values);
    }
    if ar == 1 && ac == bc {
        let mut values = Vec::with_capacity(br * bc);
        for r in 0..br {
            for (x, y) in a.values().iter().zip(b.row_slice(r)) {
                values.push(f(*x, *y));
            }
        }
        return Tensor::new(vec![br, bc], values);
    }
    Err(Error::shape(
        op,
        format!("{:?} broadcast-compatible with {:?}", a.shape(), b.shape()),
        format!("{:?} vs {:?}", a.shape(), b.shape()),
    ))
}

/// Reduces an upstream gradient of `from` shape down to `to` shape by
/// summing over broadcast axes.
fn reduce_to_shape(grad: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    if to == (1, 1) {
        return vec![grad.iter().sum()];
    }
    // row vector broadcast over rows: sum columns across rows
    let (fr, fc) = from;
    debug_assert_eq!(to, (1, fc));
    let mut out = vec![0.0; fc];
    for r in 0..fr {
        for j in 0..fc {
            out[j] += grad[r * fc + j];
        }
    }
    out
}

fn accumulate(nodes: &mut [Node], id: usize, delta: &[f64]) {
    let node = &mut nodes[id];
    if !node.needs_grad {
        return;
    }
    let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += d;
    }
}

fn backprop_one(nodes: &mut [Node], out_id: usize, op: &Op, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::Add { lhs, rhs } => {
            let out_shape = dims(&nodes[out_id]);
            let da = reduce_to_shape(g, out_shape, dims(&nodes[*lhs]));
            accumulate(nodes, *lhs, &da);
            let db = reduce_to_shape(g, out_shape, dims(&nodes[*rhs]));
            accumulate(nodes, *rhs, &db);
        }
        Op::Mul { lhs, rhs } => {
            let out_shape = dims(&nodes[out_id]);
            let a = nodes[*lhs].value.clone();
            let b = nodes[*rhs].value.clone();
            let ga = expand_mul(g, &b, out_shape);
            let da = reduce_to_shape(&ga, out_shape, dims(&nodes[*lhs]));
            accumulate(nodes, *lhs, &da);
            let gb = expand_mul(g, &a, out_shape);
            let db = reduce_to_shape(&gb, out_shape, dims(&nodes[*rhs]));
            accumulate(nodes, *rhs, &db);
        }
        Op::MatMul { lhs, rhs } => {
            let (m, k) = dims(&nodes[*lhs]);
            let n = nodes[*rhs].value.cols();
            let da = mm_nt(g, nodes[*rhs].value.values(), m, n, k);
            accumulate(nodes, *lhs, &da);
            let db = mm_tn(nodes[*lhs].value.values(), g, k, m, n);
            accumulate(nodes, *rhs, &db);
        }
        Op::MatMulNT { lhs, rhs } => {
            let (m, k) = dims(&nodes[*lhs]);
            let n = nodes[*rhs].value.rows();
            let da = mm_nn(g, nodes[*rhs].value.values(), m, n, k);
            accumulate(nodes, *lhs, &da);
            let db = mm_tn(g, nodes[*lhs].value.values(), n, m, k);
            accumulate(nodes, *rhs, &db);
        }
        Op::Tanh { input } => {
            let y = nodes[out_id].value.values().to_vec();
            let d: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
            accumulate(nodes, *input, &d);
        }
        Op::Sigmoid { input } => {
            let y = nodes[out_id].value.values().to_vec();
            let d: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
            accumulate(nodes, *input, &d);
        }
        Op::SoftmaxRows { input } => {
            let y = nodes[out_id].value.clone();
            let (r, c) = (y.rows(), y.cols());
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let yr = y.row_slice(i);
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    d[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, *input, &d);
        }
        Op::Transpose { input } => {
            let (r, c) = dims(&nodes[out_id]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g[i * c + j];
                }
            }
            accumulate(nodes, *input, &d);
        }
        Op::SliceCols { input, start } => {
            let (r, c) = dims(&nodes[*input]);
            let len = nodes[out_id].value.cols();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..len {
                    d[i * c + start + j] = g[i * len + j];
                }
            }
            accumulate(nodes, *input, &d);
        }
        Op::SliceRows { input, start } => {
            let (r, c) = dims(&nodes[*input]);
            let len = nodes[out_id].value.rows();
            let mut d = vec![0.0; r * c];
            d[start * c..(start + len) * c].copy_from_slice(g);
            accumulate(nodes, *input, &d);
        }
        Op::ConcatCols { inputs } => {
            let out_c = nodes[out_id].value.cols();
            let out_r = nodes[out_id].value.rows();
            let mut col_at = 0usize;
            for &inp in inputs {
                let c = nodes[inp].value.cols();
                let mut d = vec![0.0; out_r * c];
                for r in 0..out_r {
                    d[r * c..(r + 1) * c]
                        .copy_from_slice(&g[r * out_c + col_at..r * out_c + col_at + c]);
                }
                accumulate(nodes, inp, &d);
                col_at += c;
            }
        }
        Op::ConcatRows { inputs } => {
            let mut at = 0usize;
            for &inp in inputs {
                let n = nodes[inp].value.numel();
                let d = g[at..at + n].to_vec();
                accumulate(nodes, inp, &d);
                at += n;
            }
        }
        Op::EmbedRows { table, ids } => {
            let (v, dcol) = dims(&nodes[*table]);
            let mut d = vec![0.0; v * dcol];
            for (row, &id) in ids.iter().enumerate() {
                let at = id as usize * dcol;
                for j in 0..dcol {
                    d[at + j] += g[row * dcol + j];
                }
            }
            accumulate(nodes, *table, &d);
        }
        Op::Dropout { input, mask } => {
            let d: Vec<f64> = g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
            accumulate(nodes, *input, &d);
        }
        Op::NllGather { probs, targets } => {
            let p = nodes[*probs].value.clone();
            let (r, c) = (p.rows(), p.cols());
            let g0 = g[0];
            let mut d = vec![0.0; r * c];
            for (t, tgt) in targets.iter().enumerate() {
                if let Some(idx) = tgt {
                    d[t * c + idx] = -g0 / p.values()[t * c + idx];
                }
            }
            accumulate(nodes, *probs, &d);
        }
        Op::Scale { input, factor } => {
            let d: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
            accumulate(nodes, *input, &d);
        }
        Op::SumAll { input } => {
            let n = nodes[*input].value.numel();
            let d = vec![g[0]; n];
            accumulate(nodes, *input, &d);
        }
    }
}

fn dims(node: &Node) -> (usize, usize) {
    (node.value.rows(), node.value.cols())
}

/// Elementwise product of upstream gradient with the other operand,
/// broadcast to the output shape.
fn expand_mul(g: &[f64], other: &Tensor, out: (usize, usize)) -> Vec<f64> {
    let (or_, oc) = out;
    let (br, bc) = (other.rows(), other.cols());
    if (br, bc) == (or_, oc) {
        return g.iter().zip(other.values()).map(|(gi, b)| gi * b).collect();
    }
    if other.is_scalar() {
        let y = other.values()[0];
        return g.iter().map(|gi| gi * y).collect();
    }
    // row vector broadcast
    debug_assert_eq!((br, bc), (1, oc));
    let mut out_v = vec![0.0; or_ * oc];
    for r in 0..or_ {
        for j in 0..oc {
            out_v[r * oc + j] = g[r * oc + j] * other.values()[j];
        }
    }
    out_v
}
