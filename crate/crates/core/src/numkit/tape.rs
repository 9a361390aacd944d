//! Reverse-mode differentiation over a closed primitive set.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] replays it
//! in reverse, accumulating gradients additively at shared nodes. Shape
//! errors are programmer errors and panic with both shapes named.

use super::Matrix;

pub type VarId = usize;

enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    Relu(VarId),
    RowSoftmax(VarId),
    Embed { table: VarId, ids: Vec<u32> },
    ConcatCols(VarId, VarId),
    WeightedNll {
        logits: VarId,
        target: usize,
        weight: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Matrix>,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Matrix) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.nodes[a].value.add(&self.nodes[b].value);
        self.push(value, Op::Add(a, b))
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let value = self.nodes[x].value.map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let value = self.nodes[x].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = self.nodes[x].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// Softmax applied independently to each row (max-subtracted).
    pub fn row_softmax(&mut self, x: VarId) -> VarId {
        let input = &self.nodes[x].value;
        let mut value = Matrix::zeros(input.rows(), input.cols());
        for r in 0..input.rows() {
            let ls = Matrix::row_log_softmax(input.row(r));
            for (c, lv) in ls.into_iter().enumerate() {
                value.set(r, c, lv.exp());
            }
        }
        self.push(value, Op::RowSoftmax(x))
    }

    /// Stacks the table rows selected by `ids` into an `ids.len() x dim`
    /// matrix.
    pub fn embedding_lookup(&mut self, table: VarId, ids: &[u32]) -> VarId {
        let tbl = &self.nodes[table].value;
        let mut value = Matrix::zeros(ids.len(), tbl.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(
                (id as usize) < tbl.rows(),
                "embedding id {id} out of range for {}x{} table",
                tbl.rows(),
                tbl.cols()
            );
            value.row_mut(r).copy_from_slice(tbl.row(id as usize));
        }
        self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.nodes[a].value.concat_cols(&self.nodes[b].value);
        self.push(value, Op::ConcatCols(a, b))
    }

    /// `weight * (-log softmax(logits)[target])` as a 1x1 scalar. `logits`
    /// must be a single row. Linear in `weight` by construction.
    pub fn weighted_nll(&mut self, logits: VarId, target: usize, weight: f64) -> VarId {
        let row = &self.nodes[logits].value;
        assert_eq!(
            row.rows(),
            1,
            "weighted_nll expects a single row, got {}x{}",
            row.rows(),
            row.cols()
        );
        assert!(
            target < row.cols(),
            "weighted_nll target {target} out of range for {}x{} logits",
            row.rows(),
            row.cols()
        );
        let log_probs = Matrix::row_log_softmax(row.row(0));
        let probs: Vec<f64> = log_probs.iter().map(|&lp| lp.exp()).collect();
        let loss = weight * (-log_probs[target]);
        self.push(
            Matrix::scalar(loss),
            Op::WeightedNll {
                logits,
                target,
                weight,
                probs,
            },
        )
    }

    /// Runs the backward pass from a 1x1 loss node. Gradients of every node
    /// at or before `loss` become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(
            self.nodes[loss].value.shape(),
            (1, 1),
            "backward expects a scalar loss"
        );
        self.grads = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        self.grads[loss].set(0, 0, 1.0);
        for id in (0..=loss).rev() {
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let g = std::mem::replace(&mut self.grads[id], Matrix::zeros(0, 0));
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    // ga[i,k] += sum_j g[i,j] * b[k,j]
                    {
                        let ga = &mut self.grads[a];
                        for i in 0..av.rows() {
                            for k in 0..av.cols() {
                                let mut acc = 0.0;
                                for j in 0..bv.cols() {
                                    acc += g.get(i, j) * bv.get(k, j);
                                }
                                let cur = ga.get(i, k);
                                ga.set(i, k, cur + acc);
                            }
                        }
                    }
                    // gb[k,j] += sum_i a[i,k] * g[i,j]
                    {
                        let gb = &mut self.grads[b];
                        for k in 0..bv.rows() {
                            for j in 0..bv.cols() {
                                let mut acc = 0.0;
                                for i in 0..av.rows() {
                                    acc += av.get(i, k) * g.get(i, j);
                                }
                                let cur = gb.get(k, j);
                                gb.set(k, j, cur + acc);
                            }
                        }
                    }
                    self.grads[id] = g;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let g = std::mem::replace(&mut self.grads[id], Matrix::zeros(0, 0));
                    accumulate(&mut self.grads[a], g.data());
                    accumulate(&mut self.grads[b], g.data());
                    self.grads[id] = g;
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let g = std::mem::replace(&mut self.grads[id], Matrix::zeros(0, 0));
                    let y = &self.nodes[id].value;
                    let gx = &mut self.grads[x];
                    for (slot, (gv, yv)) in
                        gx.data_mut().iter_mut().zip(g.data().iter().zip(y.data()))
                    {
                        *slot += gv * (1.0 - yv * yv);
                    }
                    self.grads[id] = g;
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let g = std::mem::replace(&mut self.grads[id], Matrix::zeros(0, 0));
                    let y = &self.nodes[id].value;
                    let gx = &mut self.grads[x];
                    for (slot, (gv, yv)) in
                        gx.data_mut().iter_mut().zip(g.data().iter().zip(y.data()))
                    {
                        *slot += gv * yv * (1.0 - yv);
                    }
                    self.grads[id] = g;
                }
                Op::Relu(x) => {
                    let x = *x;
                    let g = std::mem::replace(&mut self.grads[id], Matrix::zeros(0, 0));
                    let y = &self.nodes[id].value;
                    let gx = &mut self.grads[x];
                    for (slot, (gv, yv)) in
                        gx.data_mut().iter_mut().zip(g.data().iter().zip(y.data()))
                    {
                        *slot += if *yv > 0.0 { *gv } else { 0.0 };
                    }
                    self.grads[id] = g;
                }
                Op::RowSoftmax(x) => {
                    let x = *x;
                    let g = std::mem::replace(&mut self.grads[id], Matrix::zeros(0, 0));
                    let y = &self.nodes[id].value;
                    let gx = &mut self.grads[x];
                    for r in 0..y.rows() {
                        let dot: f64 = g
                            .row(r)
                            .iter()
                            .zip(y.row(r))
                            .map(|(gv, yv)| gv * yv)
                            .sum();
                        for c in 0..y.cols() {
                            let cur = gx.get(r, c);
                            gx.set(r, c, cur + y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    self.grads[id] = g;
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let g = std::mem::replace(&mut self.grads[id], Matrix::zeros(0, 0));
                    let gt = &mut self.grads[table];
                    for (r, &wid) in ids.iter().enumerate() {
                        let src = g.row(r);
                        let dst = gt.row_mut(wid as usize);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    self.grads[id] = g;
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let g = std::mem::replace(&mut self.grads[id], Matrix::zeros(0, 0));
                    let a_cols = self.nodes[a].value.cols();
                    {
                        let ga = &mut self.grads[a];
                        for r in 0..g.rows() {
                            for c in 0..a_cols {
                                let cur = ga.get(r, c);
                                ga.set(r, c, cur + g.get(r, c));
                            }
                        }
                    }
                    {
                        let gb = &mut self.grads[b];
                        for r in 0..g.rows() {
                            for c in 0..gb.cols() {
                                let cur = gb.get(r, c);
                                gb.set(r, c, cur + g.get(r, a_cols + c));
                            }
                        }
                    }
                    self.grads[id] = g;
                }
                Op::WeightedNll {
                    logits,
                    target,
                    weight,
                    probs,
                } => {
                    let logits = *logits;
                    let target = *target;
                    let weight = *weight;
                    let probs = probs.clone();
                    let g = self.grads[id].get(0, 0);
                    let gl = &mut self.grads[logits];
                    for (c, &p) in probs.iter().enumerate() {
                        let indicator = if c == target { 1.0 } else { 0.0 };
                        let cur = gl.get(0, c);
                        gl.set(0, c, cur + g * weight * (p - indicator));
                    }
                }
            }
        }
        self.ran_backward = true;
    }

    pub fn grad(&self, id: VarId) -> &Matrix {
        assert!(self.ran_backward, "grad() before backward()");
        &self.grads[id]
    }
}

fn accumulate(dst: &mut Matrix, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}
