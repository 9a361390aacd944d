//! Shared recurrent building blocks for the three trainable models: an
//! embedding table, a stack of tanh recurrent layers, and a linear head.
//! Each block exposes a tape path (training) and a plain-matrix path
//! (inference); their agreement is checked by the models' consistency tests.

use rand_chacha::ChaCha8Rng;

use crate::numkit::{Matrix, Tape, VarId};

pub(crate) struct Embedding {
    pub table: Matrix,
}

impl Embedding {
    pub fn init(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Embedding {
            table: Matrix::randn(vocab, dim, 0.1, rng),
        }
    }

    pub fn row(&self, id: u32) -> Matrix {
        let mut out = Matrix::zeros(1, self.table.cols());
        out.row_mut(0).copy_from_slice(self.table.row(id as usize));
        out
    }
}

/// One tanh recurrent layer: h' = tanh(x W_in + h W_rec + b).
pub(crate) struct RnnLayer {
    pub w_in: Matrix,
    pub w_rec: Matrix,
    pub bias: Matrix,
}

impl RnnLayer {
    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let in_std = 1.0 / (input as f64).sqrt();
        let rec_std = 1.0 / (hidden as f64).sqrt();
        RnnLayer {
            w_in: Matrix::randn(input, hidden, in_std, rng),
            w_rec: Matrix::randn(hidden, hidden, rec_std, rng),
            bias: Matrix::zeros(1, hidden),
        }
    }
}

pub(crate) struct RnnStack {
    pub layers: Vec<RnnLayer>,
    hidden: usize,
}

impl RnnStack {
    pub fn init(input: usize, hidden: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut in_dim = input;
        for _ in 0..depth {
            layers.push(RnnLayer::init(in_dim, hidden, rng));
            in_dim = hidden;
        }
        RnnStack { layers, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .map(|_| Matrix::zeros(1, self.hidden))
            .collect()
    }

    /// Plain forward step; returns the new per-layer states (last layer is
    /// the stack output).
    pub fn step(&self, x: &Matrix, state: &[Matrix]) -> Vec<Matrix> {
        let mut input = x.clone();
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, h) in self.layers.iter().zip(state) {
            let pre = input
                .matmul(&layer.w_in)
                .add(&h.matmul(&layer.w_rec))
                .add(&layer.bias);
            let out = pre.map(f64::tanh);
            input = out.clone();
            next.push(out);
        }
        next
    }
}

/// Linear head: y = x W + b.
pub(crate) struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    /// Zero init keeps untrained heads maximally uninformative (uniform
    /// softmax output), which several contract tests rely on.
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Matrix::zeros(input, output),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        x.matmul(&self.w).add(&self.b)
    }
}

// --- tape-side mirrors -----------------------------------------------------

pub(crate) struct EmbeddingVar {
    pub table: VarId,
}

impl EmbeddingVar {
    pub fn register(tape: &mut Tape, e: &Embedding) -> Self {
        EmbeddingVar {
            table: tape.leaf(e.table.clone()),
        }
    }

    pub fn lookup(&self, tape: &mut Tape, id: u32) -> VarId {
        tape.embedding_lookup(self.table, &[id])
    }
}

pub(crate) struct RnnLayerVar {
    w_in: VarId,
    w_rec: VarId,
    bias: VarId,
}

pub(crate) struct RnnStackVar {
    pub layers: Vec<RnnLayerVar>,
}

impl RnnStackVar {
    pub fn register(tape: &mut Tape, stack: &RnnStack) -> Self {
        RnnStackVar {
            layers: stack
                .layers
                .iter()
                .map(|l| RnnLayerVar {
                    w_in: tape.leaf(l.w_in.clone()),
                    w_rec: tape.leaf(l.w_rec.clone()),
                    bias: tape.leaf(l.bias.clone()),
                })
                .collect(),
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, hidden: usize) -> Vec<VarId> {
        self.layers
            .iter()
            .map(|_| tape.leaf(Matrix::zeros(1, hidden)))
            .collect()
    }

    pub fn step(&self, tape: &mut Tape, x: VarId, state: &[VarId]) -> Vec<VarId> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &h) in self.layers.iter().zip(state) {
            let xi = tape.matmul(input, layer.w_in);
            let hh = tape.matmul(h, layer.w_rec);
            let sum = tape.add(xi, hh);
            let pre = tape.add(sum, layer.bias);
            let out = tape.tanh(pre);
            input = out;
            next.push(out);
        }
        next
    }

    /// Parameter var ids in the same order as [`rnn_param_blocks`].
    pub fn param_ids(&self) -> Vec<VarId> {
        self.layers
            .iter()
            .flat_map(|l| [l.w_in, l.w_rec, l.bias])
            .collect()
    }
}

pub(crate) struct LinearVar {
    pub w: VarId,
    pub b: VarId,
}

impl LinearVar {
    pub fn register(tape: &mut Tape, l: &Linear) -> Self {
        LinearVar {
            w: tape.leaf(l.w.clone()),
            b: tape.leaf(l.b.clone()),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: VarId) -> VarId {
        let xw = tape.matmul(x, self.w);
        tape.add(xw, self.b)
    }
}

/// Named parameter references for a stack, layer by layer.
pub(crate) fn rnn_param_blocks<'a>(
    prefix: &str,
    stack: &'a RnnStack,
) -> Vec<(String, &'a Matrix)> {
    stack
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{prefix}{i}.w_in"), &l.w_in),
                (format!("{prefix}{i}.w_rec"), &l.w_rec),
                (format!("{prefix}{i}.bias"), &l.bias),
            ]
        })
        .collect()
}

pub(crate) fn rnn_param_blocks_mut<'a>(stack: &'a mut RnnStack) -> Vec<&'a mut Matrix> {
    stack
        .layers
        .iter_mut()
        .flat_map(|l| [&mut l.w_in, &mut l.w_rec, &mut l.bias])
        .collect()
}
