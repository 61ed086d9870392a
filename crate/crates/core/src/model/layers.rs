//! Parameter storage and the layer primitives shared by every sub-network.

use rand::Rng;

use crate::numerics::Matrix;
use crate::tape::{Grads, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered parameter store. Order is fixed by the layout builder, so
/// it doubles as the serialization order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Indices of every parameter whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Allocates named parameters with fan-in scaled uniform initialization.
pub(crate) struct Builder<'r, R: Rng> {
    pub params: Params,
    rng: &'r mut R,
    prefix: Vec<String>,
}

impl<'r, R: Rng> Builder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            params: Params::default(),
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn alloc(&mut self, name: &str, value: Matrix) -> ParamId {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.params.names.push(full);
        self.params.values.push(value);
        ParamId(self.params.values.len() - 1)
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        self.uniform_bound(name, rows, cols, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    /// He-uniform, for weights feeding a ReLU.
    pub fn he_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        self.uniform_bound(name, rows, cols, (6.0 / fan_in.max(1) as f64).sqrt())
    }

    fn uniform_bound(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let m = Matrix::from_fn(rows, cols, |_, _| self.rng.random_range(-bound..bound));
        self.alloc(name, m)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.alloc(name, Matrix::zeros(rows, cols))
    }
}

/// Binds a parameter store to a tape. Each parameter becomes a leaf on
/// first use and is reused afterwards.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p Params,
    slots: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// `track = false` records parameters as constants, for evaluation.
    pub fn new(params: &'p Params, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            slots: vec![None; params.len()],
            track,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.slots[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.track {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.slots[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    /// Per-parameter gradients aligned with the store; unused ones are zero.
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<Matrix> {
        self.params
            .values()
            .iter()
            .zip(&self.slots)
            .map(|(p, slot)| {
                slot.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub(crate) fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, inp: usize, out: usize) -> Self {
        b.scoped(name, |b| Dense {
            w: b.uniform("w", inp, out, inp),
            b: b.uniform("b", 1, out, inp),
        })
    }

    pub(crate) fn zeroed<R: Rng>(b: &mut Builder<'_, R>, name: &str, inp: usize, out: usize) -> Self {
        b.scoped(name, |b| Dense {
            w: b.zeros("w", inp, out),
            b: b.zeros("b", 1, out),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w);
        g.tape.add_row(y, b)
    }
}

/// 1-D convolution over time; input rows are frames.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub(crate) fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        inp: usize,
        out: usize,
        stride: usize,
    ) -> Self {
        let kernel = 3;
        b.scoped(name, |b| Conv1d {
            w: b.he_uniform("w", kernel * inp, out, kernel * inp),
            b: b.uniform("b", 1, out, kernel * inp),
            kernel,
            stride,
            pad: 1,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let cols = g.tape.im2col(x, self.kernel, self.stride, self.pad);
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(cols, w);
        g.tape.add_row(y, b)
    }
}

/// Gated recurrent unit with gate order `[reset, update, candidate]`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub(crate) fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, inp: usize, hidden: usize) -> Self {
        b.scoped(name, |b| Gru {
            wx: b.uniform("wx", inp, 3 * hidden, hidden),
            wh: b.uniform("wh", hidden, 3 * hidden, hidden),
            bx: b.uniform("bx", 1, 3 * hidden, hidden),
            bh: b.uniform("bh", 1, 3 * hidden, hidden),
            hidden,
        })
    }

    /// Runs over all rows of `x` and returns the final hidden state (1×hidden).
    pub fn last_state(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h_dim = self.hidden;
        let steps = g.value(x).rows();
        let wx = g.param(self.wx);
        let bx = g.param(self.bx);
        let wh = g.param(self.wh);
        let bh = g.param(self.bh);
        let xw = g.tape.matmul(x, wx);
        let xw = g.tape.add_row(xw, bx);
        let mut h = g.input(Matrix::zeros(1, h_dim));
        for t in 0..steps {
            let xt = g.tape.slice_rows(xw, t, t + 1);
            let hw = g.tape.matmul(h, wh);
            let hw = g.tape.add_row(hw, bh);
            let x_r = g.tape.slice_cols(xt, 0, h_dim);
            let x_z = g.tape.slice_cols(xt, h_dim, 2 * h_dim);
            let x_n = g.tape.slice_cols(xt, 2 * h_dim, 3 * h_dim);
            let h_r = g.tape.slice_cols(hw, 0, h_dim);
            let h_z = g.tape.slice_cols(hw, h_dim, 2 * h_dim);
            let h_n = g.tape.slice_cols(hw, 2 * h_dim, 3 * h_dim);
            let r = g.tape.add(x_r, h_r);
            let r = g.tape.sigmoid(r);
            let z = g.tape.add(x_z, h_z);
            let z = g.tape.sigmoid(z);
            let rn = g.tape.mul(r, h_n);
            let n = g.tape.add(x_n, rn);
            let n = g.tape.tanh(n);
            // h' = n + z ⊙ (h − n)
            let diff = g.tape.sub(h, n);
            let gated = g.tape.mul(z, diff);
            h = g.tape.add(n, gated);
        }
        h
    }
}
