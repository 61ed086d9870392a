//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Only the operations the model needs are supported. Losses enter as
//! scalar nodes carrying precomputed input gradients (see [`Tape::scalar_node`]).

use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    Im2Col { x: Var, kernel: usize, stride: usize, pad: usize },
    RepeatRows(Var),
    Grl(Var, f64),
    Scalar(Vec<(Var, Matrix)>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    /// `a (n×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols(), "add_row width");
        let r = r.data().to_vec();
        for i in 0..value.rows() {
            value.row_mut(i).iter_mut().zip(&r).for_each(|(v, b)| *v += b);
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Elementwise `a·scale + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| x * scale + shift);
        let ng = self.needs(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        let ng = self.needs(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols row counts");
            for i in 0..rows {
                value.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows column counts");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let value = Matrix::new(rows, cols, data).expect("concat_rows");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Mean over rows, producing `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = Matrix::row_vector(&self.value(a).mean_rows());
        let ng = self.needs(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Unfolds `x (T×c)` into `T_out × (kernel·c)` patches, zero padded.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let value = im2col_forward(self.value(x), kernel, stride, pad);
        let ng = self.needs(x);
        self.push(value, Op::Im2Col { x, kernel, stride, pad }, ng)
    }

    /// Tiles a `1 × c` row into `n × c`.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "repeat_rows expects a row vector");
        let value = Matrix::from_fn(n, r.cols(), |_, j| r.get(0, j));
        let ng = self.needs(row);
        self.push(value, Op::RepeatRows(row), ng)
    }

    /// Gradient reversal: identity forward, `-lambda` times the gradient backward.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        let value = self.value(a).clone();
        let ng = self.needs(a);
        self.push(value, Op::Grl(a, lambda), ng)
    }

    /// A scalar node whose local gradients w.r.t. `inputs` are already known.
    pub fn scalar_node(&mut self, value: f64, inputs: Vec<(Var, Matrix)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).shape(), g.shape(), "scalar_node gradient shape");
        }
        let ng = inputs.iter().any(|(v, _)| self.needs(*v));
        self.push(Matrix::filled(1, 1, value), Op::Scalar(inputs), ng)
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value: f64 = terms.iter().map(|(v, w)| self.scalar(*v) * w).sum();
        let inputs = terms
            .iter()
            .map(|(v, w)| (*v, Matrix::filled(1, 1, *w)))
            .collect();
        self.scalar_node(value, inputs)
    }

    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let out = &self.nodes[output.0].value;
        grads[output.0] = Some(Matrix::filled(out.rows(), out.cols(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, Matrix::row_vector(&col_sums(g)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Relu(a) => {
                let gi = g.zip_map(&node.value, |d, y| if y > 0.0 { d } else { 0.0 });
                self.accumulate(grads, *a, gi);
            }
            Op::Tanh(a) => {
                let gi = g.zip_map(&node.value, |d, y| d * (1.0 - y * y));
                self.accumulate(grads, *a, gi);
            }
            Op::Sigmoid(a) => {
                let gi = g.zip_map(&node.value, |d, y| d * y * (1.0 - y));
                self.accumulate(grads, *a, gi);
            }
            Op::Exp(a) => {
                let gi = g.zip_map(&node.value, |d, y| d * y);
                self.accumulate(grads, *a, gi);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut gi = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    gi.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, gi);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut gi = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    gi.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, gi);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice_cols(off, off + w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice_rows(off, off + h));
                    }
                    off += h;
                }
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let n = src.rows() as f64;
                let gi = Matrix::from_fn(src.rows(), src.cols(), |_, j| g.get(0, j) / n);
                self.accumulate(grads, *a, gi);
            }
            Op::SumAll(a) => {
                let src = self.value(*a);
                let gi = Matrix::filled(src.rows(), src.cols(), g.get(0, 0));
                self.accumulate(grads, *a, gi);
            }
            Op::Im2Col { x, kernel, stride, pad } => {
                let src = self.value(*x);
                let gi = im2col_backward(g, src.rows(), src.cols(), *kernel, *stride, *pad);
                self.accumulate(grads, *x, gi);
            }
            Op::RepeatRows(row) => {
                self.accumulate(grads, *row, Matrix::row_vector(&col_sums(g)));
            }
            Op::Grl(a, lambda) => self.accumulate(grads, *a, g.scale(-lambda)),
            Op::Scalar(inputs) => {
                let up = g.get(0, 0);
                for (v, local) in inputs {
                    if self.needs(*v) {
                        self.accumulate(grads, *v, local.scale(up));
                    }
                }
            }
        }
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        out.iter_mut().zip(m.row(i)).for_each(|(o, v)| *o += v);
    }
    out
}

pub(crate) fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad).saturating_sub(kernel) / stride + 1
}

fn im2col_forward(x: &Matrix, kernel: usize, stride: usize, pad: usize) -> Matrix {
    let (t, c) = x.shape();
    let t_out = conv_output_len(t, kernel, stride, pad);
    let mut out = Matrix::zeros(t_out, kernel * c);
    for o in 0..t_out {
        let row = out.row_mut(o);
        for k in 0..kernel {
            let src = (o * stride + k) as isize - pad as isize;
            if src >= 0 && (src as usize) < t {
                row[k * c..(k + 1) * c].copy_from_slice(x.row(src as usize));
            }
        }
    }
    out
}

fn im2col_backward(g: &Matrix, t: usize, c: usize, kernel: usize, stride: usize, pad: usize) -> Matrix {
    let mut out = Matrix::zeros(t, c);
    for o in 0..g.rows() {
        let row = g.row(o);
        for k in 0..kernel {
            let src = (o * stride + k) as isize - pad as isize;
            if src >= 0 && (src as usize) < t {
                out.row_mut(src as usize)
                    .iter_mut()
                    .zip(&row[k * c..(k + 1) * c])
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Runs `build` on a fresh tape with `x` as the only variable and checks
    /// the tape gradient against central differences.
    fn check(shape: (usize, usize), seed: u64, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = gaussian(&mut rng, shape.0, shape.1);
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.variable(Matrix::new(shape.0, shape.1, x.to_vec())?);
            let out = build(&mut tape, v);
            let g = tape.backward(out);
            let grad = g.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            Ok((tape.scalar(out), grad.into_data()))
        };
        let r = grad_check(f, x0.data(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn weighted_total(t: &mut Tape, v: Var) -> Var {
        let m = t.value(v);
        let w = Matrix::from_fn(m.rows(), m.cols(), |i, j| 0.3 + 0.1 * (i as f64) - 0.2 * j as f64);
        let w = t.constant(w);
        let p = t.mul(v, w);
        t.sum_all(p)
    }

    #[test]
    fn elementwise_ops() {
        check((3, 4), 1, |t, x| {
            let a = t.tanh(x);
            let b = t.sigmoid(x);
            let c = t.mul(a, b);
            let d = t.exp(c);
            let e = t.affine(d, 1.5, -0.2);
            weighted_total(t, e)
        });
    }

    #[test]
    fn relu_away_from_kink() {
        check((3, 3), 2, |t, x| {
            let y = t.affine(x, 1.0, 0.05);
            let r = t.relu(y);
            weighted_total(t, r)
        });
    }

    #[test]
    fn matmul_and_broadcast() {
        check((4, 3), 3, |t, x| {
            let w = t.constant(Matrix::from_fn(3, 2, |i, j| i as f64 - j as f64 * 0.7));
            let y = t.matmul(x, w);
            let row = t.slice_cols(x, 1, 3);
            let row = t.mean_rows(row);
            let z = t.add_row(y, row);
            let xt = t.matmul(x, w);
            let z = t.add(z, xt);
            weighted_total(t, z)
        });
    }

    #[test]
    fn structural_ops() {
        check((5, 2), 4, |t, x| {
            let cols = t.im2col(x, 3, 2, 1);
            let a = t.slice_cols(cols, 0, 2);
            let b = t.concat_cols(&[a, cols]);
            let m = t.mean_rows(b);
            let r = t.repeat_rows(m, 3);
            let s = t.concat_rows(&[r, b]);
            let s = t.slice_rows(s, 1, 4);
            weighted_total(t, s)
        });
    }

    #[test]
    fn grl_scales_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Matrix::row_vector(&[1.0, -2.0]));
        let y = tape.grl(x, 0.5);
        let s = tape.sum_all(y);
        let g = tape.backward(s);
        assert_eq!(tape.value(y), tape.value(x));
        assert_eq!(g.get(x).unwrap().data(), &[-0.5, -0.5]);
    }

    #[test]
    fn detached_values_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Matrix::row_vector(&[1.0, 2.0]));
        let d = tape.detach(x);
        let p = tape.mul(x, d);
        let s = tape.sum_all(p);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn im2col_shapes() {
        assert_eq!(conv_output_len(48, 3, 2, 1), 24);
        assert_eq!(conv_output_len(3, 3, 2, 1), 2);
        assert_eq!(conv_output_len(1, 3, 2, 1), 1);
        assert_eq!(conv_output_len(7, 3, 1, 1), 7);
    }
}
