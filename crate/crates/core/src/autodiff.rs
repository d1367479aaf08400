//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices. Every value is an `Array2<f64>`; scalars are `1 x 1`.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! tape visits every node after all of its consumers.

use ndarray::{s, Array2, Axis, Zip};

pub type Tensor = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a + b` with `b` a single row broadcast over the rows of `a`
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Sum(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// An input whose gradient is never needed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var {
        let value = f(self.value(a));
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        let rg = self.needs(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.mapv(f64::exp))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.mapv(f64::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x.mapv(|v| v * v))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), |x| x.mapv(softplus))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| x.mapv(sigmoid))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.mapv(f64::tanh))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.mapv(|v| v.clamp(lo, hi)))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softmax(a), softmax_rows)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sum(a), |x| Array2::from_elem((1, 1), x.sum()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        let rg = self.needs(&[a, b]);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = self.needs(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.needs(&[a]);
        self.push(value, Op::SliceRows(a, start, len), rg)
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        self.slice_rows(a, index, 1)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), indices);
        let rg = self.needs(&[a]);
        self.push(value, Op::Gather(a, indices.to_vec()), rg)
    }

    /// Gradients of the scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || g.dot(&bv.t()));
                    self.acc(&mut grads, *b, || av.t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || g.dot(bv));
                    self.acc(&mut grads, *b, || g.t().dot(av));
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || -&g);
                }
                Op::AddRow(a, row) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *row, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || &g * bv);
                    self.acc(&mut grads, *b, || &g * av);
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, || &g * *c),
                Op::AddScalar(a) => self.acc(&mut grads, *a, || g.clone()),
                Op::Exp(a) => self.acc(&mut grads, *a, || &g * y),
                Op::Log(a) => self.acc(&mut grads, *a, || &g / self.value(*a)),
                Op::Square(a) => self.acc(&mut grads, *a, || &g * &(self.value(*a) * 2.0)),
                Op::Softplus(a) => {
                    self.acc(&mut grads, *a, || &g * &self.value(*a).mapv(sigmoid));
                }
                Op::Sigmoid(a) => self.acc(&mut grads, *a, || &g * &y.mapv(|s| s * (1.0 - s))),
                Op::Tanh(a) => self.acc(&mut grads, *a, || &g * &y.mapv(|t| 1.0 - t * t)),
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, || {
                        let mut out = g.clone();
                        Zip::from(&mut out).and(x).for_each(|o, &v| {
                            if v < *lo || v > *hi {
                                *o = 0.0;
                            }
                        });
                        out
                    });
                }
                Op::Softmax(a) => {
                    self.acc(&mut grads, *a, || {
                        let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                        y * &(&g - &dot)
                    });
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).raw_dim();
                    self.acc(&mut grads, *a, || Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    self.acc(&mut grads, *a, || g.slice(s![.., ..split]).to_owned());
                    self.acc(&mut grads, *b, || g.slice(s![.., split..]).to_owned());
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        self.acc(&mut grads, *p, || g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let shape = self.value(*a).raw_dim();
                    self.acc(&mut grads, *a, || {
                        let mut full = Array2::zeros(shape);
                        full.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                        full
                    });
                }
                Op::Gather(a, indices) => {
                    let shape = self.value(*a).raw_dim();
                    self.acc(&mut grads, *a, || {
                        let mut full = Array2::zeros(shape);
                        for (r, &src) in indices.iter().enumerate() {
                            let mut dst = full.row_mut(src);
                            dst += &g.row(r);
                        }
                        full
                    });
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], target: Var, f: impl FnOnce() -> Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let update = f();
        match &mut grads[target.0] {
            Some(existing) => *existing += &update,
            slot @ None => *slot = Some(update),
        }
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut hi = x.clone();
            hi[[r, c]] += h;
            let mut lo = x.clone();
            lo[[r, c]] -= h;
            out[[r, c]] = (f(&hi) - f(&lo)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        let diff = (a - b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < tol, "max abs diff {diff}\n{a}\nvs\n{b}");
    }

    fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.input(x.clone());
            let out = build(&mut tape, v);
            tape.scalar(out)
        };
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out);
        assert_close(grads.get(v).unwrap(), &numeric_grad(&x, eval), 1e-6);
    }

    #[test]
    fn elementwise_ops() {
        let x = array![[0.3, -1.2, 0.7], [2.0, -0.4, 0.1]];
        check(x.clone(), |t, v| {
            let a = t.softplus(v);
            let b = t.sigmoid(v);
            let c = t.tanh(v);
            let d = t.mul(a, b);
            let e = t.add(d, c);
            let f = t.exp(e);
            let g = t.square(f);
            t.sum(g)
        });
        check(x.mapv(f64::abs) + 0.5, |t, v| {
            let l = t.log(v);
            let s = t.scale(l, 3.0);
            let a = t.add_scalar(s, 1.0);
            t.sum(a)
        });
    }

    #[test]
    fn matrix_ops() {
        let x = array![[0.3, -1.2, 0.7], [2.0, -0.4, 0.1]];
        let w = array![[0.5, 0.1], [-0.3, 0.8], [0.2, -0.6]];
        check(x.clone(), |t, v| {
            let wv = t.constant(w.clone());
            let m = t.matmul(v, wv);
            let sm = t.softmax(m);
            let lg = t.log(sm);
            let b = t.constant(array![[1.0, 2.0]]);
            let r = t.add_row(lg, b);
            let sq = t.square(r);
            t.sum(sq)
        });
        check(w.clone(), |t, v| {
            let xv = t.constant(x.t().to_owned());
            let m = t.matmul_t(v, xv);
            let ex = t.exp(m);
            t.sum(ex)
        });
        check(x.clone(), |t, v| {
            let wv = t.constant(w.t().to_owned());
            let m = t.matmul_t(wv, v);
            let sq = t.square(m);
            t.sum(sq)
        });
    }

    #[test]
    fn structural_ops() {
        let x = array![[0.3, -1.2], [2.0, -0.4], [0.1, 0.9]];
        check(x.clone(), |t, v| {
            let a = t.slice_rows(v, 1, 2);
            let b = t.gather_rows(v, &[0, 0, 2]);
            let c = t.row(v, 2);
            let stacked = t.concat_rows(&[a, b, c]);
            let wide = t.concat_cols(stacked, stacked);
            let cl = t.clamp(wide, -1.0, 1.0);
            let e = t.exp(cl);
            let sub = t.sub(e, wide);
            let sq = t.square(sub);
            t.sum(sq)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let x = t.input(array![[3.0, 4.0]]);
        let m = t.mul(c, x);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn softmax_is_stable() {
        let x = array![[1000.0, 1000.0, -1000.0]];
        let y = softmax_rows(&x);
        assert_eq!(y, array![[0.5, 0.5, 0.0]]);
    }
}
