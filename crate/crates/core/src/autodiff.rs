//! Minimal tape-based reverse-mode differentiation over dense `f64`
//! matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the tape once in reverse and returns the gradient of a scalar
//! output with respect to every node.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    Abs(Var),
    Acos { x: Var, clamped: Vec<bool> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    CrossRows(Var, Var),
    Chamfer { a: Var, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros if the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1×n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine `1×n` `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// `acos` with the argument clamped to `[-1 + eps, 1 - eps]`; the
    /// gradient is zero where the clamp is active.
    pub fn acos_clamped(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let clamped: Vec<bool> = xv.iter().map(|&v| v.abs() > 1.0 - eps).collect();
        let v = xv.mapv(|v| v.clamp(-1.0 + eps, 1.0 - eps).acos());
        self.push(v, Op::Acos { x, clamped })
    }

    /// Scales every row to unit length; rows shorter than `1e-12` are kept
    /// as they are divided by `1e-12`.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row /= n;
            norms.push(n);
        }
        self.push(v, Op::NormalizeRows { x, norms })
    }

    /// Row-wise cross product of two `m×3` tensors.
    pub fn cross_rows(&mut self, a: Var, b: Var) -> Var {
        let v = cross(self.value(a), self.value(b));
        self.push(v, Op::CrossRows(a, b))
    }

    /// Symmetric mean Euclidean Chamfer distance between the rows of `a`
    /// and the constant point set `b`, differentiable in `a`.
    pub fn chamfer(&mut self, a: Var, b: &Tensor) -> Var {
        let av = self.value(a);
        let (na, nb) = (av.nrows(), b.nrows());
        let mut grad = Tensor::zeros((na, 3));
        let mut total = 0.0;
        let dist = |i: usize, j: usize| {
            let d = [av[[i, 0]] - b[[j, 0]], av[[i, 1]] - b[[j, 1]], av[[i, 2]] - b[[j, 2]]];
            (d, (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
        };
        let add_grad = |grad: &mut Tensor, i: usize, d: [f64; 3], n: f64, w: f64| {
            if n > 1e-12 {
                for c in 0..3 {
                    grad[[i, c]] += w * d[c] / n;
                }
            }
        };
        for i in 0..na {
            let (mut best, mut bj) = (f64::INFINITY, 0);
            for j in 0..nb {
                let n = dist(i, j).1;
                if n < best {
                    best = n;
                    bj = j;
                }
            }
            total += best / na as f64;
            let (d, n) = dist(i, bj);
            add_grad(&mut grad, i, d, n, 1.0 / na as f64);
        }
        for j in 0..nb {
            let (mut best, mut bi) = (f64::INFINITY, 0);
            for i in 0..na {
                let n = dist(i, j).1;
                if n < best {
                    best = n;
                    bi = i;
                }
            }
            total += best / nb as f64;
            let (d, n) = dist(bi, j);
            add_grad(&mut grad, bi, d, n, 1.0 / nb as f64);
        }
        self.push(Tensor::from_elem((1, 1), total), Op::Chamfer { a, grad })
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones((1, 1)));
        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    acc(&mut grads, *a, g.dot(self.value(*b)));
                    acc(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let s = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= s * y);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Tensor::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dhh = dh.dot(&h);
                        let k = inv_std[r] / n;
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = k * (n * dh[c] - sum_dh - h[c] * sum_dhh);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Tensor::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let d = g.broadcast(self.value(*a).raw_dim()).expect("row broadcast").to_owned() / rows as f64;
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => acc(&mut grads, *a, Tensor::from_elem(self.value(*a).raw_dim(), g[[0, 0]])),
                Op::Abs(a) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Acos { x, clamped } => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.raw_dim());
                    for ((d, (&x, &gv)), &c) in d.iter_mut().zip(xv.iter().zip(g.iter())).zip(clamped) {
                        if !c {
                            *d = -gv / (1.0 - x * x).sqrt();
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let proj = g.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            d[[r, c]] = (g[[r, c]] - proj * y[[r, c]]) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::CrossRows(a, b) => {
                    // d(a×b) = da×b + a×db; adjoints are b×g and g×a
                    acc(&mut grads, *a, cross(self.value(*b), &g));
                    acc(&mut grads, *b, cross(&g, self.value(*a)));
                }
                Op::Chamfer { a, grad } => acc(&mut grads, *a, grad * g[[0, 0]]),
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn cross(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.dim(), b.dim());
    assert_eq!(a.ncols(), 3, "cross product needs 3 columns");
    let mut out = Tensor::zeros(a.raw_dim());
    for r in 0..a.nrows() {
        out[[r, 0]] = a[[r, 1]] * b[[r, 2]] - a[[r, 2]] * b[[r, 1]];
        out[[r, 1]] = a[[r, 2]] * b[[r, 0]] - a[[r, 0]] * b[[r, 2]];
        out[[r, 2]] = a[[r, 0]] * b[[r, 1]] - a[[r, 1]] * b[[r, 0]];
    }
    out
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Compares the tape gradient of `f` at `inputs` with central differences.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let run = |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = run(&inputs);
        let grads = tape.backward(out);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(vars[k], input.dim());
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += eps;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= eps;
                let (tp, _, op) = run(&plus);
                let (tm, _, om) = run(&minus);
                let fd = (tp.scalar(op) - tm.scalar(om)) / (2.0 * eps);
                worst = worst.max(relative_error(g[[r, c]], fd, 1e-6));
            }
        }
        worst
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_tensor(&mut rng, 4, 3);
        let b = rand_tensor(&mut rng, 3, 5);
        let c = rand_tensor(&mut rng, 4, 3);
        let row = rand_tensor(&mut rng, 1, 3);
        let w = rand_tensor(&mut rng, 4, 5);
        let tol = 1e-7;
        assert!(check(vec![a.clone(), b.clone(), w.clone()], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let p = t.mul(m, v[2]);
            t.sum_all(p)
        }) < tol);
        assert!(check(vec![a.clone(), c.clone()], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            let m = t.mul(m, m);
            t.sum_all(m)
        }) < tol);
        assert!(check(vec![a.clone(), c.clone(), row.clone()], |t, v| {
            let s = t.sub(v[0], v[1]);
            let s = t.add_row(s, v[2]);
            let s = t.scale(s, 1.7);
            let s = t.add(s, v[1]);
            let m = t.mul(s, s);
            t.sum_all(m)
        }) < tol);
        assert!(check(vec![a.clone(), w.clone()], |t, v| {
            let r = t.relu(v[0]);
            let s = t.abs(v[1]);
            let rr = t.mul(r, r);
            let x = t.sum_all(rr);
            let y = t.sum_all(s);
            let z = t.add(x, y);
            t.scale(z, 0.5)
        }) < tol);
        assert!(check(vec![a.clone(), c.clone()], |t, v| {
            let sm = t.softmax_rows(v[0]);
            let p = t.mul(sm, v[1]);
            t.sum_all(p)
        }) < tol);
        let gamma = rand_tensor(&mut rng, 1, 5);
        let beta = rand_tensor(&mut rng, 1, 5);
        assert!(check(vec![w.clone(), gamma, beta, rand_tensor(&mut rng, 4, 5)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let p = t.mul(y, v[3]);
            t.sum_all(p)
        }) < 1e-6);
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 2);
        let c = rand_tensor(&mut rng, 2, 6);
        let w = rand_tensor(&mut rng, 5, 6);
        assert!(check(vec![a, b, c, w], |t, v| {
            let x = t.concat_cols(&[v[0], v[1]]);
            let y = t.concat_rows(&[x, v[2]]);
            let y = t.mul(y, v[3]);
            let z = t.slice_cols(y, 1, 5);
            let m = t.mean_rows(z);
            let m = t.mul(m, m);
            t.sum_all(m)
        }) < 1e-7);
    }

    #[test]
    fn geometric_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 2, 3);
        let b = rand_tensor(&mut rng, 2, 3);
        let w = rand_tensor(&mut rng, 2, 3);
        assert!(check(vec![a.clone(), b.clone(), w.clone()], |t, v| {
            let n = t.normalize_rows(v[0]);
            let x = t.cross_rows(n, v[1]);
            let p = t.mul(x, v[2]);
            t.sum_all(p)
        }) < 1e-7);
        let x = Tensor::from_shape_fn((1, 3), |(_, j)| 0.3 * j as f64 - 0.4);
        assert!(check(vec![x], |t, v| {
            let y = t.acos_clamped(v[0], 1e-7);
            t.sum_all(y)
        }) < 1e-7);
        let target = rand_tensor(&mut rng, 7, 3);
        let pts = rand_tensor(&mut rng, 5, 3);
        assert!(check(vec![pts], |t, v| t.chamfer(v[0], &target)) < 1e-6);
    }

    #[test]
    fn chamfer_value_matches_definition() {
        let mut tape = Tape::new();
        let a = tape.leaf(ndarray::array![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let out = tape.chamfer(a, &ndarray::array![[1.0, 0.0, 0.0]]);
        assert!((tape.scalar(out) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn unused_inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones((2, 2)));
        let b = tape.leaf(Tensor::ones((2, 2)));
        let s = tape.sum_all(a);
        let g = tape.backward(s);
        assert!(g.get(b).is_none());
        assert_eq!(g.get(a).unwrap(), &Tensor::ones((2, 2)));
    }
}
