//! A small reverse-mode automatic differentiation tape over flat `f64` buffers.
//!
//! Every differentiable computation in the engine (feature maps, noise
//! prediction, DDIM steps, the drag losses) is recorded on a [`Tape`].
//! Leaves are either tracked parameters or constants. [`Tape::detach`] is the
//! stop-gradient operator: it copies a value into a fresh constant leaf, so
//! the backward pass can never reach anything upstream of it.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map stored row-compressed:
/// `out[j] = sum(weight * input[index])` over the entries of row `j`.
///
/// Used for every layout change (transposes, patch extraction) and for
/// bilinear sampling at fixed positions.
#[derive(Debug, Clone, Default)]
pub struct Gather {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
    input_len: usize,
}

impl Gather {
    pub fn new(input_len: usize) -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
            weights: Vec::new(),
            input_len,
        }
    }

    pub fn push_row<I: IntoIterator<Item = (usize, f64)>>(&mut self, entries: I) {
        for (idx, w) in entries {
            assert!(idx < self.input_len, "gather index {idx} out of range");
            self.indices.push(idx);
            self.weights.push(w);
        }
        self.offsets.push(self.indices.len());
    }

    pub fn output_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_len);
        (0..self.output_len())
            .map(|j| {
                (self.offsets[j]..self.offsets[j + 1])
                    .map(|e| self.weights[e] * input[self.indices[e]])
                    .sum()
            })
            .collect()
    }

    fn apply_transpose_into(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (j, g) in grad_out.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            for e in self.offsets[j]..self.offsets[j + 1] {
                grad_in[self.indices[e]] += self.weights[e] * g;
            }
        }
    }

    /// Permutation taking a row-major `rows x cols` matrix to its transpose.
    pub fn transpose(rows: usize, cols: usize) -> Self {
        let mut g = Self::new(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                g.push_row([(r * cols + c, 1.0)]);
            }
        }
        g
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a (m x k) * b (k x n)`
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `a (m x k) * b^T` where `b` is `n x k`
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// Adds a length-`cols` vector to every row of `a`.
    AddRowBias { a: Var, bias: Var, cols: usize },
    Tanh(Var),
    SoftmaxRows { a: Var, cols: usize },
    Gather(Var, Arc<Gather>),
    AbsSum(Var),
    Sum(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Tanh(a) | Op::AbsSum(a) | Op::Sum(a) => vec![a],
            Op::MatMul { a, b, .. } | Op::MatMulT { a, b, .. } => vec![a, b],
            Op::AddRowBias { a, bias, .. } => vec![a, bias],
            Op::SoftmaxRows { a, .. } => vec![a],
            Op::Gather(a, _) => vec![a],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Recording of a computation; single-threaded and append-only.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`]; only tracked nodes carry one.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the given length when no path reaches it.
    pub fn wrt_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Vec<f64>, op: Op) -> Var {
        let tracked = op
            .parents()
            .iter()
            .any(|p| self.nodes.borrow()[p.0].tracked);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    /// A leaf the backward pass differentiates with respect to.
    pub fn param(&self, value: Vec<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Vec<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(nodes.len() - 1)
    }

    /// Stop-gradient: same value, fresh untracked leaf with no parents.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.nodes.borrow();
        assert_eq!(n[v.0].value.len(), 1, "not a scalar");
        n[v.0].value[0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.len()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Direct inputs of `v` in the recorded graph.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes.borrow()[v.0].op.parents()
    }

    /// True when `ancestor` is reachable from `v` by walking parent edges.
    pub fn depends_on(&self, v: Var, ancestor: Var) -> bool {
        let nodes = self.nodes.borrow();
        let mut stack = vec![v];
        let mut seen = vec![false; nodes.len()];
        while let Some(cur) = stack.pop() {
            if cur == ancestor {
                return true;
            }
            if cur.0 < ancestor.0 || seen[cur.0] {
                continue;
            }
            seen[cur.0] = true;
            stack.extend(nodes[cur.0].op.parents());
        }
        false
    }

    /// Sign pattern of every argument fed to an absolute-value reduction.
    /// Finite-difference checks use it to reject steps that cross a kink.
    pub fn abs_signature(&self) -> Vec<i8> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for n in nodes.iter() {
            if let Op::AbsSum(a) = n.op {
                out.extend(nodes[a.0].value.iter().map(|x| sign(*x) as i8));
            }
        }
        out
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "elementwise length mismatch");
        va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.borrow()[a.0].value.iter().map(|x| f(*x)).collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let v = self.unary(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.unary(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn matmul(&self, a: Var, b: Var, m: usize, k: usize, n: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.len(), m * k);
            assert_eq!(vb.len(), k * n);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = va[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for (o, y) in row.iter_mut().zip(&vb[p * n..(p + 1) * n]) {
                        *o += x * y;
                    }
                }
            }
            out
        };
        self.push(v, Op::MatMul { a, b, m, k, n })
    }

    pub fn matmul_t(&self, a: Var, b: Var, m: usize, k: usize, n: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.len(), m * k);
            assert_eq!(vb.len(), n * k);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let ra = &va[i * k..(i + 1) * k];
                for j in 0..n {
                    let rb = &vb[j * k..(j + 1) * k];
                    out[i * n + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                }
            }
            out
        };
        self.push(v, Op::MatMulT { a, b, m, k, n })
    }

    pub fn add_row_bias(&self, a: Var, bias: Var, cols: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[bias.0].value);
            assert_eq!(vb.len(), cols);
            assert_eq!(va.len() % cols, 0);
            va.iter()
                .enumerate()
                .map(|(i, x)| x + vb[i % cols])
                .collect()
        };
        self.push(v, Op::AddRowBias { a, bias, cols })
    }

    pub fn softmax_rows(&self, a: Var, cols: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            assert_eq!(va.len() % cols, 0);
            let mut out = vec![0.0; va.len()];
            for (row_in, row_out) in va.chunks(cols).zip(out.chunks_mut(cols)) {
                let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, x) in row_out.iter_mut().zip(row_in) {
                    *o = (x - max).exp();
                    total += *o;
                }
                row_out.iter_mut().for_each(|o| *o /= total);
            }
            out
        };
        self.push(v, Op::SoftmaxRows { a, cols })
    }

    pub fn gather(&self, a: Var, map: Arc<Gather>) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            map.apply(&nodes[a.0].value)
        };
        self.push(v, Op::Gather(a, map))
    }

    /// L1 norm reduced to a scalar.
    pub fn abs_sum(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.iter().map(|x| x.abs()).sum();
        self.push(vec![v], Op::AbsSum(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.iter().sum();
        self.push(vec![v], Op::Sum(a))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[output.0].tracked {
            return Grads { grads };
        }
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut acc = |target: Var, f: &dyn Fn(&mut [f64])| {
                if !nodes[target.0].tracked {
                    return;
                }
                let slot = grads[target.0]
                    .get_or_insert_with(|| vec![0.0; nodes[target.0].value.len()]);
                f(slot);
            };
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(b, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                }
                Op::Sub(a, b) => {
                    acc(a, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(b, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s -= g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(a, &|s| {
                        for j in 0..s.len() {
                            s[j] += g[j] * vb[j];
                        }
                    });
                    acc(b, &|s| {
                        for j in 0..s.len() {
                            s[j] += g[j] * va[j];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(a, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += c * g));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(a, &|s| {
                        for j in 0..s.len() {
                            s[j] += g[j] * (1.0 - y[j] * y[j]);
                        }
                    });
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    // dA = G B^T
                    acc(a, &|s| {
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let br = &vb[p * n..(p + 1) * n];
                                s[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    // dB = A^T G
                    acc(b, &|s| {
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = va[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, y) in s[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                    *o += x * y;
                                }
                            }
                        }
                    });
                }
                Op::MatMulT { a, b, m, k, n } => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    // C = A B^T; dA = G B, dB = G^T A
                    acc(a, &|s| {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    s[i * k + p] += gij * vb[j * k + p];
                                }
                            }
                        }
                    });
                    acc(b, &|s| {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    s[j * k + p] += gij * va[i * k + p];
                                }
                            }
                        }
                    });
                }
                Op::AddRowBias { a, bias, cols } => {
                    acc(a, &|s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(bias, &|s| {
                        for (j, gj) in g.iter().enumerate() {
                            s[j % cols] += gj;
                        }
                    });
                }
                Op::SoftmaxRows { a, cols } => {
                    let y = &node.value;
                    acc(a, &|s| {
                        for r in 0..y.len() / cols {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                s[r * cols + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::Gather(a, ref map) => {
                    acc(a, &|s| map.apply_transpose_into(&g, s));
                }
                Op::AbsSum(a) => {
                    let va = &nodes[a.0].value;
                    acc(a, &|s| {
                        for j in 0..s.len() {
                            s[j] += g[0] * sign(va[j]);
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(a, &|s| s.iter_mut().for_each(|s| *s += g[0]));
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }
}

/// Subgradient of `|x|` with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
