//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] lives for one training step: parameters and inputs are pushed
//! as leaves, every op appends a node holding its forward value, and
//! [`Tape::backward`] walks the nodes in reverse accumulating vector-Jacobian
//! products. The tape is dropped afterwards.

use crate::error::{BracError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a @ bᵀ`
    MatMulBt(Var, Var),
    /// `[m, n] + [1, n]`
    AddRow(Var, Var),
    /// `[m, n] * [1, n]`
    MulRow(Var, Var),
    /// `[m, n] * [m, 1]`
    MulCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    MeanCols(Var),
    MinCols(Var),
    MaxCols(Var),
    RepeatRows(Var, usize),
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    LaplaceKernelMean {
        x: Var,
        y: Var,
        groups: usize,
        sigma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not reach it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(r, c, g.clone()))
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable variables.
    pub fn wrt(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        self.get(v).unwrap_or_else(|| Tensor::zeros(r, c))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.shape().len(), 2, "tape ops need rank-2 tensors");
    (t.shape()[0], t.shape()[1])
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        dims(&value);
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that gradients stop at.
    pub fn constant(&mut self, value: Tensor) -> Var {
        dims(&value);
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let (r, c) = dims(va);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(r, c, data), op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(k, kb, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            (m, k),
            false,
            self.value(b).data(),
            (k, n),
            false,
            &mut out,
            0.0,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(m, n, out), Op::MatMul(a, b), needs)
    }

    /// `a @ bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, kb) = self.shape(b);
        assert_eq!(k, kb, "matmul_bt inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            (m, k),
            false,
            self.value(b).data(),
            (n, k),
            true,
            &mut out,
            0.0,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(m, n, out), Op::MatMulBt(a, b), needs)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "row broadcast shape mismatch");
        let r = self.value(row).data().to_vec();
        let data = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect();
        let needs = self.needs(a) || self.needs(row);
        self.push(Tensor::from_vec(m, n, data), op, needs)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "column broadcast shape mismatch");
        let c = self.value(col).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * c[i / n])
            .collect();
        let needs = self.needs(a) || self.needs(col);
        self.push(Tensor::from_vec(m, n, data), Op::MulCol(a, col), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Elementwise clamp; the gradient is passed through inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), needs)
    }

    fn reduce_cols(&mut self, a: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Var {
        let (m, n) = self.shape(a);
        assert!(n > 0, "column reduction over zero columns");
        let data = self.value(a).data().chunks(n).map(f).collect();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(m, 1, data), op, needs)
    }

    /// Row sums, `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.reduce_cols(a, Op::SumCols(a), |r| r.iter().sum())
    }

    /// Row means, `[m, n] -> [m, 1]`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        self.reduce_cols(a, Op::MeanCols(a), |r| {
            r.iter().sum::<f64>() / r.len() as f64
        })
    }

    /// Row minima; ties route the gradient to the first index.
    pub fn min_cols(&mut self, a: Var) -> Var {
        self.reduce_cols(a, Op::MinCols(a), |r| r.iter().copied().fold(f64::INFINITY, f64::min))
    }

    /// Row maxima; ties route the gradient to the first index.
    pub fn max_cols(&mut self, a: Var) -> Var {
        self.reduce_cols(a, Op::MaxCols(a), |r| {
            r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
    }

    /// Each row repeated `n` times consecutively, `[m, c] -> [m * n, c]`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let value = self.value(a).repeat_rows(n);
        let needs = self.needs(a);
        self.push(value, Op::RepeatRows(a, n), needs)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(vec![rows, cols])
            .expect("reshape size mismatch");
        let needs = self.needs(a);
        self.push(value, Op::Reshape(a), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).concat_cols(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols(a, b), needs)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start <= end && end <= n, "slice_cols out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in self.value(a).data().chunks(n.max(1)).take(m) {
            data.extend_from_slice(&r[start..end]);
        }
        let needs = self.needs(a);
        self.push(Tensor::from_vec(m, w, data), Op::SliceCols(a, start, end), needs)
    }

    /// Per-group mean of the Laplacian kernel `exp(-‖x - y‖₁ / sigma)` over
    /// all cross pairs. `x` holds `groups` consecutive blocks of rows, as does
    /// `y`; the output is `[groups, 1]`. `x` and `y` may be the same variable.
    pub fn laplace_kernel_mean(&mut self, x: Var, y: Var, groups: usize, sigma: f64) -> Var {
        let (rx, d) = self.shape(x);
        let (ry, dy) = self.shape(y);
        assert_eq!(d, dy, "kernel inputs need equal widths");
        assert!(groups > 0 && rx % groups == 0 && ry % groups == 0, "bad grouping");
        let (n, m) = (rx / groups, ry / groups);
        let (xv, yv) = (self.value(x).data(), self.value(y).data());
        let mut out = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut acc = 0.0;
            for p in 0..n {
                let xr = &xv[(g * n + p) * d..(g * n + p + 1) * d];
                for q in 0..m {
                    let yr = &yv[(g * m + q) * d..(g * m + q + 1) * d];
                    let l1: f64 = xr.iter().zip(yr).map(|(a, b)| (a - b).abs()).sum();
                    acc += (-l1 / sigma).exp();
                }
            }
            out.push(acc / (n * m) as f64);
        }
        let needs = self.needs(x) || self.needs(y);
        self.push(
            Tensor::from_vec(groups, 1, out),
            Op::LaplaceKernelMean {
                x,
                y,
                groups,
                sigma,
            },
            needs,
        )
    }

    /// Gradients of the scalar `loss` w.r.t. every node that reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(BracError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let len = loss.0 + 1;
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| dims(&n.value)).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..len).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let (m, n) = dims(&node.value);
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;

        // Adds `contrib` into the gradient slot of `v`.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, contrib: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            contrib(slot);
        }
        let numel = |v: Var| self.nodes[v.0].value.numel();

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(a);
                if needs(a) {
                    acc(grads, a, m * k, |s| {
                        gemm(g, (m, n), false, val(b), (k, n), true, s, 1.0)
                    });
                }
                if needs(b) {
                    acc(grads, b, k * n, |s| {
                        gemm(val(a), (m, k), true, g, (m, n), false, s, 1.0)
                    });
                }
            }
            Op::MatMulBt(a, b) => {
                let (_, k) = self.shape(a);
                if needs(a) {
                    acc(grads, a, m * k, |s| {
                        gemm(g, (m, n), false, val(b), (n, k), false, s, 1.0)
                    });
                }
                if needs(b) {
                    acc(grads, b, n * k, |s| {
                        gemm(g, (m, n), true, val(a), (m, k), false, s, 1.0)
                    });
                }
            }
            Op::AddRow(a, r) => {
                if needs(a) {
                    acc(grads, a, m * n, |s| add_into(s, g));
                }
                if needs(r) {
                    acc(grads, r, n, |s| {
                        for row in g.chunks(n) {
                            add_into(s, row);
                        }
                    });
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(a), val(r));
                if needs(a) {
                    acc(grads, a, m * n, |s| {
                        for (j, x) in s.iter_mut().enumerate() {
                            *x += g[j] * rv[j % n];
                        }
                    });
                }
                if needs(r) {
                    acc(grads, r, n, |s| {
                        for (j, (gj, aj)) in g.iter().zip(av).enumerate() {
                            s[j % n] += gj * aj;
                        }
                    });
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (val(a), val(c));
                if needs(a) {
                    acc(grads, a, m * n, |s| {
                        for (j, x) in s.iter_mut().enumerate() {
                            *x += g[j] * cv[j / n];
                        }
                    });
                }
                if needs(c) {
                    acc(grads, c, m, |s| {
                        for (j, (gj, aj)) in g.iter().zip(av).enumerate() {
                            s[j / n] += gj * aj;
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    acc(grads, a, m * n, |s| add_into(s, g));
                }
                if needs(b) {
                    acc(grads, b, m * n, |s| add_into(s, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    acc(grads, a, m * n, |s| add_into(s, g));
                }
                if needs(b) {
                    acc(grads, b, m * n, |s| {
                        s.iter_mut().zip(g).for_each(|(x, gj)| *x -= gj)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    acc(grads, a, m * n, |s| {
                        for j in 0..s.len() {
                            s[j] += g[j] * bv[j];
                        }
                    });
                }
                if needs(b) {
                    acc(grads, b, m * n, |s| {
                        for j in 0..s.len() {
                            s[j] += g[j] * av[j];
                        }
                    });
                }
            }
            Op::Scale(a, c) => acc(grads, a, m * n, |s| {
                s.iter_mut().zip(g).for_each(|(x, gj)| *x += gj * c)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(grads, a, m * n, |s| add_into(s, g))
            }
            Op::Relu(a) => acc(grads, a, m * n, |s| {
                for j in 0..s.len() {
                    if out[j] > 0.0 {
                        s[j] += g[j];
                    }
                }
            }),
            Op::Tanh(a) => acc(grads, a, m * n, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            Op::Exp(a) => acc(grads, a, m * n, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * out[j];
                }
            }),
            Op::Log(a) => {
                let av = val(a);
                acc(grads, a, m * n, |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] / av[j];
                    }
                })
            }
            Op::Square(a) => {
                let av = val(a);
                acc(grads, a, m * n, |s| {
                    for j in 0..s.len() {
                        s[j] += 2.0 * g[j] * av[j];
                    }
                })
            }
            Op::Sqrt(a) => acc(grads, a, m * n, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * 0.5 / out[j];
                }
            }),
            Op::Softplus(a) => {
                let av = val(a);
                acc(grads, a, m * n, |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * sigmoid(av[j]);
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(a);
                acc(grads, a, m * n, |s| {
                    for j in 0..s.len() {
                        if av[j] >= lo && av[j] <= hi {
                            s[j] += g[j];
                        }
                    }
                })
            }
            Op::SumAll(a) => {
                let len = numel(a);
                acc(grads, a, len, |s| s.iter_mut().for_each(|x| *x += g[0]))
            }
            Op::MeanAll(a) => {
                let len = numel(a);
                let gm = g[0] / len as f64;
                acc(grads, a, len, |s| s.iter_mut().for_each(|x| *x += gm))
            }
            Op::SumCols(a) | Op::MeanCols(a) => {
                let (_, c) = self.shape(a);
                let w = if matches!(node.op, Op::MeanCols(_)) {
                    1.0 / c as f64
                } else {
                    1.0
                };
                acc(grads, a, m * c, |s| {
                    for (j, x) in s.iter_mut().enumerate() {
                        *x += g[j / c] * w;
                    }
                })
            }
            Op::MinCols(a) | Op::MaxCols(a) => {
                let (_, c) = self.shape(a);
                let av = val(a);
                acc(grads, a, m * c, |s| {
                    for r in 0..m {
                        let row = &av[r * c..(r + 1) * c];
                        let pick = row.iter().position(|&x| x == out[r]).unwrap_or(0);
                        s[r * c + pick] += g[r];
                    }
                })
            }
            Op::RepeatRows(a, times) => {
                let (ra, c) = self.shape(a);
                acc(grads, a, ra * c, |s| {
                    for r in 0..ra {
                        for t in 0..times {
                            let src = &g[(r * times + t) * c..(r * times + t + 1) * c];
                            add_into(&mut s[r * c..(r + 1) * c], src);
                        }
                    }
                })
            }
            Op::ConcatCols(a, b) => {
                let (_, ca) = self.shape(a);
                let (_, cb) = self.shape(b);
                if needs(a) {
                    acc(grads, a, m * ca, |s| {
                        for r in 0..m {
                            add_into(&mut s[r * ca..(r + 1) * ca], &g[r * n..r * n + ca]);
                        }
                    });
                }
                if needs(b) {
                    acc(grads, b, m * cb, |s| {
                        for r in 0..m {
                            add_into(&mut s[r * cb..(r + 1) * cb], &g[r * n + ca..(r + 1) * n]);
                        }
                    });
                }
            }
            Op::SliceCols(a, start, end) => {
                let (_, c) = self.shape(a);
                acc(grads, a, m * c, |s| {
                    for r in 0..m {
                        add_into(&mut s[r * c + start..r * c + end], &g[r * n..(r + 1) * n]);
                    }
                })
            }
            Op::LaplaceKernelMean {
                x,
                y,
                groups,
                sigma,
            } => {
                let (rx, d) = self.shape(x);
                let (ry, _) = self.shape(y);
                let (np, mq) = (rx / groups, ry / groups);
                let (xv, yv) = (val(x), val(y));
                let mut gx = vec![0.0; rx * d];
                let mut gy = vec![0.0; ry * d];
                for grp in 0..groups {
                    let w = g[grp] / ((np * mq) as f64 * sigma);
                    for p in 0..np {
                        let xi = grp * np + p;
                        let xr = &xv[xi * d..(xi + 1) * d];
                        for q in 0..mq {
                            let yi = grp * mq + q;
                            let yr = &yv[yi * d..(yi + 1) * d];
                            let l1: f64 = xr.iter().zip(yr).map(|(a, b)| (a - b).abs()).sum();
                            let k = (-l1 / sigma).exp() * w;
                            for t in 0..d {
                                let sg = sign(xr[t] - yr[t]);
                                gx[xi * d + t] -= k * sg;
                                gy[yi * d + t] += k * sg;
                            }
                        }
                    }
                }
                if needs(x) {
                    acc(grads, x, rx * d, |s| add_into(s, &gx));
                }
                if needs(y) {
                    acc(grads, y, ry * d, |s| add_into(s, &gy));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let theta = tape.param(t(2, 2, &[0.3, -1.0, 2.0, 5.0]));
        let loss = tape.sum(theta);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(theta).data(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let theta = tape.param(t(1, 3, &[0.3, -1.0, 2.0]));
        let sq = tape.square(theta);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(theta).data(), &[0.3, -1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let theta = tape.param(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(theta), Err(BracError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(1, 1, &[3.0]));
        let p = tape.param(t(1, 1, &[2.0]));
        let prod = tape.mul(c, p);
        let g = tape.backward(prod).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(p).item(), 3.0);
    }

    #[test]
    fn min_cols_routes_to_first_argmin() {
        let mut tape = Tape::new();
        let p = tape.param(t(2, 3, &[1.0, 0.5, 0.5, 4.0, 3.0, 9.0]));
        let m = tape.min_cols(p);
        assert_eq!(tape.value(m).data(), &[0.5, 3.0]);
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(p).data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    /// Central differences of `f` at `x` against the tape gradient.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: &[f64]) {
        let n = x.len();
        let eval = |xs: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.param(t(1, n, xs));
            let y = build(&mut tape, v);
            let s = tape.sum(y);
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let v = tape.param(t(1, n, x));
        let y = build(&mut tape, v);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().wrt(v);
        let h = 1e-6;
        for i in 0..n {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            let fd = (eval(&up) - eval(&down)) / (2.0 * h);
            assert!(
                (fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "coordinate {i}: fd {fd} vs autodiff {}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = [0.3, -1.2, 2.1, 0.7];
        check_unary(|t, v| t.tanh(v), &x);
        check_unary(|t, v| t.exp(v), &x);
        check_unary(|t, v| t.softplus(v), &x);
        check_unary(|t, v| t.square(v), &x);
        check_unary(|t, v| t.clamp(v, -1.0, 1.0), &x);
        check_unary(
            |t, v| {
                let e = t.exp(v);
                let l = t.log(e);
                let r = t.sqrt(e);
                t.add(r, l)
            },
            &x,
        );
        check_unary(
            |t, v| {
                let r = t.repeat_rows(v, 3);
                let sq = t.square(r);
                t.reshape(sq, 3, 4)
            },
            &x,
        );
        check_unary(
            |t, v| {
                let a = t.slice_cols(v, 1, 3);
                let b = t.slice_cols(v, 0, 2);
                let c = t.concat_cols(a, b);
                let m = t.min_cols(c);
                let mx = t.max_cols(c);
                t.mul(m, mx)
            },
            &x,
        );
    }

    #[test]
    fn laplace_kernel_mean_matches_finite_differences() {
        // two groups, two rows each, width 2
        let x = [0.1, 0.4, -0.3, 0.2, 0.5, 0.9, 1.3, -0.7];
        check_unary(
            |t, v| {
                let xy = t.reshape(v, 4, 2);
                let a = t.slice_cols(xy, 0, 2);
                let shifted = t.add_scalar(a, 0.05);
                t.laplace_kernel_mean(a, shifted, 2, 0.7)
            },
            &x,
        );
        check_unary(
            |t, v| {
                let xy = t.reshape(v, 4, 2);
                t.laplace_kernel_mean(xy, xy, 2, 1.3)
            },
            &x,
        );
    }
}
