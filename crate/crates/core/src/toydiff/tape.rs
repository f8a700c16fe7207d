//! Reverse-mode differentiation over `f64` matrices, limited to the
//! operations the toy denoiser needs.

use nalgebra::DMatrix;

use crate::attention::{masked_softmax, same_location_heads};
use crate::error::{Error, Result};
use crate::mask::BoolMatrix;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: DMatrix<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Silu(Var),
    Rows {
        x: Var,
        start: usize,
    },
    Cols {
        x: Var,
        start: usize,
    },
    VStack(Vec<Var>),
    HStack(Vec<Var>),
    Mse {
        x: Var,
        target: DMatrix<f64>,
    },
    SameLocation {
        q: Var,
        k: Var,
        v: Var,
        n_frames: usize,
        n_heads: usize,
        weights: Vec<DMatrix<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints of a scalar output with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zero when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> DMatrix<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(self.shapes[v.0].0, self.shapes[v.0].1))
    }
}

fn shape_err(op: &str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Error {
    Error::Shape(format!(
        "{op}: {}x{} and {}x{}",
        a.nrows(),
        a.ncols(),
        b.nrows(),
        b.ncols()
    ))
}

fn col_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: DMatrix<f64>, op: Op) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(shape_err("matmul", x, y));
        }
        let v = x * y;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.ncols() {
            return Err(shape_err("matmul_t", x, y));
        }
        let v = x * y.transpose();
        self.push("matmul_t", v, Op::MatMulT(a, b))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        self.push("sub", v, Op::Sub(a, b))
    }

    /// Adds the `1 × c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (x, row) = (self.value(a), self.value(r));
        if row.nrows() != 1 || row.ncols() != x.ncols() {
            return Err(shape_err("add_row", x, row));
        }
        let mut v = x.clone();
        for mut vr in v.row_iter_mut() {
            vr += row;
        }
        self.push("add_row", v, Op::AddRow(a, r))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a) * s;
        self.push("scale", v, Op::Scale(a, s))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let v = self.value(a).component_mul(self.value(b));
        self.push("hadamard", v, Op::Hadamard(a, b))
    }

    /// Row-wise normalization with `1 × c` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.ncols();
        for p in [gamma, beta] {
            let pv = self.value(p);
            if pv.nrows() != 1 || pv.ncols() != c {
                return Err(shape_err("layer_norm", xv, pv));
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let cf = c as f64;
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for r in 0..xv.nrows() {
            let row = xv.row(r);
            let mean = row.sum() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cf;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (xv[(r, j)] - mean) * inv;
                xhat[(r, j)] = h;
                out[(r, j)] = h * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row softmax over mask-true entries; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &BoolMatrix) -> Result<Var> {
        let v = masked_softmax(self.value(a), mask)?;
        self.push("masked_softmax", v, Op::MaskedSoftmax(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", v, Op::Silu(a))
    }

    pub fn rows(&mut self, a: Var, start: usize, n: usize) -> Result<Var> {
        let x = self.value(a);
        if start + n > x.nrows() {
            return Err(Error::Shape(format!(
                "rows {start}..{} of {}",
                start + n,
                x.nrows()
            )));
        }
        let v = x.rows(start, n).into_owned();
        self.push("rows", v, Op::Rows { x: a, start })
    }

    pub fn cols(&mut self, a: Var, start: usize, n: usize) -> Result<Var> {
        let x = self.value(a);
        if start + n > x.ncols() {
            return Err(Error::Shape(format!(
                "columns {start}..{} of {}",
                start + n,
                x.ncols()
            )));
        }
        let v = x.columns(start, n).into_owned();
        self.push("cols", v, Op::Cols { x: a, start })
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("vstack of nothing".into()))?;
        let c = self.value(*first).ncols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).ncols() != c {
                return Err(shape_err("vstack", self.value(*first), self.value(p)));
            }
            rows += self.value(p).nrows();
        }
        let mut v = DMatrix::zeros(rows, c);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            v.rows_mut(at, pv.nrows()).copy_from(pv);
            at += pv.nrows();
        }
        self.push("vstack", v, Op::VStack(parts.to_vec()))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("hstack of nothing".into()))?;
        let r = self.value(*first).nrows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).nrows() != r {
                return Err(shape_err("hstack", self.value(*first), self.value(p)));
            }
            cols += self.value(p).ncols();
        }
        let mut v = DMatrix::zeros(r, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            v.columns_mut(at, pv.ncols()).copy_from(pv);
            at += pv.ncols();
        }
        self.push("hstack", v, Op::HStack(parts.to_vec()))
    }

    /// Multi-head attention of each token over the same pixel location in
    /// every frame; `q`, `k`, `v` stack `n_frames` frames row-wise.
    pub fn same_location_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_frames: usize,
        n_heads: usize,
    ) -> Result<Var> {
        let (out, weights) = same_location_heads(
            self.value(q),
            self.value(k),
            self.value(v),
            n_frames,
            n_heads,
        )?;
        self.push(
            "same_location_attention",
            out,
            Op::SameLocation {
                q,
                k,
                v,
                n_frames,
                n_heads,
                weights,
            },
        )
    }

    /// `1 × 1` mean squared difference to a constant target.
    pub fn mse(&mut self, a: Var, target: &DMatrix<f64>) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != target.shape() || x.is_empty() {
            return Err(shape_err("mse", x, target));
        }
        let v = (x - target).norm_squared() / x.len() as f64;
        self.push(
            "mse",
            DMatrix::from_element(1, 1, v),
            Op::Mse {
                x: a,
                target: target.clone(),
            },
        )
    }

    /// Adjoints of the `1 × 1` value `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a 1x1 output".into()));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));
        let acc = |grads: &mut Vec<Option<DMatrix<f64>>>, v: Var, g: DMatrix<f64>| match &mut grads
            [v.0]
        {
            Some(e) => *e += g,
            slot @ None => *slot = Some(g),
        };
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b).transpose());
                    acc(&mut grads, *b, self.value(*a).transpose() * &g);
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, g.transpose() * self.value(*a));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, col_sums(&g));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::Hadamard(a, b) => {
                    acc(&mut grads, *a, g.component_mul(self.value(*b)));
                    acc(&mut grads, *b, g.component_mul(self.value(*a)));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma);
                    let c = xhat.ncols() as f64;
                    acc(&mut grads, *beta, col_sums(&g));
                    acc(&mut grads, *gamma, col_sums(&g.component_mul(xhat)));
                    let mut dx = DMatrix::zeros(xhat.nrows(), xhat.ncols());
                    for r in 0..xhat.nrows() {
                        let dh: Vec<f64> =
                            (0..xhat.ncols()).map(|j| g[(r, j)] * gm[(0, j)]).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().enumerate().map(|(j, d)| d * xhat[(r, j)]).sum();
                        for (j, d) in dh.iter().enumerate() {
                            dx[(r, j)] = inv_std[r] / c * (c * d - s1 - xhat[(r, j)] * s2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = y.component_mul(&g);
                    for r in 0..y.nrows() {
                        let dot: f64 = dx.row(r).sum();
                        for j in 0..y.ncols() {
                            dx[(r, j)] -= y[(r, j)] * dot;
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Silu(a) => {
                    let d = self.value(*a).map(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *a, g.component_mul(&d));
                }
                Op::Rows { x, start } => {
                    let xv = self.value(*x);
                    let mut d = DMatrix::zeros(xv.nrows(), xv.ncols());
                    d.rows_mut(*start, g.nrows()).copy_from(&g);
                    acc(&mut grads, *x, d);
                }
                Op::Cols { x, start } => {
                    let xv = self.value(*x);
                    let mut d = DMatrix::zeros(xv.nrows(), xv.ncols());
                    d.columns_mut(*start, g.ncols()).copy_from(&g);
                    acc(&mut grads, *x, d);
                }
                Op::VStack(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.rows(at, n).into_owned());
                        at += n;
                    }
                }
                Op::HStack(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        acc(&mut grads, p, g.columns(at, n).into_owned());
                        at += n;
                    }
                }
                Op::Mse { x, target } => {
                    let xv = self.value(*x);
                    let k = 2.0 * g[(0, 0)] / xv.len() as f64;
                    acc(&mut grads, *x, (xv - target) * k);
                }
                Op::SameLocation {
                    q,
                    k,
                    v,
                    n_frames,
                    n_heads,
                    weights,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let n = *n_frames;
                    let hw = qv.nrows() / n;
                    let hd = qv.ncols() / n_heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut dq = DMatrix::zeros(qv.nrows(), qv.ncols());
                    let mut dk = dq.clone();
                    let mut dv = dq.clone();
                    let gather = |m: &DMatrix<f64>, p: usize, c: usize| {
                        DMatrix::from_fn(n, hd, |i, j| m[(i * hw + p, c + j)])
                    };
                    let scatter = |m: &mut DMatrix<f64>, src: &DMatrix<f64>, p: usize, c: usize| {
                        for i in 0..n {
                            for j in 0..hd {
                                m[(i * hw + p, c + j)] = src[(i, j)];
                            }
                        }
                    };
                    for p in 0..hw {
                        for h in 0..*n_heads {
                            let c = h * hd;
                            let w = &weights[p * n_heads + h];
                            let go = gather(&g, p, c);
                            let (qp, kp, vp) =
                                (gather(qv, p, c), gather(kv, p, c), gather(vv, p, c));
                            let dw = &go * vp.transpose();
                            let mut ds = w.component_mul(&dw);
                            for r in 0..n {
                                let dot: f64 = ds.row(r).sum();
                                for j in 0..n {
                                    ds[(r, j)] -= w[(r, j)] * dot;
                                }
                            }
                            ds *= scale;
                            scatter(&mut dq, &(&ds * &kp), p, c);
                            scatter(&mut dk, &(ds.transpose() * &qp), p, c);
                            scatter(&mut dv, &(w.transpose() * &go), p, c);
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}
