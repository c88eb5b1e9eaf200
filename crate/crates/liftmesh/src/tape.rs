//! Reverse-mode differentiation tape.
//!
//! Operations are recorded eagerly; `backward` replays them in reverse and
//! accumulates gradients by the chain rule. A tape is owned by one forward
//! pass (inference builds a throwaway tape), so every computation — training
//! or inference — runs through the same code path.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// matrix + broadcast row
    AddRow(Var, Var),
    /// scalar (numel 1) × tensor
    MulScalar(Var, Var),
    ScaleConst(Var, f64),
    AddConst(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Abs(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by tape handle, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient-tracked input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), rg)
    }

    /// `a` (m×n) plus `row` (numel n) broadcast over every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let r = self.value(row);
        assert_eq!(r.numel(), n, "add_row: row has {} values, matrix has {n} cols", r.numel());
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r.data()[j];
            }
        }
        let rg = self.needs(a) || self.needs(row);
        self.push(Tensor::new(vec![m, n], data).unwrap(), Op::AddRow(a, row), rg)
    }

    /// Broadcast multiply: `s` (numel 1) times `a`.
    pub fn mul_scalar(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "mul_scalar needs a scalar");
        let sv = self.value(s).data()[0];
        let v = self.value(a).scale(sv);
        let rg = self.needs(s) || self.needs(a);
        self.push(v, Op::MulScalar(s, a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.needs(a);
        self.push(v, Op::ScaleConst(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.needs(a);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.needs(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = tensor::gelu(self.value(a));
        let rg = self.needs(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        let rg = self.needs(a);
        self.push(v, Op::Sin(a), rg)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        let rg = self.needs(a);
        self.push(v, Op::Cos(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.needs(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let rg = self.needs(a);
        self.push(v, Op::Abs(a), rg)
    }

    /// Sum of all entries, as a scalar (dims [1]).
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a));
        let rg = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let v = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps);
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(v, Op::LayerNorm { x, gain, bias, eps }, rg)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "concat_rows: col mismatch");
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let v = Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data).unwrap();
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatRows(a, b), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows(), tb.rows(), "concat_cols: row mismatch");
        let (m, na, nb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(ta.row_slice(i));
            data.extend_from_slice(tb.row_slice(i));
        }
        let v = Tensor::new(vec![m, na + nb], data).unwrap();
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        assert!(start + len <= m, "slice_rows {start}+{len} out of {m}");
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let v = Tensor::new(vec![len, n], data).unwrap();
        let rg = self.needs(x);
        self.push(v, Op::SliceRows { x, start }, rg)
    }

    pub fn reshape(&mut self, a: Var, dims: Vec<usize>) -> Var {
        let v = self.value(a).reshaped(dims).expect("reshape: element count mismatch");
        let rg = self.needs(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Mean over rows of an m×n matrix, as a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a).rows();
        let w = self.constant(Tensor::filled(&[1, m], 1.0 / m as f64));
        self.matmul(w, a)
    }

    /// Mean absolute difference over all entries.
    pub fn l1_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Mean squared difference over all entries.
    pub fn l2_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.mul(d, d);
        self.mean_all(d)
    }

    /// Reverse pass from a scalar loss. The tape is left intact.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("backward: handle not on this tape".into()));
        }
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got dims {:?}",
                lt.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lt.dims(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g = g.add(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accum(grads, a, g.mul(self.value(b)));
                self.accum(grads, b, g.mul(self.value(a)));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                self.accum(grads, a, g.zip_map(vb, |gi, bi| gi / bi));
                let db = g
                    .zip_map(va, |gi, ai| gi * ai)
                    .zip_map(vb, |n, bi| -n / (bi * bi));
                self.accum(grads, b, db);
            }
            Op::AddRow(a, row) => {
                self.accum(grads, a, g.clone());
                let (m, n) = (g.rows(), g.cols());
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g.get2(i, j);
                    }
                }
                let dims = self.value(row).dims().to_vec();
                self.accum(grads, row, Tensor::new(dims, dr).unwrap());
            }
            Op::MulScalar(s, a) => {
                let sv = self.value(s).data()[0];
                self.accum(grads, a, g.scale(sv));
                let ds: f64 = g.data().iter().zip(self.value(a).data()).map(|(x, y)| x * y).sum();
                let dims = self.value(s).dims().to_vec();
                self.accum(grads, s, Tensor::new(dims, vec![ds]).unwrap());
            }
            Op::ScaleConst(a, c) => self.accum(grads, a, g.scale(c)),
            Op::AddConst(a) => self.accum(grads, a, g.clone()),
            Op::Matmul(a, b) => {
                if self.needs(a) {
                    let bt = self.value(b).transpose();
                    self.accum(grads, a, g.matmul(&bt));
                }
                if self.needs(b) {
                    let at = self.value(a).transpose();
                    self.accum(grads, b, at.matmul(g));
                }
            }
            Op::Transpose(a) => self.accum(grads, a, g.transpose()),
            Op::Gelu(a) => {
                let da = g.zip_map(self.value(a), |gi, x| gi * tensor::gelu_grad_scalar(x));
                self.accum(grads, a, da);
            }
            Op::Sin(a) => {
                self.accum(grads, a, g.zip_map(self.value(a), |gi, x| gi * x.cos()));
            }
            Op::Cos(a) => {
                self.accum(grads, a, g.zip_map(self.value(a), |gi, x| -gi * x.sin()));
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                self.accum(grads, a, g.zip_map(y, |gi, yi| gi * 0.5 / yi));
            }
            Op::Abs(a) => {
                let da = g.zip_map(self.value(a), |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accum(grads, a, da);
            }
            Op::SumAll(a) => {
                let dims = self.value(a).dims().to_vec();
                self.accum(grads, a, Tensor::filled(&dims, g.data()[0]));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accum(grads, a, Tensor::new(vec![m, n], dx).unwrap());
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.value(x);
                let (m, n) = (vx.rows(), vx.cols());
                let gain_v = self.value(gain);
                let stats = tensor::row_norm_stats(vx, eps);
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let (mean, inv_std) = stats[r];
                    let xr = vx.row_slice(r);
                    let gr = g.row_slice(r);
                    // x_hat and upstream-through-affine
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    let gh: Vec<f64> = gr
                        .iter()
                        .zip(gain_v.data())
                        .map(|(&gi, &ga)| gi * ga)
                        .collect();
                    let mean_gh: f64 = gh.iter().sum::<f64>() / n as f64;
                    let mean_gh_xhat: f64 =
                        gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = inv_std * (gh[c] - mean_gh - xhat[c] * mean_gh_xhat);
                        dgain[c] += gr[c] * xhat[c];
                        dbias[c] += gr[c];
                    }
                }
                self.accum(grads, x, Tensor::new(vec![m, n], dx).unwrap());
                let gd = self.value(gain).dims().to_vec();
                let bd = self.value(bias).dims().to_vec();
                self.accum(grads, gain, Tensor::new(gd, dgain).unwrap());
                self.accum(grads, bias, Tensor::new(bd, dbias).unwrap());
            }
            Op::ConcatRows(a, b) => {
                let (ra, n) = (self.value(a).rows(), self.value(a).cols());
                let rb = self.value(b).rows();
                let da = Tensor::new(vec![ra, n], g.data()[..ra * n].to_vec()).unwrap();
                let db = Tensor::new(vec![rb, n], g.data()[ra * n..].to_vec()).unwrap();
                self.accum(grads, a, da);
                self.accum(grads, b, db);
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = (self.value(a).rows(), self.value(a).cols());
                let nb = self.value(b).cols();
                let mut da = vec![0.0; m * na];
                let mut db = vec![0.0; m * nb];
                for r in 0..m {
                    let grow = g.row_slice(r);
                    da[r * na..(r + 1) * na].copy_from_slice(&grow[..na]);
                    db[r * nb..(r + 1) * nb].copy_from_slice(&grow[na..]);
                }
                self.accum(grads, a, Tensor::new(vec![m, na], da).unwrap());
                self.accum(grads, b, Tensor::new(vec![m, nb], db).unwrap());
            }
            Op::SliceRows { x, start } => {
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let len = g.rows();
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(g.data());
                self.accum(grads, x, Tensor::new(vec![m, n], dx).unwrap());
            }
            Op::Reshape(a) => {
                let dims = self.value(a).dims().to_vec();
                self.accum(grads, a, g.reshaped(dims).unwrap());
            }
        }
    }
}

/// Evaluate `f` at `x` without gradients and return the scalar value.
pub fn eval_scalar<F>(f: &F, x: &Tensor) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&mut tape, v);
    tape.value(y).item()
}

/// Compare the tape gradient of a scalar-valued `f` at `x` against central
/// finite differences. Returns the max over components of
/// |analytic − numeric| / max(1, |analytic|).
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: Option<f64>) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let h = step.unwrap_or_else(|| 1e-4 * x.max_abs().max(1.0));
    assert!(h > 0.0, "finite_diff_check: step must be positive");

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&mut tape, v);
    let grads = tape.backward(y).expect("finite_diff_check: f must return a scalar");
    let analytic = grads
        .wrt(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.dims()));

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (eval_scalar(&f, &xp) - eval_scalar(&f, &xm)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}
