//! Tape-based reverse-mode differentiation over matrices.
//!
//! Nodes are appended to a [`Tape`] in evaluation order, so the tape is a
//! topological order of the graph by construction; [`Tape::backward`] walks
//! it once in reverse. The op set is exactly what the attention layers and
//! the toy encoder-decoder need. Forward values reuse the plain kernels in
//! [`crate::tensor`] and [`crate::clocks`], so a graph built from these ops
//! reproduces the non-differentiable forward pass bit for bit.
//!
//! Shape errors while building a graph are programming errors and panic.

mod gradcheck;
pub mod layers;

use alloc::vec;
use alloc::vec::Vec;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, ParamReport};

use crate::clocks::{masked_time_norm, phi, phi_prime, running_mean_var};
use crate::error::{Error, Result};
use crate::tensor::{
    cumsum_leftpad, masked_mean_var, masked_softmax, pairwise_sqdist, AllowMask, MaskedSeq,
    Matrix, ScoreMatrix,
};

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
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    DivConst(Var, Matrix),
    Phi(Var),
    Tanh(Var),
    Elementwise(Var, fn(f64) -> f64),
    MaskRows(Var, Vec<bool>),
    TimeNorm {
        x: Var,
        mask: Vec<bool>,
        eps: f64,
        causal: bool,
    },
    MidEdge(Var),
    Cumsum(Var),
    DivColSum {
        num: Var,
        den: Var,
    },
    SqDist(Var, Var),
    Softmax(Var, AllowMask),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    L1 {
        pred: Var,
        target: Matrix,
        mask: Vec<bool>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradient of a scalar loss with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `None` when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Matrix::zeros(r, c)
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &str, a: &Matrix, b: &Matrix) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// An input node: a parameter or a constant.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Matrix::filled(1, 1, value))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b)).expect("matmul_bt shapes");
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add shapes");
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y).expect("sub shapes");
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul shapes");
        self.push(out, Op::Mul(a, b))
    }

    /// Adds the `1 × C` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.shape(), (1, av.cols()), "add_row: bias must be 1 x cols");
        let b = bv.row(0);
        let out = Matrix::from_fn(av.rows(), av.cols(), |i, j| av[(i, j)] + b[j]);
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// `a · s` for a `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1), "scale_by: scalar expected");
        let c = self.value(s)[(0, 0)];
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::ScaleBy(a, s))
    }

    /// Elementwise division by a constant matrix.
    pub fn div_const(&mut self, a: Var, denom: Matrix) -> Var {
        let out = self.value(a).zip_map(&denom, |x, d| x / d).expect("div_const shapes");
        self.push(out, Op::DivConst(a, denom))
    }

    pub fn phi(&mut self, a: Var) -> Var {
        let out = self.value(a).map(phi);
        self.push(out, Op::Phi(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn elementwise(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, Op::Elementwise(a, df))
    }

    /// Zeroes the rows where `mask` is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(mask.len(), out.rows(), "mask_rows: mask length");
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                out.row_mut(i).fill(0.0);
            }
        }
        self.push(out, Op::MaskRows(a, mask.to_vec()))
    }

    /// Masked per-channel time normalization; `causal` uses running
    /// statistics of the valid prefix.
    pub fn time_norm(&mut self, x: Var, mask: &[bool], eps: f64, causal: bool) -> Result<Var> {
        let seq = MaskedSeq::new(self.value(x).clone(), mask.to_vec())?;
        let out = if causal {
            crate::clocks::causal_time_norm(&seq, eps)?
        } else {
            masked_time_norm(&seq, eps)?
        };
        Ok(self.push(
            out.into_parts().0,
            Op::TimeNorm {
                x,
                mask: mask.to_vec(),
                eps,
                causal,
            },
        ))
    }

    /// `out_i = ½ (a_i + a_{i+1})`, `L - 1` rows.
    pub fn mid_edge(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(av.rows() >= 1, "mid_edge: empty input");
        let out = Matrix::from_fn(av.rows() - 1, av.cols(), |i, k| {
            0.5 * (av[(i, k)] + av[(i + 1, k)])
        });
        self.push(out, Op::MidEdge(a))
    }

    /// Left-zero-padded cumulative sum (`L - 1` rows in, `L` rows out).
    pub fn cumsum_leftpad(&mut self, a: Var) -> Var {
        let out = cumsum_leftpad(self.value(a));
        self.push(out, Op::Cumsum(a))
    }

    /// `num(i, k) / Σ_r den(r, k)`; columns with zero total give zero.
    pub fn div_col_sum(&mut self, num: Var, den: Var) -> Var {
        let (nv, dv) = (self.value(num), self.value(den));
        assert_eq!(nv.cols(), dv.cols(), "div_col_sum: column mismatch");
        let totals = col_sums(dv);
        let out = Matrix::from_fn(nv.rows(), nv.cols(), |i, k| {
            if totals[k] > 0.0 {
                nv[(i, k)] / totals[k]
            } else {
                0.0
            }
        });
        self.push(out, Op::DivColSum { num, den })
    }

    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Var {
        let out = pairwise_sqdist(self.value(a), self.value(b)).expect("sqdist shapes");
        self.push(out, Op::SqDist(a, b))
    }

    pub fn masked_softmax(&mut self, logits: Var, allow: &AllowMask) -> Var {
        let s = ScoreMatrix::new(self.value(logits).clone(), allow.clone()).expect("softmax shapes");
        let out = masked_softmax(&s).weights;
        self.push(out, Op::Softmax(logits, allow.clone()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let values: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Matrix::concat_cols(&values).expect("concat_cols shapes");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(out, Op::GatherRows(table, ids.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Mean absolute error over the valid rows.
    pub fn l1_loss(&mut self, pred: Var, target: &Matrix, mask: &[bool]) -> Var {
        let p = self.value(pred);
        same_shape("l1_loss", p, target);
        assert_eq!(mask.len(), p.rows(), "l1_loss: mask length");
        let count = mask.iter().filter(|&&m| m).count() * p.cols();
        let mut total = 0.0;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (a, b) in p.row(i).iter().zip(target.row(i)) {
                total += libm::fabs(a - b);
            }
        }
        let out = Matrix::filled(1, 1, if count > 0 { total / count as f64 } else { 0.0 });
        self.push(
            out,
            Op::L1 {
                pred,
                target: target.clone(),
                mask: mask.to_vec(),
            },
        )
    }

    /// Reverse pass from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_bt(self.value(*b)).expect("matmul grad");
                let gb = self.value(*a).matmul_at(g).expect("matmul grad");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulBt(a, b) => {
                let ga = g.matmul(self.value(*b)).expect("matmul_bt grad");
                let gb = g.matmul_at(self.value(*a)).expect("matmul_bt grad");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |g, y| g * y).expect("mul grad");
                let gb = g.zip_map(self.value(*a), |g, x| g * x).expect("mul grad");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, bias) => {
                accumulate(grads, *a, g.clone());
                let sums = col_sums(g);
                accumulate(grads, *bias, Matrix::from_vec(1, sums.len(), sums).expect("bias"));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let c = self.value(*s)[(0, 0)];
                accumulate(grads, *a, g.scale(c));
                let gs: f64 = g.data().iter().zip(self.value(*a).data()).map(|(g, x)| g * x).sum();
                accumulate(grads, *s, Matrix::filled(1, 1, gs));
            }
            Op::DivConst(a, d) => {
                accumulate(grads, *a, g.zip_map(d, |g, d| g / d).expect("div grad"));
            }
            Op::Phi(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| g * phi_prime(x)).expect("phi grad");
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, g.zip_map(out, |g, y| g * (1.0 - y * y)).expect("tanh"));
            }
            Op::Elementwise(a, df) => {
                let ga = g.zip_map(self.value(*a), |g, x| g * df(x)).expect("elementwise");
                accumulate(grads, *a, ga);
            }
            Op::MaskRows(a, mask) => {
                let mut ga = g.clone();
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        ga.row_mut(i).fill(0.0);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::TimeNorm {
                x,
                mask,
                eps,
                causal,
            } => {
                let ga = time_norm_grad(self.value(*x), mask, *eps, *causal, g);
                accumulate(grads, *x, ga);
            }
            Op::MidEdge(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    for k in 0..c {
                        let h = 0.5 * g[(i, k)];
                        ga[(i, k)] += h;
                        ga[(i + 1, k)] += h;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Cumsum(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for k in 0..c {
                    let mut acc = 0.0;
                    for i in (0..r).rev() {
                        acc += g[(i + 1, k)];
                        ga[(i, k)] = acc;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::DivColSum { num, den } => {
                let (nv, dv) = (self.value(*num), self.value(*den));
                let totals = col_sums(dv);
                let mut gn = Matrix::zeros(nv.rows(), nv.cols());
                let mut gd = Matrix::zeros(dv.rows(), dv.cols());
                for k in 0..nv.cols() {
                    let s = totals[k];
                    if s <= 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for i in 0..nv.rows() {
                        gn[(i, k)] = g[(i, k)] / s;
                        dot += g[(i, k)] * nv[(i, k)];
                    }
                    let gs = -dot / (s * s);
                    for r in 0..dv.rows() {
                        gd[(r, k)] = gs;
                    }
                }
                accumulate(grads, *num, gn);
                accumulate(grads, *den, gd);
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // Clamped entries have zero derivative.
                let gm = g.zip_map(out, |g, d| if d > 0.0 { g } else { 0.0 }).expect("sqdist");
                let mut ga = gm.matmul(bv).expect("sqdist grad").scale(-2.0);
                for i in 0..av.rows() {
                    let rs: f64 = gm.row(i).iter().sum();
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                        *o += 2.0 * rs * x;
                    }
                }
                let mut gb = gm.matmul_at(av).expect("sqdist grad").scale(-2.0);
                let cs = col_sums(&gm);
                for j in 0..bv.rows() {
                    for (o, &x) in gb.row_mut(j).iter_mut().zip(bv.row(j)) {
                        *o += 2.0 * cs[j] * x;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Softmax(logits, allow) => {
                let mut gl = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gi = g.row(i);
                    let inner: f64 = y.iter().zip(gi).map(|(y, g)| y * g).sum();
                    for j in 0..out.cols() {
                        if allow.get(i, j) {
                            gl[(i, j)] = y[j] * (gi[j] - inner);
                        }
                    }
                }
                accumulate(grads, *logits, gl);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    accumulate(grads, p, g.slice_cols(off, w));
                    off += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let (r, c) = self.value(*table).shape();
                let mut gt = Matrix::zeros(r, c);
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::L1 { pred, target, mask } => {
                let p = self.value(*pred);
                let count = mask.iter().filter(|&&m| m).count() * p.cols();
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                if count > 0 {
                    let scale = g[(0, 0)] / count as f64;
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for k in 0..p.cols() {
                            let d = p[(i, k)] - target[(i, k)];
                            gp[(i, k)] = if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            };
                        }
                    }
                }
                accumulate(grads, *pred, gp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (acc, &x) in s.iter_mut().zip(m.row(i)) {
            *acc += x;
        }
    }
    s
}

/// Backward of `z_i = (x_i - m) / √(v + eps)` over a window of valid
/// positions: `∂z_i/∂x_j = ((δ_ij − 1/n) − z_i z_j / n) / σ`.
fn time_norm_grad(x: &Matrix, mask: &[bool], eps: f64, causal: bool, g: &Matrix) -> Matrix {
    let (l, d) = x.shape();
    let mut gx = Matrix::zeros(l, d);
    let seq = MaskedSeq::new(x.clone(), mask.to_vec()).expect("time_norm input");
    if !causal {
        let Ok((mean, var)) = masked_mean_var(&seq) else {
            return gx;
        };
        let valid: Vec<usize> = (0..l).filter(|&i| mask[i]).collect();
        let n = valid.len() as f64;
        for k in 0..d {
            let sigma = libm::sqrt(var[k] + eps);
            let z = |i: usize| (x[(i, k)] - mean[k]) / sigma;
            let g_mean = valid.iter().map(|&i| g[(i, k)]).sum::<f64>() / n;
            let gz_mean = valid.iter().map(|&i| g[(i, k)] * z(i)).sum::<f64>() / n;
            for &j in &valid {
                gx[(j, k)] = (g[(j, k)] - g_mean - z(j) * gz_mean) / sigma;
            }
        }
        return gx;
    }
    let (mean, var) = running_mean_var(&seq);
    let mut window = Vec::with_capacity(l);
    for i in 0..l {
        if !mask[i] {
            continue;
        }
        window.push(i);
        let n = window.len() as f64;
        for k in 0..d {
            let gi = g[(i, k)];
            if gi == 0.0 {
                continue;
            }
            let sigma = libm::sqrt(var[(i, k)] + eps);
            let m = mean[(i, k)];
            let zi = (x[(i, k)] - m) / sigma;
            for &j in &window {
                let zj = (x[(j, k)] - m) / sigma;
                let delta = if i == j { 1.0 } else { 0.0 };
                gx[(j, k)] += gi * ((delta - 1.0 / n) - zi * zj / n) / sigma;
            }
        }
    }
    gx
}
