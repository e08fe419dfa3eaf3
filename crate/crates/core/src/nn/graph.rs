//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! Every op records just enough of its forward state to run its adjoint.
//! Attention and layer normalization are fused ops so that a transformer
//! layer stays a handful of tape entries.

use super::mat::{gemm, Mat, View};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        groups: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
    AddRows {
        x: Var,
        y: Var,
        rows: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul {:?} x {:?}", av.shape(), bv.shape());
        let mut out = Mat::zeros(av.rows, bv.cols);
        gemm(1.0, View::of(av), View::of(bv), 0.0, &mut out.data, bv.cols);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!((1, av.cols), bv.shape(), "bias shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shapes");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|x| x * s).collect());
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|x| x.exp()).collect());
        self.push(out, Op::Exp(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| softplus(x)).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Row-wise layer normalization with affine `1 × n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = xv.cols;
        let mut xhat = Mat::zeros(xv.rows, n);
        let mut out = Mat::zeros(xv.rows, n);
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat.data[r * n + j] = h;
                out.data[r * n + j] = h * g.data[j] + b.data[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head softmax attention over a packed `n × 3d` `[Q | K | V]` matrix.
    ///
    /// Rows only attend within their group; each group is a half-open row range.
    pub fn attention(&mut self, qkv: Var, heads: usize, groups: Vec<(usize, usize)>) -> Var {
        let qv = self.value(qkv);
        assert_eq!(qv.cols % 3, 0, "attention expects packed QKV");
        let d = qv.cols / 3;
        assert_eq!(d % heads, 0, "token dim must divide by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ld = qv.cols;
        let mut out = Mat::zeros(qv.rows, d);
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for &(s, e) in &groups {
            let m = e - s;
            for h in 0..heads {
                let q = View::block(&qv.data, ld, s, m, h * dh, dh);
                let k = View::block(&qv.data, ld, s, m, d + h * dh, dh);
                let v = View::block(&qv.data, ld, s, m, 2 * d + h * dh, dh);
                let mut p = vec![0.0; m * m];
                gemm(scale, q, k.t(), 0.0, &mut p, m);
                for row in p.chunks_mut(m) {
                    softmax_in_place(row);
                }
                let pv = View {
                    data: &p,
                    rows: m,
                    cols: m,
                    rs: m as isize,
                    cs: 1,
                };
                let o = &mut out.data[s * d + h * dh..];
                gemm(1.0, pv, v, 0.0, o, d);
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                heads,
                groups,
                probs,
            },
            &[qkv],
        )
    }

    /// Copy of `x` with `y`'s rows added onto the listed rows.
    pub fn add_rows(&mut self, x: Var, y: Var, rows: Vec<usize>) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        assert_eq!(yv.rows, rows.len(), "add_rows count");
        assert_eq!(xv.cols, yv.cols, "add_rows width");
        let mut out = xv.clone();
        for (i, &r) in rows.iter().enumerate() {
            for (o, v) in out.row_mut(r).iter_mut().zip(yv.row(i)) {
                *o += v;
            }
        }
        self.push(out, Op::AddRows { x, y, rows }, &[x, y])
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(rows.len(), xv.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::GatherRows { x, rows }, &[x])
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows width");
            data.extend_from_slice(&pv.data);
        }
        let rows = data.len() / cols.max(1);
        let out = Mat::from_vec(rows, cols, data);
        let inputs = parts.clone();
        self.push(out, Op::ConcatRows(parts), &inputs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert!(start + width <= xv.cols, "slice_cols range");
        let mut out = Mat::zeros(xv.rows, width);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    /// Scales each row to unit Euclidean norm; all-zero rows map to zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Mean absolute difference to a fixed target, as a `1 × 1` value.
    pub fn l1_loss(&mut self, pred: Var, target: Mat) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "l1 target shape");
        let n = pv.len().max(1) as f64;
        let v = pv.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        self.push(Mat::from_vec(1, 1, vec![v]), Op::L1 { pred, target }, &[pred])
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.adjoint(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], v: Var, d: Mat| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Mat::zeros(av.rows, av.cols);
                    gemm(1.0, View::of(g), View::of(bv).t(), 0.0, &mut da.data, av.cols);
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    gemm(1.0, View::of(av).t(), View::of(g), 0.0, &mut db.data, bv.cols);
                    acc(grads, *b, db);
                }
            }
            Op::AddBias(a, b) => {
                if self.wants(*b) {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, db);
                }
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
                }
                if self.wants(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    acc(grads, *b, Mat::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Scale(a, s) => {
                let d = g.data.iter().map(|x| x * s).collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::Exp(a) => {
                let d = g.data.iter().zip(&node.value.data).map(|(x, y)| x * y).collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(gy, &x)| {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(gy, &x)| gy * sigmoid(x))
                    .collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let n = xhat.cols;
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = Mat::zeros(1, n);
                    let mut db = Mat::zeros(1, n);
                    for r in 0..g.rows {
                        for j in 0..n {
                            dg.data[j] += g.data[r * n + j] * xhat.data[r * n + j];
                            db.data[j] += g.data[r * n + j];
                        }
                    }
                    if self.wants(*gamma) {
                        acc(grads, *gamma, dg);
                    }
                    if self.wants(*beta) {
                        acc(grads, *beta, db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = Mat::zeros(g.rows, n);
                    let mut dh = vec![0.0; n];
                    for r in 0..g.rows {
                        let hrow = xhat.row(r);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dh[j] = g.data[r * n + j] * gv.data[j];
                            m1 += dh[j];
                            m2 += dh[j] * hrow[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            dx.data[r * n + j] = rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Attention {
                qkv,
                heads,
                groups,
                probs,
            } => {
                let qv = self.value(*qkv);
                let d = qv.cols / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let ld = qv.cols;
                let mut dqkv = Mat::zeros(qv.rows, qv.cols);
                let mut pi = 0;
                for &(s, e) in groups {
                    let m = e - s;
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let q = View::block(&qv.data, ld, s, m, h * dh, dh);
                        let k = View::block(&qv.data, ld, s, m, d + h * dh, dh);
                        let v = View::block(&qv.data, ld, s, m, 2 * d + h * dh, dh);
                        let go = View::block(&g.data, d, s, m, h * dh, dh);
                        let pv = View {
                            data: p,
                            rows: m,
                            cols: m,
                            rs: m as isize,
                            cs: 1,
                        };
                        // dV = Pᵀ dO
                        gemm(1.0, pv.t(), go, 0.0, &mut dqkv.data[s * ld + 2 * d + h * dh..], ld);
                        // dP = dO Vᵀ, then the softmax adjoint in place.
                        let mut ds = vec![0.0; m * m];
                        gemm(1.0, go, v.t(), 0.0, &mut ds, m);
                        for (drow, prow) in ds.chunks_mut(m).zip(p.chunks(m)) {
                            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (dv, pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        let dsv = View {
                            data: &ds,
                            rows: m,
                            cols: m,
                            rs: m as isize,
                            cs: 1,
                        };
                        gemm(scale, dsv, k, 0.0, &mut dqkv.data[s * ld + h * dh..], ld);
                        gemm(scale, dsv.t(), q, 0.0, &mut dqkv.data[s * ld + d + h * dh..], ld);
                    }
                }
                acc(grads, *qkv, dqkv);
            }
            Op::AddRows { x, y, rows } => {
                if self.wants(*y) {
                    let mut dy = Mat::zeros(rows.len(), g.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        dy.row_mut(i).copy_from_slice(g.row(r));
                    }
                    acc(grads, *y, dy);
                }
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.len();
                    if self.wants(*p) {
                        let d = g.data[offset..offset + len].to_vec();
                        acc(grads, *p, Mat::from_vec(pv.rows, pv.cols, d));
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(grads, *x, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::L1 { pred, target } => {
                let pv = self.value(*pred);
                let scale = g.data[0] / pv.len().max(1) as f64;
                let d = pv
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(a, b)| scale * sign(a - b))
                    .collect();
                acc(grads, *pred, Mat::from_vec(pv.rows, pv.cols, d));
            }
        }
    }
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `d loss / d inputs[i]` for every input.
    fn check<F>(inputs: Vec<Mat>, build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let eval = |inputs: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
            let root = build(&mut g, &vars);
            g.value(root).data[0]
        };
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or(Mat::zeros(input.rows, input.cols));
            let mut diff2 = 0.0;
            let mut norm2 = 0.0;
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[i].data[j] += h;
                let mut minus = inputs.clone();
                minus[i].data[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                diff2 += (numeric - analytic.data[j]).powi(2);
                norm2 += numeric.powi(2).max(analytic.data[j].powi(2));
            }
            let rel = diff2.sqrt() / norm2.sqrt().max(1e-12);
            assert!(rel < tol, "input {i}: relative error {rel}");
        }
    }

    /// Reduces any matrix to a scalar through a fixed random projection.
    fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
        let v = g.value(x).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_mat(&mut rng, v.rows, v.cols);
        let wv = g.constant(w);
        let p = g.mul(x, wv);
        let ones_r = g.constant(Mat::filled(1, v.rows, 1.0));
        let ones_c = g.constant(Mat::filled(v.cols, 1, 1.0));
        let s = g.matmul(ones_r, p);
        g.matmul(s, ones_c)
    }

    #[test]
    fn elementwise_and_linear_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 1, 5)];
        check(
            inputs,
            |g, v| {
                let h = g.linear(v[0], v[1], v[2]);
                let a = g.gelu(h);
                let b = g.softplus(a);
                let c = g.exp(b);
                let d = g.scale(c, -0.3);
                let e = g.add(d, a);
                project(g, e, 9)
            },
            1e-7,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![rand_mat(&mut rng, 5, 6), rand_mat(&mut rng, 1, 6), rand_mat(&mut rng, 1, 6)];
        check(
            inputs,
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]);
                project(g, y, 3)
            },
            1e-7,
        );
    }

    #[test]
    fn attention_gradients_grouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![rand_mat(&mut rng, 7, 12)];
        check(
            inputs,
            |g, v| {
                let a = g.attention(v[0], 2, vec![(0, 3), (3, 7)]);
                let b = g.attention(v[0], 1, vec![(0, 7)]);
                let c = g.add(a, b);
                project(g, c, 5)
            },
            1e-7,
        );
    }

    #[test]
    fn row_ops_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = rand_mat(&mut rng, 6, 4);
        let inputs = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 2, 4), rand_mat(&mut rng, 3, 4)];
        check(
            inputs,
            move |g, v| {
                let x = g.concat_rows(vec![v[0], v[1]]);
                let x = g.add_rows(x, v[2], vec![0, 2, 4]);
                let s = g.slice_cols(x, 1, 3);
                let n = g.normalize_rows(x);
                let gathered = g.gather_rows(n, vec![4, 1, 1, 0, 2, 3]);
                let l1 = g.l1_loss(gathered, target.clone());
                let p = project(g, s, 8);
                g.add(l1, p)
            },
            1e-7,
        );
    }

    #[test]
    fn attention_respects_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = rand_mat(&mut rng, 6, 6);
        let mut g = Graph::new();
        let v = g.constant(m.clone());
        let a = g.attention(v, 1, vec![(0, 3), (3, 6)]);
        let base = g.value(a).clone();

        let mut perturbed = m;
        for j in 0..6 {
            perturbed.data[4 * 6 + j] += 1.0;
        }
        let v2 = g.constant(perturbed);
        let b = g.attention(v2, 1, vec![(0, 3), (3, 6)]);
        assert_eq!(&g.value(b).data[..6], &base.data[..6]);
        assert_ne!(&g.value(b).data[6..], &base.data[6..]);
    }
}
