use crate::error::{Error, Result};

use super::tensor::{ParamGroup, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    MaskedMse {
        pred: Var,
        target: Var,
        weights: Vec<f64>,
        denom: f64,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    param: Option<(usize, usize)>,
}

/// A recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// C (m x n) += alpha * A (m x k) * B (k x n) over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_off: usize,
    rsa: usize,
    csa: usize,
    b: &[f64],
    b_off: usize,
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, r: usize, rs: usize, cc: usize, cs: usize| off + (r - 1) * rs + (cc - 1) * cs;
    assert!(k == 0 || last(a_off, m, rsa, k, csa) < a.len());
    assert!(k == 0 || last(b_off, k, rsb, n, csb) < b.len());
    assert!(last(c_off, m, rsc, n, csc) < c.len());
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations recorded so far (matmul and attention).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape("leaf", format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    /// Copies a parameter tensor in as a leaf tagged with its position.
    pub fn param(&mut self, group: usize, index: usize, t: &Tensor, trainable: bool) -> Var {
        let (r, c) = t.matrix_dims();
        let v = self.push(r, c, t.data().to_vec(), Op::Leaf, trainable);
        self.nodes[v.0].param = Some((group, index));
        v
    }

    /// Binds every tensor of every group; result is indexed `[group][tensor]`.
    pub fn bind(&mut self, groups: &[ParamGroup]) -> Vec<Vec<Var>> {
        groups
            .iter()
            .enumerate()
            .map(|(g, group)| {
                group
                    .tensors
                    .iter()
                    .enumerate()
                    .map(|(i, t)| self.param(g, i, t, group.trainable))
                    .collect()
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{n}x{k} * {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, 1.0, self.value(a), 0, k, 1, self.value(b), 0, m, 1, 0.0, &mut out, 0, m, 1);
        self.macs += (n * k * m) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(n, m, out, Op::MatMul(a, b), rg))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.dims(bias) != (1, m) {
            return Err(Error::shape("add_bias", format!("{n}x{m} + {:?}", self.dims(bias))));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x + b[i % m]).collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(n, m, out, Op::AddBias(a, bias), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(n, m, out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(n, m, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (n, m) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(n, m, out, Op::Scale(a, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (n, m) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let rg = self.rg(&[a]);
        self.push(n, m, out, Op::Gelu(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (n, m) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(n, m, out, Op::Softmax(a), rg)
    }

    /// Per-row normalization to zero mean and unit variance, then `* gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.dims(gamma) != (1, m) || self.dims(beta) != (1, m) {
            return Err(Error::shape(
                "layer_norm",
                format!("{n}x{m} with gamma {:?}, beta {:?}", self.dims(gamma), self.dims(beta)),
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &xv[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..m {
                let h = (row[c] - mean) * inv;
                xhat[r * m + c] = h;
                out[r * m + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            n,
            m,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Full (non-causal) multi-head scaled dot-product attention over
    /// consecutive blocks of `seq_len` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", self.dims(q), self.dims(k), self.dims(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads do not divide width {d}")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows not a multiple of seq_len {seq_len}"),
            ));
        }
        let dh = d / heads;
        let batch = rows / seq_len;
        let l = seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * l * l];
        let mut out = vec![0.0; rows * d];
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for b in 0..batch {
                for h in 0..heads {
                    let base = b * l * d + h * dh;
                    let p_off = (b * heads + h) * l * l;
                    gemm(l, dh, l, scale, qv, base, d, 1, kv, base, 1, d, 0.0, &mut probs, p_off, l, 1);
                    for row in probs[p_off..p_off + l * l].chunks_exact_mut(l) {
                        softmax_in_place(row);
                    }
                    gemm(l, l, dh, 1.0, &probs, p_off, l, 1, vv, base, d, 1, 0.0, &mut out, base, d, 1);
                }
            }
        }
        self.macs += (2 * batch * heads * l * l * dh) as u64;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            rows,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {n}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(&xv[i * m..(i + 1) * m]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(idx.len(), m, out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((na, ma), (nb, mb)) = (self.dims(a), self.dims(b));
        if ma != mb {
            return Err(Error::shape("concat_rows", format!("{na}x{ma} over {nb}x{mb}")));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(na + nb, ma, out, Op::ConcatRows(a, b), rg))
    }

    /// `sum(w * (pred - target)^2) / sum(w)`; `weights` has one entry per
    /// element (the mask).
    pub fn masked_mse(&mut self, pred: Var, target: Var, weights: &[f64]) -> Result<Var> {
        let (n, m) = self.same_shape("mse", pred, target)?;
        if weights.len() != n * m {
            return Err(Error::shape("mse", format!("{} mask weights for {n}x{m}", weights.len())));
        }
        let denom: f64 = weights.iter().sum();
        if !(denom > 0.0) {
            return Err(Error::arg("mse mask selects no elements"));
        }
        let loss = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .zip(weights)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum::<f64>()
            / denom;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::MaskedMse {
                pred,
                target,
                weights: weights.to_vec(),
                denom,
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (n, m) = self.dims(pred);
        self.masked_mse(pred, target, &vec![1.0; n * m])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Mean(a), rg)
    }

    /// Reverse pass from a scalar; gradients are kept on every node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::arg(format!("backward needs a scalar, got {:?}", self.dims(loss))));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<Vec<f64>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(node.grad.take().unwrap_or_else(|| vec![0.0; node.rows * node.cols]))
    }

    fn put(&mut self, v: Var, g: Vec<f64>) {
        self.nodes[v.0].grad = Some(g);
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(mut buf) = self.grad_buf(v) {
            f(&mut buf);
            self.put(v, buf);
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        // Ops that need cached state are handled by moving it out and back.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (n, k) = self.dims(a);
                let m = cols;
                if let Some(mut ga) = self.grad_buf(a) {
                    // dA += G * B^T
                    gemm(n, m, k, 1.0, g, 0, m, 1, &self.nodes[b.0].value, 0, 1, m, 1.0, &mut ga, 0, k, 1);
                    self.put(a, ga);
                }
                if let Some(mut gb) = self.grad_buf(b) {
                    // dB += A^T * G
                    gemm(k, n, m, 1.0, &self.nodes[a.0].value, 0, 1, k, g, 0, m, 1, 1.0, &mut gb, 0, m, 1);
                    self.put(b, gb);
                }
            }
            &Op::AddBias(a, b) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(b, |gb| {
                    for row in g.chunks_exact(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.clone();
                let av = self.nodes[a.0].value.clone();
                self.accumulate(a, |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += gi * bi;
                    }
                });
                self.accumulate(b, |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                        *x += gi * ai;
                    }
                });
            }
            &Op::Scale(a, s) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            &Op::Gelu(a) => {
                if let Some(mut ga) = self.grad_buf(a) {
                    for ((x, gi), &xv) in ga.iter_mut().zip(g).zip(&self.nodes[a.0].value) {
                        let u = GELU_C * (xv + GELU_A * xv * xv * xv);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                        *x += gi * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                    }
                    self.put(a, ga);
                }
            }
            &Op::Softmax(a) => {
                if let Some(mut ga) = self.grad_buf(a) {
                    let y = &self.nodes[i].value;
                    for ((gx, gy), yr) in ga.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)) {
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[c] += yr[c] * (gy[c] - dot);
                        }
                    }
                    self.put(a, ga);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let m = cols;
                self.accumulate(gamma, |gg| {
                    for (gr, hr) in g.chunks_exact(m).zip(xhat.chunks_exact(m)) {
                        for c in 0..m {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                self.accumulate(beta, |gb| {
                    for gr in g.chunks_exact(m) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
                if let Some(mut gx) = self.grad_buf(x) {
                    let gam = &self.nodes[gamma.0].value;
                    let mut dxhat = vec![0.0; m];
                    for r in 0..rows {
                        let gr = &g[r * m..(r + 1) * m];
                        let hr = &xhat[r * m..(r + 1) * m];
                        for c in 0..m {
                            dxhat[c] = gr[c] * gam[c];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r] / m as f64;
                        for c in 0..m {
                            gx[r * m + c] += inv * (m as f64 * dxhat[c] - s1 - hr[c] * s2);
                        }
                    }
                    self.put(x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, *heads, *seq_len, probs);
            }
            Op::GatherRows(x, idx) => {
                let x = *x;
                self.accumulate(x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut gx[src * cols..(src + 1) * cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(a, b)| *a += b);
                    }
                });
            }
            &Op::ConcatRows(a, b) => {
                let split = self.nodes[a.0].rows * cols;
                self.accumulate(a, |ga| ga.iter_mut().zip(&g[..split]).for_each(|(x, y)| *x += y));
                self.accumulate(b, |gb| gb.iter_mut().zip(&g[split..]).for_each(|(x, y)| *x += y));
            }
            Op::MaskedMse {
                pred,
                target,
                weights,
                denom,
            } => {
                let (pred, target) = (*pred, *target);
                let scale = 2.0 * g[0] / denom;
                let diff: Vec<f64> = self.nodes[pred.0]
                    .value
                    .iter()
                    .zip(&self.nodes[target.0].value)
                    .zip(weights)
                    .map(|((p, t), w)| scale * w * (p - t))
                    .collect();
                self.accumulate(pred, |gp| gp.iter_mut().zip(&diff).for_each(|(x, d)| *x += d));
                self.accumulate(target, |gt| gt.iter_mut().zip(&diff).for_each(|(x, d)| *x -= d));
            }
            &Op::Sum(a) => {
                self.accumulate(a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            &Op::Mean(a) => {
                let n = (self.nodes[a.0].rows * self.nodes[a.0].cols) as f64;
                self.accumulate(a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&mut self, g: &[f64], q: Var, k: Var, v: Var, heads: usize, l: usize, probs: &[f64]) {
        let (rows, d) = self.dims(q);
        let dh = d / heads;
        let batch = rows / l;
        let scale = 1.0 / (dh as f64).sqrt();
        let need = |s: &Self, x: Var| s.nodes[x.0].requires_grad;
        let (nq, nk, nv) = (need(self, q), need(self, k), need(self, v));
        // Contributions are gathered separately so aliased inputs add up.
        let buf = |needed: bool| if needed { vec![0.0; rows * d] } else { Vec::new() };
        let (mut gq, mut gk, mut gv) = (buf(nq), buf(nk), buf(nv));
        let mut dp = vec![0.0; l * l];
        {
            let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
            for b in 0..batch {
                for h in 0..heads {
                    let base = b * l * d + h * dh;
                    let p_off = (b * heads + h) * l * l;
                    let p = &probs[p_off..p_off + l * l];
                    if nv {
                        // dV += P^T dO
                        gemm(l, l, dh, 1.0, p, 0, 1, l, g, base, d, 1, 1.0, &mut gv, base, d, 1);
                    }
                    if !(nq || nk) {
                        continue;
                    }
                    // dP = dO V^T
                    gemm(l, dh, l, 1.0, g, base, d, 1, vv, base, 1, d, 0.0, &mut dp, 0, l, 1);
                    for (dr, pr) in dp.chunks_exact_mut(l).zip(p.chunks_exact(l)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for c in 0..l {
                            dr[c] = pr[c] * (dr[c] - dot);
                        }
                    }
                    if nq {
                        gemm(l, l, dh, scale, &dp, 0, l, 1, kv, base, d, 1, 1.0, &mut gq, base, d, 1);
                    }
                    if nk {
                        gemm(l, l, dh, scale, &dp, 0, 1, l, qv, base, d, 1, 1.0, &mut gk, base, d, 1);
                    }
                }
            }
        }
        for (x, contrib) in [(q, gq), (k, gk), (v, gv)] {
            if !contrib.is_empty() {
                self.accumulate(x, |gx| gx.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b));
            }
        }
    }

    /// Adds gradients of trainable parameter leaves into their tensors.
    pub fn accumulate_param_grads(&self, groups: &mut [ParamGroup]) {
        for node in &self.nodes {
            if let (Some((g, i)), Some(grad)) = (node.param, &node.grad) {
                if groups[g].trainable {
                    groups[g].tensors[i].accumulate_grad(grad);
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
