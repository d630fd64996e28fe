//! Minimal reverse-mode autodiff over dense row-major matrices.

use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data size");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool, c: &mut [f64], beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimensions differ");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: pointers and strides describe the row-major buffers above,
    // whose sizes are checked by the dimension asserts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(a, false, b, false, &mut out.data, 0.0);
    out
}

/// Query/key index groups for grouped multi-head attention. Each group's
/// queries attend only to that group's keys; keys with `key_valid == false`
/// are masked out.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub groups: Vec<(Vec<usize>, Vec<usize>)>,
    pub key_valid: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    Silu(Var),
    LayerNorm(Var, Vec<f64>),
    Modulate { x: Var, shift: Var, scale: Var },
    Gather(Var, Arc<Vec<usize>>),
    SliceCols(Var, usize),
    MeanPool(Var, Arc<Vec<Vec<usize>>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttentionLayout>,
        probs: Vec<Vec<f64>>,
    },
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        denom: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, index: usize, m: &Mat) -> Var {
        self.push(m.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.rows, 1);
        assert_eq!(rv.cols, xv.cols);
        let mut out = xv.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += rv.data[c];
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        for (o, y) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= y;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            let u = GELU_C * (*v + 0.044715 * *v * *v * *v);
            *v = 0.5 * *v * (1.0 + u.tanh());
        }
        self.push(out, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            *v /= 1.0 + (-*v).exp();
        }
        self.push(out, Op::Silu(x))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut rstds = Vec::with_capacity(xv.rows);
        let n = xv.cols as f64;
        for r in 0..xv.rows {
            let row = &mut out.data[r * xv.cols..(r + 1) * xv.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        self.push(out, Op::LayerNorm(x, rstds))
    }

    /// `x * (1 + scale) + shift`, all the same shape.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let mut out = self.value(x).clone();
        let sh = &self.value(shift).data;
        let sc = &self.value(scale).data;
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = *v * (1.0 + sc[i]) + sh[i];
        }
        self.push(out, Op::Modulate { x, shift, scale })
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(index.len(), xv.cols);
        for (i, &src) in index.iter().enumerate() {
            out.data[i * xv.cols..(i + 1) * xv.cols].copy_from_slice(xv.row(src));
        }
        self.push(out, Op::Gather(x, index))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    /// Mean of the listed rows of `x`, one output row per group.
    pub fn mean_pool(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(groups.len(), xv.cols);
        for (g, rows) in groups.iter().enumerate() {
            let w = 1.0 / rows.len().max(1) as f64;
            for &r in rows {
                for c in 0..xv.cols {
                    out.data[g * xv.cols + c] += w * xv.at(r, c);
                }
            }
        }
        self.push(out, Op::MeanPool(x, groups))
    }

    /// Grouped multi-head scaled dot-product attention. Query rows not in
    /// any group, or whose group has no valid key, produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttentionLayout>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert_eq!(d % heads, 0, "heads must divide the model width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(qv.rows, d);
        let mut probs = Vec::with_capacity(layout.groups.len() * heads);
        for (queries, keys) in &layout.groups {
            let live: Vec<usize> = keys.iter().copied().filter(|&j| layout.key_valid[j]).collect();
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; queries.len() * live.len()];
                if !live.is_empty() {
                    for (qi, &qr) in queries.iter().enumerate() {
                        let qrow = &qv.row(qr)[off..off + dh];
                        let prow = &mut p[qi * live.len()..(qi + 1) * live.len()];
                        for (ki, &kr) in live.iter().enumerate() {
                            let krow = &kv.row(kr)[off..off + dh];
                            prow[ki] = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        let max = prow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for x in prow.iter_mut() {
                            *x = (*x - max).exp();
                            total += *x;
                        }
                        for x in prow.iter_mut() {
                            *x /= total;
                        }
                        let orow = &mut out.data[qr * d + off..qr * d + off + dh];
                        for (ki, &kr) in live.iter().enumerate() {
                            let w = prow[ki];
                            let vrow = &vv.row(kr)[off..off + dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += w * x;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
        )
    }

    /// `sum w (pred - target)^2 / sum w` as a `1 x 1` node.
    pub fn masked_mse(&mut self, pred: Var, target: Vec<f64>, weight: Vec<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.data.len(), target.len());
        assert_eq!(pv.data.len(), weight.len());
        let denom = weight.iter().sum::<f64>().max(1e-12);
        let loss = pv
            .data
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum::<f64>()
            / denom;
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::MaskedMse {
                pred,
                target,
                weight,
                denom,
            },
        )
    }

    /// Gradients of the scalar `loss` node with respect to every parameter
    /// leaf, accumulated into `param_grads` by parameter index.
    pub fn backward(&self, loss: Var, param_grads: &mut [Mat]) {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = self.value(loss);
        grads[loss.0] = Some(Mat::from_vec(lv.rows, lv.cols, vec![1.0; lv.data.len()]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = accumulate(&mut grads, *a, av.rows, av.cols);
                    gemm(&g, false, bv, true, &mut ga.data, 1.0);
                    let gb = accumulate(&mut grads, *b, bv.rows, bv.cols);
                    gemm(av, true, &g, false, &mut gb.data, 1.0);
                }
                Op::AddRow(x, row) => {
                    let gx = accumulate(&mut grads, *x, g.rows, g.cols);
                    gx.add_assign(&g);
                    let gr = accumulate(&mut grads, *row, 1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.data[r * g.cols + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.rows, g.cols).add_assign(&g);
                    accumulate(&mut grads, *b, g.rows, g.cols).add_assign(&g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = accumulate(&mut grads, *a, g.rows, g.cols);
                    for (j, x) in ga.data.iter_mut().enumerate() {
                        *x += g.data[j] * bv.data[j];
                    }
                    let gb = accumulate(&mut grads, *b, g.rows, g.cols);
                    for (j, x) in gb.data.iter_mut().enumerate() {
                        *x += g.data[j] * av.data[j];
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let gx = accumulate(&mut grads, *x, g.rows, g.cols);
                    for (j, o) in gx.data.iter_mut().enumerate() {
                        let v = xv.data[j];
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        let d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                        *o += g.data[j] * d;
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let gx = accumulate(&mut grads, *x, g.rows, g.cols);
                    for (j, o) in gx.data.iter_mut().enumerate() {
                        let v = xv.data[j];
                        let s = 1.0 / (1.0 + (-v).exp());
                        *o += g.data[j] * s * (1.0 + v * (1.0 - s));
                    }
                }
                Op::LayerNorm(x, rstds) => {
                    let y = &node.value;
                    let cols = y.cols;
                    let n = cols as f64;
                    let gx = accumulate(&mut grads, *x, y.rows, cols);
                    for r in 0..y.rows {
                        let gy = &g.data[r * cols..(r + 1) * cols];
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..cols {
                            gx.data[r * cols + c] += rstds[r] * (gy[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                }
                Op::Modulate { x, shift, scale } => {
                    let xv = self.value(*x);
                    let sc = self.value(*scale);
                    let gx = accumulate(&mut grads, *x, g.rows, g.cols);
                    for (j, o) in gx.data.iter_mut().enumerate() {
                        *o += g.data[j] * (1.0 + sc.data[j]);
                    }
                    accumulate(&mut grads, *shift, g.rows, g.cols).add_assign(&g);
                    let gs = accumulate(&mut grads, *scale, g.rows, g.cols);
                    for (j, o) in gs.data.iter_mut().enumerate() {
                        *o += g.data[j] * xv.data[j];
                    }
                }
                Op::Gather(x, index) => {
                    let xv = self.value(*x);
                    let gx = accumulate(&mut grads, *x, xv.rows, xv.cols);
                    for (i, &src) in index.iter().enumerate() {
                        for c in 0..xv.cols {
                            gx.data[src * xv.cols + c] += g.data[i * xv.cols + c];
                        }
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let gx = accumulate(&mut grads, *x, xv.rows, xv.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gx.data[r * xv.cols + start + c] += g.data[r * g.cols + c];
                        }
                    }
                }
                Op::MeanPool(x, groups) => {
                    let xv = self.value(*x);
                    let gx = accumulate(&mut grads, *x, xv.rows, xv.cols);
                    for (gi, rows) in groups.iter().enumerate() {
                        let w = 1.0 / rows.len().max(1) as f64;
                        for &r in rows {
                            for c in 0..xv.cols {
                                gx.data[r * xv.cols + c] += w * g.data[gi * xv.cols + c];
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    layout,
                    probs,
                } => {
                    self.attention_backward(&g, *q, *k, *v, *heads, layout, probs, &mut grads);
                }
                Op::MaskedMse {
                    pred,
                    target,
                    weight,
                    denom,
                } => {
                    let pv = self.value(*pred);
                    let scale = g.data[0] * 2.0 / denom;
                    let gp = accumulate(&mut grads, *pred, pv.rows, pv.cols);
                    for (j, o) in gp.data.iter_mut().enumerate() {
                        *o += scale * weight[j] * (pv.data[j] - target[j]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Mat,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttentionLayout,
        probs: &[Vec<f64>],
        grads: &mut [Option<Mat>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Mat::zeros(qv.rows, d);
        let mut gk = Mat::zeros(kv.rows, d);
        let mut gv = Mat::zeros(vv.rows, d);
        let mut pi = 0;
        for (queries, keys) in &layout.groups {
            let live: Vec<usize> = keys.iter().copied().filter(|&j| layout.key_valid[j]).collect();
            let nk = live.len();
            for h in 0..heads {
                let p = &probs[pi];
                pi += 1;
                if nk == 0 {
                    continue;
                }
                let off = h * dh;
                for (qi, &qr) in queries.iter().enumerate() {
                    let prow = &p[qi * nk..(qi + 1) * nk];
                    let gorow = &g.data[qr * d + off..qr * d + off + dh];
                    // dP = dO . V^T ; dV += P^T dO
                    let mut dp = vec![0.0; nk];
                    for (ki, &kr) in live.iter().enumerate() {
                        let vrow = &vv.row(kr)[off..off + dh];
                        dp[ki] = gorow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        let gvrow = &mut gv.data[kr * d + off..kr * d + off + dh];
                        for (o, x) in gvrow.iter_mut().zip(gorow) {
                            *o += prow[ki] * x;
                        }
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                    let qrow = &qv.row(qr)[off..off + dh];
                    for (ki, &kr) in live.iter().enumerate() {
                        let ds = prow[ki] * (dp[ki] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kv.row(kr)[off..off + dh];
                        let gqrow = &mut gq.data[qr * d + off..qr * d + off + dh];
                        for (o, x) in gqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let gkrow = &mut gk.data[kr * d + off..kr * d + off + dh];
                        for (o, x) in gkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        accumulate(grads, q, qv.rows, d).add_assign(&gq);
        accumulate(grads, k, kv.rows, d).add_assign(&gk);
        accumulate(grads, v, vv.rows, d).add_assign(&gv);
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_check(build: impl Fn(&mut Tape, &[Var]) -> Var, params: &[Mat]) {
        let mut grads: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss, &mut grads);
        let eval = |ps: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().enumerate().map(|(i, p)| t.param(i, p)).collect();
            let l = build(&mut t, &vs);
            t.value(l).data[0]
        };
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.data.len() {
                let mut plus = params.to_vec();
                plus[pi].data[j] += h;
                let mut minus = params.to_vec();
                minus[pi].data[j] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = grads[pi].data[j];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-5, "param {pi}[{j}]: numeric {num} analytic {ana}");
            }
        }
    }

    fn seq(rows: usize, cols: usize, seed: f64) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| ((i as f64 + seed) * 0.7).sin()).collect(),
        )
    }

    #[test]
    fn dense_ops_gradients() {
        let params = vec![seq(3, 4, 0.1), seq(4, 2, 0.5), seq(1, 2, 0.9), seq(3, 2, 1.3)];
        numeric_check(
            |t, v| {
                let h = t.linear(v[0], v[1], v[2]);
                let h = t.gelu(h);
                let n = t.layer_norm(h);
                let s = t.silu(v[3]);
                let m = t.modulate(n, v[3], s);
                let p = t.mul(m, h);
                let idx = Arc::new(vec![2, 0, 0, 1]);
                let gth = t.gather(p, idx);
                let sl = t.slice_cols(gth, 1, 1);
                let pooled = t.mean_pool(gth, Arc::new(vec![vec![0, 1], vec![3]]));
                let _ = pooled;
                t.masked_mse(sl, vec![0.1, -0.2, 0.3, 0.0], vec![1.0, 0.0, 2.0, 1.0])
            },
            &params,
        );
    }

    #[test]
    fn attention_gradients_with_masking() {
        let params = vec![seq(5, 4, 0.2), seq(5, 4, 1.1), seq(5, 4, 2.3)];
        let layout = Arc::new(AttentionLayout {
            groups: vec![(vec![0, 1, 2], vec![0, 1, 2]), (vec![3, 4], vec![3, 4, 0])],
            key_valid: vec![true, false, true, true, true],
        });
        numeric_check(
            move |t, v| {
                let a = t.attention(v[0], v[1], v[2], 2, layout.clone());
                let target: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).cos()).collect();
                t.masked_mse(a, target, vec![1.0; 20])
            },
            &params,
        );
    }

    #[test]
    fn doubled_loss_doubles_gradients() {
        let p = vec![seq(2, 3, 0.3)];
        let run = |double: bool| {
            let mut t = Tape::new();
            let v = t.param(0, &p[0]);
            let g = t.gelu(v);
            let mut l = t.masked_mse(g, vec![0.2; 6], vec![1.0; 6]);
            if double {
                l = t.add(l, l);
            }
            let mut grads = vec![Mat::zeros(2, 3)];
            t.backward(l, &mut grads);
            grads.remove(0)
        };
        let (g1, g2) = (run(false), run(true));
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn pooled_gradients() {
        let params = vec![seq(4, 3, 0.4)];
        numeric_check(
            |t, v| {
                let p = t.mean_pool(v[0], Arc::new(vec![vec![0, 1, 2], vec![3]]));
                t.masked_mse(p, vec![0.5; 6], vec![1.0; 6])
            },
            &params,
        );
    }
}
