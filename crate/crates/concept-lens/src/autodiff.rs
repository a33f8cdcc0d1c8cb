//! A minimal reverse-mode tape over flat `f64` buffers.
//!
//! The synthesis loss is a straight-line composition of a dozen tensor ops,
//! so the tape is eager: each builder method computes the forward value
//! immediately and records what it needs for the backward pass. Gradients
//! flow from a scalar output back to any recorded variable.
//!
//! Backends participate through [`Tape::opaque`], which wraps an externally
//! computed value together with a vector-Jacobian pullback. The toy backend
//! uses a nested tape for that; a real adapter would call into its framework.

use std::sync::Arc;

use crate::image::{bilinear_taps, CHANNELS};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct VarId(usize);

enum Op {
    Leaf,
    /// Elementwise a + b.
    Add(VarId, VarId),
    /// Elementwise a - b. Constructed only by the gradient-check tests.
    #[allow(dead_code)]
    Sub(VarId, VarId),
    /// Elementwise a * b. Constructed only by the gradient-check tests.
    #[allow(dead_code)]
    Mul(VarId, VarId),
    /// mul * x + add, applied elementwise; only `mul` matters backward.
    AffineScalar { x: VarId, mul: f64 },
    /// x + sign * v for a constant vector v; gradient passes through.
    AddVecConst(VarId),
    /// Row-broadcast x[i,j] + sign * row[j]; gradient passes through.
    AddRowConst(VarId),
    Tanh(VarId),
    /// Scalar sum of all entries. Constructed only by the gradient-check
    /// tests.
    #[allow(dead_code)]
    Sum(VarId),
    /// Row-mean of a rows x cols matrix, yielding cols values.
    MeanRows { x: VarId, rows: usize, cols: usize },
    /// y = W x for a constant row-major matrix W. Constructed only by the
    /// gradient-check tests.
    #[allow(dead_code)]
    MatVecConst { x: VarId, w: Arc<Vec<f64>>, rows: usize, cols: usize },
    /// Applies the same constant matrix to every row: y_i = W x_i.
    RowsMatVecConst { x: VarId, n: usize, in_dim: usize, out_dim: usize, w: Arc<Vec<f64>> },
    /// Numerically stable softmax over the whole buffer.
    Softmax(VarId),
    /// Cosine of each row against a constant vector; zero-norm rows give 0.
    CosineRowsConst { x: VarId, rows: usize, cols: usize, t: Arc<Vec<f64>> },
    /// Cosine of the whole buffer against a constant vector.
    CosineVecConst { x: VarId, t: Arc<Vec<f64>> },
    /// y_j = sum_i w_i m[i,j]; both factors are variables.
    WeightedRowSum { w: VarId, m: VarId, rows: usize, cols: usize },
    /// y_k = x[idx[k]].
    Gather { x: VarId, idx: Arc<Vec<usize>> },
    /// Bilinear upsample of an HWC image buffer.
    UpsampleBilinear { x: VarId, src: usize, dst: usize },
    /// Cyclic shift of an HWC image buffer by (dy, dx).
    Roll2d { x: VarId, size: usize, dy: i64, dx: i64 },
    /// Centre crop of an HWC image buffer from src^2 to dst^2.
    CenterCrop { x: VarId, src: usize, dst: usize },
    /// External computation with a caller-supplied pullback.
    Opaque { x: VarId, pullback: Box<dyn Fn(&[f64]) -> Vec<f64> + Send> },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn leaf(&mut self, values: Vec<f64>) -> VarId {
        self.push(Op::Leaf, values)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), v)
    }

    /// Test-harness op: the gradient checks compose these primitives around
    /// the fused production ops to build scalar objectives.
    #[allow(dead_code)]
    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a, b), v)
    }

    /// Test-harness op; see [`Tape::sub`].
    #[allow(dead_code)]
    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), v)
    }

    pub fn affine_scalar(&mut self, x: VarId, mul: f64, add: f64) -> VarId {
        let v: Vec<f64> = self.value(x).iter().map(|a| mul * a + add).collect();
        self.push(Op::AffineScalar { x, mul }, v)
    }

    pub fn add_vec_const(&mut self, x: VarId, v: Vec<f64>, sign: f64) -> VarId {
        debug_assert_eq!(self.value(x).len(), v.len());
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .zip(&v)
            .map(|(a, c)| a + sign * c)
            .collect();
        self.push(Op::AddVecConst(x), out)
    }

    pub fn add_row_const(
        &mut self,
        x: VarId,
        rows: usize,
        cols: usize,
        row: Arc<Vec<f64>>,
        sign: f64,
    ) -> VarId {
        debug_assert_eq!(self.value(x).len(), rows * cols);
        debug_assert_eq!(row.len(), cols);
        let mut out = self.value(x).to_vec();
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] += sign * row[j];
            }
        }
        self.push(Op::AddRowConst(x), out)
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let v: Vec<f64> = self.value(x).iter().map(|a| a.tanh()).collect();
        self.push(Op::Tanh(x), v)
    }

    /// Test-harness op; see [`Tape::sub`].
    #[allow(dead_code)]
    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::Sum(x), vec![s])
    }

    pub fn mean_rows(&mut self, x: VarId, rows: usize, cols: usize) -> VarId {
        debug_assert_eq!(self.value(x).len(), rows * cols);
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j] += self.value(x)[i * cols + j];
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        self.push(Op::MeanRows { x, rows, cols }, out)
    }

    /// Test-harness op; see [`Tape::sub`].
    #[allow(dead_code)]
    pub fn matvec_const(&mut self, w: Arc<Vec<f64>>, rows: usize, cols: usize, x: VarId) -> VarId {
        debug_assert_eq!(w.len(), rows * cols);
        debug_assert_eq!(self.value(x).len(), cols);
        let xv = self.value(x);
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            out[i] = (0..cols).map(|j| w[i * cols + j] * xv[j]).sum();
        }
        self.push(Op::MatVecConst { x, w, rows, cols }, out)
    }

    pub fn rows_matvec_const(
        &mut self,
        x: VarId,
        n: usize,
        in_dim: usize,
        out_dim: usize,
        w: Arc<Vec<f64>>,
    ) -> VarId {
        debug_assert_eq!(self.value(x).len(), n * in_dim);
        debug_assert_eq!(w.len(), out_dim * in_dim);
        let xv = self.value(x);
        let mut out = vec![0.0; n * out_dim];
        for i in 0..n {
            let row = &xv[i * in_dim..(i + 1) * in_dim];
            for k in 0..out_dim {
                out[i * out_dim + k] = (0..in_dim).map(|j| w[k * in_dim + j] * row[j]).sum();
            }
        }
        self.push(Op::RowsMatVecConst { x, n, in_dim, out_dim, w }, out)
    }

    pub fn softmax(&mut self, x: VarId) -> VarId {
        self.push(Op::Softmax(x), softmax(self.value(x)))
    }

    pub fn cosine_rows_const(
        &mut self,
        x: VarId,
        rows: usize,
        cols: usize,
        t: Arc<Vec<f64>>,
    ) -> VarId {
        debug_assert_eq!(self.value(x).len(), rows * cols);
        debug_assert_eq!(t.len(), cols);
        let xv = self.value(x);
        let out: Vec<f64> = (0..rows)
            .map(|i| crate::stats::cosine(&xv[i * cols..(i + 1) * cols], &t))
            .collect();
        self.push(Op::CosineRowsConst { x, rows, cols, t }, out)
    }

    pub fn cosine_vec_const(&mut self, x: VarId, t: Arc<Vec<f64>>) -> VarId {
        debug_assert_eq!(self.value(x).len(), t.len());
        let c = crate::stats::cosine(self.value(x), &t);
        self.push(Op::CosineVecConst { x, t }, vec![c])
    }

    pub fn weighted_row_sum(&mut self, w: VarId, m: VarId, rows: usize, cols: usize) -> VarId {
        debug_assert_eq!(self.value(w).len(), rows);
        debug_assert_eq!(self.value(m).len(), rows * cols);
        let wv = self.value(w);
        let mv = self.value(m);
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j] += wv[i] * mv[i * cols + j];
            }
        }
        self.push(Op::WeightedRowSum { w, m, rows, cols }, out)
    }

    pub fn gather(&mut self, x: VarId, idx: Arc<Vec<usize>>) -> VarId {
        let xv = self.value(x);
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        self.push(Op::Gather { x, idx }, out)
    }

    /// Bilinear upsample of a square HWC image from src^2 to dst^2.
    pub fn upsample_bilinear(&mut self, x: VarId, src: usize, dst: usize) -> VarId {
        debug_assert_eq!(self.value(x).len(), src * src * CHANNELS);
        let out = crate::image::bilinear_resize(self.value(x), src, src, dst, dst);
        self.push(Op::UpsampleBilinear { x, src, dst }, out)
    }

    /// Cyclic shift: output pixel (y, x) reads input ((y - dy) mod size,
    /// (x - dx) mod size), so positive offsets move content down and right.
    pub fn roll2d(&mut self, x: VarId, size: usize, dy: i64, dx: i64) -> VarId {
        debug_assert_eq!(self.value(x).len(), size * size * CHANNELS);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for y in 0..size {
            let sy = (y as i64 - dy).rem_euclid(size as i64) as usize;
            for xpix in 0..size {
                let sx = (xpix as i64 - dx).rem_euclid(size as i64) as usize;
                let src = (sy * size + sx) * CHANNELS;
                let dst = (y * size + xpix) * CHANNELS;
                out[dst..dst + CHANNELS].copy_from_slice(&xv[src..src + CHANNELS]);
            }
        }
        self.push(Op::Roll2d { x, size, dy, dx }, out)
    }

    pub fn center_crop(&mut self, x: VarId, src: usize, dst: usize) -> VarId {
        debug_assert!(dst <= src);
        debug_assert_eq!(self.value(x).len(), src * src * CHANNELS);
        let off = (src - dst) / 2;
        let xv = self.value(x);
        let mut out = vec![0.0; dst * dst * CHANNELS];
        for y in 0..dst {
            let src_base = ((y + off) * src + off) * CHANNELS;
            let dst_base = y * dst * CHANNELS;
            out[dst_base..dst_base + dst * CHANNELS]
                .copy_from_slice(&xv[src_base..src_base + dst * CHANNELS]);
        }
        self.push(Op::CenterCrop { x, src, dst }, out)
    }

    /// Records an externally computed value. `pullback` maps a cotangent of
    /// `value` to a cotangent of `x` and is called during [`Tape::backward`].
    pub fn opaque(
        &mut self,
        x: VarId,
        value: Vec<f64>,
        pullback: Box<dyn Fn(&[f64]) -> Vec<f64> + Send>,
    ) -> VarId {
        self.push(Op::Opaque { x, pullback }, value)
    }

    /// Reverse pass from a scalar output, seeding with 1.0.
    pub fn backward(&self, output: VarId) -> Gradients {
        debug_assert_eq!(self.nodes[output.0].value.len(), 1);
        self.backward_seeded(output, &[1.0])
    }

    /// Reverse pass from `output` with an explicit cotangent seed.
    pub fn backward_seeded(&self, output: VarId, seed: &[f64]) -> Gradients {
        debug_assert_eq!(seed.len(), self.nodes[output.0].value.len());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.unwrap_or_else(|| vec![0.0; self.nodes[i].value.len()]))
                .collect(),
        }
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: VarId, len: usize) -> &mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let la = self.value(*a).len();
                let ga = Self::accumulate(grads, *a, la);
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += s;
                }
                let lb = self.value(*b).len();
                let gb = Self::accumulate(grads, *b, lb);
                for (d, s) in gb.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Sub(a, b) => {
                let la = self.value(*a).len();
                let ga = Self::accumulate(grads, *a, la);
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += s;
                }
                let lb = self.value(*b).len();
                let gb = Self::accumulate(grads, *b, lb);
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).to_vec();
                let vb = self.value(*b).to_vec();
                let ga = Self::accumulate(grads, *a, va.len());
                for ((d, s), f) in ga.iter_mut().zip(g).zip(&vb) {
                    *d += s * f;
                }
                let gb = Self::accumulate(grads, *b, vb.len());
                for ((d, s), f) in gb.iter_mut().zip(g).zip(&va) {
                    *d += s * f;
                }
            }
            Op::AffineScalar { x, mul } => {
                let lx = self.value(*x).len();
                let gx = Self::accumulate(grads, *x, lx);
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += mul * s;
                }
            }
            Op::AddVecConst(x) | Op::AddRowConst(x) => {
                let lx = self.value(*x).len();
                let gx = Self::accumulate(grads, *x, lx);
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let lx = self.value(*x).len();
                let gx = Self::accumulate(grads, *x, lx);
                for ((d, s), yv) in gx.iter_mut().zip(g).zip(y) {
                    *d += s * (1.0 - yv * yv);
                }
            }
            Op::Sum(x) => {
                let lx = self.value(*x).len();
                let gx = Self::accumulate(grads, *x, lx);
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::MeanRows { x, rows, cols } => {
                let gx = Self::accumulate(grads, *x, rows * cols);
                for i in 0..*rows {
                    for j in 0..*cols {
                        gx[i * cols + j] += g[j] / *rows as f64;
                    }
                }
            }
            Op::MatVecConst { x, w, rows, cols } => {
                let gx = Self::accumulate(grads, *x, *cols);
                for i in 0..*rows {
                    for j in 0..*cols {
                        gx[j] += g[i] * w[i * cols + j];
                    }
                }
            }
            Op::RowsMatVecConst { x, n, in_dim, out_dim, w } => {
                let gx = Self::accumulate(grads, *x, n * in_dim);
                for i in 0..*n {
                    for k in 0..*out_dim {
                        let gk = g[i * out_dim + k];
                        if gk == 0.0 {
                            continue;
                        }
                        for j in 0..*in_dim {
                            gx[i * in_dim + j] += gk * w[k * in_dim + j];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let inner: f64 = g.iter().zip(y).map(|(s, yv)| s * yv).sum();
                let lx = y.len();
                let gx = Self::accumulate(grads, *x, lx);
                for ((d, s), yv) in gx.iter_mut().zip(g).zip(y) {
                    *d += yv * (s - inner);
                }
            }
            Op::CosineRowsConst { x, rows, cols, t } => {
                let nt = crate::stats::norm(t);
                let xv = self.value(*x).to_vec();
                let y = &node.value;
                let gx = Self::accumulate(grads, *x, rows * cols);
                for i in 0..*rows {
                    let row = &xv[i * cols..(i + 1) * cols];
                    let nx = crate::stats::norm(row);
                    if nx < NORM_EPS || nt < NORM_EPS {
                        continue;
                    }
                    let scale = g[i];
                    for j in 0..*cols {
                        gx[i * cols + j] +=
                            scale * (t[j] / (nx * nt) - y[i] * row[j] / (nx * nx));
                    }
                }
            }
            Op::CosineVecConst { x, t } => {
                let xv = self.value(*x).to_vec();
                let nx = crate::stats::norm(&xv);
                let nt = crate::stats::norm(t);
                if nx < NORM_EPS || nt < NORM_EPS {
                    return;
                }
                let y = node.value[0];
                let gx = Self::accumulate(grads, *x, xv.len());
                for j in 0..xv.len() {
                    gx[j] += g[0] * (t[j] / (nx * nt) - y * xv[j] / (nx * nx));
                }
            }
            Op::WeightedRowSum { w, m, rows, cols } => {
                let wv = self.value(*w).to_vec();
                let mv = self.value(*m).to_vec();
                let gw = Self::accumulate(grads, *w, *rows);
                for i in 0..*rows {
                    gw[i] += (0..*cols).map(|j| g[j] * mv[i * cols + j]).sum::<f64>();
                }
                let gm = Self::accumulate(grads, *m, rows * cols);
                for i in 0..*rows {
                    for j in 0..*cols {
                        gm[i * cols + j] += wv[i] * g[j];
                    }
                }
            }
            Op::Gather { x, idx } => {
                let lx = self.value(*x).len();
                let gx = Self::accumulate(grads, *x, lx);
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
            }
            Op::UpsampleBilinear { x, src, dst } => {
                let gx = Self::accumulate(grads, *x, src * src * CHANNELS);
                for (oy, ox, taps) in bilinear_taps(*src, *src, *dst, *dst) {
                    let out_base = (oy * dst + ox) * CHANNELS;
                    for (src_idx, weight) in taps {
                        for c in 0..CHANNELS {
                            gx[src_idx * CHANNELS + c] += weight * g[out_base + c];
                        }
                    }
                }
            }
            Op::Roll2d { x, size, dy, dx } => {
                let gx = Self::accumulate(grads, *x, size * size * CHANNELS);
                for y in 0..*size {
                    let sy = (y as i64 - dy).rem_euclid(*size as i64) as usize;
                    for xpix in 0..*size {
                        let sx = (xpix as i64 - dx).rem_euclid(*size as i64) as usize;
                        let src = (sy * size + sx) * CHANNELS;
                        let dst = (y * size + xpix) * CHANNELS;
                        for c in 0..CHANNELS {
                            gx[src + c] += g[dst + c];
                        }
                    }
                }
            }
            Op::CenterCrop { x, src, dst } => {
                let off = (src - dst) / 2;
                let gx = Self::accumulate(grads, *x, src * src * CHANNELS);
                for y in 0..*dst {
                    for xpix in 0..*dst {
                        let src_base = ((y + off) * src + xpix + off) * CHANNELS;
                        let dst_base = (y * dst + xpix) * CHANNELS;
                        for c in 0..CHANNELS {
                            gx[src_base + c] += g[dst_base + c];
                        }
                    }
                }
            }
            Op::Opaque { x, pullback } => {
                let pulled = pullback(g);
                let lx = self.value(*x).len();
                debug_assert_eq!(pulled.len(), lx);
                let gx = Self::accumulate(grads, *x, lx);
                for (d, s) in gx.iter_mut().zip(&pulled) {
                    *d += s;
                }
            }
        }
    }
}

pub(crate) struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, id: VarId) -> &[f64] {
        &self.grads[id.0]
    }
}

/// Numerically stable softmax, shared by tape and plain evaluation paths.
pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central finite-difference gradient of a scalar function.
    fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            let scale = 1.0_f64.max(e.abs());
            assert!(
                (a - e).abs() <= tol * scale,
                "component {i}: got {a}, expected {e}"
            );
        }
    }

    /// Builds a scalar-valued graph with `build`, checks its tape gradient
    /// against finite differences.
    fn check_gradient(x: &[f64], mut build: impl FnMut(&mut Tape, VarId) -> VarId) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.to_vec());
        let out = build(&mut tape, leaf);
        let value = tape.scalar(out);
        assert!(value.is_finite());
        let grads = tape.backward(out);
        let analytic = grads.wrt(leaf).to_vec();
        let mut eval = |probe: &[f64]| {
            let mut t = Tape::new();
            let leaf = t.leaf(probe.to_vec());
            let out = build(&mut t, leaf);
            t.scalar(out)
        };
        let numeric = finite_diff(&mut eval, x, 1e-5);
        assert_close(&analytic, &numeric, 1e-6);
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seeds::rng(seed, &["autodiff-test"]);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn elementwise_ops() {
        let x = rand_vec(6, 1);
        let c = rand_vec(6, 2);
        check_gradient(&x, |t, leaf| {
            let c1 = t.leaf(c.clone());
            let a = t.add(leaf, c1);
            let b = t.sub(a, leaf);
            let m = t.mul(b, leaf);
            let s = t.affine_scalar(m, 0.7, -0.2);
            let v = t.add_vec_const(s, c.clone(), -0.5);
            let th = t.tanh(v);
            t.sum(th)
        });
    }

    #[test]
    fn row_broadcast_and_mean() {
        let x = rand_vec(12, 3);
        let row = rand_vec(4, 4);
        check_gradient(&x, |t, leaf| {
            let b = t.add_row_const(leaf, 3, 4, Arc::new(row.clone()), -1.0);
            let m = t.mean_rows(b, 3, 4);
            let th = t.tanh(m);
            t.sum(th)
        });
    }

    #[test]
    fn matvec_ops() {
        let x = rand_vec(8, 5);
        let w = rand_vec(3 * 4, 6);
        check_gradient(&x, |t, leaf| {
            let m = t.rows_matvec_const(leaf, 2, 4, 3, Arc::new(w.clone()));
            let th = t.tanh(m);
            t.sum(th)
        });
        let x2 = rand_vec(4, 7);
        check_gradient(&x2, |t, leaf| {
            let y = t.matvec_const(Arc::new(w.clone()), 3, 4, leaf);
            let th = t.tanh(y);
            t.sum(th)
        });
    }

    #[test]
    fn softmax_gradient() {
        let x = rand_vec(5, 8);
        let probe = rand_vec(5, 9);
        check_gradient(&x, |t, leaf| {
            let s = t.softmax(leaf);
            let p = t.leaf(probe.clone());
            let m = t.mul(s, p);
            t.sum(m)
        });
    }

    #[test]
    fn softmax_of_two_matches_logistic() {
        let y = softmax(&[2.0, 0.0]);
        assert!((y[0] - 0.8807970779778823).abs() < 1e-15);
        assert!((y[1] - 0.11920292202211755).abs() < 1e-15);
    }

    #[test]
    fn cosine_ops() {
        let x = rand_vec(8, 10);
        let t0 = rand_vec(4, 11);
        let probe = rand_vec(2, 12);
        check_gradient(&x, |t, leaf| {
            let c = t.cosine_rows_const(leaf, 2, 4, Arc::new(t0.clone()));
            let p = t.leaf(probe.clone());
            let m = t.mul(c, p);
            t.sum(m)
        });
        let x2 = rand_vec(4, 13);
        check_gradient(&x2, |t, leaf| {
            let c = t.cosine_vec_const(leaf, Arc::new(t0.clone()));
            t.sum(c)
        });
    }

    #[test]
    fn cosine_zero_row_has_zero_value_and_gradient() {
        let mut tape = Tape::new();
        let leaf = tape.leaf(vec![0.0, 0.0, 0.0, 1.0, 2.0, 2.0]);
        let c = tape.cosine_rows_const(leaf, 2, 3, Arc::new(vec![1.0, 0.0, 0.0]));
        assert_eq!(tape.value(c)[0], 0.0);
        let s = tape.sum(c);
        let grads = tape.backward(s);
        assert_eq!(&grads.wrt(leaf)[..3], &[0.0, 0.0, 0.0]);
        assert!(grads.wrt(leaf)[3..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn weighted_row_sum_both_gradients() {
        let w = rand_vec(3, 14);
        let m = rand_vec(12, 15);
        let probe = rand_vec(4, 16);
        // Gradient with respect to the weights.
        {
            let mut eval = |wp: &[f64]| {
                let mut t = Tape::new();
                let wl = t.leaf(wp.to_vec());
                let ml = t.leaf(m.clone());
                let y = t.weighted_row_sum(wl, ml, 3, 4);
                let p = t.leaf(probe.clone());
                let mp = t.mul(y, p);
                let s = t.sum(mp);
                t.scalar(s)
            };
            let mut t = Tape::new();
            let wl = t.leaf(w.clone());
            let ml = t.leaf(m.clone());
            let y = t.weighted_row_sum(wl, ml, 3, 4);
            let p = t.leaf(probe.clone());
            let mp = t.mul(y, p);
            let s = t.sum(mp);
            let grads = t.backward(s);
            let numeric = finite_diff(&mut eval, &w, 1e-5);
            assert_close(grads.wrt(wl), &numeric, 1e-6);
        }
        // Gradient with respect to the matrix.
        check_gradient(&m, |t, leaf| {
            let wl = t.leaf(w.clone());
            let y = t.weighted_row_sum(wl, leaf, 3, 4);
            let p = t.leaf(probe.clone());
            let mp = t.mul(y, p);
            t.sum(mp)
        });
    }

    #[test]
    fn gather_gradient() {
        let x = rand_vec(6, 17);
        let idx = vec![5usize, 0, 0, 3];
        let probe = rand_vec(4, 18);
        check_gradient(&x, |t, leaf| {
            let gathered = t.gather(leaf, Arc::new(idx.clone()));
            let p = t.leaf(probe.clone());
            let m = t.mul(gathered, p);
            t.sum(m)
        });
    }

    #[test]
    fn image_ops_gradients() {
        let size = 4;
        let x = rand_vec(size * size * CHANNELS, 19);
        let probe = rand_vec(9 * 9 * CHANNELS, 20);
        check_gradient(&x, |t, leaf| {
            let up = t.upsample_bilinear(leaf, size, 9);
            let p = t.leaf(probe.clone());
            let m = t.mul(up, p);
            t.sum(m)
        });
        let probe_roll = rand_vec(size * size * CHANNELS, 21);
        check_gradient(&x, |t, leaf| {
            let rolled = t.roll2d(leaf, size, -3, 5);
            let p = t.leaf(probe_roll.clone());
            let m = t.mul(rolled, p);
            t.sum(m)
        });
        let probe_crop = rand_vec(2 * 2 * CHANNELS, 22);
        check_gradient(&x, |t, leaf| {
            let cropped = t.center_crop(leaf, size, 2);
            let p = t.leaf(probe_crop.clone());
            let m = t.mul(cropped, p);
            t.sum(m)
        });
    }

    #[test]
    fn roll_and_crop_forward_semantics() {
        // 2x2 image, distinct channel-0 values; roll by (1, 0) moves rows down.
        let mut tape = Tape::new();
        let mut data = vec![0.0; 2 * 2 * CHANNELS];
        for (i, chunk) in data.chunks_mut(CHANNELS).enumerate() {
            chunk[0] = i as f64;
        }
        let leaf = tape.leaf(data);
        let rolled = tape.roll2d(leaf, 2, 1, 0);
        let ch0: Vec<f64> = tape.value(rolled).chunks(CHANNELS).map(|c| c[0]).collect();
        assert_eq!(ch0, vec![2.0, 3.0, 0.0, 1.0]);

        // Centre crop of a 4x4 to 2x2 keeps rows/cols 1..3.
        let mut data = vec![0.0; 4 * 4 * CHANNELS];
        for (i, chunk) in data.chunks_mut(CHANNELS).enumerate() {
            chunk[0] = i as f64;
        }
        let leaf = tape.leaf(data);
        let cropped = tape.center_crop(leaf, 4, 2);
        let ch0: Vec<f64> = tape.value(cropped).chunks(CHANNELS).map(|c| c[0]).collect();
        assert_eq!(ch0, vec![5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn opaque_pullback_is_applied() {
        // Opaque op computing y = 3x with pullback g -> 3g.
        let x = rand_vec(4, 23);
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let tripled: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let y = tape.opaque(
            leaf,
            tripled,
            Box::new(|g| g.iter().map(|v| 3.0 * v).collect()),
        );
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert_close(grads.wrt(leaf), &vec![3.0; 4], 1e-12);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x; dy/dx = 2 everywhere.
        let mut tape = Tape::new();
        let leaf = tape.leaf(vec![1.0, -2.0]);
        let y = tape.add(leaf, leaf);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert_eq!(grads.wrt(leaf), &[2.0, 2.0]);
    }
}
