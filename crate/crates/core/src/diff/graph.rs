//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward op executes eagerly and appends one node to the tape, so
//! nodes are already in topological order; `backward` walks them once in
//! reverse. One graph per forward pass, confined to a single thread.

use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    Mul { a: Var, b: Var },
    RowScale { x: Var, s: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    ReduceMaxRows { x: Var, argmax: Vec<usize> },
    Sum { x: Var },
    MulScalar { x: Var, s: Var },
    AddScalar { x: Var, s: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    AssembleRows { parts: Vec<Var>, idx: Vec<Vec<usize>> },
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Conv3d { input: Var, weight: Var, bias: Var, stride: [usize; 3] },
    ZPoolMax { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    BceWithLogitsMean { logits: Var, target: Tensor },
    SoftmaxCeMeanRows { logits: Var, target: Tensor, active: Vec<bool>, probs: Vec<f64> },
    L1Mean { pred: Var, target: Tensor },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Reverse-mode tape: op records in topological order plus per-node gradient
/// buffers filled in by `backward`.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
    backward_run: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_run: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor; it participates in backward iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Register a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` output w.r.t. `v`.
    ///
    /// `None` for nodes that do not require gradients; zeros for
    /// requires-grad leaves not on any path to the output.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        match &self.grads[v.0] {
            Some(g) => Some(Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap()),
            None => Some(Tensor::zeros(node.value.shape().to_vec())),
        }
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_run = false;
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn check_finite(&self, v: Var, op: &'static str) -> Result<()> {
        if self.nodes[v.0].value.is_all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Chain-rule accumulation from `out`, seeded with `seed` (same shape as
    /// the output value). A second call without `reset_grads` is rejected.
    pub fn backward(&mut self, out: Var, seed: &Tensor) -> Result<()> {
        if self.backward_run {
            return Err(Error::BackwardAlreadyRun);
        }
        let out_shape = self.nodes[out.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_shape.to_vec(),
            });
        }
        self.backward_run = true;
        self.grads[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dy = self.grads[i].take().unwrap();
            self.dispatch_backward(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        contrib(self.grads[v.0].as_mut().unwrap());
    }

    fn dispatch_backward(&mut self, node_id: usize, dy: &[f64]) {
        // Ops are taken apart by shadowing the borrow: read everything needed
        // from immutable state first, then accumulate.
        match &self.nodes[node_id].op {
            Op::Leaf | Op::Constant => {}

            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (n, k) = (av.rows(), av.cols());
                let p = bv.cols();
                self.accum(a, |ga| {
                    // dA[i,kk] = dot(dC row i, B row kk)
                    for i in 0..n {
                        let dyrow = &dy[i * p..(i + 1) * p];
                        for kk in 0..k {
                            let brow = &bv.data()[kk * p..(kk + 1) * p];
                            let mut acc = 0.0;
                            for j in 0..p {
                                acc += dyrow[j] * brow[j];
                            }
                            ga[i * k + kk] += acc;
                        }
                    }
                });
                self.accum(b, |gb| {
                    // dB = A^T · dC
                    for i in 0..n {
                        for kk in 0..k {
                            let av_ik = av.data()[i * k + kk];
                            if av_ik == 0.0 {
                                continue;
                            }
                            let dyrow = &dy[i * p..(i + 1) * p];
                            let gbrow = &mut gb[kk * p..(kk + 1) * p];
                            for j in 0..p {
                                gbrow[j] += av_ik * dyrow[j];
                            }
                        }
                    }
                });
            }

            Op::Transpose { x } => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (r, c) = (xs[0], xs[1]);
                self.accum(x, |gx| {
                    for i in 0..c {
                        for j in 0..r {
                            gx[j * c + i] += dy[i * r + j];
                        }
                    }
                });
            }

            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, |g| {
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di;
                    }
                });
                self.accum(b, |g| {
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di;
                    }
                });
            }

            Op::AddRowBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let c = self.nodes[bias.0].value.numel();
                self.accum(x, |g| {
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di;
                    }
                });
                self.accum(bias, |g| {
                    for (i, di) in dy.iter().enumerate() {
                        g[i % c] += di;
                    }
                });
            }

            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.accum(x, |g| {
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += c * di;
                    }
                });
            }

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.accum(a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                self.accum(b, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }

            Op::RowScale { x, s } => {
                let (x, s) = (*x, *s);
                let xv = self.nodes[x.0].value.clone();
                let sv = self.nodes[s.0].value.data().to_vec();
                let (r, c) = (xv.rows(), xv.cols());
                self.accum(x, |g| {
                    for i in 0..r {
                        let si = sv[i];
                        for j in 0..c {
                            g[i * c + j] += dy[i * c + j] * si;
                        }
                    }
                });
                self.accum(s, |g| {
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += dy[i * c + j] * xv.data()[i * c + j];
                        }
                        g[i] += acc;
                    }
                });
            }

            Op::Sigmoid { x } => {
                let x = *x;
                let y = self.nodes[node_id].value.data().to_vec();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }

            Op::Relu { x } => {
                let x = *x;
                let xv = self.nodes[x.0].value.data().to_vec();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                });
            }

            Op::SoftmaxRows { x } => {
                let x = *x;
                let y = self.nodes[node_id].value.clone();
                let (r, c) = (y.rows(), y.cols());
                self.accum(x, |g| {
                    for i in 0..r {
                        let yrow = &y.data()[i * c..(i + 1) * c];
                        let dyrow = &dy[i * c..(i + 1) * c];
                        let dot: f64 = yrow.iter().zip(dyrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] += yrow[j] * (dyrow[j] - dot);
                        }
                    }
                });
            }

            Op::ReduceMaxRows { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let c = self.nodes[x.0].value.cols();
                self.accum(x, |g| {
                    for (i, &j) in argmax.iter().enumerate() {
                        g[i * c + j] += dy[i];
                    }
                });
            }

            Op::Sum { x } => {
                let x = *x;
                let d = dy[0];
                self.accum(x, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }

            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let sval = self.nodes[s.0].value.item();
                let xv = self.nodes[x.0].value.data().to_vec();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * sval;
                    }
                });
                self.accum(s, |g| {
                    let mut acc = 0.0;
                    for i in 0..xv.len() {
                        acc += dy[i] * xv[i];
                    }
                    g[0] += acc;
                });
            }

            Op::AddScalar { x, s } => {
                let (x, s) = (*x, *s);
                self.accum(x, |g| {
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di;
                    }
                });
                self.accum(s, |g| {
                    g[0] += dy.iter().sum::<f64>();
                });
            }

            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let c = self.nodes[x.0].value.cols();
                self.accum(x, |g| {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += dy[k * c + j];
                        }
                    }
                });
            }

            Op::AssembleRows { parts, idx } => {
                let parts = parts.clone();
                let idx = idx.clone();
                let c = self.nodes[node_id].value.cols();
                for (p, part) in parts.iter().enumerate() {
                    let rows = idx[p].clone();
                    self.accum(*part, |g| {
                        for (k, &i) in rows.iter().enumerate() {
                            for j in 0..c {
                                g[k * c + j] += dy[i * c + j];
                            }
                        }
                    });
                }
            }

            Op::LayerNormRows { x, inv_std } => {
                let x = *x;
                let inv_std = inv_std.clone();
                let y = self.nodes[node_id].value.clone();
                let (r, c) = (y.rows(), y.cols());
                self.accum(x, |g| {
                    for i in 0..r {
                        let yrow = &y.data()[i * c..(i + 1) * c];
                        let dyrow = &dy[i * c..(i + 1) * c];
                        let mean_dy: f64 = dyrow.iter().sum::<f64>() / c as f64;
                        let mean_dyy: f64 =
                            dyrow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            g[i * c + j] += inv_std[i] * (dyrow[j] - mean_dy - yrow[j] * mean_dyy);
                        }
                    }
                });
            }

            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let gv = self.nodes[gamma.0].value.data().to_vec();
                let (n, d) = {
                    let xs = self.nodes[x.0].value.shape();
                    (xs[0], xs[1])
                };
                self.accum(beta, |g| {
                    for i in 0..n {
                        for j in 0..d {
                            g[j] += dy[i * d + j];
                        }
                    }
                });
                self.accum(gamma, |g| {
                    for i in 0..n {
                        for j in 0..d {
                            g[j] += dy[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                self.accum(x, |g| {
                    if train {
                        // Batch statistics depend on x: full BN backward.
                        let mut sum_dxhat = vec![0.0; d];
                        let mut sum_dxhat_xhat = vec![0.0; d];
                        for i in 0..n {
                            for j in 0..d {
                                let dxh = dy[i * d + j] * gv[j];
                                sum_dxhat[j] += dxh;
                                sum_dxhat_xhat[j] += dxh * xhat[i * d + j];
                            }
                        }
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..d {
                                let dxh = dy[i * d + j] * gv[j];
                                g[i * d + j] += inv_std[j] / nf
                                    * (nf * dxh
                                        - sum_dxhat[j]
                                        - xhat[i * d + j] * sum_dxhat_xhat[j]);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..d {
                                g[i * d + j] += dy[i * d + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                });
            }

            Op::Conv3d { input, weight, bias, stride } => {
                let (input, weight, bias, stride) = (*input, *weight, *bias, *stride);
                self.conv3d_backward(node_id, input, weight, bias, stride, dy);
            }

            Op::ZPoolMax { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (zc, c) = (xs[2] * xs[3], xs[3]);
                self.accum(x, |g| {
                    // output index o = (x*Y + y)*C + ch maps to input
                    // (x*Y + y)*Z*C + z*C + ch
                    for (o, &z) in argmax.iter().enumerate() {
                        let cell = o / c;
                        let ch = o % c;
                        g[cell * zc + z * c + ch] += dy[o];
                    }
                });
            }

            Op::Reshape { x } => {
                let x = *x;
                self.accum(x, |g| {
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di;
                    }
                });
            }

            Op::BceWithLogitsMean { logits, target } => {
                let logits = *logits;
                let target = target.clone();
                let s = self.nodes[logits.0].value.data().to_vec();
                let n = s.len() as f64;
                let d = dy[0];
                self.accum(logits, |g| {
                    for i in 0..s.len() {
                        g[i] += d * (crate::diff::ops::sigmoid_scalar(s[i]) - target.data()[i]) / n;
                    }
                });
            }

            Op::SoftmaxCeMeanRows { logits, target, active, probs } => {
                let logits = *logits;
                let target = target.clone();
                let active = active.clone();
                let probs = probs.clone();
                let c = target.cols();
                let k = active.iter().filter(|&&a| a).count().max(1) as f64;
                let d = dy[0];
                self.accum(logits, |g| {
                    for (r, &is_active) in active.iter().enumerate() {
                        if !is_active {
                            continue;
                        }
                        for j in 0..c {
                            g[r * c + j] +=
                                d * (probs[r * c + j] - target.data()[r * c + j]) / k;
                        }
                    }
                });
            }

            Op::L1Mean { pred, target } => {
                let pred = *pred;
                let target = target.clone();
                let pv = self.nodes[pred.0].value.data().to_vec();
                let n = pv.len() as f64;
                let d = dy[0];
                self.accum(pred, |g| {
                    for i in 0..pv.len() {
                        let diff = pv[i] - target.data()[i];
                        g[i] += d * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 } / n;
                    }
                });
            }
        }
    }

    fn conv3d_backward(
        &mut self,
        node_id: usize,
        input: Var,
        weight: Var,
        bias: Var,
        stride: [usize; 3],
        dy: &[f64],
    ) {
        let in_t = self.nodes[input.0].value.clone();
        let w_t = self.nodes[weight.0].value.clone();
        let out_shape = self.nodes[node_id].value.shape().to_vec();
        let is = in_t.shape().to_vec();
        let ws = w_t.shape().to_vec();
        let (xi, yi, zi, ci) = (is[0], is[1], is[2], is[3]);
        let (kx, ky, kz, co) = (ws[0], ws[1], ws[2], ws[4]);
        let (xo, yo, zo) = (out_shape[0], out_shape[1], out_shape[2]);
        let (px, py, pz) = ((kx - 1) / 2, (ky - 1) / 2, (kz - 1) / 2);

        self.accum(bias, |g| {
            for cell in 0..xo * yo * zo {
                let dyrow = &dy[cell * co..(cell + 1) * co];
                for (gc, dc) in g.iter_mut().zip(dyrow) {
                    *gc += dc;
                }
            }
        });

        let input_needs = self.nodes[input.0].requires_grad;
        let weight_needs = self.nodes[weight.0].requires_grad;
        if !input_needs && !weight_needs {
            return;
        }

        let mut gw = vec![0.0; w_t.numel()];
        let mut gi_buf = vec![0.0; in_t.numel()];
        for ox in 0..xo {
            for oy in 0..yo {
                for oz in 0..zo {
                    let dyrow = &dy[((ox * yo + oy) * zo + oz) * co..][..co];
                    for fx in 0..kx {
                        let ix = (ox * stride[0] + fx).wrapping_sub(px);
                        if ix >= xi {
                            continue;
                        }
                        for fy in 0..ky {
                            let iy = (oy * stride[1] + fy).wrapping_sub(py);
                            if iy >= yi {
                                continue;
                            }
                            for fz in 0..kz {
                                let iz = (oz * stride[2] + fz).wrapping_sub(pz);
                                if iz >= zi {
                                    continue;
                                }
                                let in_base = (((ix * yi) + iy) * zi + iz) * ci;
                                let w_base = (((fx * ky) + fy) * kz + fz) * ci * co;
                                for c in 0..ci {
                                    let v = in_t.data()[in_base + c];
                                    let wrow = &w_t.data()[w_base + c * co..][..co];
                                    if weight_needs && v != 0.0 {
                                        let gwrow = &mut gw[w_base + c * co..][..co];
                                        for (gwc, dc) in gwrow.iter_mut().zip(dyrow) {
                                            *gwc += v * dc;
                                        }
                                    }
                                    if input_needs {
                                        let mut acc = 0.0;
                                        for (wc, dc) in wrow.iter().zip(dyrow) {
                                            acc += wc * dc;
                                        }
                                        gi_buf[in_base + c] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if weight_needs {
            self.accum(weight, |g| {
                for (gc, wc) in g.iter_mut().zip(&gw) {
                    *gc += wc;
                }
            });
        }
        if input_needs {
            self.accum(input, |g| {
                for (gc, ic) in g.iter_mut().zip(&gi_buf) {
                    *gc += ic;
                }
            });
        }
    }
}

/// Raw matmul used by forward ops: `out[n×p] = a[n×k] · b[k×p]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, p: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..n {
        let orow = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
}
