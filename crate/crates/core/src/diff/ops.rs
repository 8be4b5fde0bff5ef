//! Forward construction of tape ops. Each method validates shapes, computes
//! the value eagerly, checks finiteness, and records the node.

use crate::diff::graph::{matmul_raw, Graph, Op, Var};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn require_2d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op, details: format!("expected 2-D, got {:?}", s) });
        }
        Ok((s[0], s[1]))
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn rg1(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    /// `a[n×k] · b[k×p]`; gradients `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.require_2d(a, "matmul")?;
        let (k2, p) = self.require_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!("inner dims disagree: {} vs {}", k, k2),
            });
        }
        let mut out = vec![0.0; n * p];
        matmul_raw(self.value(a).data(), self.value(b).data(), n, k, p, &mut out);
        let rg = self.rg2(a, b);
        let v = self.push(Tensor::new(vec![n, p], out)?, Op::Matmul { a, b }, rg);
        self.check_finite(v, "matmul")?;
        Ok(v)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.require_2d(x, "transpose")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.rg1(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                details: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg2(a, b);
        let v = self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg);
        self.check_finite(v, "add")?;
        Ok(v)
    }

    /// Broadcast-add a length-`c` bias to every row of `x[r×c]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.require_2d(x, "add_row_bias")?;
        if self.value(bias).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                details: format!("bias len {} vs {} cols", self.value(bias).numel(), c),
            });
        }
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let rg = self.rg2(x, bias);
        let v = self.push(Tensor::new(vec![r, c], out)?, Op::AddRowBias { x, bias }, rg);
        self.check_finite(v, "add_row_bias")?;
        Ok(v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg1(x);
        let v = self.push(Tensor::new(shape, out)?, Op::Scale { x, c }, rg);
        self.check_finite(v, "scale")?;
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                details: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg2(a, b);
        let v = self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg);
        self.check_finite(v, "mul")?;
        Ok(v)
    }

    /// Scale row `i` of `x[r×c]` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.require_2d(x, "row_scale")?;
        if self.value(s).numel() != r {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                details: format!("scale len {} vs {} rows", self.value(s).numel(), r),
            });
        }
        let xd = self.value(x).data();
        let sd = self.value(s).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] * sd[i];
            }
        }
        let rg = self.rg2(x, s);
        let v = self.push(Tensor::new(vec![r, c], out)?, Op::RowScale { x, s }, rg);
        self.check_finite(v, "row_scale")?;
        Ok(v)
    }

    /// Elementwise logistic sigmoid, stable over the full f64 range.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg1(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sigmoid { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg1(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Relu { x }, rg))
    }

    /// Row-wise softmax with shift-by-max stabilization.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.require_2d(x, "softmax_rows")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let rg = self.rg1(x);
        let v = self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows { x }, rg);
        self.check_finite(v, "softmax_rows")?;
        Ok(v)
    }

    /// Per-row maximum of `x[r×c]`; the gradient flows to the first argmax.
    pub fn reduce_max_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.require_2d(x, "reduce_max_rows")?;
        if c == 0 {
            return Err(Error::EmptyReduction { op: "reduce_max_rows" });
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; r];
        let mut argmax = vec![0usize; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut best = row[0];
            let mut bj = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    bj = j;
                }
            }
            out[i] = best;
            argmax[i] = bj;
        }
        let rg = self.rg1(x);
        Ok(self.push(Tensor::new(vec![r], out)?, Op::ReduceMaxRows { x, argmax }, rg))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg1(x);
        let v = self.push(Tensor::scalar(s), Op::Sum { x }, rg);
        self.check_finite(v, "sum")?;
        Ok(v)
    }

    /// Multiply every entry by a learnable scalar node `s` (shape `[1]`).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_var",
                details: format!("scalar operand has shape {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).item();
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg2(x, s);
        let v = self.push(Tensor::new(shape, out)?, Op::MulScalar { x, s }, rg);
        self.check_finite(v, "mul_scalar_var")?;
        Ok(v)
    }

    /// Add a learnable scalar node `s` (shape `[1]`) to every entry.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_scalar_var",
                details: format!("scalar operand has shape {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).item();
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v + sv).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg2(x, s);
        let v = self.push(Tensor::new(shape, out)?, Op::AddScalar { x, s }, rg);
        self.check_finite(v, "add_scalar_var")?;
        Ok(v)
    }

    /// Select rows of `x[r×c]` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.require_2d(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                details: format!("row index {} out of {} rows", bad, r),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.rg1(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Build an `n×c` tensor whose rows come from `parts`; `idx[p][k]` is the
    /// destination row of part `p`'s row `k`. Destinations must cover 0..n
    /// exactly once.
    pub fn assemble_rows(&mut self, parts: &[Var], idx: &[Vec<usize>], n: usize) -> Result<Var> {
        if parts.is_empty() || parts.len() != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "assemble_rows",
                details: "parts and index lists must be non-empty and equal length".into(),
            });
        }
        let c = self.require_2d(parts[0], "assemble_rows")?.1;
        let mut out = vec![0.0; n * c];
        let mut covered = vec![false; n];
        let mut rg = false;
        for (p, &part) in parts.iter().enumerate() {
            let (pr, pc) = self.require_2d(part, "assemble_rows")?;
            if pc != c || pr != idx[p].len() {
                return Err(Error::ShapeMismatch {
                    op: "assemble_rows",
                    details: format!("part {} is {}×{}, index list has {}", p, pr, pc, idx[p].len()),
                });
            }
            rg |= self.rg1(part);
            let pd = self.value(part).data();
            for (k, &dest) in idx[p].iter().enumerate() {
                if dest >= n || covered[dest] {
                    return Err(Error::ShapeMismatch {
                        op: "assemble_rows",
                        details: format!("destination row {} out of range or duplicated", dest),
                    });
                }
                covered[dest] = true;
                out[dest * c..(dest + 1) * c].copy_from_slice(&pd[k * c..(k + 1) * c]);
            }
        }
        if !covered.iter().all(|&b| b) {
            return Err(Error::ShapeMismatch {
                op: "assemble_rows",
                details: "destination rows do not cover the output".into(),
            });
        }
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::AssembleRows { parts: parts.to_vec(), idx: idx.to_vec() },
            rg,
        ))
    }

    /// Per-row standardization (no affine): `(x - mean_row) / sqrt(var_row + eps)`.
    pub fn layernorm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.require_2d(x, "layernorm_rows")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * is;
            }
        }
        let rg = self.rg1(x);
        let v = self.push(Tensor::new(vec![r, c], out)?, Op::LayerNormRows { x, inv_std }, rg);
        self.check_finite(v, "layernorm_rows")?;
        Ok(v)
    }

    /// `x[r×c]` reshaped in place (same element count).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", self.value(x).shape(), shape),
            });
        }
        let data = self.value(x).data().to_vec();
        let rg = self.rg1(x);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape { x }, rg))
    }

    /// Dense 3-D convolution, channels-last input `[X,Y,Z,Ci]`, weight
    /// `[Kx,Ky,Kz,Ci,Co]` (odd kernels, same-padding), per-output bias.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: [usize; 3],
    ) -> Result<Var> {
        let is = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if is.len() != 4 || ws.len() != 5 {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                details: format!("input {:?}, weight {:?}", is, ws),
            });
        }
        let (xi, yi, zi, ci) = (is[0], is[1], is[2], is[3]);
        let (kx, ky, kz, wci, co) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
        if wci != ci || kx % 2 == 0 || ky % 2 == 0 || kz % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                details: format!("weight {:?} incompatible with input channels {}", ws, ci),
            });
        }
        if self.value(bias).numel() != co {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                details: format!("bias len {} vs {} out channels", self.value(bias).numel(), co),
            });
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Config("conv3d stride must be >= 1".into()));
        }
        let (px, py, pz) = ((kx - 1) / 2, (ky - 1) / 2, (kz - 1) / 2);
        let xo = (xi + 2 * px - kx) / stride[0] + 1;
        let yo = (yi + 2 * py - ky) / stride[1] + 1;
        let zo = (zi + 2 * pz - kz) / stride[2] + 1;

        let in_d = self.value(input).data();
        let w_d = self.value(weight).data();
        let b_d = self.value(bias).data();
        let mut out = vec![0.0; xo * yo * zo * co];
        let mut acc = vec![0.0; co];
        for ox in 0..xo {
            for oy in 0..yo {
                for oz in 0..zo {
                    acc.copy_from_slice(b_d);
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
                                    let v = in_d[in_base + c];
                                    if v == 0.0 {
                                        continue;
                                    }
                                    let wrow = &w_d[w_base + c * co..][..co];
                                    for (a, wv) in acc.iter_mut().zip(wrow) {
                                        *a += v * wv;
                                    }
                                }
                            }
                        }
                    }
                    out[((ox * yo + oy) * zo + oz) * co..][..co].copy_from_slice(&acc);
                }
            }
        }
        let rg = self.rg2(input, weight) || self.rg1(bias);
        let v = self.push(
            Tensor::new(vec![xo, yo, zo, co], out)?,
            Op::Conv3d { input, weight, bias, stride },
            rg,
        );
        self.check_finite(v, "conv3d")?;
        Ok(v)
    }

    /// Max over the Z axis: `[X,Y,Z,C] -> [X,Y,C]`; gradient flows to the
    /// first argmax per column.
    pub fn z_pool_max(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "z_pool_max",
                details: format!("expected 4-D, got {:?}", s),
            });
        }
        let (xd_, yd_, zd_, cd_) = (s[0], s[1], s[2], s[3]);
        if zd_ == 0 {
            return Err(Error::EmptyReduction { op: "z_pool_max" });
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd_ * yd_ * cd_];
        let mut argmax = vec![0usize; xd_ * yd_ * cd_];
        for cell in 0..xd_ * yd_ {
            for ch in 0..cd_ {
                let mut best = xd[cell * zd_ * cd_ + ch];
                let mut bz = 0;
                for z in 1..zd_ {
                    let v = xd[cell * zd_ * cd_ + z * cd_ + ch];
                    if v > best {
                        best = v;
                        bz = z;
                    }
                }
                out[cell * cd_ + ch] = best;
                argmax[cell * cd_ + ch] = bz;
            }
        }
        let rg = self.rg1(x);
        Ok(self.push(Tensor::new(vec![xd_, yd_, cd_], out)?, Op::ZPoolMax { x, argmax }, rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and soft targets,
    /// evaluated in logit space.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if self.value(logits).shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits_mean",
                details: format!("{:?} vs {:?}", self.value(logits).shape(), target.shape()),
            });
        }
        let s = self.value(logits).data();
        let n = s.len() as f64;
        let mut total = 0.0;
        for (&si, &hi) in s.iter().zip(target.data()) {
            total += si.max(0.0) - si * hi + (-si.abs()).exp().ln_1p();
        }
        let rg = self.rg1(logits);
        let v = self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogitsMean { logits, target: target.clone() },
            rg,
        );
        self.check_finite(v, "bce_with_logits_mean")?;
        Ok(v)
    }

    /// Mean softmax cross-entropy over active rows; each active target row
    /// must sum to 1.
    pub fn softmax_ce_mean_rows(
        &mut self,
        logits: Var,
        target: &Tensor,
        active: &[bool],
    ) -> Result<Var> {
        let (r, c) = self.require_2d(logits, "softmax_ce_mean_rows")?;
        if target.shape() != self.value(logits).shape() || active.len() != r {
            return Err(Error::ShapeMismatch {
                op: "softmax_ce_mean_rows",
                details: "target/active sizes disagree with logits".into(),
            });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        let k = active.iter().filter(|&&a| a).count();
        for i in 0..r {
            if !active[i] {
                continue;
            }
            let row = &ld[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            let log_sum = sum.ln() + m;
            for j in 0..c {
                probs[i * c + j] /= sum;
                let t = target.data()[i * c + j];
                if t != 0.0 {
                    total += t * (log_sum - row[j]);
                }
            }
        }
        let loss = if k == 0 { 0.0 } else { total / k as f64 };
        let rg = self.rg1(logits);
        let v = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCeMeanRows {
                logits,
                target: target.clone(),
                active: active.to_vec(),
                probs,
            },
            rg,
        );
        self.check_finite(v, "softmax_ce_mean_rows")?;
        Ok(v)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "l1_mean",
                details: format!("{:?} vs {:?}", self.value(pred).shape(), target.shape()),
            });
        }
        let pd = self.value(pred).data();
        let n = pd.len() as f64;
        let total: f64 = pd.iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum();
        let rg = self.rg1(pred);
        let v =
            self.push(Tensor::scalar(total / n), Op::L1Mean { pred, target: target.clone() }, rg);
        self.check_finite(v, "l1_mean")?;
        Ok(v)
    }
}
