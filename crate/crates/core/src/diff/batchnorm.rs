//! Feature-wise batch normalization over the rows of an `n×d` matrix.

use crate::diff::graph::{Graph, Op, Var};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Learnable affine plus running statistics for one batchnorm site.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

/// Running statistics produced by a train-mode application; the caller
/// commits them with [`BatchNormState::apply_update`].
#[derive(Debug, Clone)]
pub struct RunningStatsUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            epsilon: 1e-5,
            mode: BnMode::Train,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::Config("batchnorm epsilon must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.momentum == 0.0 {
            return Err(Error::Config("batchnorm momentum must lie in (0,1)".into()));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("batchnorm running variance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn apply_update(&mut self, update: &RunningStatsUpdate) {
        let m = self.momentum;
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * update.mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * update.var[j];
        }
    }
}

/// Batch statistics of `x[n×d]`: per-feature mean and biased variance.
fn batch_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x.data()[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    for i in 0..n {
        for j in 0..d {
            let c = x.data()[i * d + j] - mean[j];
            var[j] += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    (mean, var)
}

/// Plain (non-graph) batchnorm on a tensor. Train mode normalizes with batch
/// statistics and updates the running stats in place; eval mode uses the
/// running stats. Output is `gamma * xhat + beta`.
pub fn batchnorm(x: &Tensor, st: &mut BatchNormState) -> Result<Tensor> {
    st.validate()?;
    let (n, d) = (x.rows(), x.cols());
    if d != st.dim() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            details: format!("{} features vs state dim {}", d, st.dim()),
        });
    }
    let (mean, var): (Vec<f64>, Vec<f64>) = match st.mode {
        BnMode::Train => {
            if n < 2 {
                return Err(Error::InsufficientBatch { n });
            }
            batch_moments(x)
        }
        BnMode::Eval => (st.running_mean.clone(), st.running_var.clone()),
    };
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let xhat = (x.data()[i * d + j] - mean[j]) / (var[j] + st.epsilon).sqrt();
            out[i * d + j] = st.gamma.data()[j] * xhat + st.beta.data()[j];
        }
    }
    if st.mode == BnMode::Train {
        // Unbiased variance for the running estimate.
        let unbias = n as f64 / (n as f64 - 1.0);
        let update = RunningStatsUpdate {
            mean,
            var: var.iter().map(|v| v * unbias).collect(),
        };
        st.apply_update(&update);
    }
    Ok(Tensor::new(vec![n, d], out)?)
}

impl Graph {
    /// Graph batchnorm: `gamma`/`beta` are learnable nodes; running stats
    /// come from `st` and are never mutated here — train mode returns the
    /// batch statistics for the caller to commit.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        st: &BatchNormState,
    ) -> Result<(Var, Option<RunningStatsUpdate>)> {
        st.validate()?;
        let xv = self.value(x).clone();
        let s = xv.shape();
        if s.len() != 2 || s[1] != st.dim() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                details: format!("input {:?} vs state dim {}", s, st.dim()),
            });
        }
        let (n, d) = (s[0], s[1]);
        let train = st.mode == BnMode::Train;
        let (mean, var) = if train {
            if n < 2 {
                return Err(Error::InsufficientBatch { n });
            }
            batch_moments(&xv)
        } else {
            (st.running_mean.clone(), st.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + st.epsilon).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let xh = (xv.data()[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = xh;
                out[i * d + j] = gv[j] * xh + bv[j];
            }
        }
        let update = if train {
            let unbias = n as f64 / (n as f64 - 1.0);
            Some(RunningStatsUpdate {
                mean,
                var: var.iter().map(|v| v * unbias).collect(),
            })
        } else {
            None
        };
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        let v = self.push(
            Tensor::new(vec![n, d], out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            rg,
        );
        self.check_finite(v, "batchnorm")?;
        Ok((v, update))
    }
}
