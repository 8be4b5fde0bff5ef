//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::graph::{Graph, Var};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

/// Builds a scalar-valued graph from a fixed set of input tensors.
pub trait ScalarFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<T: Fn(&mut Graph, &[Var]) -> Result<Var>> ScalarFn for T {}

fn eval_scalar(build: &impl ScalarFn, points: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            details: format!("composite must be scalar-valued, got {:?}", v.shape()),
        });
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(y)
}

/// Max over all input coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check(build: impl ScalarFn, points: &[Tensor], h: f64) -> Result<f64> {
    grad_check_coords(&build, points, h, None)
}

/// `grad_check` restricted to `max_coords` seeded-random coordinates per
/// input; used for composites too large to sweep exhaustively.
pub fn grad_check_sampled(
    build: impl ScalarFn,
    points: &[Tensor],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    grad_check_coords(&build, points, h, Some((max_coords, seed)))
}

fn grad_check_coords(
    build: &impl ScalarFn,
    points: &[Tensor],
    h: f64,
    sample: Option<(usize, u64)>,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Config("grad_check step h must be > 0".into()));
    }
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            g.leaf(t)
        })
        .collect();
    let out = build(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            details: format!("composite must be scalar-valued, got {:?}", g.value(out).shape()),
        });
    }
    g.backward(out, &Tensor::scalar(1.0))?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap()).collect();

    let mut rng = sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut max_err: f64 = 0.0;
    for (pi, point) in points.iter().enumerate() {
        let coords: Vec<usize> = match sample {
            Some((k, _)) if point.numel() > k => {
                let rng = rng.as_mut().unwrap();
                let mut set = BTreeSet::new();
                while set.len() < k {
                    set.insert(rng.random_range(0..point.numel()));
                }
                set.into_iter().collect()
            }
            _ => (0..point.numel()).collect(),
        };
        for c in coords {
            let mut plus = points.to_vec();
            plus[pi].data_mut()[c] += h;
            let f_plus = eval_scalar(build, &plus)?;
            let mut minus = points.to_vec();
            minus[pi].data_mut()[c] -= h;
            let f_minus = eval_scalar(build, &minus)?;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi].data()[c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
