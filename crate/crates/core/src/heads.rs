//! Detection heads: the contrastive head refines BEV cell features and
//! scores them against text features (batchnorm on both sides, learnable
//! affine alpha/beta); the localization head regresses per-cell box
//! parameters that decode back to world-space boxes.

use crate::diff::{BatchNormState, Graph, RunningStatsUpdate, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{project_box_to_bev, Box3D, GridConfig};
use crate::model::ConvVars;

/// Regression channel layout: (dx, dy) sub-cell offset in BEV units, z
/// center in meters, log sizes (x/y in BEV units, z in meters), (sin yaw,
/// cos yaw), optionally (vx, vy).
pub fn reg_channels(velocity: bool) -> usize {
    if velocity {
        10
    } else {
        8
    }
}

fn conv2d_on_flat(
    g: &mut Graph,
    flat: Var,
    conv: &ConvVars,
    hw: (usize, usize),
) -> Result<Var> {
    let (h, w) = hw;
    let d = g.value(flat).cols();
    let spatial = g.reshape(flat, &[h, w, 1, d])?;
    let out = g.conv3d(spatial, conv.weight, conv.bias, [1, 1, 1])?;
    let co = g.value(out).shape()[3];
    g.reshape(out, &[h * w, co])
}

/// Two 3×3 BEV convolutions (d -> d) with ReLU in between, applied on the
/// H×W layout of the flattened features.
pub fn contrastive_head(
    g: &mut Graph,
    bev: Var,
    conv1: &ConvVars,
    conv2: &ConvVars,
    hw: (usize, usize),
) -> Result<Var> {
    let h = conv2d_on_flat(g, bev, conv1, hw)?;
    let h = g.relu(h)?;
    conv2d_on_flat(g, h, conv2, hw)
}

/// One 3×3 conv (d -> d, ReLU) then a 1×1 conv to the regression channels.
pub fn localization_head(
    g: &mut Graph,
    bev: Var,
    conv: &ConvVars,
    out: &ConvVars,
    hw: (usize, usize),
) -> Result<Var> {
    let h = conv2d_on_flat(g, bev, conv, hw)?;
    let h = g.relu(h)?;
    conv2d_on_flat(g, h, out, hw)
}

/// Similarity map: `s_ij = alpha * BN(b_i) . BN(t_j) + beta`, batchnorm
/// feature-wise over the n BEV rows and the m text rows respectively.
/// Returns the `n×m` logits plus any train-mode running-stat updates.
#[allow(clippy::type_complexity)]
pub fn similarity(
    g: &mut Graph,
    bev_cells: Var,
    texts: Var,
    alpha: Var,
    beta: Var,
    bn_bev: (Var, Var, &BatchNormState),
    bn_text: (Var, Var, &BatchNormState),
) -> Result<(Var, Option<RunningStatsUpdate>, Option<RunningStatsUpdate>)> {
    if g.value(bev_cells).cols() != g.value(texts).cols() {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            details: format!(
                "bev dim {} vs text dim {}",
                g.value(bev_cells).cols(),
                g.value(texts).cols()
            ),
        });
    }
    let (bn_b, up_bev) = g.batchnorm(bev_cells, bn_bev.0, bn_bev.1, bn_bev.2)?;
    let (bn_t, up_text) = g.batchnorm(texts, bn_text.0, bn_text.1, bn_text.2)?;
    let tt = g.transpose(bn_t)?;
    let dots = g.matmul(bn_b, tt)?;
    let scaled = g.mul_scalar_var(dots, alpha)?;
    let s = g.add_scalar_var(scaled, beta)?;
    Ok((s, up_bev, up_text))
}

/// Non-graph similarity for already-normalized feature rows (used when
/// scoring vocabulary rows that bypass fusion): plain tensors in, `n×m` out.
pub fn similarity_eval(
    bev_cells: &Tensor,
    texts: &Tensor,
    alpha: f64,
    beta: f64,
    bn_bev: &BatchNormState,
    bn_text: &BatchNormState,
) -> Result<Tensor> {
    let mut bn_b_state = bn_bev.clone();
    bn_b_state.mode = crate::diff::BnMode::Eval;
    let mut bn_t_state = bn_text.clone();
    bn_t_state.mode = crate::diff::BnMode::Eval;
    let b = crate::diff::batchnorm(bev_cells, &mut bn_b_state)?;
    let t = crate::diff::batchnorm(texts, &mut bn_t_state)?;
    let (n, d) = (b.rows(), b.cols());
    let m = t.rows();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut dot = 0.0;
            for c in 0..d {
                dot += b.get2(i, c) * t.get2(j, c);
            }
            out[i * m + j] = alpha * dot + beta;
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Per-cell regression targets for a ground-truth box, together with the
/// flat cell index it is assigned to. `None` when the center projects
/// outside the grid.
pub fn encode_box(
    b: &Box3D,
    cfg: &GridConfig,
    velocity: bool,
) -> Result<Option<(usize, Vec<f64>)>> {
    let (h, w) = cfg.bev_dims()?;
    let bev = project_box_to_bev(b, cfg);
    if bev.x_bev < 0.0 || bev.y_bev < 0.0 {
        return Ok(None);
    }
    let (cx, cy) = (bev.x_bev.floor() as usize, bev.y_bev.floor() as usize);
    if cx >= h || cy >= w {
        return Ok(None);
    }
    let mut t = vec![
        bev.x_bev - cx as f64,
        bev.y_bev - cy as f64,
        b.z,
        bev.x_bev_size.ln(),
        bev.y_bev_size.ln(),
        b.z_size.ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ];
    if velocity {
        let v = b.velocity.unwrap_or([0.0, 0.0]);
        t.push(v[0]);
        t.push(v[1]);
    }
    Ok(Some((cx * w + cy, t)))
}

/// Inverse of [`encode_box`] for one cell of the regression map.
pub fn decode_cell(cell: usize, reg_row: &[f64], cfg: &GridConfig) -> Result<Box3D> {
    if reg_row.len() < 8 {
        return Err(Error::ShapeMismatch {
            op: "decode_cell",
            details: format!("regression row has {} channels, need >= 8", reg_row.len()),
        });
    }
    if reg_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::DecodeNonFinite { cell });
    }
    let (_, w) = cfg.bev_dims()?;
    let step = cfg.bev_cell_size();
    let (cx, cy) = (cell / w, cell % w);
    let x = (cx as f64 + reg_row[0]) * step + cfg.range_min[0];
    let y = (cy as f64 + reg_row[1]) * step + cfg.range_min[1];
    let z = reg_row[2];
    let x_size = reg_row[3].exp() * step;
    let y_size = reg_row[4].exp() * step;
    let z_size = reg_row[5].exp();
    if ![x_size, y_size, z_size].iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(Error::DecodeNonFinite { cell });
    }
    let yaw = if reg_row[6] == 0.0 && reg_row[7] == 0.0 {
        0.0
    } else {
        reg_row[6].atan2(reg_row[7])
    };
    let mut out = Box3D::new([x, y, z], [x_size, y_size, z_size], yaw)?;
    if reg_row.len() >= 10 {
        out = out.with_velocity([reg_row[8], reg_row[9]]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::diff::{grad_check, BnMode};
    use crate::model::ConvParams;

    fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn desk_grid() -> GridConfig {
        GridConfig {
            range_min: [-9.6, -9.6],
            range_max: [9.6, 9.6],
            z_bounds: [0.0, 2.4],
            voxel_size: 0.3,
            out_factor: 2,
        }
    }

    fn conv_vars(g: &mut Graph, c: &ConvParams) -> ConvVars {
        ConvVars { weight: g.constant(c.weight.clone()), bias: g.constant(c.bias.clone()) }
    }

    #[test]
    fn contrastive_head_zero_weights_zero_output() {
        let mut g = Graph::new();
        let bev = g.constant(Tensor::full(vec![16, 3], 1.5));
        let zero = ConvParams {
            weight: Tensor::zeros(vec![3, 3, 1, 3, 3]),
            bias: Tensor::zeros(vec![3]),
        };
        let c1 = conv_vars(&mut g, &zero);
        let c2 = conv_vars(&mut g, &zero);
        let out = contrastive_head(&mut g, bev, &c1, &c2, (4, 4)).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contrastive_head_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let x = randn(vec![16, 2], &mut rng);
        // 3×3 kernel with a centered identity tap.
        let mut w = vec![0.0; 3 * 3 * 1 * 2 * 2];
        for c in 0..2 {
            let center = ((1 * 3 + 1) * 1 + 0) * 2 * 2;
            w[center + c * 2 + c] = 1.0;
        }
        let ident = ConvParams {
            weight: Tensor::new(vec![3, 3, 1, 2, 2], w).unwrap(),
            bias: Tensor::zeros(vec![2]),
        };
        let mut g = Graph::new();
        let bev = g.constant(x.clone());
        let c1 = conv_vars(&mut g, &ident);
        let c2 = conv_vars(&mut g, &ident);
        let out = contrastive_head(&mut g, bev, &c1, &c2, (4, 4)).unwrap();
        // ReLU between the convs clips negatives; compare against that.
        for (a, b) in g.value(out).data().iter().zip(x.data()) {
            assert_abs_diff_eq!(*a, b.max(0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn heads_match_direct_convolution_oracle() {
        // conv2d is a thin reshape over conv3d (already oracle-checked); this
        // pins the channel layout with an independent 2-D loop.
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let (h, w_grid, d) = (4, 5, 3);
        let x = randn(vec![h * w_grid, d], &mut rng);
        let cp = ConvParams {
            weight: randn(vec![3, 3, 1, d, 2], &mut rng),
            bias: randn(vec![2], &mut rng),
        };
        let mut g = Graph::new();
        let bev = g.constant(x.clone());
        let cv = conv_vars(&mut g, &cp);
        let out = conv2d_on_flat(&mut g, bev, &cv, (h, w_grid)).unwrap();
        for ox in 0..h {
            for oy in 0..w_grid {
                for co in 0..2 {
                    let mut acc = cp.bias.data()[co];
                    for fx in 0..3isize {
                        for fy in 0..3isize {
                            let ix = ox as isize + fx - 1;
                            let iy = oy as isize + fy - 1;
                            if ix < 0 || iy < 0 || ix >= h as isize || iy >= w_grid as isize {
                                continue;
                            }
                            for ci in 0..d {
                                let wi = (((fx as usize * 3 + fy as usize) * 1) * d + ci) * 2 + co;
                                acc += x.get2(ix as usize * w_grid + iy as usize, ci)
                                    * cp.weight.data()[wi];
                            }
                        }
                    }
                    assert_abs_diff_eq!(
                        g.value(out).get2(ox * w_grid + oy, co),
                        acc,
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn localization_head_bias_only_gives_constant_map() {
        let mut g = Graph::new();
        let bev = g.constant(Tensor::zeros(vec![16, 3]));
        let conv = ConvParams {
            weight: Tensor::zeros(vec![3, 3, 1, 3, 3]),
            bias: Tensor::zeros(vec![3]),
        };
        let out_p = ConvParams {
            weight: Tensor::zeros(vec![1, 1, 1, 3, 8]),
            bias: Tensor::new(vec![8], (0..8).map(|i| i as f64 / 10.0).collect()).unwrap(),
        };
        let cv = conv_vars(&mut g, &conv);
        let ov = conv_vars(&mut g, &out_p);
        let out = localization_head(&mut g, bev, &cv, &ov, (4, 4)).unwrap();
        for cell in 0..16 {
            for ch in 0..8 {
                assert_eq!(g.value(out).get2(cell, ch), ch as f64 / 10.0);
            }
        }
    }

    #[test]
    fn similarity_identity_normalization_is_dot_product() {
        let mut st_b = BatchNormState::new(3);
        st_b.mode = BnMode::Eval;
        let mut st_t = BatchNormState::new(3);
        st_t.mode = BnMode::Eval;
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let b = randn(vec![4, 3], &mut rng);
        let t = randn(vec![2, 3], &mut rng);

        let mut g = Graph::new();
        let bv = g.constant(b.clone());
        let tv = g.constant(t.clone());
        let alpha = g.constant(Tensor::scalar(1.0));
        let beta = g.constant(Tensor::scalar(0.0));
        let g_b = g.constant(st_b.gamma.clone());
        let b_b = g.constant(st_b.beta.clone());
        let g_t = g.constant(st_t.gamma.clone());
        let b_t = g.constant(st_t.beta.clone());
        let (s, _, _) =
            similarity(&mut g, bv, tv, alpha, beta, (g_b, b_b, &st_b), (g_t, b_t, &st_t)).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let dot: f64 = (0..3).map(|c| b.get2(i, c) * t.get2(j, c)).sum();
                assert_abs_diff_eq!(g.value(s).get2(i, j), dot, epsilon = 1e-4 * dot.abs().max(1.0));
            }
        }
    }

    #[test]
    fn similarity_alpha_zero_gives_constant_beta() {
        let mut st = BatchNormState::new(2);
        st.mode = BnMode::Eval;
        let mut g = Graph::new();
        let bv = g.constant(Tensor::full(vec![3, 2], 0.7));
        let tv = g.constant(Tensor::full(vec![2, 2], -0.3));
        let alpha = g.constant(Tensor::scalar(0.0));
        let beta = g.constant(Tensor::scalar(1.25));
        let g_b = g.constant(st.gamma.clone());
        let b_b = g.constant(st.beta.clone());
        let g_t = g.constant(st.gamma.clone());
        let b_t = g.constant(st.beta.clone());
        let (s, _, _) =
            similarity(&mut g, bv, tv, alpha, beta, (g_b, b_b, &st), (g_t, b_t, &st)).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn similarity_direct_affine_arithmetic() {
        // With BN(b) = [1, 2] and BN(t) = [3, 4]: s = 2 * 11 + 1 = 23.
        let dot: f64 = 1.0 * 3.0 + 2.0 * 4.0;
        assert_eq!(2.0 * dot + 1.0, 23.0);
        // Drive the same numbers through the op with identity BN.
        let mut st = BatchNormState::new(2);
        st.mode = BnMode::Eval;
        st.epsilon = 1e-300; // effectively exact identity for this check
        let mut g = Graph::new();
        let bv = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let tv = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let alpha = g.constant(Tensor::scalar(2.0));
        let beta = g.constant(Tensor::scalar(1.0));
        let g_b = g.constant(st.gamma.clone());
        let b_b = g.constant(st.beta.clone());
        let g_t = g.constant(st.gamma.clone());
        let b_t = g.constant(st.beta.clone());
        let (s, _, _) =
            similarity(&mut g, bv, tv, alpha, beta, (g_b, b_b, &st), (g_t, b_t, &st)).unwrap();
        assert_abs_diff_eq!(g.value(s).item(), 23.0, epsilon = 1e-9);
    }

    #[test]
    fn similarity_train_mode_needs_two_text_rows() {
        let st = BatchNormState::new(2);
        let mut g = Graph::new();
        let bv = g.constant(Tensor::zeros(vec![3, 2]));
        let tv = g.constant(Tensor::zeros(vec![1, 2]));
        let alpha = g.constant(Tensor::scalar(1.0));
        let beta = g.constant(Tensor::scalar(0.0));
        let g_b = g.constant(st.gamma.clone());
        let b_b = g.constant(st.beta.clone());
        let g_t = g.constant(st.gamma.clone());
        let b_t = g.constant(st.beta.clone());
        assert!(matches!(
            similarity(&mut g, bv, tv, alpha, beta, (g_b, b_b, &st), (g_t, b_t, &st)),
            Err(Error::InsufficientBatch { n: 1 })
        ));
    }

    #[test]
    fn similarity_is_affine_in_alpha_beta_and_ranking_invariant() {
        let mut st = BatchNormState::new(3);
        st.mode = BnMode::Eval;
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let b = randn(vec![5, 3], &mut rng);
        let t = randn(vec![4, 3], &mut rng);
        let s_at = |alpha: f64, beta: f64| {
            similarity_eval(&b, &t, alpha, beta, &st, &st).unwrap()
        };
        let s1 = s_at(1.0, 0.0);
        let s2 = s_at(2.0, 0.0);
        for (a, b) in s2.data().iter().zip(s1.data()) {
            assert_abs_diff_eq!(*a, 2.0 * b, epsilon = 1e-12);
        }
        let s3 = s_at(3.5, -0.7);
        for i in 0..5 {
            let argmax = |s: &Tensor| {
                (0..4).max_by(|&x, &y| s.get2(i, x).total_cmp(&s.get2(i, y))).unwrap()
            };
            assert_eq!(argmax(&s1), argmax(&s3));
        }
    }

    #[test]
    fn similarity_gradcheck_wrt_alpha_beta() {
        let mut st = BatchNormState::new(3);
        st.mode = BnMode::Eval;
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let b = randn(vec![4, 3], &mut rng);
        let t = randn(vec![3, 3], &mut rng);
        let alpha = Tensor::scalar(0.8);
        let beta = Tensor::scalar(-0.2);
        let st2 = st.clone();
        let (b2, t2) = (b.clone(), t.clone());
        let err = grad_check(
            move |g, vars| {
                let bv = g.constant(b2.clone());
                let tv = g.constant(t2.clone());
                let g_b = g.constant(st2.gamma.clone());
                let b_b = g.constant(st2.beta.clone());
                let g_t = g.constant(st2.gamma.clone());
                let b_t = g.constant(st2.beta.clone());
                let (s, _, _) = similarity(
                    g,
                    bv,
                    tv,
                    vars[0],
                    vars[1],
                    (g_b, b_b, &st2),
                    (g_t, b_t, &st2),
                )?;
                g.sum(s)
            },
            &[alpha, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn decode_zero_regression_at_origin_cell() {
        let cfg = GridConfig {
            range_min: [-54.0, -54.0],
            range_max: [54.0, 54.0],
            z_bounds: [0.0, 3.0],
            voxel_size: 0.3,
            out_factor: 2,
        };
        // log sizes of 0 decode to one BEV cell / one meter; yaw (0, 1) -> 0.
        let row = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let b = decode_cell(0, &row, &cfg).unwrap();
        assert_abs_diff_eq!(b.x, -54.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.y, -54.0, epsilon = 1e-12);
        assert_eq!(b.yaw, 0.0);
        // atan2(0, 0) is pinned to 0 rather than an error.
        let row = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(decode_cell(0, &row, &cfg).unwrap().yaw, 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let cfg = desk_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        for _ in 0..1000 {
            let b = Box3D::new(
                [
                    rng.random_range(-9.5..9.5),
                    rng.random_range(-9.5..9.5),
                    rng.random_range(0.2..2.0),
                ],
                [
                    rng.random_range(0.3..4.0),
                    rng.random_range(0.3..4.0),
                    rng.random_range(0.3..2.0),
                ],
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            )
            .unwrap();
            let (cell, t) = encode_box(&b, &cfg, false).unwrap().unwrap();
            let back = decode_cell(cell, &t, &cfg).unwrap();
            assert_abs_diff_eq!(back.x, b.x, epsilon = 1e-9);
            assert_abs_diff_eq!(back.y, b.y, epsilon = 1e-9);
            assert_abs_diff_eq!(back.z, b.z, epsilon = 1e-9);
            assert_abs_diff_eq!(back.x_size, b.x_size, epsilon = 1e-9);
            assert_abs_diff_eq!(back.y_size, b.y_size, epsilon = 1e-9);
            assert_abs_diff_eq!(back.z_size, b.z_size, epsilon = 1e-9);
            assert_abs_diff_eq!(back.yaw, b.yaw, epsilon = 1e-9);
        }
    }

    #[test]
    fn encode_rejects_out_of_range_centers() {
        let cfg = desk_grid();
        let b = Box3D::new([30.0, 0.0, 0.5], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert!(encode_box(&b, &cfg, false).unwrap().is_none());
    }

    #[test]
    fn decode_rejects_non_finite_rows() {
        let cfg = desk_grid();
        let row = [0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(decode_cell(3, &row, &cfg), Err(Error::DecodeNonFinite { cell: 3 })));
    }
}
