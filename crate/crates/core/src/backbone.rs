//! BEV feature extraction: a dense 3-D conv stack over the binary voxel
//! grid followed by Z-axis max pooling. Stand-in for a sparse-conv backbone
//! at desk scale.

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{GridConfig, VoxelGrid};
use crate::model::{grid_to_tensor, ConvParams, ConvVars};

/// Conv stack layout: 3×3×3 kernels throughout, ReLU between layers (none
/// after the last), per-layer x/y stride (z stride stays 1). The stride
/// product must equal the grid's `out_factor`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl BackboneConfig {
    pub fn validate(&self, d: usize, out_factor: usize) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(
                "backbone needs equal, non-zero channel and stride counts".into(),
            ));
        }
        if *self.channels.last().unwrap() != d {
            return Err(Error::Config(format!(
                "last backbone channel count {} must equal feature dim {}",
                self.channels.last().unwrap(),
                d
            )));
        }
        let product: usize = self.strides.iter().product();
        if product != out_factor {
            return Err(Error::Config(format!(
                "stride product {} must equal out factor {}",
                product, out_factor
            )));
        }
        Ok(())
    }
}

/// BEV feature map `B` with its flattened `n×d` view (`n = H·W`, flat cell
/// index `x_bin * W + y_bin`).
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeat {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub flat: Tensor,
}

impl BevFeat {
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.flat.get2(x * self.w + y, ch)
    }
}

/// Graph builder: occupancy `[X,Y,Z,1]` -> conv stack -> z max pool ->
/// flattened `n×d` BEV features.
pub fn extract_bev_graph(
    g: &mut Graph,
    occupancy: Var,
    convs: &[ConvVars],
    strides: &[usize],
    bev_dims: (usize, usize),
    d: usize,
) -> Result<Var> {
    if convs.is_empty() || convs.len() != strides.len() {
        return Err(Error::Config("backbone conv/stride lists are inconsistent".into()));
    }
    let mut h = occupancy;
    let last = convs.len() - 1;
    for (i, (conv, &s)) in convs.iter().zip(strides).enumerate() {
        h = g.conv3d(h, conv.weight, conv.bias, [s, s, 1])?;
        if i < last {
            h = g.relu(h)?;
        }
    }
    let pooled = g.z_pool_max(h)?;
    let shape = g.value(pooled).shape().to_vec();
    let (hh, ww) = bev_dims;
    if shape != [hh, ww, d] {
        return Err(Error::Config(format!(
            "backbone produced {:?}, grid config wants [{}, {}, {}]",
            shape, hh, ww, d
        )));
    }
    g.reshape(pooled, &[hh * ww, d])
}

/// Non-graph convenience over [`extract_bev_graph`] for direct evaluation.
pub fn extract_bev(
    grid: &VoxelGrid,
    weights: &[ConvParams],
    strides: &[usize],
    cfg: &GridConfig,
) -> Result<BevFeat> {
    let dims = cfg.voxel_dims()?;
    if grid.dims != dims {
        return Err(Error::Config(format!(
            "voxel grid dims {:?} disagree with grid config {:?}",
            grid.dims, dims
        )));
    }
    let (h, w) = cfg.bev_dims()?;
    let d = weights.last().map(|c| c.bias.numel()).unwrap_or(0);
    let mut g = Graph::new();
    let occ = g.constant(grid_to_tensor(grid));
    let convs: Vec<ConvVars> = weights
        .iter()
        .map(|c| ConvVars {
            weight: g.constant(c.weight.clone()),
            bias: g.constant(c.bias.clone()),
        })
        .collect();
    let out = extract_bev_graph(&mut g, occ, &convs, strides, (h, w), d)?;
    Ok(BevFeat { h, w, d, flat: g.value(out).clone() })
}
