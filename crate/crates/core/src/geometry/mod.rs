//! Point clouds, 3-D boxes, voxel grids and the BEV projection, plus rotated
//! IoU and non-maximum suppression.

mod iou;
mod nms;
mod voxelize;

pub use iou::{bev_iou, rotated_iou, RotatedRect};
pub use nms::nms;
pub use voxelize::voxelize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("point cloud contains non-finite coordinates".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Wrap an angle to `[-pi, pi)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    use std::f64::consts::PI;
    if (-PI..PI).contains(&yaw) {
        return yaw;
    }
    let w = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can land exactly on +pi through rounding.
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Axis sizes and yaw around the vertical axis; center in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub x_size: f64,
    pub y_size: f64,
    pub z_size: f64,
    pub yaw: f64,
    pub velocity: Option<[f64; 2]>,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("box sizes must be > 0, got {:?}", size)));
        }
        let fields = [center[0], center[1], center[2], yaw];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("box parameters must be finite".into()));
        }
        Ok(Box3D {
            x: center[0],
            y: center[1],
            z: center[2],
            x_size: size[0],
            y_size: size[1],
            z_size: size[2],
            yaw: normalize_yaw(yaw),
            velocity: None,
        })
    }

    pub fn with_velocity(mut self, v: [f64; 2]) -> Self {
        self.velocity = Some(v);
        self
    }

    /// Footprint on the ground plane, in meters.
    pub fn bev_rect(&self) -> RotatedRect {
        RotatedRect {
            cx: self.x,
            cy: self.y,
            half_x: self.x_size / 2.0,
            half_y: self.y_size / 2.0,
            yaw: self.yaw,
        }
    }
}

/// BEV grid geometry: point-cloud range, voxel size `F_v` and backbone
/// downsample `F_o`. Grid sizes must divide out exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub range_min: [f64; 2],
    pub range_max: [f64; 2],
    pub z_bounds: [f64; 2],
    pub voxel_size: f64,
    pub out_factor: usize,
}

fn exact_cells(span: f64, step: f64, what: &str) -> Result<usize> {
    let v = span / step;
    let r = v.round();
    if (v - r).abs() > 1e-6 || r < 1.0 {
        return Err(Error::Config(format!(
            "{} span {} is not an exact positive multiple of {}",
            what, span, step
        )));
    }
    Ok(r as usize)
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_size <= 0.0 {
            return Err(Error::Config("voxel size must be > 0".into()));
        }
        if self.out_factor < 1 {
            return Err(Error::Config("out factor must be >= 1".into()));
        }
        for a in 0..2 {
            if self.range_max[a] <= self.range_min[a] {
                return Err(Error::Config("range_max must exceed range_min".into()));
            }
        }
        if self.z_bounds[1] <= self.z_bounds[0] {
            return Err(Error::Config("z bounds must satisfy z_min < z_max".into()));
        }
        self.voxel_dims()?;
        self.bev_dims()?;
        Ok(())
    }

    /// Voxel grid sizes `(X, Y, Z)` at resolution `F_v`.
    pub fn voxel_dims(&self) -> Result<[usize; 3]> {
        Ok([
            exact_cells(self.range_max[0] - self.range_min[0], self.voxel_size, "x")?,
            exact_cells(self.range_max[1] - self.range_min[1], self.voxel_size, "y")?,
            exact_cells(self.z_bounds[1] - self.z_bounds[0], self.voxel_size, "z")?,
        ])
    }

    /// BEV grid sizes `(H, W)` at resolution `F_v * F_o`; `H` spans x, `W`
    /// spans y, and flat cell index is `x_bin * W + y_bin`.
    pub fn bev_dims(&self) -> Result<(usize, usize)> {
        let step = self.voxel_size * self.out_factor as f64;
        Ok((
            exact_cells(self.range_max[0] - self.range_min[0], step, "bev x")?,
            exact_cells(self.range_max[1] - self.range_min[1], step, "bev y")?,
        ))
    }

    pub fn bev_cell_size(&self) -> f64 {
        self.voxel_size * self.out_factor as f64
    }
}

/// Binary occupancy over the voxel grid, row-major `[X][Y][Z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub occupancy: Vec<u8>,
}

impl VoxelGrid {
    pub fn zeros(dims: [usize; 3]) -> Self {
        VoxelGrid { dims, occupancy: vec![0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.occupancy[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v != 0).count()
    }
}

/// A box projected onto the BEV grid (continuous grid units).
#[derive(Debug, Clone, PartialEq)]
pub struct BevBox {
    pub x_bev: f64,
    pub y_bev: f64,
    pub x_bev_size: f64,
    pub y_bev_size: f64,
    pub yaw: f64,
}

impl BevBox {
    pub fn rect(&self) -> RotatedRect {
        RotatedRect {
            cx: self.x_bev,
            cy: self.y_bev,
            half_x: self.x_bev_size / 2.0,
            half_y: self.y_bev_size / 2.0,
            yaw: self.yaw,
        }
    }
}

/// Project a 3-D box to BEV grid coordinates: subtract the range minimum and
/// divide by `F_v * F_o`; sizes scale the same way, yaw carries over, z drops.
pub fn project_box_to_bev(b: &Box3D, cfg: &GridConfig) -> BevBox {
    let step = cfg.bev_cell_size();
    BevBox {
        x_bev: (b.x - cfg.range_min[0]) / step,
        y_bev: (b.y - cfg.range_min[1]) / step,
        x_bev_size: b.x_size / step,
        y_bev_size: b.y_size / step,
        yaw: b.yaw,
    }
}
