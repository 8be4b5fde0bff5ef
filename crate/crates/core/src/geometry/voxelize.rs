use crate::geometry::{GridConfig, PointCloud, VoxelGrid};
use crate::error::Result;

/// Binary occupancy: a cell is 1 iff at least one point lands in it. Cells
/// are half-open `[lo, hi)`, so points exactly at the range maximum drop out;
/// out-of-range and out-of-z-bounds points drop silently.
pub fn voxelize(pc: &PointCloud, cfg: &GridConfig) -> Result<VoxelGrid> {
    cfg.validate()?;
    let dims = cfg.voxel_dims()?;
    let mut grid = VoxelGrid::zeros(dims);
    let inv = 1.0 / cfg.voxel_size;
    for p in &pc.points {
        let fx = (p[0] - cfg.range_min[0]) * inv;
        let fy = (p[1] - cfg.range_min[1]) * inv;
        let fz = (p[2] - cfg.z_bounds[0]) * inv;
        if fx < 0.0 || fy < 0.0 || fz < 0.0 {
            continue;
        }
        let (ix, iy, iz) = (fx.floor() as usize, fy.floor() as usize, fz.floor() as usize);
        if ix >= dims[0] || iy >= dims[1] || iz >= dims[2] {
            continue;
        }
        grid.occupancy[(ix * dims[1] + iy) * dims[2] + iz] = 1;
    }
    Ok(grid)
}
