//! Rotated-rectangle IoU by convex polygon clipping (Sutherland–Hodgman)
//! and the shoelace area formula — exact up to floating rounding, no
//! rasterization.

use crate::geometry::BevBox;

/// Rectangle with center, half-extents and rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedRect {
    pub cx: f64,
    pub cy: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub yaw: f64,
}

impl RotatedRect {
    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let local = [
            [self.half_x, self.half_y],
            [-self.half_x, self.half_y],
            [-self.half_x, -self.half_y],
            [self.half_x, -self.half_y],
        ];
        local.map(|[lx, ly]| [self.cx + c * lx - s * ly, self.cy + s * lx + c * ly])
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_x * self.half_y
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.half_x && ly.abs() <= self.half_y
    }
}

fn polygon_area(pts: &[[f64; 2]]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let [x0, y0] = pts[i];
        let [x1, y1] = pts[(i + 1) % pts.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

/// Keep the part of `subject` on the left of the directed edge `a -> b`.
fn clip_edge(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(subject.len() + 2);
    for i in 0..subject.len() {
        let cur = subject[i];
        let next = subject[(i + 1) % subject.len()];
        let (sc, sn) = (side(cur), side(next));
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0) {
            let t = sc / (sc - sn);
            out.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
        }
    }
    out
}

fn intersection_area(a: &RotatedRect, b: &RotatedRect) -> f64 {
    let mut poly: Vec<[f64; 2]> = a.corners().to_vec();
    let clip = b.corners();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, clip[i], clip[(i + 1) % 4]);
    }
    polygon_area(&poly)
}

/// IoU of two rotated rectangles in `[0, 1]`; near-zero-area rectangles give 0.
pub fn rotated_iou(a: &RotatedRect, b: &RotatedRect) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa < 1e-12 || ab < 1e-12 {
        return 0.0;
    }
    let inter = intersection_area(a, b);
    let union = aa + ab - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn bev_iou(a: &BevBox, b: &BevBox) -> f64 {
    rotated_iou(&a.rect(), &b.rect())
}
