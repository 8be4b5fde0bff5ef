use crate::geometry::{bev_iou, BevBox};

/// Greedy non-maximum suppression over `(box, score)` pairs. Returns kept
/// input indices in descending score order (ties keep the lower index
/// first). Class separation is the caller's job.
pub fn nms(dets: &[(BevBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].1.total_cmp(&dets[i].1).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed =
            kept.iter().any(|&k| bev_iou(&dets[k].0, &dets[i].0) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
