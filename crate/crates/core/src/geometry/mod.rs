//! Oriented-rectangle geometry: angle convention, convex clipping, IoU and
//! its Monte-Carlo oracle, and rotated ROIAlign.

mod iou;
mod polygon;
mod rbox;
mod real;
mod roi_align;

pub use iou::{axis_aligned_iou, iou_with_grad, monte_carlo_iou, rotated_iou};
pub use polygon::{clip_polygons, ConvexPolygon};
pub use rbox::{normalize_angle, RotatedBox};
pub use real::{Dual, Real};
pub use roi_align::{
    roi_sampling_map, rotated_roi_align, sample_points, select_level, RoiAlignConfig, RoiPatch,
};
