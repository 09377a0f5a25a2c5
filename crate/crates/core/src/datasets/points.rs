//! Training point sampling and the fixed evaluation point.

use rand::Rng;

use crate::geometry::{BBox, Point2D};

use super::Instance;

/// Uniform draw over the box interior; degenerate boxes give their center.
pub fn sample_point_in_box<R: Rng + ?Sized>(b: BBox, rng: &mut R) -> Point2D {
    let c = b.to_corner().coords;
    if !(c[2] > c[0] && c[3] > c[1]) {
        return Point2D::new((c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0);
    }
    Point2D::new(rng.gen_range(c[0]..c[2]), rng.gen_range(c[1]..c[3]))
}

/// Absolute-pixel evaluation point: the stored annotation point if any,
/// else the mask centroid (snapped to the nearest mask pixel when the
/// centroid falls off the shape), else the box center.
pub fn fixed_inference_point(inst: &Instance) -> Point2D {
    if let Some(p) = inst.point {
        return p;
    }
    if let Some(mask) = &inst.mask {
        let pixels = mask.pixels();
        if !pixels.is_empty() {
            let n = pixels.len() as f64;
            let cx = pixels.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / n;
            let cy = pixels.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n;
            let (ix, iy) = (cx.floor() as usize, cy.floor() as usize);
            if pixels.binary_search_by(|p| p.0.cmp(&ix).then(p.1.cmp(&iy))).is_ok() {
                return Point2D::new(cx, cy);
            }
            let nearest = pixels
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 as f64 + 0.5 - cx).powi(2) + (a.1 as f64 + 0.5 - cy).powi(2);
                    let db = (b.0 as f64 + 0.5 - cx).powi(2) + (b.1 as f64 + 0.5 - cy).powi(2);
                    da.total_cmp(&db)
                })
                .expect("nonempty mask");
            return Point2D::new(nearest.0 as f64 + 0.5, nearest.1 as f64 + 0.5);
        }
    }
    inst.bbox.center_point()
}
