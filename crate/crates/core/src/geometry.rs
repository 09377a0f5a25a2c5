//! Box and point arithmetic shared by every other module.
//!
//! Coordinates are normalized to the unit square everywhere inside the
//! crate; absolute pixels appear only at the dataset I/O boundary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFormat {
    /// `(x_min, y_min, x_max, y_max)`
    Corner,
    /// `(c_x, c_y, w, h)`
    Center,
}

impl FromStr for BoxFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corner" | "xyxy" => Ok(BoxFormat::Corner),
            "center" | "cxcywh" => Ok(BoxFormat::Center),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for BoxFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxFormat::Corner => "corner",
            BoxFormat::Center => "center",
        })
    }
}

/// A 4-vector tagged with its representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub format: BoxFormat,
    pub coords: [f64; 4],
}

impl BBox {
    pub const fn corner(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            format: BoxFormat::Corner,
            coords: [x_min, y_min, x_max, y_max],
        }
    }

    pub const fn center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            format: BoxFormat::Center,
            coords: [cx, cy, w, h],
        }
    }

    pub fn convert(self, target: BoxFormat) -> Self {
        let [a, b, c, d] = self.coords;
        match (self.format, target) {
            (BoxFormat::Corner, BoxFormat::Center) => {
                BBox::center((a + c) / 2.0, (b + d) / 2.0, c - a, d - b)
            }
            (BoxFormat::Center, BoxFormat::Corner) => {
                BBox::corner(a - c / 2.0, b - d / 2.0, a + c / 2.0, b + d / 2.0)
            }
            _ => self,
        }
    }

    pub fn to_corner(self) -> Self {
        self.convert(BoxFormat::Corner)
    }

    pub fn to_center(self) -> Self {
        self.convert(BoxFormat::Center)
    }

    pub fn width(&self) -> f64 {
        match self.format {
            BoxFormat::Corner => self.coords[2] - self.coords[0],
            BoxFormat::Center => self.coords[2],
        }
    }

    pub fn height(&self) -> f64 {
        match self.format {
            BoxFormat::Corner => self.coords[3] - self.coords[1],
            BoxFormat::Center => self.coords[3],
        }
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center_point(&self) -> Point2D {
        let c = self.to_center().coords;
        Point2D::new(c[0], c[1])
    }

    /// Valid per its declared format: ordered corners or non-negative extents.
    pub fn is_valid(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite()) && self.width() >= 0.0 && self.height() >= 0.0
    }

    pub fn contains(&self, p: Point2D) -> bool {
        let [x0, y0, x1, y1] = self.to_corner().coords;
        p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let mut out = *self;
        out.coords[0] += dx;
        out.coords[1] += dy;
        if self.format == BoxFormat::Corner {
            out.coords[2] += dx;
            out.coords[3] += dy;
        }
        out
    }

    /// Multiplies x coordinates by `sx` and y coordinates by `sy`.
    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        let [a, b, c, d] = self.coords;
        Self {
            format: self.format,
            coords: [a * sx, b * sy, c * sx, d * sy],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Converts `box_` to the format named by `target` (`corner`/`xyxy` or `center`/`cxcywh`).
pub fn box_convert(box_: BBox, target: &str) -> Result<BBox> {
    Ok(box_.convert(target.parse()?))
}

/// IoU and generalized IoU. Zero-area unions give IoU 0; the enclosing
/// term is still applied whenever the enclosing box has positive area.
pub fn iou_giou(a: &BBox, b: &BBox) -> (f64, f64) {
    let t = PairTerms::new(a.to_corner().coords, b.to_corner().coords);
    (t.iou(), t.giou())
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_giou(a, b).0
}

/// Clamps to the unit square after restoring corner order.
pub fn clamp_box(box_: BBox) -> Result<BBox> {
    if box_.coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box coordinates"));
    }
    let [a, b, c, d] = box_.to_corner().coords;
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let out = BBox::corner(
        clamp(a.min(c)),
        clamp(b.min(d)),
        clamp(a.max(c)),
        clamp(b.max(d)),
    );
    Ok(out.convert(box_.format))
}

/// Intermediate quantities of one IoU/GIoU evaluation on corner boxes.
struct PairTerms {
    inter: f64,
    union: f64,
    enclosing: f64,
}

impl PairTerms {
    fn new(a: [f64; 4], b: [f64; 4]) -> Self {
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
        let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
        let ew = a[2].max(b[2]) - a[0].min(b[0]);
        let eh = a[3].max(b[3]) - a[1].min(b[1]);
        Self {
            inter,
            union: area_a + area_b - inter,
            enclosing: ew.max(0.0) * eh.max(0.0),
        }
    }

    fn iou(&self) -> f64 {
        if self.union > 0.0 {
            self.inter / self.union
        } else {
            0.0
        }
    }

    fn giou(&self) -> f64 {
        let iou = self.iou();
        if self.enclosing > 0.0 {
            iou - (self.enclosing - self.union) / self.enclosing
        } else {
            iou
        }
    }
}

/// GIoU between a predicted and a target center-form box, with the
/// gradient of GIoU with respect to the four predicted components.
/// Ties in min/max select the predicted side.
pub fn giou_with_grad(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [cx, cy, w, h] = pred;
    let p = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
    let t = BBox::center(target[0], target[1], target[2], target[3])
        .to_corner()
        .coords;

    let ix1 = p[0].max(t[0]);
    let ix2 = p[2].min(t[2]);
    let iy1 = p[1].max(t[1]);
    let iy2 = p[3].min(t[3]);
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    let area_p = pw.max(0.0) * ph.max(0.0);
    let area_t = (t[2] - t[0]).max(0.0) * (t[3] - t[1]).max(0.0);
    let union = area_p + area_t - inter;
    let ew = p[2].max(t[2]) - p[0].min(t[0]);
    let eh = p[3].max(t[3]) - p[1].min(t[1]);
    let enclosing = ew.max(0.0) * eh.max(0.0);

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let giou = if enclosing > 0.0 {
        iou - (enclosing - union) / enclosing
    } else {
        iou
    };

    // d giou / d {inter, union, enclosing}
    let (mut d_inter, mut d_union) = if union > 0.0 {
        (1.0 / union, -inter / (union * union))
    } else {
        (0.0, 0.0)
    };
    let mut d_enc = 0.0;
    if enclosing > 0.0 {
        d_union += 1.0 / enclosing;
        d_enc = -union / (enclosing * enclosing);
    }
    // union = area_p + area_t - inter
    d_inter -= d_union;
    let d_area_p = d_union;

    // corner gradients: [x1, y1, x2, y2]
    let mut dp = [0.0f64; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let d_iw = d_inter * ih;
        let d_ih = d_inter * iw;
        if p[2] <= t[2] {
            dp[2] += d_iw;
        }
        if p[0] >= t[0] {
            dp[0] -= d_iw;
        }
        if p[3] <= t[3] {
            dp[3] += d_ih;
        }
        if p[1] >= t[1] {
            dp[1] -= d_ih;
        }
    }
    if pw > 0.0 && ph > 0.0 {
        dp[2] += d_area_p * ph;
        dp[0] -= d_area_p * ph;
        dp[3] += d_area_p * pw;
        dp[1] -= d_area_p * pw;
    }
    if ew > 0.0 && eh > 0.0 {
        let d_ew = d_enc * eh;
        let d_eh = d_enc * ew;
        if p[2] >= t[2] {
            dp[2] += d_ew;
        }
        if p[0] <= t[0] {
            dp[0] -= d_ew;
        }
        if p[3] >= t[3] {
            dp[3] += d_eh;
        }
        if p[1] <= t[1] {
            dp[1] -= d_eh;
        }
    }
    let grad = [
        dp[0] + dp[2],
        dp[1] + dp[3],
        (dp[2] - dp[0]) / 2.0,
        (dp[3] - dp[1]) / 2.0,
    ];
    (giou, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 4], b: [f64; 4]) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn conversions() {
        let full = box_convert(BBox::corner(0.0, 0.0, 1.0, 1.0), "center").unwrap();
        assert_eq!(full, BBox::center(0.5, 0.5, 1.0, 1.0));

        let degenerate = box_convert(BBox::center(0.5, 0.5, 0.0, 0.0), "corner").unwrap();
        assert_eq!(degenerate, BBox::corner(0.5, 0.5, 0.5, 0.5));

        let c = box_convert(BBox::corner(0.2, 0.4, 0.6, 0.8), "cxcywh").unwrap();
        assert!(close(c.coords, [0.4, 0.6, 0.4, 0.4]));
        assert_eq!(c.format, BoxFormat::Center);
    }

    #[test]
    fn unknown_format_tag_is_rejected() {
        let err = box_convert(BBox::corner(0.0, 0.0, 1.0, 1.0), "polar").unwrap_err();
        assert!(matches!(err, Error::UnknownFormat(ref s) if s == "polar"));
    }

    #[test]
    fn iou_giou_hand_cases() {
        let a = BBox::corner(0.1, 0.2, 0.5, 0.7);
        assert_eq!(iou_giou(&a, &a), (1.0, 1.0));

        let (i, g) = iou_giou(&BBox::corner(0.0, 0.0, 1.0, 1.0), &BBox::corner(2.0, 2.0, 3.0, 3.0));
        assert_eq!(i, 0.0);
        assert!((g - (-7.0 / 9.0)).abs() < 1e-12);

        let (i, g) = iou_giou(&BBox::corner(0.0, 0.0, 2.0, 2.0), &BBox::corner(1.0, 1.0, 3.0, 3.0));
        assert!((i - 1.0 / 7.0).abs() < 1e-12);
        assert!((g - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-12);
        assert!((g - (-0.0794)).abs() < 1e-4);
    }

    #[test]
    fn zero_area_boxes_have_zero_iou() {
        let p = BBox::corner(0.3, 0.3, 0.3, 0.3);
        let q = BBox::corner(0.0, 0.0, 0.5, 0.5);
        let (i, g) = iou_giou(&p, &q);
        assert_eq!(i, 0.0);
        // enclosing box is q itself, union is q's area
        assert_eq!(g, 0.0);
    }

    #[test]
    fn clamping() {
        let b = clamp_box(BBox::corner(-0.1, 0.2, 0.5, 1.3)).unwrap();
        assert_eq!(b, BBox::corner(0.0, 0.2, 0.5, 1.0));
        let inside = BBox::corner(0.1, 0.2, 0.3, 0.4);
        assert_eq!(clamp_box(inside).unwrap(), inside);
        let swapped = clamp_box(BBox::corner(0.6, 0.1, 0.4, 0.3)).unwrap();
        assert_eq!(swapped, BBox::corner(0.4, 0.1, 0.6, 0.3));
        assert!(matches!(
            clamp_box(BBox::corner(f64::NAN, 0.0, 1.0, 1.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let mut rng = crate::params::derived_rng(11, "giou");
        use rand::Rng;
        for _ in 0..200 {
            let pred = [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ];
            let target = [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ];
            let (g0, grad) = giou_with_grad(pred, target);
            let (_, reference) = iou_giou(
                &BBox::center(pred[0], pred[1], pred[2], pred[3]),
                &BBox::center(target[0], target[1], target[2], target[3]),
            );
            assert!((g0 - reference).abs() < 1e-12);
            for k in 0..4 {
                let h = 1e-7;
                let mut p = pred;
                p[k] += h;
                let (gp, _) = giou_with_grad(p, target);
                p[k] -= 2.0 * h;
                let (gm, _) = giou_with_grad(p, target);
                let num = (gp - gm) / (2.0 * h);
                assert!(
                    (num - grad[k]).abs() <= 1e-5 + 1e-3 * num.abs(),
                    "component {k}: {num} vs {}",
                    grad[k]
                );
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
            .prop_map(|(x, y, w, h)| BBox::corner(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let (i, g) = iou_giou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(g <= i + 1e-15);
            prop_assert!(g > -1.0);
        }

        #[test]
        fn giou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou_giou(&a, &b), iou_giou(&b, &a));
        }

        #[test]
        fn translation_invariance(a in arb_box(), b in arb_box(), dx in -0.05..0.05f64, dy in -0.05..0.05f64) {
            let (i0, g0) = iou_giou(&a, &b);
            let (i1, g1) = iou_giou(&a.translate(dx, dy), &b.translate(dx, dy));
            prop_assert!((i0 - i1).abs() <= 1e-9);
            prop_assert!((g0 - g1).abs() <= 1e-9);
        }

        #[test]
        fn convert_round_trip(a in arb_box()) {
            let back = a.to_center().to_corner();
            for (x, y) in a.coords.iter().zip(&back.coords) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
