//! Procedural grayscale shapes benchmark with per-category size priors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::params::derived_rng;

use super::{Category, DetectionDataset, Image, Instance, LabelSource, RleMask, Supervision};

const PLACEMENT_RETRIES: usize = 60;
/// Upper IoU bound for deliberately overlapping pairs, so both stay visible.
const MAX_OVERLAP_IOU: f64 = 0.6;
const MIN_OVERLAP_IOU: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ellipse,
    Cross,
}

impl Shape {
    /// Membership of a point relative to the shape center, for a shape
    /// spanning `w x h`.
    fn contains(self, dx: f64, dy: f64, w: f64, h: f64) -> bool {
        let (hw, hh) = (w / 2.0, h / 2.0);
        match self {
            Shape::Circle | Shape::Ellipse => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
            Shape::Square => dx.abs() <= hw && dy.abs() <= hh,
            Shape::Triangle => {
                // apex up, base at the bottom edge
                let t = (dy + hh) / h;
                (0.0..=1.0).contains(&t) && dx.abs() <= hw * t
            }
            Shape::Cross => {
                (dx.abs() <= w / 6.0 && dy.abs() <= hh) || (dy.abs() <= h / 6.0 && dx.abs() <= hw)
            }
        }
    }
}

/// Size prior of one category: width drawn from `size`, height = width * aspect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryPrior {
    pub name: String,
    pub shape: Shape,
    pub size: (f64, f64),
    pub aspect: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub categories: Vec<CategoryPrior>,
    pub instances_per_image: (usize, usize),
    /// Probability that a new instance is placed to overlap an earlier one.
    pub overlap_rate: f64,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
    /// First image id; instance ids follow the same offset scheme.
    pub first_id: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let prior = |name: &str, shape, size, aspect| CategoryPrior {
            name: name.to_string(),
            shape,
            size,
            aspect,
        };
        Self {
            num_images: 100,
            image_size: 128,
            categories: vec![
                prior("circle", Shape::Circle, (10.0, 16.0), (1.0, 1.0)),
                prior("square", Shape::Square, (18.0, 26.0), (1.0, 1.0)),
                prior("triangle", Shape::Triangle, (26.0, 36.0), (0.7, 0.9)),
                prior("ellipse", Shape::Ellipse, (34.0, 46.0), (0.4, 0.55)),
                prior("cross", Shape::Cross, (40.0, 54.0), (0.9, 1.1)),
            ],
            instances_per_image: (2, 5),
            overlap_rate: 0.3,
            noise: 12.0,
            seed: 7,
            first_id: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("synthetic data needs categories".into()));
        }
        for (i, a) in self.categories.iter().enumerate() {
            if a.size.0 <= 0.0 || a.size.1 < a.size.0 || a.aspect.0 <= 0.0 || a.aspect.1 < a.aspect.0 {
                return Err(Error::Config(format!("category `{}` has an invalid prior", a.name)));
            }
            if a.size.1 * a.aspect.1.max(1.0) >= self.image_size as f64 - 2.0 {
                return Err(Error::Config(format!("category `{}` does not fit the image", a.name)));
            }
            for b in &self.categories[i + 1..] {
                if a.size == b.size && a.aspect == b.aspect {
                    return Err(Error::Config(format!(
                        "categories `{}` and `{}` share a size prior",
                        a.name, b.name
                    )));
                }
            }
        }
        let (lo, hi) = self.instances_per_image;
        if lo == 0 || hi < lo {
            return Err(Error::Config("instance range must satisfy 1 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_rate) {
            return Err(Error::Config("overlap rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

struct Placed {
    category: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    intensity: f64,
    mask: Vec<bool>,
    bbox: BBox,
}

fn rasterize(shape: Shape, size: usize, cx: f64, cy: f64, w: f64, h: f64) -> Option<(Vec<bool>, BBox)> {
    let mut mask = vec![false; size * size];
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let lo_x = (cx - w / 2.0 - 1.0).floor().max(0.0) as usize;
    let hi_x = ((cx + w / 2.0 + 1.0).ceil() as usize).min(size);
    let lo_y = (cy - h / 2.0 - 1.0).floor().max(0.0) as usize;
    let hi_y = ((cy + h / 2.0 + 1.0).ceil() as usize).min(size);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, w, h) {
                mask[y * size + x] = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    Some((mask, BBox::corner(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)))
}

fn place(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, placed: &[Placed], category: usize) -> Option<Placed> {
    let prior = &cfg.categories[category];
    let size = cfg.image_size as f64;
    let w = rng.gen_range(prior.size.0..=prior.size.1);
    let h = w * rng.gen_range(prior.aspect.0..=prior.aspect.1);
    let overlap = !placed.is_empty() && rng.gen_bool(cfg.overlap_rate);
    let partner = if overlap { Some(rng.gen_range(0..placed.len())) } else { None };
    for _ in 0..PLACEMENT_RETRIES {
        let (cx, cy) = match partner {
            Some(p) => {
                let q = &placed[p];
                let reach_x = (q.w + w) / 2.0 * 0.7;
                let reach_y = (q.h + h) / 2.0 * 0.7;
                (q.cx + rng.gen_range(-reach_x..=reach_x), q.cy + rng.gen_range(-reach_y..=reach_y))
            }
            None => (
                rng.gen_range(w / 2.0 + 1.0..=size - w / 2.0 - 1.0),
                rng.gen_range(h / 2.0 + 1.0..=size - h / 2.0 - 1.0),
            ),
        };
        if cx - w / 2.0 < 1.0 || cy - h / 2.0 < 1.0 || cx + w / 2.0 > size - 1.0 || cy + h / 2.0 > size - 1.0 {
            continue;
        }
        let Some((mask, bbox)) = rasterize(prior.shape, cfg.image_size, cx, cy, w, h) else {
            continue;
        };
        let ok = match partner {
            Some(p) => {
                let v = iou(&bbox, &placed[p].bbox);
                (MIN_OVERLAP_IOU..=MAX_OVERLAP_IOU).contains(&v)
                    && placed
                        .iter()
                        .enumerate()
                        .all(|(k, o)| k == p || iou(&bbox, &o.bbox) <= MAX_OVERLAP_IOU)
            }
            None => placed.iter().all(|o| iou(&bbox, &o.bbox) == 0.0),
        };
        if ok {
            return Some(Placed {
                category,
                cx,
                cy,
                w,
                h,
                intensity: rng.gen_range(130.0..=230.0),
                mask,
                bbox,
            });
        }
    }
    None
}

/// Deterministic in `cfg`; each image draws from its own seeded stream.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DetectionDataset> {
    cfg.validate()?;
    let n = cfg.image_size;
    let categories = cfg
        .categories
        .iter()
        .enumerate()
        .map(|(i, c)| Category {
            id: i as u64 + 1,
            name: c.name.clone(),
        })
        .collect();
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut instances = Vec::new();
    let mut next_instance = cfg.first_id * 100;
    for k in 0..cfg.num_images {
        let id = cfg.first_id + k as u64;
        let mut rng = derived_rng(cfg.seed, &format!("synthetic/{id}"));
        let count = rng.gen_range(cfg.instances_per_image.0..=cfg.instances_per_image.1);
        let mut placed: Vec<Placed> = Vec::with_capacity(count);
        for _ in 0..count {
            let category = rng.gen_range(0..cfg.categories.len());
            match place(cfg, &mut rng, &placed, category) {
                Some(p) => placed.push(p),
                None => log::debug!("image {id}: could not place a `{}`", cfg.categories[category].name),
            }
        }
        let background = rng.gen_range(20.0..=60.0);
        let mut pixels = Vec::with_capacity(n * n);
        for i in 0..n * n {
            let mut v = background;
            for p in &placed {
                if p.mask[i] {
                    v = p.intensity;
                }
            }
            v += rng.gen_range(-cfg.noise..=cfg.noise);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
        for p in placed {
            let mask = RleMask::encode(n, n, |x, y| p.mask[y * n + x]);
            instances.push(Instance {
                id: next_instance,
                image_id: id,
                bbox: p.bbox,
                category: p.category,
                point: None,
                supervision: Supervision::BoxLabeled,
                source: LabelSource::GroundTruth,
                mask: Some(mask),
            });
            next_instance += 1;
        }
        images.push(Image {
            id,
            file_name: format!("img_{id:05}.png"),
            width: n,
            height: n,
            pixels,
        });
    }
    let ds = DetectionDataset {
        images,
        instances,
        categories,
    };
    ds.validate()?;
    Ok(ds)
}
