//! Detection datasets: synthetic benchmark generation, COCO JSON I/O,
//! labeled/point-only splitting and point sampling.

mod coco;
mod points;
mod split;
mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point2D};

pub use coco::{export_coco, from_coco, load_coco_annotations, to_coco, CocoAnnotation, CocoFile};
pub use points::{fixed_inference_point, sample_point_in_box};
pub use split::split_dataset;
pub use synthetic::{generate_synthetic, CategoryPrior, Shape, SyntheticConfig};

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    #[serde(skip)]
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// What the training path may read from an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    BoxLabeled,
    PointOnly,
}

/// Where a box target came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    GroundTruth,
    Pseudo,
}

/// Binary instance mask as column-major run lengths starting with a 0-run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(width: usize, height: usize, on: impl Fn(usize, usize) -> bool) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..width {
            for y in 0..height {
                if on(x, y) != current {
                    counts.push(run);
                    run = 0;
                    current = !current;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self { width, height, counts }
    }

    /// Pixels `(x, y)` that are set, in column-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut idx = 0usize;
        for (k, &run) in self.counts.iter().enumerate() {
            if k % 2 == 1 {
                for p in idx..idx + run as usize {
                    out.push((p / self.height, p % self.height));
                }
            }
            idx += run as usize;
        }
        out
    }

    pub fn area(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as usize).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u64,
    pub image_id: u64,
    /// Absolute-pixel corner form.
    pub bbox: BBox,
    /// Dense index into the dataset's categories.
    pub category: usize,
    /// Absolute-pixel annotation point.
    pub point: Option<Point2D>,
    pub supervision: Supervision,
    pub source: LabelSource,
    pub mask: Option<RleMask>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionDataset {
    pub images: Vec<Image>,
    pub instances: Vec<Instance>,
    pub categories: Vec<Category>,
}

impl DetectionDataset {
    /// Checks that every instance points at an existing image and category
    /// and that ids are unique.
    pub fn validate(&self) -> Result<()> {
        let mut images = HashMap::new();
        for (k, img) in self.images.iter().enumerate() {
            if images.insert(img.id, k).is_some() {
                return Err(Error::Dataset(format!("duplicate image id {}", img.id)));
            }
            if !img.pixels.is_empty() && img.pixels.len() != img.width * img.height {
                return Err(Error::Dataset(format!("image {} has {} pixels for {}x{}", img.id, img.pixels.len(), img.width, img.height)));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id) {
                return Err(Error::Dataset(format!("duplicate instance id {}", inst.id)));
            }
            if !images.contains_key(&inst.image_id) {
                return Err(Error::Dataset(format!("instance {} references missing image {}", inst.id, inst.image_id)));
            }
            if inst.category >= self.categories.len() {
                return Err(Error::CategoryOutOfRange {
                    index: inst.category,
                    count: self.categories.len(),
                });
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&Image> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Instances grouped per image, in image order.
    pub fn instances_by_image(&self) -> Vec<Vec<&Instance>> {
        let pos: HashMap<u64, usize> = self.images.iter().enumerate().map(|(k, i)| (i.id, k)).collect();
        let mut out = vec![Vec::new(); self.images.len()];
        for inst in &self.instances {
            out[pos[&inst.image_id]].push(inst);
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Sub-dataset restricted to the given image ids, keeping their order
    /// as stored here.
    pub fn subset(&self, ids: &std::collections::HashSet<u64>) -> DetectionDataset {
        DetectionDataset {
            images: self.images.iter().filter(|i| ids.contains(&i.id)).cloned().collect(),
            instances: self.instances.iter().filter(|i| ids.contains(&i.image_id)).cloned().collect(),
            categories: self.categories.clone(),
        }
    }

    /// Normalized corner box of an instance.
    pub fn normalized_box(&self, inst: &Instance) -> BBox {
        let img = self.image(inst.image_id).expect("validated dataset");
        normalize_box(inst.bbox, img.width, img.height)
    }
}

pub fn normalize_box(b: BBox, width: usize, height: usize) -> BBox {
    let c = b.to_corner().coords;
    let (w, h) = (width as f64, height as f64);
    BBox::corner(c[0] / w, c[1] / h, c[2] / w, c[3] / h)
}

pub fn denormalize_box(b: BBox, width: usize, height: usize) -> BBox {
    let c = b.to_corner().coords;
    let (w, h) = (width as f64, height as f64);
    BBox::corner(c[0] * w, c[1] * h, c[2] * w, c[3] * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_round_trip() {
        let mask = RleMask::encode(5, 4, |x, y| (x + y) % 3 == 0 || x == 4);
        let pixels = mask.pixels();
        for x in 0..5 {
            for y in 0..4 {
                assert_eq!(pixels.contains(&(x, y)), (x + y) % 3 == 0 || x == 4);
            }
        }
        assert_eq!(mask.area(), pixels.len());
        assert_eq!(RleMask::encode(3, 3, |_, _| true).counts, vec![0, 9]);
    }

    #[test]
    fn normalized_box_arithmetic() {
        let b = normalize_box(BBox::corner(10.0, 20.0, 40.0, 60.0), 100, 100);
        assert_eq!(b.coords, [0.1, 0.2, 0.4, 0.6]);
    }
}
