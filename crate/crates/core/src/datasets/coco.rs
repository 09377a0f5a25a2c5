//! COCO-format JSON with optional `point`, `supervision` and `pseudo`
//! annotation fields, plus PNG image files next to the JSON.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point2D};

use super::{Category, DetectionDataset, Image, Instance, LabelSource, RleMask, Supervision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// Uncompressed RLE: `size` is `[height, width]`, counts are column-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoRle {
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` absolute pixels, top-left origin.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<CocoRle>,
    /// `[x, y]` absolute pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supervision: Option<Supervision>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pseudo: bool,
}

pub fn to_coco(ds: &DetectionDataset) -> CocoFile {
    CocoFile {
        images: ds
            .images
            .iter()
            .map(|i| CocoImage {
                id: i.id,
                file_name: i.file_name.clone(),
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations: ds
            .instances
            .iter()
            .map(|inst| {
                let [x0, y0, x1, y1] = inst.bbox.to_corner().coords;
                CocoAnnotation {
                    id: inst.id,
                    image_id: inst.image_id,
                    category_id: ds.categories[inst.category].id,
                    bbox: [x0, y0, x1 - x0, y1 - y0],
                    area: inst.mask.as_ref().map_or((x1 - x0) * (y1 - y0), |m| m.area() as f64),
                    iscrowd: 0,
                    segmentation: inst.mask.as_ref().map(|m| CocoRle {
                        size: [m.height, m.width],
                        counts: m.counts.clone(),
                    }),
                    point: inst.point.map(|p| [p.x, p.y]),
                    supervision: match inst.supervision {
                        Supervision::BoxLabeled => None,
                        s => Some(s),
                    },
                    pseudo: inst.source == LabelSource::Pseudo,
                }
            })
            .collect(),
        categories: ds
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
    }
}

/// Converts parsed JSON into a validated dataset. Pixels are read from
/// `base_dir/<file_name>` when that file exists.
pub fn from_coco(file: CocoFile, base_dir: Option<&Path>) -> Result<DetectionDataset> {
    let cat_index: HashMap<u64, usize> = file.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    if cat_index.len() != file.categories.len() {
        return Err(Error::Dataset("duplicate category id".into()));
    }
    let mut images = Vec::with_capacity(file.images.len());
    for im in &file.images {
        let mut pixels = Vec::new();
        if let Some(dir) = base_dir {
            let path = dir.join(&im.file_name);
            if path.exists() {
                let luma = image::open(&path)?.into_luma8();
                if luma.width() as usize != im.width || luma.height() as usize != im.height {
                    return Err(Error::Dataset(format!(
                        "{}: file is {}x{}, annotation says {}x{}",
                        path.display(),
                        luma.width(),
                        luma.height(),
                        im.width,
                        im.height
                    )));
                }
                pixels = luma.into_raw();
            }
        }
        images.push(Image {
            id: im.id,
            file_name: im.file_name.clone(),
            width: im.width,
            height: im.height,
            pixels,
        });
    }
    let sizes: HashMap<u64, (usize, usize)> = file.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
    let mut instances = Vec::with_capacity(file.annotations.len());
    for a in &file.annotations {
        let &category = cat_index
            .get(&a.category_id)
            .ok_or_else(|| Error::Dataset(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
        let &(w, h) = sizes
            .get(&a.image_id)
            .ok_or_else(|| Error::Dataset(format!("annotation {} references missing image {}", a.id, a.image_id)))?;
        if a.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("annotation bbox"));
        }
        let raw = BBox::corner(a.bbox[0], a.bbox[1], a.bbox[0] + a.bbox[2], a.bbox[1] + a.bbox[3]);
        let [x0, y0, x1, y1] = raw.coords;
        let (fw, fh) = (w as f64, h as f64);
        let clamped = BBox::corner(x0.clamp(0.0, fw), y0.clamp(0.0, fh), x1.clamp(0.0, fw), y1.clamp(0.0, fh));
        if clamped != raw {
            log::warn!("annotation {}: bbox {:?} clamped to the {w}x{h} image", a.id, a.bbox);
        }
        instances.push(Instance {
            id: a.id,
            image_id: a.image_id,
            bbox: clamped,
            category,
            point: a.point.map(|p| Point2D::new(p[0], p[1])),
            supervision: a.supervision.unwrap_or(Supervision::BoxLabeled),
            source: if a.pseudo { LabelSource::Pseudo } else { LabelSource::GroundTruth },
            mask: a.segmentation.as_ref().map(|s| RleMask {
                width: s.size[1],
                height: s.size[0],
                counts: s.counts.clone(),
            }),
        });
    }
    let ds = DetectionDataset {
        images,
        instances,
        categories: file
            .categories
            .into_iter()
            .map(|c| Category { id: c.id, name: c.name })
            .collect(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_coco_annotations(path: &Path) -> Result<DetectionDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CocoFile = serde_json::from_str(&text)?;
    from_coco(file, path.parent())
}

/// Writes the JSON to `path` and every image with pixels as PNG beside it.
pub fn export_coco(ds: &DetectionDataset, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for im in &ds.images {
        if im.pixels.is_empty() {
            continue;
        }
        let target = dir.join(&im.file_name);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let buf = image::GrayImage::from_raw(im.width as u32, im.height as u32, im.pixels.clone())
            .ok_or_else(|| Error::Dataset(format!("image {} pixel count mismatch", im.id)))?;
        buf.save(&target)?;
    }
    let json = serde_json::to_string(&to_coco(ds))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}
