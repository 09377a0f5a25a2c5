//! Image-level partition into box-labeled and point-only parts.

use std::collections::HashSet;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::params::derived_rng;

use super::{fixed_inference_point, DetectionDataset, Supervision};

/// `floor(n * fraction)` images keep their boxes; the rest become
/// point-only, each instance carrying its fixed annotation point. Both
/// sides keep the original image order.
pub fn split_dataset(ds: &DetectionDataset, fraction: f64, seed: u64) -> Result<(DetectionDataset, DetectionDataset)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1]")));
    }
    let n = ds.images.len();
    let n_box = ((n as f64) * fraction + 1e-9).floor() as usize;
    if n_box == 0 {
        return Err(Error::EmptySplit {
            fraction,
            side: "box-labeled",
        });
    }
    if n_box == n && fraction < 1.0 {
        return Err(Error::EmptySplit {
            fraction,
            side: "point-only",
        });
    }
    let mut ids: Vec<u64> = ds.images.iter().map(|i| i.id).collect();
    ids.shuffle(&mut derived_rng(seed, "split"));
    let boxed: HashSet<u64> = ids[..n_box].iter().copied().collect();
    let rest: HashSet<u64> = ids[n_box..].iter().copied().collect();
    let box_labeled = ds.subset(&boxed);
    let mut point_only = ds.subset(&rest);
    for inst in &mut point_only.instances {
        inst.point = Some(fixed_inference_point(inst));
        inst.supervision = Supervision::PointOnly;
    }
    Ok((box_labeled, point_only))
}
