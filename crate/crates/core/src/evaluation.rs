//! COCO-style mAP over IoU thresholds and the point-location sensitivity
//! sweep of a Point-to-Box predictor.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{denormalize_box, fixed_inference_point, DetectionDataset, Instance};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Point2D};
use crate::network::{BoxPredictor, Detection, Student, TeacherPrompt};
use crate::params::ParamStore;

/// Number of recall sample points of the interpolated precision curve.
pub const RECALL_POINTS: usize = 101;

/// One scored box. `bbox` is in absolute pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: u64,
    pub category: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub map50: f64,
    /// AP averaged over thresholds; `None` for categories without ground truth.
    pub per_category: Vec<Option<f64>>,
    pub thresholds: Vec<f64>,
}

impl Metrics {
    /// `category,name,ap` rows followed by `all,mAP` and `all,mAP@50`.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("category,name,ap\n");
        for (c, ap) in self.per_category.iter().enumerate() {
            let name = names.get(c).map_or("", String::as_str);
            match ap {
                Some(v) => writeln!(out, "{c},{name},{v:.6}").unwrap(),
                None => writeln!(out, "{c},{name},").unwrap(),
            }
        }
        writeln!(out, "all,mAP,{:.6}", self.map).unwrap();
        writeln!(out, "all,mAP@50,{:.6}", self.map50).unwrap();
        out
    }

    pub fn write(&self, csv_path: &Path, names: &[String]) -> Result<()> {
        if let Some(dir) = csv_path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(csv_path, self.to_csv(names)).map_err(|e| Error::io(csv_path, e))?;
        let json = csv_path.with_extension("json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Descending score, then image id, then box coordinates, then input index.
fn ranking(preds: &[DetectionResult], a: usize, b: usize) -> Ordering {
    let (p, q) = (&preds[a], &preds[b]);
    q.score
        .total_cmp(&p.score)
        .then(p.image_id.cmp(&q.image_id))
        .then_with(|| {
            p.bbox
                .coords
                .iter()
                .zip(&q.bbox.coords)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.cmp(&b))
}

/// Area under the monotone precision envelope sampled at 101 recall levels.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Greedy score-ordered matching per category and threshold; each ground
/// truth matches at most once, to the unmatched one of highest IoU.
pub fn evaluate_detections(preds: &[DetectionResult], gts: &DetectionDataset, thresholds: &[f64]) -> Result<Metrics> {
    let num_classes = gts.num_classes();
    let images: HashMap<u64, usize> = gts.images.iter().enumerate().map(|(k, i)| (i.id, k)).collect();
    for p in preds {
        if !images.contains_key(&p.image_id) {
            return Err(Error::Dataset(format!("prediction for unknown image {}", p.image_id)));
        }
        if p.category >= num_classes {
            return Err(Error::CategoryOutOfRange {
                index: p.category,
                count: num_classes,
            });
        }
        if !(0.0..=1.0).contains(&p.score) {
            return Err(Error::Dataset(format!("score {} outside [0, 1]", p.score)));
        }
    }
    // gt boxes per (image, category)
    let mut gt: HashMap<(u64, usize), Vec<BBox>> = HashMap::new();
    let mut num_gt = vec![0usize; num_classes];
    for inst in &gts.instances {
        gt.entry((inst.image_id, inst.category)).or_default().push(inst.bbox);
        num_gt[inst.category] += 1;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| ranking(preds, a, b));

    let mut per_category = vec![None; num_classes];
    let mut at50 = Vec::new();
    for c in 0..num_classes {
        if num_gt[c] == 0 {
            continue;
        }
        let ranked: Vec<usize> = order.iter().copied().filter(|&k| preds[k].category == c).collect();
        let mut aps = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let mut used: HashMap<u64, Vec<bool>> = HashMap::new();
            let tp: Vec<bool> = ranked
                .iter()
                .map(|&k| {
                    let p = &preds[k];
                    let Some(boxes) = gt.get(&(p.image_id, c)) else {
                        return false;
                    };
                    let taken = used.entry(p.image_id).or_insert_with(|| vec![false; boxes.len()]);
                    let mut best: Option<(usize, f64)> = None;
                    for (j, b) in boxes.iter().enumerate() {
                        if taken[j] {
                            continue;
                        }
                        let v = iou(&p.bbox, b);
                        if v >= t && best.is_none_or(|(_, bv)| v > bv) {
                            best = Some((j, v));
                        }
                    }
                    match best {
                        Some((j, _)) => {
                            taken[j] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect();
            let ap = interpolated_ap(&tp, num_gt[c]);
            if (t - 0.5).abs() < 1e-12 {
                at50.push(ap);
            }
            aps.push(ap);
        }
        per_category[c] = Some(aps.iter().sum::<f64>() / aps.len().max(1) as f64);
    }
    let present: Vec<f64> = per_category.iter().flatten().copied().collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(Metrics {
        map: mean(&present),
        map50: mean(&at50),
        per_category,
        thresholds: thresholds.to_vec(),
    })
}

/// Point prompt of an instance at its fixed inference point, normalized.
fn fixed_prompt(ds: &DetectionDataset, inst: &Instance, group: usize) -> TeacherPrompt {
    let im = ds.image(inst.image_id).expect("validated dataset");
    let p = fixed_inference_point(inst);
    TeacherPrompt {
        point: Point2D::new(p.x / im.width as f64, p.y / im.height as f64),
        category: inst.category,
        group,
    }
}

/// Point-to-Box predictions from the fixed inference point of every
/// instance, one group per image, score 1.
pub fn predict_from_fixed_points(predictor: &dyn BoxPredictor, ds: &DetectionDataset) -> Result<Vec<DetectionResult>> {
    let mut out = Vec::with_capacity(ds.instances.len());
    for (im, insts) in ds.images.iter().zip(ds.instances_by_image()) {
        if insts.is_empty() {
            continue;
        }
        let prompts: Vec<TeacherPrompt> = insts.iter().map(|i| fixed_prompt(ds, i, 0)).collect();
        let boxes = predictor.predict_boxes(im, &prompts)?;
        for (inst, b) in insts.iter().zip(boxes) {
            out.push(DetectionResult {
                image_id: im.id,
                category: inst.category,
                bbox: denormalize_box(b.to_corner(), im.width, im.height),
                score: 1.0,
            });
        }
    }
    Ok(out)
}

/// Teacher evaluation as a Point-to-Box regressor on fixed points.
pub fn evaluate_point_to_box(predictor: &dyn BoxPredictor, ds: &DetectionDataset) -> Result<Metrics> {
    let preds = predict_from_fixed_points(predictor, ds)?;
    evaluate_detections(&preds, ds, &default_thresholds())
}

/// Student detections of one image converted to absolute-pixel results.
pub fn detection_results(image_id: u64, width: usize, height: usize, dets: &[Detection]) -> Vec<DetectionResult> {
    dets.iter()
        .map(|d| DetectionResult {
            image_id,
            category: d.category,
            bbox: denormalize_box(d.bbox.to_corner(), width, height),
            score: d.score.clamp(0.0, 1.0),
        })
        .collect()
}

/// Student detections over every image of `ds`, scored against its boxes.
pub fn evaluate_student(model: &Student, store: &ParamStore, ds: &DetectionDataset) -> Result<Metrics> {
    let mut preds = Vec::new();
    for im in &ds.images {
        preds.extend(detection_results(im.id, im.width, im.height, &model.detect(store, im)?));
    }
    evaluate_detections(&preds, ds, &default_thresholds())
}

/// Relative positions `(u, v)` inside a box, `(0, 0)` its top-left corner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub positions: Vec<(f64, f64)>,
}

impl GridSpec {
    /// Cell centers of a `rows x cols` lattice.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let positions = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| ((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64)))
            .collect();
        Self { positions }
    }

    /// The center and the four quarter points.
    pub fn five_point() -> Self {
        Self {
            positions: vec![(0.5, 0.5), (0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() || self.positions.iter().any(|&(u, v)| !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config("grid positions must be nonempty and inside [0, 1]^2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub instance_id: u64,
    pub image_id: u64,
    pub position: usize,
    pub u: f64,
    pub v: f64,
    /// Normalized center-form prediction.
    pub predicted: BBox,
    pub iou_with_gt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub grid: GridSpec,
    /// Instance-major, position-minor.
    pub rows: Vec<SweepRow>,
    /// Mean pairwise IoU among each instance's predictions; `None` for a
    /// single-position grid.
    pub consistency: Vec<Option<f64>>,
    /// Mean IoU with ground truth per grid position.
    pub iou_by_position: Vec<f64>,
}

impl SweepReport {
    pub fn mean_consistency(&self) -> Option<f64> {
        let v: Vec<f64> = self.consistency.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_iou(&self) -> f64 {
        self.rows.iter().map(|r| r.iou_with_gt).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance_id,image_id,position,u,v,cx,cy,w,h,iou_with_gt\n");
        for r in &self.rows {
            let [cx, cy, w, h] = r.predicted.to_center().coords;
            writeln!(
                out,
                "{},{},{},{:.4},{:.4},{cx:.6},{cy:.6},{w:.6},{h:.6},{:.6}",
                r.instance_id, r.image_id, r.position, r.u, r.v, r.iou_with_gt
            )
            .unwrap();
        }
        out
    }
}

/// Runs the predictor from every grid position of every instance. Each
/// position is its own group, so one decode per image equals one standard
/// inference per position.
pub fn point_sensitivity_sweep(predictor: &dyn BoxPredictor, ds: &DetectionDataset, grid: &GridSpec) -> Result<SweepReport> {
    grid.validate()?;
    let k = grid.positions.len();
    let mut rows = Vec::new();
    let mut consistency = Vec::new();
    for (im, insts) in ds.images.iter().zip(ds.instances_by_image()) {
        if insts.is_empty() {
            continue;
        }
        let mut prompts = Vec::with_capacity(k * insts.len());
        for (g, &(u, v)) in grid.positions.iter().enumerate() {
            for inst in &insts {
                let b = ds.normalized_box(inst).to_corner();
                let [x0, y0, x1, y1] = b.coords;
                prompts.push(TeacherPrompt {
                    point: Point2D::new(x0 + u * (x1 - x0), y0 + v * (y1 - y0)),
                    category: inst.category,
                    group: g,
                });
            }
        }
        let boxes = predictor.predict_boxes(im, &prompts)?;
        for (j, inst) in insts.iter().enumerate() {
            let gt = ds.normalized_box(inst);
            let preds: Vec<BBox> = (0..k).map(|g| boxes[g * insts.len() + j]).collect();
            for (g, p) in preds.iter().enumerate() {
                rows.push(SweepRow {
                    instance_id: inst.id,
                    image_id: im.id,
                    position: g,
                    u: grid.positions[g].0,
                    v: grid.positions[g].1,
                    predicted: *p,
                    iou_with_gt: iou(p, &gt),
                });
            }
            consistency.push(mean_pairwise_iou(&preds));
        }
    }
    let mut iou_by_position = vec![0.0; k];
    let n = (rows.len() / k).max(1) as f64;
    for r in &rows {
        iou_by_position[r.position] += r.iou_with_gt / n;
    }
    Ok(SweepReport {
        grid: grid.clone(),
        rows,
        consistency,
        iou_by_position,
    })
}

/// Mean IoU over unordered pairs; `None` below two boxes.
pub fn mean_pairwise_iou(boxes: &[BBox]) -> Option<f64> {
    let n = boxes.len();
    if n < 2 {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += iou(&boxes[i], &boxes[j]);
        }
    }
    Some(sum / (n * (n - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, Category, Image, LabelSource, Supervision, SyntheticConfig};
    use crate::network::teacher::tests::tiny_config;
    use crate::network::{Teacher, TrainedTeacher};
    use proptest::prelude::*;

    fn one_image(boxes: &[(BBox, usize)]) -> DetectionDataset {
        DetectionDataset {
            images: vec![Image {
                id: 1,
                file_name: "a.png".into(),
                width: 100,
                height: 100,
                pixels: vec![0; 100 * 100],
            }],
            instances: boxes
                .iter()
                .enumerate()
                .map(|(k, &(bbox, category))| Instance {
                    id: k as u64 + 1,
                    image_id: 1,
                    bbox,
                    category,
                    point: None,
                    supervision: Supervision::BoxLabeled,
                    source: LabelSource::GroundTruth,
                    mask: None,
                })
                .collect(),
            categories: vec![
                Category { id: 1, name: "a".into() },
                Category { id: 2, name: "b".into() },
            ],
        }
    }

    fn det(bbox: BBox, category: usize, score: f64) -> DetectionResult {
        DetectionResult {
            image_id: 1,
            category,
            bbox,
            score,
        }
    }

    #[test]
    fn iou_point_six_passes_three_thresholds() {
        let gt = one_image(&[(BBox::corner(0.0, 0.0, 10.0, 10.0), 0)]);
        let pred = det(BBox::corner(0.0, 0.0, 10.0, 6.0), 0, 1.0);
        assert_eq!(iou(&pred.bbox, &gt.instances[0].bbox), 0.6);
        let m = evaluate_detections(&[pred], &gt, &default_thresholds()).unwrap();
        assert!((m.map50 - 1.0).abs() < 1e-6);
        assert!((m.map - 0.3).abs() < 1e-6);
        assert_eq!(m.per_category[1], None);
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gt = one_image(&[(BBox::corner(0.0, 0.0, 10.0, 10.0), 0), (BBox::corner(20.0, 20.0, 50.0, 40.0), 1)]);
        let perfect: Vec<DetectionResult> = gt.instances.iter().map(|i| det(i.bbox, i.category, 0.9)).collect();
        let m = evaluate_detections(&perfect, &gt, &default_thresholds()).unwrap();
        assert!((m.map - 1.0).abs() < 1e-6 && (m.map50 - 1.0).abs() < 1e-6);
        let m = evaluate_detections(&[], &gt, &default_thresholds()).unwrap();
        assert_eq!((m.map, m.map50), (0.0, 0.0));
    }

    #[test]
    fn precision_recall_hand_value() {
        // two gts; ranked hits are [miss, hit, hit] -> envelope 2/3 on all recall levels past 0
        let gt = one_image(&[(BBox::corner(0.0, 0.0, 10.0, 10.0), 0), (BBox::corner(50.0, 50.0, 60.0, 60.0), 0)]);
        let preds = vec![
            det(BBox::corner(80.0, 80.0, 90.0, 90.0), 0, 0.9),
            det(BBox::corner(0.0, 0.0, 10.0, 10.0), 0, 0.8),
            det(BBox::corner(50.0, 50.0, 60.0, 60.0), 0, 0.7),
        ];
        let m = evaluate_detections(&preds, &gt, &[0.5]).unwrap();
        assert!((m.map50 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn each_ground_truth_matches_once() {
        let gt = one_image(&[(BBox::corner(0.0, 0.0, 10.0, 10.0), 0)]);
        let b = gt.instances[0].bbox;
        let m = evaluate_detections(&[det(b, 0, 0.9), det(b, 0, 0.8)], &gt, &[0.5]).unwrap();
        // recall reaches 1 at rank 1 with precision 1
        assert!((m.map50 - 1.0).abs() < 1e-12);
        let m = evaluate_detections(&[det(BBox::corner(30.0, 30.0, 40.0, 40.0), 0, 0.9), det(b, 0, 0.8)], &gt, &[0.5]).unwrap();
        assert!((m.map50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_images_and_categories_are_rejected() {
        let gt = one_image(&[(BBox::corner(0.0, 0.0, 10.0, 10.0), 0)]);
        let b = gt.instances[0].bbox;
        let bad_image = DetectionResult { image_id: 9, ..det(b, 0, 0.5) };
        assert!(evaluate_detections(&[bad_image], &gt, &[0.5]).is_err());
        assert!(evaluate_detections(&[det(b, 2, 0.5)], &gt, &[0.5]).is_err());
    }

    #[test]
    fn duplicate_can_claim_a_second_overlapping_ground_truth() {
        let a = BBox::corner(0.0, 0.0, 10.0, 10.0);
        let gt = one_image(&[(a, 0), (BBox::corner(0.0, 1.0, 10.0, 11.0), 0)]);
        let once = evaluate_detections(&[det(a, 0, 0.9)], &gt, &[0.5]).unwrap();
        let twice = evaluate_detections(&[det(a, 0, 0.9), det(a, 0, 0.45)], &gt, &[0.5]).unwrap();
        assert!((once.map50 - 51.0 / 101.0).abs() < 1e-12);
        assert!((twice.map50 - 1.0).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..80.0f64, 0.0..80.0f64, 2.0..20.0f64, 2.0..20.0f64).prop_map(|(x, y, w, h)| BBox::corner(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn duplicate_lower_score_never_helps(
            gts in prop::collection::vec((0.0..5.0f64, 0.0..80.0f64, 2.0..20.0f64, 0..2usize), 1..5)
                .prop_map(|v| v.into_iter().enumerate().map(|(k, (x, y, s, c))| {
                    // one 25 px column per box keeps ground truths disjoint
                    let x = 25.0 * k as f64 + x;
                    (BBox::corner(x, y, x + s, y + s), c)
                }).collect::<Vec<_>>()),
            preds in prop::collection::vec((arb_box(), 0..2usize, 0.05..1.0f64), 0..6),
            pick in any::<prop::sample::Index>(),
        ) {
            let gt = one_image(&gts);
            let mut p: Vec<DetectionResult> = preds.iter().map(|&(b, c, s)| det(b, c, s)).collect();
            // include perturbed copies of the gts so matches happen
            p.extend(gts.iter().map(|&(b, c)| det(b.translate(1.0, 0.0), c, 0.5)));
            let base = evaluate_detections(&p, &gt, &default_thresholds()).unwrap();
            let src = p[pick.index(p.len())];
            let mut dup = p.clone();
            dup.push(DetectionResult { score: src.score * 0.5, ..src });
            let more = evaluate_detections(&dup, &gt, &default_thresholds()).unwrap();
            for (a, b) in base.per_category.iter().zip(&more.per_category) {
                if let (Some(a), Some(b)) = (a, b) {
                    prop_assert!(*b <= *a + 1e-12);
                }
            }
        }

        #[test]
        fn input_order_does_not_matter(
            gts in prop::collection::vec((arb_box(), 0..2usize), 1..5),
            preds in prop::collection::vec((arb_box(), 0..2usize, prop::sample::select(vec![0.3, 0.6, 0.9])), 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let gt = one_image(&gts);
            let p: Vec<DetectionResult> = preds.iter().map(|&(b, c, s)| det(b, c, s)).collect();
            let mut q = p.clone();
            q.shuffle(&mut crate::params::derived_rng(seed, "shuffle"));
            prop_assert_eq!(
                evaluate_detections(&p, &gt, &default_thresholds()).unwrap(),
                evaluate_detections(&q, &gt, &default_thresholds()).unwrap()
            );
        }
    }

    fn small_data() -> DetectionDataset {
        generate_synthetic(&SyntheticConfig {
            num_images: 2,
            image_size: 64,
            instances_per_image: (1, 3),
            ..Default::default()
        })
        .unwrap()
    }

    fn random_teacher() -> TrainedTeacher {
        let cfg = crate::network::TeacherConfig {
            num_classes: 5,
            ..tiny_config(crate::click_moe::ExpertMode::default(), true)
        };
        let (store, model) = Teacher::init(cfg, 11).unwrap();
        TrainedTeacher { model, store }
    }

    #[test]
    fn sweep_shape_and_single_point_grid() {
        let ds = small_data();
        let t = random_teacher();
        let grid = GridSpec::lattice(5, 5);
        let r = point_sensitivity_sweep(&t, &ds, &grid).unwrap();
        assert_eq!(r.rows.len(), ds.instances.len() * 25);
        assert_eq!(r.consistency.len(), ds.instances.len());
        let mean = r.mean_consistency().unwrap();
        assert!((0.0..=1.0).contains(&mean));
        println!("untrained teacher mean pairwise IoU: {mean:.4}");

        let center = point_sensitivity_sweep(&t, &ds, &GridSpec::lattice(1, 1)).unwrap();
        assert!(center.consistency.iter().all(Option::is_none));
        for (im, insts) in ds.images.iter().zip(ds.instances_by_image()) {
            let prompts: Vec<TeacherPrompt> = insts
                .iter()
                .map(|i| TeacherPrompt {
                    point: ds.normalized_box(i).center_point(),
                    category: i.category,
                    group: 0,
                })
                .collect();
            let direct = t.predict_boxes(im, &prompts).unwrap();
            let swept: Vec<BBox> = center.rows.iter().filter(|r| r.image_id == im.id).map(|r| r.predicted).collect();
            assert_eq!(direct, swept);
        }
        assert_eq!(center.to_csv().lines().count(), ds.instances.len() + 1);
    }

    struct Oracle<'a>(&'a DetectionDataset);

    impl BoxPredictor for Oracle<'_> {
        fn predict_boxes(&self, image: &Image, prompts: &[TeacherPrompt]) -> Result<Vec<BBox>> {
            Ok(prompts
                .iter()
                .map(|p| {
                    let inst = self
                        .0
                        .instances
                        .iter()
                        .filter(|i| i.image_id == image.id && i.category == p.category)
                        .find(|i| self.0.normalized_box(i).contains(p.point))
                        .unwrap();
                    self.0.normalized_box(inst).to_center()
                })
                .collect())
        }
    }

    #[test]
    fn oracle_point_to_box_scores_perfectly() {
        let ds = small_data();
        let m = evaluate_point_to_box(&Oracle(&ds), &ds).unwrap();
        assert!((m.map - 1.0).abs() < 1e-9);
        let r = point_sensitivity_sweep(&Oracle(&ds), &ds, &GridSpec::five_point()).unwrap();
        assert!((r.mean_consistency().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn metrics_csv_layout() {
        let gt = one_image(&[(BBox::corner(0.0, 0.0, 10.0, 10.0), 0)]);
        let m = evaluate_detections(&[], &gt, &default_thresholds()).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let csv = m.to_csv(&names);
        assert_eq!(csv.lines().collect::<Vec<_>>(), vec!["category,name,ap", "0,a,0.000000", "1,b,", "all,mAP,0.000000", "all,mAP@50,0.000000"]);
    }
}
