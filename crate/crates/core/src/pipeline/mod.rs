//! End-to-end weakly semi-supervised pipeline: split, teacher training and
//! evaluation, pseudo-labeling, student arms, ablation grid and reports.
//!
//! Every stage writes its artifact under `<out>/cache/<stage>-<key>/`, where
//! the key hashes every input the stage depends on; a rerun with the same
//! inputs reuses the artifact, and an interrupted training run resumes from
//! its last epoch checkpoint. One process owns an output directory at a
//! time through `<out>/.lock`.

pub mod config;
pub mod report;

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{
    denormalize_box, fixed_inference_point, generate_synthetic, load_coco_annotations, split_dataset, to_coco, DetectionDataset, Image, Instance, LabelSource, Supervision,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_point_to_box, evaluate_student, point_sensitivity_sweep, GridSpec, Metrics};
use crate::geometry::{BBox, Point2D};
use crate::network::{BoxPredictor, Checkpoint, Student, StudentConfig, Teacher, TeacherConfig, TeacherPrompt, TrainedTeacher};
use crate::train_engine::{train_student, train_teacher, RunEcho, TrainOptions};

pub use config::{parse_switch, Axis, ExperimentConfig, StudentArm, TeacherArm};
pub use report::{emit_report, load_report_table, ReportRow};

/// Part of every cache key; bump when stage semantics change.
pub const PIPELINE_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "/1");

/// Hex SHA-256 prefix of the JSON encoding of `value`.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("key material serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                // The owner's pid lets a stale lock be told apart from a live run.
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Train and test sets plus a key identifying their content.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: DetectionDataset,
    pub test: DetectionDataset,
    pub key: String,
}

/// First image id of the synthetic test set, far above any training id.
pub const TEST_FIRST_ID: u64 = 1_000_000;

pub fn load_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    let (train, test, key) = match (&cfg.coco_train, &cfg.coco_test) {
        (Some(tr), Some(te)) => {
            let mut hasher = Sha256::new();
            for p in [tr, te] {
                hasher.update(fs::read(p).map_err(|e| Error::io(p, e))?);
            }
            let key = hex::encode(&hasher.finalize()[..8]);
            (load_coco_annotations(tr)?, load_coco_annotations(te)?, key)
        }
        _ => {
            let tr = cfg.synthetic(cfg.train_images, cfg.data_seed, 1);
            let te = cfg.synthetic(cfg.test_images, cfg.data_seed + 1, TEST_FIRST_ID);
            let key = digest(&(PIPELINE_VERSION, &tr, &te));
            (generate_synthetic(&tr)?, generate_synthetic(&te)?, key)
        }
    };
    if train.categories != test.categories {
        return Err(Error::Dataset("train and test category lists differ".into()));
    }
    if train.images.iter().any(|i| i.pixels.is_empty()) || test.images.iter().any(|i| i.pixels.is_empty()) {
        return Err(Error::Dataset("every image needs pixel data".into()));
    }
    Ok(Benchmark { train, test, key })
}

/// Content of a dataset that a student can see: image ids and the boxes
/// it trains on, label source excluded.
pub fn training_fingerprint(ds: &DetectionDataset) -> String {
    let images: Vec<u64> = ds.images.iter().map(|i| i.id).collect();
    let boxes: Vec<(u64, [u64; 4], usize)> = ds
        .instances
        .iter()
        .filter(|i| i.supervision == Supervision::BoxLabeled)
        .map(|i| (i.image_id, i.bbox.coords.map(f64::to_bits), i.category))
        .collect();
    digest(&(images, boxes))
}

/// Union of disjoint subsets of one dataset, images ordered by id and
/// instances by (image id, instance id).
pub fn merge_datasets(parts: &[&DetectionDataset]) -> Result<DetectionDataset> {
    let first = parts.first().ok_or_else(|| Error::Dataset("nothing to merge".into()))?;
    let mut images: Vec<Image> = parts.iter().flat_map(|p| p.images.iter().cloned()).collect();
    images.sort_by_key(|i| i.id);
    let mut instances: Vec<Instance> = parts.iter().flat_map(|p| p.instances.iter().cloned()).collect();
    instances.sort_by_key(|i| (i.image_id, i.id));
    let ds = DetectionDataset {
        images,
        instances,
        categories: first.categories.clone(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Normalized prompt at an instance's fixed point.
fn point_prompt(im: &Image, inst: &Instance) -> Result<TeacherPrompt> {
    let p = inst
        .point
        .ok_or_else(|| Error::Dataset(format!("point-only instance {} has no point", inst.id)))?;
    Ok(TeacherPrompt {
        point: Point2D::new(p.x / im.width as f64, p.y / im.height as f64),
        category: inst.category,
        group: 0,
    })
}

/// One pseudo box per point annotation, category copied, tagged pseudo.
pub fn pseudo_label_dataset(predictor: &dyn BoxPredictor, point_only: &DetectionDataset) -> Result<DetectionDataset> {
    let mut instances = Vec::with_capacity(point_only.instances.len());
    for (im, insts) in point_only.images.iter().zip(point_only.instances_by_image()) {
        if insts.is_empty() {
            continue;
        }
        let prompts = insts.iter().map(|i| point_prompt(im, i)).collect::<Result<Vec<_>>>()?;
        let boxes = predictor.predict_boxes(im, &prompts)?;
        if boxes.len() != prompts.len() {
            return Err(Error::Dataset(format!("predictor returned {} boxes for {} prompts", boxes.len(), prompts.len())));
        }
        for (inst, b) in insts.iter().zip(boxes) {
            instances.push(Instance {
                id: inst.id,
                image_id: inst.image_id,
                bbox: denormalize_box(b.to_corner(), im.width, im.height),
                category: inst.category,
                point: inst.point,
                supervision: Supervision::BoxLabeled,
                source: LabelSource::Pseudo,
                mask: None,
            });
        }
    }
    let ds = DetectionDataset {
        images: point_only.images.clone(),
        instances,
        categories: point_only.categories.clone(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Returns the hidden ground-truth box of the prompted instance: the one
/// whose fixed point is the prompt, else the same-category box containing
/// the point with the nearest center.
pub struct OracleTeacher<'a> {
    pub hidden: &'a DetectionDataset,
}

impl BoxPredictor for OracleTeacher<'_> {
    fn predict_boxes(&self, image: &Image, prompts: &[TeacherPrompt]) -> Result<Vec<BBox>> {
        let candidates: Vec<&Instance> = self.hidden.instances.iter().filter(|i| i.image_id == image.id).collect();
        prompts
            .iter()
            .map(|p| {
                let same: Vec<&&Instance> = candidates.iter().filter(|i| i.category == p.category).collect();
                let exact = same.iter().find(|i| {
                    let f = fixed_inference_point(i);
                    Point2D::new(f.x / image.width as f64, f.y / image.height as f64) == p.point
                });
                let chosen = exact.or_else(|| {
                    same.iter()
                        .filter(|i| self.hidden.normalized_box(i).contains(p.point))
                        .min_by(|a, b| {
                            let d = |i: &Instance| {
                                let c = self.hidden.normalized_box(i).center_point();
                                (c.x - p.point.x).powi(2) + (c.y - p.point.y).powi(2)
                            };
                            d(a).total_cmp(&d(b))
                        })
                });
                chosen
                    .map(|i| self.hidden.normalized_box(i).to_center())
                    .ok_or_else(|| Error::Dataset(format!("oracle has no instance under a prompt in image {}", image.id)))
            })
            .collect()
    }
}

/// Source-agnostic evaluation record of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub model: RunModel,
    pub map: f64,
    pub map50: f64,
    /// Mean pairwise IoU of the five-point sweep (teachers only).
    pub consistency: Option<f64>,
    pub cache_key: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RunModel {
    Teacher { arm: TeacherArm, axis: Axis },
    Student { arm: StudentArm },
}

impl RunResult {
    pub fn file_name(&self) -> String {
        match &self.model {
            RunModel::Teacher { arm, .. } => format!("teacher-{}-seed{}.json", digest(arm), self.seed),
            RunModel::Student { arm } => format!("student-{}-seed{}.json", arm.slug(), self.seed),
        }
    }
}

/// Teacher evaluation: fixed-point metrics and the five-point sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherEval {
    pub metrics: Metrics,
    pub consistency: f64,
    pub sweep_iou: f64,
}

/// An output directory with its lock held.
pub struct Workspace {
    pub root: PathBuf,
    _lock: RunLock,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        let lock = RunLock::acquire(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            _lock: lock,
        })
    }

    fn stage_dir(&self, stage: &str, key: &str) -> Result<PathBuf> {
        let dir = self.root.join("cache").join(format!("{stage}-{key}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Trains the teacher of `arm` on `boxed`, or loads the cached one.
    pub fn teacher(&self, cfg: &ExperimentConfig, bench: &Benchmark, seed: u64, arm: &TeacherArm, boxed: &DetectionDataset) -> Result<(TrainedTeacher, String)> {
        let tc = cfg.teacher_config(bench.train.num_classes(), arm);
        let items = boxed.instances_by_image().iter().filter(|v| !v.is_empty()).count();
        let train = cfg.train_config(seed, arm.groups, items, cfg.teacher_epochs);
        let key = digest(&(PIPELINE_VERSION, &bench.key, training_fingerprint(boxed), seed, &tc, &train));
        let dir = self.stage_dir("teacher", &key)?;
        let done = dir.join("teacher.json");
        if done.exists() {
            let ck: Checkpoint<RunEcho<TeacherConfig>> = Checkpoint::load(&done, "teacher")?;
            let model = Teacher::init(ck.config.model.clone(), seed)?.1;
            return Ok((TrainedTeacher { model, store: ck.params }, key));
        }
        let (mut store, model) = Teacher::init(tc.clone(), seed)?;
        log::info!("teacher {arm} seed {seed}: {} steps", train.iterations.unwrap_or(0));
        let opts = TrainOptions {
            checkpoint: Some(dir.join("progress.json")),
            resume: true,
            ..Default::default()
        };
        let out = train_teacher(&model, &mut store, boxed, &train, &opts)?;
        out.write_csv(&dir.join("loss.csv"))?;
        let mut ck = Checkpoint::new("teacher", RunEcho { model: tc, train }, store.clone());
        ck.epoch = out.epochs;
        ck.step = out.steps;
        ck.save(&done)?;
        Ok((TrainedTeacher { model, store }, key))
    }

    pub fn teacher_eval(&self, key: &str, teacher: &TrainedTeacher, test: &DetectionDataset) -> Result<TeacherEval> {
        let dir = self.stage_dir("teacher", key)?;
        let path = dir.join("eval.json");
        if let Some(e) = Self::read_json(&path)? {
            return Ok(e);
        }
        let metrics = evaluate_point_to_box(teacher, test)?;
        let names: Vec<String> = test.categories.iter().map(|c| c.name.clone()).collect();
        metrics.write(&dir.join("metrics.csv"), &names)?;
        let sweep = point_sensitivity_sweep(teacher, test, &GridSpec::five_point())?;
        let sweep_path = dir.join("sweep.csv");
        fs::write(&sweep_path, sweep.to_csv()).map_err(|e| Error::io(&sweep_path, e))?;
        let eval = TeacherEval {
            metrics,
            consistency: sweep.mean_consistency().unwrap_or(1.0),
            sweep_iou: sweep.mean_iou(),
        };
        Self::write_json(&path, &eval)?;
        Ok(eval)
    }

    /// Pseudo-labels of `point_only`, cached per predictor key. The cache
    /// holds exact instance records; `pseudo_coco.json` is the COCO export.
    pub fn pseudo_labels(&self, predictor: &dyn BoxPredictor, key: &str, point_only: &DetectionDataset) -> Result<DetectionDataset> {
        let dir = self.stage_dir("pseudo", &digest(&(key, training_fingerprint_points(point_only))))?;
        let path = dir.join("pseudo.json");
        if let Some(instances) = Self::read_json::<Vec<Instance>>(&path)? {
            let ds = DetectionDataset {
                images: point_only.images.clone(),
                instances,
                categories: point_only.categories.clone(),
            };
            ds.validate()?;
            return Ok(ds);
        }
        let ds = pseudo_label_dataset(predictor, point_only)?;
        Self::write_json(&dir.join("pseudo_coco.json"), &to_coco(&ds))?;
        Self::write_json(&path, &ds.instances)?;
        Ok(ds)
    }

    /// Trains a student on `train_set`, or loads the cached one, and
    /// evaluates it on `test`.
    pub fn student(&self, cfg: &ExperimentConfig, bench: &Benchmark, seed: u64, train_set: &DetectionDataset) -> Result<(Metrics, String)> {
        let sc = cfg.student_config(bench.train.num_classes());
        let train = cfg.train_config(seed, cfg.groups, train_set.images.len(), cfg.student_epochs);
        let key = digest(&(PIPELINE_VERSION, &bench.key, training_fingerprint(train_set), seed, &sc, &train));
        let dir = self.stage_dir("student", &key)?;
        let eval_path = dir.join("eval.json");
        if let Some(m) = Self::read_json(&eval_path)? {
            return Ok((m, key));
        }
        let done = dir.join("student.json");
        let (model, store) = if done.exists() {
            let ck: Checkpoint<RunEcho<StudentConfig>> = Checkpoint::load(&done, "student")?;
            (Student::init(ck.config.model.clone(), seed)?.1, ck.params)
        } else {
            let (mut store, model) = Student::init(sc.clone(), seed)?;
            log::info!("student seed {seed}: {} images, {} steps", train_set.images.len(), train.iterations.unwrap_or(0));
            let opts = TrainOptions {
                checkpoint: Some(dir.join("progress.json")),
                resume: true,
                ..Default::default()
            };
            let out = train_student(&model, &mut store, train_set, &train, &opts)?;
            out.write_csv(&dir.join("loss.csv"))?;
            let mut ck = Checkpoint::new("student", RunEcho { model: sc, train }, store.clone());
            ck.epoch = out.epochs;
            ck.step = out.steps;
            ck.save(&done)?;
            (model, store)
        };
        let metrics = evaluate_student(&model, &store, &bench.test)?;
        let names: Vec<String> = bench.test.categories.iter().map(|c| c.name.clone()).collect();
        metrics.write(&dir.join("metrics.csv"), &names)?;
        Self::write_json(&eval_path, &metrics)?;
        Ok((metrics, key))
    }

    pub fn record(&self, result: &RunResult) -> Result<()> {
        let dir = self.root.join("results");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Self::write_json(&dir.join(result.file_name()), result)
    }

    /// Every recorded result, ordered by file name.
    pub fn results(&self) -> Result<Vec<RunResult>> {
        load_results(&self.root)
    }
}

/// Results recorded under `<out>/results`, ordered by file name.
pub fn load_results(root: &Path) -> Result<Vec<RunResult>> {
    let dir = root.join("results");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

/// Point annotations of a dataset, the only thing a pseudo-labeler reads.
fn training_fingerprint_points(ds: &DetectionDataset) -> String {
    let points: Vec<(u64, u64, [u64; 2], usize)> = ds
        .instances
        .iter()
        .map(|i| {
            let p = i.point.unwrap_or(Point2D::new(f64::NAN, f64::NAN));
            (i.image_id, i.id, [p.x.to_bits(), p.y.to_bits()], i.category)
        })
        .collect();
    digest(&points)
}

#[derive(Clone, Debug, Default)]
pub struct PipelineReport {
    pub results: Vec<RunResult>,
    pub notes: Vec<String>,
}

/// One seed's split of the benchmark inside a workspace; every method is
/// a cached stage tagged with its name on failure.
pub struct SeedRun<'a> {
    pub ws: &'a Workspace,
    pub cfg: &'a ExperimentConfig,
    pub bench: &'a Benchmark,
    pub seed: u64,
    pub boxed: DetectionDataset,
    pub point_only: DetectionDataset,
}

impl<'a> SeedRun<'a> {
    pub fn new(ws: &'a Workspace, cfg: &'a ExperimentConfig, bench: &'a Benchmark, seed: u64) -> Result<Self> {
        let (boxed, point_only) = split_dataset(&bench.train, cfg.fraction, seed).map_err(|e| e.in_stage("split"))?;
        Ok(Self {
            ws,
            cfg,
            bench,
            seed,
            boxed,
            point_only,
        })
    }

    pub fn teacher(&self, arm: &TeacherArm) -> Result<(TrainedTeacher, String)> {
        self.ws
            .teacher(self.cfg, self.bench, self.seed, arm, &self.boxed)
            .map_err(|e| e.in_stage("train-teacher"))
    }

    /// Trains (or loads) the teacher of `arm`, evaluates it on the test set
    /// and records the result.
    pub fn evaluate_teacher(&self, arm: &TeacherArm, axis: Axis) -> Result<RunResult> {
        let (teacher, key) = self.teacher(arm)?;
        let eval = self
            .ws
            .teacher_eval(&key, &teacher, &self.bench.test)
            .map_err(|e| e.in_stage("evaluate-teacher"))?;
        let r = RunResult {
            seed: self.seed,
            model: RunModel::Teacher { arm: *arm, axis },
            map: eval.metrics.map,
            map50: eval.metrics.map50,
            consistency: Some(eval.consistency),
            cache_key: key,
        };
        self.ws.record(&r)?;
        Ok(r)
    }

    /// Pseudo boxes for the point-only images from the baseline teacher
    /// (`Pseudo`) or the hidden ground truth (`Oracle`); `None` for the
    /// other arms or without point-only instances.
    pub fn pseudo_labels(&self, arm: StudentArm) -> Result<Option<DetectionDataset>> {
        if self.point_only.instances.is_empty() {
            return Ok(None);
        }
        let labels = match arm {
            StudentArm::Pseudo => {
                let (teacher, key) = self.teacher(&self.cfg.baseline_arm())?;
                self.ws.pseudo_labels(&teacher, &key, &self.point_only)
            }
            StudentArm::Oracle => self.ws.pseudo_labels(&OracleTeacher { hidden: &self.point_only }, "oracle", &self.point_only),
            _ => return Ok(None),
        };
        labels.map(Some).map_err(|e| e.in_stage("pseudo-label"))
    }

    /// Training images of a student arm; `None` when the arm does not exist
    /// for this split or configuration.
    pub fn student_set(&self, arm: StudentArm) -> Result<Option<DetectionDataset>> {
        Ok(match arm {
            StudentArm::Supervised => Some(self.boxed.clone()),
            StudentArm::FullySupervised => Some(self.bench.train.clone()),
            StudentArm::Oracle if !self.cfg.oracle_control => None,
            StudentArm::Pseudo | StudentArm::Oracle => match self.pseudo_labels(arm)? {
                Some(labels) => Some(merge_datasets(&[&self.boxed, &labels])?),
                None => None,
            },
        })
    }

    /// Trains (or loads) and evaluates the student of `arm` and records it.
    pub fn student(&self, arm: StudentArm) -> Result<Option<RunResult>> {
        let Some(set) = self.student_set(arm)? else {
            return Ok(None);
        };
        let (m, key) = self
            .ws
            .student(self.cfg, self.bench, self.seed, &set)
            .map_err(|e| e.in_stage("train-student"))?;
        let r = RunResult {
            seed: self.seed,
            model: RunModel::Student { arm },
            map: m.map,
            map50: m.map50,
            consistency: None,
            cache_key: key,
        };
        self.ws.record(&r)?;
        Ok(Some(r))
    }
}

/// Opens the workspace, echoes the configuration and loads the data.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Workspace, Benchmark)> {
    cfg.validate()?;
    let ws = Workspace::open(&cfg.out)?;
    let path = ws.root.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    let bench = load_benchmark(cfg).map_err(|e| e.in_stage("data"))?;
    Ok((ws, bench))
}

/// Rewrites the report tables from every recorded result.
pub fn write_report(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    emit_report(&ws.root, &ws.results()?, cfg).map_err(|e| e.in_stage("report"))
}

/// Runs every stage for every seed and writes the report tables.
pub fn run_wssod_pipeline(cfg: &ExperimentConfig) -> Result<PipelineReport> {
    let (ws, bench) = prepare(cfg)?;
    let mut report = PipelineReport::default();
    let base = cfg.baseline_arm();
    for &seed in &cfg.seeds {
        let run = SeedRun::new(&ws, cfg, &bench, seed)?;
        report.results.push(run.evaluate_teacher(&base, Axis::Baseline)?);
        if run.point_only.instances.is_empty() {
            report
                .notes
                .push(format!("seed {seed}: no point-only images at fraction {}; pseudo-label arms skipped", cfg.fraction));
        }
        for arm in StudentArm::ALL {
            report.results.extend(run.student(arm)?);
        }
    }
    write_report(&ws, cfg)?;
    Ok(report)
}

/// The baseline followed by every configured ablation arm, duplicates
/// removed.
pub fn ablation_arms(cfg: &ExperimentConfig) -> Result<Vec<(TeacherArm, Axis)>> {
    let base = cfg.baseline_arm();
    let mut arms = vec![(base, Axis::Baseline)];
    for t in &cfg.ablations {
        let arm = base.with(t)?;
        arms.push((arm, arm.axis(&base)?));
    }
    let mut seen = HashSet::new();
    arms.retain(|a| seen.insert(a.0));
    Ok(arms)
}

/// Trains and evaluates the baseline and every ablation arm for every
/// seed, then rewrites the report tables.
pub fn run_ablations(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    let (ws, bench) = prepare(cfg)?;
    let arms = ablation_arms(cfg)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let run = SeedRun::new(&ws, cfg, &bench, seed)?;
        for (arm, axis) in &arms {
            out.push(run.evaluate_teacher(arm, *axis)?);
        }
    }
    write_report(&ws, cfg)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    pub(crate) fn tiny_cfg(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            train_images: 8,
            test_images: 4,
            image_size: 64,
            min_instances: 1,
            max_instances: 3,
            fraction: 0.5,
            seeds: vec![0],
            dim: 16,
            decoder_stages: 2,
            student_queries: 6,
            teacher_epochs: 1,
            student_epochs: 1,
            warmup_iters: 2,
            ablations: vec!["groups=1".into()],
            out: out.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        assert_eq!(digest(&(1, "a")), digest(&(1, "a")));
        assert_ne!(digest(&(1, "a")), digest(&(2, "a")));
        assert_eq!(digest(&0).len(), 16);
    }

    #[test]
    fn oracle_pseudo_labels_recover_the_hidden_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            train_images: 30,
            ..tiny_cfg(dir.path())
        };
        let bench = load_benchmark(&cfg).unwrap();
        let (boxed, point_only) = split_dataset(&bench.train, cfg.fraction, 0).unwrap();
        let pseudo = pseudo_label_dataset(&OracleTeacher { hidden: &point_only }, &point_only).unwrap();
        assert_eq!(pseudo.instances.len(), point_only.instances.len());
        for (p, h) in pseudo.instances.iter().zip(&point_only.instances) {
            assert_eq!((p.id, p.category, p.bbox), (h.id, h.category, h.bbox));
            assert_eq!(p.source, LabelSource::Pseudo);
        }
        let merged = merge_datasets(&[&boxed, &pseudo]).unwrap();
        assert_eq!(training_fingerprint(&merged), training_fingerprint(&bench.train));
    }

    #[test]
    fn pseudo_labels_are_one_per_point_with_categories_kept() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let bench = load_benchmark(&cfg).unwrap();
        let (_, point_only) = split_dataset(&bench.train, cfg.fraction, 0).unwrap();
        let tc = cfg.teacher_config(5, &cfg.baseline_arm());
        let (store, model) = Teacher::init(tc, 0).unwrap();
        let pseudo = pseudo_label_dataset(&TrainedTeacher { model, store }, &point_only).unwrap();
        assert_eq!(pseudo.instances.len(), point_only.instances.len());
        assert!(pseudo.instances.iter().zip(&point_only.instances).all(|(p, h)| p.category == h.category));
        let mut missing = point_only.clone();
        missing.instances[0].point = None;
        let oracle = OracleTeacher { hidden: &point_only };
        assert!(matches!(pseudo_label_dataset(&oracle, &missing), Err(Error::Dataset(_))));
    }

    #[test]
    fn ablation_arms_share_every_untouched_parameter() {
        let cfg = ExperimentConfig::default();
        let base = cfg.baseline_arm();
        let (b, _) = Teacher::init(cfg.teacher_config(5, &base), 3).unwrap();
        for toggle in ["groups=1", "class_guided=off", "experts=ck", "experts=ffn", "experts=moe3"] {
            let arm = base.with(toggle).unwrap();
            let (a, _) = Teacher::init(cfg.teacher_config(5, &arm), 3).unwrap();
            for (name, t) in a.iter() {
                if let Some(u) = b.by_name(name) {
                    assert_eq!(t, u, "{toggle}: {name}");
                } else {
                    assert!(name.contains(".experts."), "{toggle}: unexpected new parameter {name}");
                }
            }
            for (name, _) in b.iter() {
                if a.by_name(name).is_none() {
                    assert!(name.contains(".experts."), "{toggle}: lost parameter {name}");
                }
            }
            if arm.experts == base.experts {
                // group count and guidance add no parameters
                assert_eq!(a.len(), b.len(), "{toggle}");
            }
        }
    }

    #[test]
    fn degenerate_fraction_skips_pseudo_arms() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            fraction: 1.0,
            ..tiny_cfg(dir.path())
        };
        let report = run_wssod_pipeline(&cfg).unwrap();
        assert_eq!(report.notes.len(), 1);
        let students: Vec<StudentArm> = report
            .results
            .iter()
            .filter_map(|r| match r.model {
                RunModel::Student { arm } => Some(arm),
                _ => None,
            })
            .collect();
        assert_eq!(students, vec![StudentArm::Supervised, StudentArm::FullySupervised]);
        // both arms see the full training set, so the second reuses the first
        assert_eq!(report.results[1].cache_key, report.results[2].cache_key);
    }

    #[test]
    fn rerun_reuses_artifacts_and_reproduces_results() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let first = run_wssod_pipeline(&cfg).unwrap();
        let n_files = |d: &Path| walk(d).len();
        let before = n_files(dir.path());
        let started = std::time::Instant::now();
        let second = run_wssod_pipeline(&cfg).unwrap();
        assert_eq!(first.results, second.results);
        assert_eq!(before, n_files(dir.path()));
        assert!(started.elapsed().as_secs_f64() < 10.0);
        let names: Vec<StudentArm> = first
            .results
            .iter()
            .filter_map(|r| match r.model {
                RunModel::Student { arm } => Some(arm),
                _ => None,
            })
            .collect();
        assert_eq!(names, vec![StudentArm::Supervised, StudentArm::Pseudo, StudentArm::Oracle, StudentArm::FullySupervised]);
        // oracle pseudo boxes equal the hidden ones, so that student is the fully supervised one
        let key = |a: StudentArm| {
            first
                .results
                .iter()
                .find(|r| r.model == RunModel::Student { arm: a })
                .unwrap()
                .cache_key
                .clone()
        };
        assert_eq!(key(StudentArm::Oracle), key(StudentArm::FullySupervised));
        assert!(dir.path().join("table1.csv").exists());
    }

    #[test]
    fn held_lock_aborts_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let _held = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(run_wssod_pipeline(&cfg), Err(Error::Locked(_))));
    }

    #[test]
    fn stage_failures_carry_the_stage_name() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            student_queries: 1,
            ..tiny_cfg(dir.path())
        };
        match run_wssod_pipeline(&cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "train-student"),
            other => panic!("expected a stage error, got {other:?}"),
        }
    }

    #[test]
    fn ablation_runner_records_every_arm() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let res = run_ablations(&cfg).unwrap();
        assert_eq!(res.len(), 2);
        assert!(dir.path().join("table4.csv").exists());
        let rows = load_report_table(&dir.path().join("table4.csv")).unwrap();
        assert_eq!(rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), vec!["N=8", "N=1"]);
    }

    pub(crate) fn walk(d: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
