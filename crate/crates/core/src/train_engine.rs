//! Deterministic training loops, learning-rate schedule, AdamW and
//! epoch-boundary checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::datasets::{sample_point_in_box, DetectionDataset, Instance, Supervision};
use crate::error::{Error, Result};
use crate::network::checkpoint::Checkpoint;
use crate::network::loss::teacher_loss;
use crate::network::{Student, StudentConfig, Target, Teacher, TeacherConfig, TeacherPrompt};
use crate::params::{derived_rng, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_iters: usize,
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Point groups per instance (teacher only).
    pub groups: usize,
    /// Fixed optimizer-step budget split evenly across epochs, the last
    /// epoch taking the remainder; `None` means one pass over the data per
    /// epoch.
    pub iterations: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_iters: 500,
            epochs: 24,
            decay_epoch: 20,
            decay_factor: 0.1,
            batch_size: 2,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            seed: 0,
            groups: 8,
            iterations: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "decay epoch {} must precede the last epoch {}",
                self.decay_epoch, self.epochs
            )));
        }
        if self.groups == 0 || self.batch_size == 0 {
            return Err(Error::Config("groups and batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, items: usize) -> usize {
        match self.iterations {
            Some(t) => t.div_ceil(self.epochs).max(1),
            None => items.div_ceil(self.batch_size).max(1),
        }
    }
}

/// Linear warmup from 0 over `warmup_iters`, then `lr`, then
/// `lr * decay_factor` from `decay_epoch` on.
pub fn lr_at_step(step: usize, epoch: usize, cfg: &TrainConfig) -> f64 {
    let base = if epoch >= cfg.decay_epoch {
        cfg.lr * cfg.decay_factor
    } else {
        cfg.lr
    };
    if step < cfg.warmup_iters {
        base * step as f64 / cfg.warmup_iters as f64
    } else {
        base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).rows(), store.get(id).cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    pub fn from_state(state: AdamState) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[k].data();
            let m = self.state.m[k].data_mut();
            let v = self.state.v[k].data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= lr * (update + weight_decay * p[i]);
            }
        }
    }
}

/// Rescales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint file rewritten at every epoch boundary.
    pub checkpoint: Option<PathBuf>,
    /// Continue from `checkpoint` if it exists.
    pub resume: bool,
    /// Stop after this many completed epochs (simulated interruption).
    pub stop_after_epoch: Option<usize>,
    /// Stop as soon as the step loss falls below this value.
    pub target_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LossRecord>,
    pub term_names: Vec<&'static str>,
    pub steps: usize,
    pub epochs: usize,
}

impl TrainOutcome {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_loss_log(path, &self.term_names, &self.log)
    }
}

/// CSV with `step,epoch,lr,loss,<terms...>`.
pub fn write_loss_log(path: &Path, term_names: &[&str], log: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,epoch,lr,loss");
    for t in term_names {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for r in log {
        out.push_str(&format!("{},{},{:.6e},{:.8}", r.step, r.epoch, r.lr, r.loss));
        for v in &r.terms {
            out.push_str(&format!(",{v:.8}"));
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Config pair echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEcho<M> {
    pub model: M,
    pub train: TrainConfig,
}

struct ItemResult {
    grads: Vec<(usize, Tensor)>,
    loss: f64,
    terms: Vec<f64>,
}

/// Position `k` of the endless item stream: pass `k / n` is a seeded
/// permutation of all items.
fn stream_item(seed: u64, n: usize, k: usize, cache: &mut Option<(usize, Vec<usize>)>) -> usize {
    let pass = k / n;
    if cache.as_ref().is_none_or(|(p, _)| *p != pass) {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(seed, &format!("order/{pass}")));
        *cache = Some((pass, order));
    }
    cache.as_ref().unwrap().1[k % n]
}

#[allow(clippy::too_many_arguments)]
fn run_training<C, F>(
    kind: &str,
    echo: &C,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    items: usize,
    term_names: Vec<&'static str>,
    opts: &TrainOptions,
    mut item_loss: F,
) -> Result<TrainOutcome>
where
    C: Serialize + DeserializeOwned + Clone,
    F: FnMut(&ParamStore, usize, &mut ChaCha8Rng) -> Result<ItemResult>,
{
    cfg.validate()?;
    if items == 0 {
        return Err(Error::Dataset(format!("{kind} training set is empty")));
    }
    let mut rng = derived_rng(cfg.seed, &format!("{kind}/sampling"));
    let mut opt = AdamW::new(store);
    let mut start_epoch = 0;
    let mut step = 0;
    if let (true, Some(path)) = (opts.resume, &opts.checkpoint) {
        if path.exists() {
            let ck: Checkpoint<C> = Checkpoint::load(path, kind)?;
            *store = ck.params;
            opt = AdamW::from_state(ck.optimizer.ok_or_else(|| Error::Checkpoint("missing optimizer state".into()))?);
            rng = ck.rng.ok_or_else(|| Error::Checkpoint("missing rng state".into()))?;
            start_epoch = ck.epoch;
            step = ck.step;
            log::info!("{kind}: resumed at epoch {start_epoch}, step {step}");
        }
    }
    let spe = cfg.steps_per_epoch(items);
    let mut log = Vec::new();
    let mut order_cache = None;
    let mut epochs_done = start_epoch;
    let budget = cfg.iterations.unwrap_or(usize::MAX);
    'epochs: for epoch in start_epoch..cfg.epochs {
        for _ in 0..spe {
            if step >= budget {
                break;
            }
            let lr = lr_at_step(step, epoch, cfg);
            let mut acc: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).rows(), store.get(id).cols())).collect();
            let mut loss = 0.0;
            let mut terms = vec![0.0; term_names.len()];
            let b = cfg.batch_size;
            for j in 0..b {
                let item = stream_item(cfg.seed, items, step * b + j, &mut order_cache);
                let r = item_loss(store, item, &mut rng)?;
                if !r.loss.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("non-finite loss on item {item}, terms {:?}", r.terms),
                    });
                }
                loss += r.loss / b as f64;
                for (t, v) in terms.iter_mut().zip(&r.terms) {
                    *t += v / b as f64;
                }
                for (k, g) in r.grads {
                    let a = acc[k].data_mut();
                    for (x, y) in a.iter_mut().zip(g.data()) {
                        *x += y / b as f64;
                    }
                }
            }
            if acc.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            clip_grad_norm(&mut acc, cfg.clip_norm);
            opt.step(store, &acc, lr, cfg.weight_decay);
            log.push(LossRecord {
                step,
                epoch,
                lr,
                loss,
                terms,
            });
            step += 1;
            if opts.target_loss.is_some_and(|t| loss < t) {
                epochs_done = epoch + 1;
                break 'epochs;
            }
        }
        epochs_done = epoch + 1;
        if let Some(path) = &opts.checkpoint {
            let mut ck = Checkpoint::new(kind, echo.clone(), store.clone());
            ck.optimizer = Some(opt.state.clone());
            ck.rng = Some(rng.clone());
            ck.epoch = epochs_done;
            ck.step = step;
            ck.save(path)?;
        }
        if step >= budget || opts.stop_after_epoch.is_some_and(|e| epochs_done >= e) {
            break;
        }
    }
    Ok(TrainOutcome {
        log,
        term_names,
        steps: step,
        epochs: epochs_done,
    })
}

fn collect_grads(g: &Graph<'_>, root: crate::autograd::Var) -> Vec<(usize, Tensor)> {
    let grads = g.backward(root);
    grads.params().map(|(id, t)| (id.index(), t.clone())).collect()
}

/// Group-major prompts: `groups` fresh points per instance, sampled inside
/// its normalized box, with matching center-form targets.
pub fn sample_teacher_prompts<R: rand::Rng + ?Sized>(
    ds: &DetectionDataset,
    instances: &[&Instance],
    groups: usize,
    rng: &mut R,
) -> (Vec<TeacherPrompt>, Tensor) {
    let mut prompts = Vec::with_capacity(groups * instances.len());
    let mut targets = Vec::with_capacity(groups * instances.len());
    for group in 0..groups {
        for inst in instances {
            let b = ds.normalized_box(inst);
            prompts.push(TeacherPrompt {
                point: sample_point_in_box(b, rng),
                category: inst.category,
                group,
            });
            targets.push(b.to_center().coords.to_vec());
        }
    }
    (prompts, Tensor::from_rows(&targets))
}

/// Trains the teacher on box-labeled instances. Images without any
/// box-labeled instance are skipped.
pub fn train_teacher(
    model: &Teacher,
    store: &mut ParamStore,
    ds: &DetectionDataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    ds.validate()?;
    let by_image = ds.instances_by_image();
    let items: Vec<(usize, Vec<&Instance>)> = by_image
        .into_iter()
        .enumerate()
        .map(|(k, v)| (k, v.into_iter().filter(|i| i.supervision == Supervision::BoxLabeled).collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    let echo = RunEcho {
        model: model.cfg.clone(),
        train: cfg.clone(),
    };
    run_training::<RunEcho<TeacherConfig>, _>(
        "teacher",
        &echo,
        store,
        cfg,
        items.len(),
        vec!["l1", "giou"],
        opts,
        |store, item, rng| {
            let (img_idx, insts) = &items[item];
            let (prompts, targets) = sample_teacher_prompts(ds, insts, cfg.groups, rng);
            let mut g = Graph::with_params(store);
            let stages = model.forward(&mut g, &ds.images[*img_idx], &prompts)?;
            let l = teacher_loss(&mut g, &stages, &targets, true);
            let loss = g.value(l.total).item();
            Ok(ItemResult {
                grads: collect_grads(&g, l.total),
                loss,
                terms: vec![l.l1, l.giou],
            })
        },
    )
}

/// Normalized center-form student targets of an image: every instance
/// carrying a box, ground-truth or pseudo alike.
pub fn student_targets(ds: &DetectionDataset, instances: &[&Instance]) -> Vec<Target> {
    instances
        .iter()
        .filter(|i| i.supervision == Supervision::BoxLabeled)
        .map(|i| Target {
            bbox: ds.normalized_box(i).to_center(),
            category: i.category,
        })
        .collect()
}

/// Trains the student on every image of `ds`; label source is ignored.
pub fn train_student(
    model: &Student,
    store: &mut ParamStore,
    ds: &DetectionDataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    ds.validate()?;
    let by_image = ds.instances_by_image();
    let targets: Vec<Vec<Target>> = by_image.iter().map(|v| student_targets(ds, v)).collect();
    let max = targets.iter().map(Vec::len).max().unwrap_or(0);
    model.cfg.check_capacity(max)?;
    let echo = RunEcho {
        model: model.cfg.clone(),
        train: cfg.clone(),
    };
    run_training::<RunEcho<StudentConfig>, _>(
        "student",
        &echo,
        store,
        cfg,
        ds.images.len(),
        vec!["class", "l1", "giou"],
        opts,
        |store, item, _rng| {
            let mut g = Graph::with_params(store);
            let outputs = model.forward(&mut g, &ds.images[item])?;
            let l = model.loss(&mut g, &outputs, &targets[item])?;
            let loss = g.value(l.total).item();
            Ok(ItemResult {
                grads: collect_grads(&g, l.total),
                loss,
                terms: vec![l.class, l.l1, l.giou],
            })
        },
    )
}

/// Median of a slice (upper median for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_moe::ExpertMode;
    use crate::datasets::{generate_synthetic, LabelSource, SyntheticConfig};
    use crate::network::teacher::tests::tiny_config;
    use crate::network::BackboneConfig;

    fn tiny_data() -> DetectionDataset {
        generate_synthetic(&SyntheticConfig {
            num_images: 3,
            image_size: 64,
            instances_per_image: (1, 3),
            ..Default::default()
        })
        .unwrap()
    }

    fn short_run() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            warmup_iters: 2,
            epochs: 4,
            decay_epoch: 3,
            batch_size: 2,
            groups: 2,
            iterations: Some(8),
            ..Default::default()
        }
    }

    fn tiny_student() -> StudentConfig {
        StudentConfig {
            dim: 8,
            queries: 6,
            decoder_stages: 2,
            encoder_layers: 1,
            heads: 2,
            points: 1,
            num_classes: 5,
            ffn_hidden: 8,
            encoder_hidden: 8,
            backbone: BackboneConfig { channels: [2, 3, 4, 4] },
        }
    }

    fn teacher_run(cfg: &TrainConfig, opts: &TrainOptions) -> (ParamStore, TrainOutcome) {
        let ds = tiny_data();
        let tc = TeacherConfig {
            num_classes: 5,
            ..tiny_config(ExpertMode::default(), true)
        };
        let (mut store, model) = Teacher::init(tc, 1).unwrap();
        let out = train_teacher(&model, &mut store, &ds, cfg, opts).unwrap();
        (store, out)
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(lr_at_step(600, 0, &cfg), 1e-4));
        assert!(close(lr_at_step(600, 20, &cfg), 1e-5));
        assert!(close(lr_at_step(250, 0, &cfg), 5e-5));
        assert_eq!(lr_at_step(0, 0, &cfg), 0.0);
        assert!(close(lr_at_step(500, 23, &cfg), 1e-5));
    }

    #[test]
    fn steps_per_epoch_from_budget_or_data() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.steps_per_epoch(7), 4);
        cfg.iterations = Some(50);
        assert_eq!(cfg.steps_per_epoch(7), 3);
        cfg.decay_epoch = 24;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adamw_zero_gradient_applies_only_weight_decay() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]));
        let mut opt = AdamW::new(&store);
        opt.step(&mut store, &[Tensor::zeros(1, 3)], 0.1, 0.01);
        let expected = [1.0 * (1.0 - 0.001), -2.0 * (1.0 - 0.001), 0.5 * (1.0 - 0.001)];
        for (a, e) in store.get(id).data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr_against_the_sign() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_rows(&[vec![1.0, -2.0]]));
        let mut opt = AdamW::new(&store);
        opt.step(&mut store, &[Tensor::from_rows(&[vec![0.3, -4.0]])], 0.01, 0.0);
        // bias-corrected first step is g / (|g| + eps)
        let w = store.get(id).data();
        assert!((w[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-14);
        assert!((w[1] - (-2.0 + 0.01 * 4.0 / (4.0 + 1e-8))).abs() < 1e-14);
    }

    #[test]
    fn clipping_rescales_to_the_ceiling() {
        let mut g = vec![Tensor::from_rows(&[vec![3.0]]), Tensor::from_rows(&[vec![4.0]])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].item() - 0.6).abs() < 1e-9 && (g[1].item() - 0.8).abs() < 1e-9);
        let mut small = vec![Tensor::from_rows(&[vec![0.01]])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.01);
    }

    #[test]
    fn item_stream_passes_are_permutations() {
        let mut cache = None;
        let n = 7;
        let mut first = Vec::new();
        for pass in 0..3 {
            let mut seen: Vec<usize> = (0..n).map(|k| stream_item(3, n, pass * n + k, &mut cache)).collect();
            if pass == 0 {
                first = seen.clone();
            }
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
        let again: Vec<usize> = (0..n).map(|k| stream_item(3, n, k, &mut None)).collect();
        assert_eq!(again, first);
    }

    #[test]
    fn teacher_training_is_deterministic_and_respects_the_budget() {
        let cfg = short_run();
        let (sa, a) = teacher_run(&cfg, &TrainOptions::default());
        let (sb, b) = teacher_run(&cfg, &TrainOptions::default());
        assert_eq!(a.log, b.log);
        assert_eq!(sa, sb);
        assert_eq!((a.steps, a.epochs), (8, 4));
        assert!(a.log.iter().all(|r| r.loss.is_finite()));
        assert_eq!(a.log[0].lr, 0.0);
        assert!((a.log[7].lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn budget_is_exact_when_it_does_not_divide_the_epochs() {
        let cfg = TrainConfig { iterations: Some(7), ..short_run() };
        let (_, out) = teacher_run(&cfg, &TrainOptions::default());
        assert_eq!((out.steps, out.epochs), (7, 4));
        assert_eq!(out.log.last().unwrap().epoch, 3);
    }

    #[test]
    fn single_group_training_runs() {
        let cfg = TrainConfig { groups: 1, ..short_run() };
        let (_, out) = teacher_run(&cfg, &TrainOptions::default());
        assert_eq!(out.log.len(), 8);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let cfg = short_run();
        let (full_store, full) = teacher_run(&cfg, &TrainOptions::default());
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("teacher.json");
        let first = TrainOptions {
            checkpoint: Some(ck.clone()),
            stop_after_epoch: Some(2),
            ..Default::default()
        };
        let (_, head) = teacher_run(&cfg, &first);
        assert_eq!(head.epochs, 2);
        let second = TrainOptions {
            checkpoint: Some(ck),
            resume: true,
            ..Default::default()
        };
        let (store, tail) = teacher_run(&cfg, &second);
        let joined: Vec<&LossRecord> = head.log.iter().chain(&tail.log).collect();
        assert_eq!(joined.len(), full.log.len());
        for (a, b) in joined.iter().zip(&full.log) {
            assert_eq!((a.step, a.epoch), (b.step, b.epoch));
            assert!((a.loss - b.loss).abs() <= 1e-7, "step {}: {} vs {}", a.step, a.loss, b.loss);
        }
        assert_eq!(store, full_store);
    }

    #[test]
    fn pseudo_and_ground_truth_boxes_train_identically() {
        let ds = tiny_data();
        let mut pseudo = ds.clone();
        for i in &mut pseudo.instances {
            i.source = LabelSource::Pseudo;
        }
        let cfg = short_run();
        let run = |d: &DetectionDataset| {
            let (mut store, model) = Student::init(tiny_student(), 2).unwrap();
            let out = train_student(&model, &mut store, d, &cfg, &TrainOptions::default()).unwrap();
            (store, out.log)
        };
        assert_eq!(run(&ds), run(&pseudo));
    }

    #[test]
    fn student_capacity_is_checked_before_training() {
        let ds = tiny_data();
        let cfg = StudentConfig { queries: 1, ..tiny_student() };
        let (mut store, model) = Student::init(cfg, 3).unwrap();
        assert!(train_student(&model, &mut store, &ds, &short_run(), &TrainOptions::default()).is_err());
    }

    #[test]
    fn loss_log_csv_layout() {
        let (_, out) = teacher_run(&short_run(), &TrainOptions::default());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        out.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,epoch,lr,loss,l1,giou"));
        assert_eq!(lines.count(), 8);
    }

    #[test]
    fn median_picks_the_middle() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 3.0);
    }
}
