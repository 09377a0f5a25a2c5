//! Experiment configuration: a flat TOML key-value file plus overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::click_moe::{ExpertMode, ExpertSet};
use crate::datasets::SyntheticConfig;
use crate::error::{Error, Result};
use crate::network::{StudentConfig, TeacherConfig};
use crate::train_engine::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// COCO annotation files; both set switches off the synthetic benchmark.
    pub coco_train: Option<PathBuf>,
    pub coco_test: Option<PathBuf>,
    pub train_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub overlap_rate: f64,
    pub noise: f64,
    pub data_seed: u64,

    /// Share of training images that keep their boxes.
    pub fraction: f64,
    /// Each seed draws its own split and initialization.
    pub seeds: Vec<u64>,

    pub groups: usize,
    pub expert_mode: ExpertMode,
    pub class_guided: bool,
    pub dim: usize,
    pub decoder_stages: usize,
    pub student_queries: usize,

    pub lr: f64,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Schedule segments and the segment where the rate drops.
    pub schedule_epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Training budgets in passes over the respective training set.
    pub teacher_epochs: usize,
    pub student_epochs: usize,

    /// Teacher arms evaluated next to the baseline, e.g. `groups=1`,
    /// `experts=ck`, `experts=ffn`, `experts=moe3`, `class_guided=off`.
    pub ablations: Vec<String>,
    /// Also train a student on pseudo boxes from a ground-truth oracle.
    pub oracle_control: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    /// Desk-scale preset.
    fn default() -> Self {
        Self {
            coco_train: None,
            coco_test: None,
            train_images: 800,
            test_images: 200,
            image_size: 128,
            min_instances: 2,
            max_instances: 5,
            overlap_rate: 0.3,
            noise: 12.0,
            data_seed: 7,
            fraction: 0.125,
            seeds: vec![0, 1, 2],
            groups: 8,
            expert_mode: ExpertMode::default(),
            class_guided: true,
            dim: 64,
            decoder_stages: 3,
            student_queries: 20,
            lr: 1e-3,
            warmup_iters: 50,
            batch_size: 2,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            schedule_epochs: 24,
            decay_epoch: 20,
            decay_factor: 0.1,
            teacher_epochs: 30,
            student_epochs: 30,
            ablations: vec!["groups=1".into(), "experts=ck".into(), "class_guided=off".into()],
            oracle_control: true,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Optimizer values of the original full-scale recipe; budgets count
    /// whole epochs of the training set.
    pub fn full_scale() -> Self {
        Self {
            lr: 1e-4,
            warmup_iters: 500,
            teacher_epochs: 24,
            student_epochs: 24,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.coco_train.is_some() != self.coco_test.is_some() {
            return Err(Error::Config("coco_train and coco_test must be given together".into()));
        }
        if self.teacher_epochs == 0 || self.student_epochs == 0 {
            return Err(Error::Config("training budgets must be positive".into()));
        }
        for a in &self.ablations {
            self.baseline_arm().with(a)?;
        }
        self.teacher_config(5, &self.baseline_arm()).validate()?;
        self.student_config(5).validate()?;
        self.train_config(0, 1, 1, self.teacher_epochs).validate()
    }

    pub fn synthetic(&self, num_images: usize, seed: u64, first_id: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_images,
            image_size: self.image_size,
            instances_per_image: (self.min_instances, self.max_instances),
            overlap_rate: self.overlap_rate,
            noise: self.noise,
            seed,
            first_id,
            ..SyntheticConfig::default()
        }
    }

    pub fn baseline_arm(&self) -> TeacherArm {
        TeacherArm {
            groups: self.groups,
            experts: self.expert_mode,
            class_guided: self.class_guided,
        }
    }

    pub fn teacher_config(&self, num_classes: usize, arm: &TeacherArm) -> TeacherConfig {
        TeacherConfig {
            dim: self.dim,
            decoder_stages: self.decoder_stages,
            experts: arm.experts,
            class_guided: arm.class_guided,
            ..TeacherConfig::desk(num_classes)
        }
    }

    pub fn student_config(&self, num_classes: usize) -> StudentConfig {
        StudentConfig {
            dim: self.dim,
            decoder_stages: self.decoder_stages,
            queries: self.student_queries,
            ..StudentConfig::desk(num_classes)
        }
    }

    /// Budget of `epochs` passes over `items` training images.
    pub fn train_config(&self, seed: u64, groups: usize, items: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup_iters: self.warmup_iters,
            epochs: self.schedule_epochs,
            decay_epoch: self.decay_epoch,
            decay_factor: self.decay_factor,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            seed,
            groups,
            iterations: Some(epochs * items.div_ceil(self.batch_size)),
        }
    }
}

/// One teacher variant of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TeacherArm {
    pub groups: usize,
    pub experts: ExpertMode,
    pub class_guided: bool,
}

/// Which comparison table an arm belongs to, relative to the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    Baseline,
    /// Subsets of the three CLICK experts.
    Experts,
    /// CLICK against a plain FFN or a sparse mixture.
    Layer,
    Groups,
    Guidance,
}

impl TeacherArm {
    /// Applies one `key=value` toggle.
    pub fn with(mut self, toggle: &str) -> Result<Self> {
        let (k, v) = toggle
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation `{toggle}` is not key=value")))?;
        match k.trim() {
            "groups" | "n" => {
                self.groups = v
                    .trim()
                    .parse()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::Config(format!("bad group count `{v}`")))?
            }
            "experts" | "expert_mode" => self.experts = v.trim().parse()?,
            "class_guided" => self.class_guided = parse_switch(v)?,
            other => return Err(Error::Config(format!("unknown ablation key `{other}`"))),
        }
        Ok(self)
    }

    /// The axis along which this arm departs from `base`; arms changing
    /// several fields at once are rejected.
    pub fn axis(&self, base: &TeacherArm) -> Result<Axis> {
        let diffs = [self.groups != base.groups, self.experts != base.experts, self.class_guided != base.class_guided];
        match diffs {
            [false, false, false] => Ok(Axis::Baseline),
            [true, false, false] => Ok(Axis::Groups),
            [false, false, true] => Ok(Axis::Guidance),
            [false, true, false] => Ok(match (self.experts, base.experts) {
                (ExpertMode::Click(_), ExpertMode::Click(_)) => Axis::Experts,
                _ => Axis::Layer,
            }),
            _ => Err(Error::Config(format!("arm {self} changes more than one component"))),
        }
    }

    /// Row label within the table of `axis`.
    pub fn label(&self, axis: Axis) -> String {
        match axis {
            Axis::Groups => format!("N={}", self.groups),
            Axis::Guidance => if self.class_guided { "class-guided MSDA" } else { "MSDA" }.to_string(),
            Axis::Experts => match self.experts {
                ExpertMode::Click(set) => expert_set_label(set),
                other => other.to_string(),
            },
            Axis::Layer => match self.experts {
                ExpertMode::Click(_) => "CLICK-MoE".into(),
                ExpertMode::Ffn => "FFN".into(),
                ExpertMode::Sparse(e) => format!("MoE (E={e})"),
            },
            Axis::Baseline => self.to_string(),
        }
    }
}

fn expert_set_label(set: ExpertSet) -> String {
    let mut parts = Vec::new();
    if set.common {
        parts.push("CK");
    }
    if set.class {
        parts.push("Class");
    }
    if set.instance {
        parts.push("Instance");
    }
    parts.join("+")
}

impl fmt::Display for TeacherArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "groups={} experts={} class_guided={}",
            self.groups,
            self.experts,
            if self.class_guided { "on" } else { "off" }
        )
    }
}

pub fn parse_switch(v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("expected on/off, got `{other}`"))),
    }
}

/// Student training sets compared by the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StudentArm {
    /// Box-labeled images only.
    Supervised,
    /// Box-labeled images plus teacher pseudo boxes.
    Pseudo,
    /// Box-labeled images plus oracle pseudo boxes.
    Oracle,
    /// Every training image with its ground-truth boxes.
    FullySupervised,
}

impl StudentArm {
    pub const ALL: [StudentArm; 4] = [StudentArm::Supervised, StudentArm::Pseudo, StudentArm::Oracle, StudentArm::FullySupervised];

    pub fn label(self) -> &'static str {
        match self {
            StudentArm::Supervised => "Supervised",
            StudentArm::Pseudo => "Teacher pseudo-labels",
            StudentArm::Oracle => "Oracle pseudo-labels",
            StudentArm::FullySupervised => "Fully supervised",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            StudentArm::Supervised => "supervised",
            StudentArm::Pseudo => "pseudo",
            StudentArm::Oracle => "oracle",
            StudentArm::FullySupervised => "full",
        }
    }
}

impl FromStr for StudentArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StudentArm::ALL
            .into_iter()
            .find(|a| a.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown student arm `{s}`")))
    }
}
