//! Command-line surface of the weakly semi-supervised detection pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dexter::click_moe::ExpertMode;
use dexter::datasets::export_coco;
use dexter::pipeline::{
    ablation_arms, merge_datasets, parse_switch, prepare, run_ablations, run_wssod_pipeline, write_report, Axis, ExperimentConfig, RunModel, RunResult, SeedRun,
    StudentArm,
};

#[derive(Parser, Debug)]
#[command(name = "dexter", version, about = "Point-to-Box teacher, pseudo-labeling and student training")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override keys of the configuration file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Flat TOML key-value file; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Share of training images that keep their boxes.
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// Point groups per instance for the baseline teacher.
    #[arg(long, global = true)]
    groups: Option<usize>,
    /// click, ffn, moe3, moe5, moe8, or a CLICK subset such as ck+class.
    #[arg(long, global = true)]
    expert_mode: Option<ExpertMode>,
    /// on or off.
    #[arg(long, global = true, value_parser = parse_on_off)]
    class_guided: Option<bool>,
    /// Output directory holding the cache, results and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn parse_on_off(v: &str) -> std::result::Result<bool, String> {
    parse_switch(v).map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train and test sets as COCO JSON plus PNG images.
    GenerateData,
    /// Train the baseline teacher of every seed.
    TrainTeacher,
    /// Pseudo-label the point-only split and export it as COCO JSON.
    PseudoLabel {
        /// pseudo (trained teacher) or oracle (hidden ground truth).
        #[arg(long, default_value = "pseudo")]
        source: StudentArm,
    },
    /// Train and evaluate one student arm for every seed.
    TrainStudent {
        /// supervised, pseudo, oracle or full.
        #[arg(long, default_value = "pseudo")]
        arm: StudentArm,
    },
    /// Evaluate the baseline teacher as a Point-to-Box regressor.
    Evaluate,
    /// Train and evaluate every teacher of the ablation grid.
    Ablate {
        /// Replaces the configured toggles, e.g. `groups=1,experts=ck`.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
    },
    /// Rewrite the report tables from the recorded results.
    Report,
    /// Every stage for every seed, then the report.
    Run,
    /// Print the effective configuration.
    Config,
}

impl Overrides {
    fn apply(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(f) = self.fraction {
            cfg.fraction = f;
        }
        if let Some(n) = self.groups {
            cfg.groups = n;
        }
        if let Some(m) = self.expert_mode {
            cfg.expert_mode = m;
        }
        if let Some(c) = self.class_guided {
            cfg.class_guided = c;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_result(r: &RunResult) {
    let consistency = r.consistency.map(|c| format!(" consistency {c:.4}")).unwrap_or_default();
    let model = match &r.model {
        RunModel::Teacher { arm, .. } => format!("teacher {arm}"),
        RunModel::Student { arm } => format!("student {}", arm.slug()),
    };
    println!("seed {} {model}: mAP {:.4} mAP@50 {:.4}{consistency} [{}]", r.seed, r.map, r.map50, r.cache_key);
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = cli.overrides.apply()?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::GenerateData => {
            let (ws, bench) = prepare(&cfg)?;
            for (name, ds) in [("train", &bench.train), ("test", &bench.test)] {
                let path = ws.root.join("data").join(name).join("annotations.json");
                export_coco(ds, &path)?;
                println!("{name}: {} images, {} instances -> {}", ds.images.len(), ds.instances.len(), path.display());
            }
        }
        Command::TrainTeacher => {
            let (ws, bench) = prepare(&cfg)?;
            for &seed in &cfg.seeds {
                let (_, key) = SeedRun::new(&ws, &cfg, &bench, seed)?.teacher(&cfg.baseline_arm())?;
                println!("seed {seed}: teacher {}", ws.root.join("cache").join(format!("teacher-{key}")).display());
            }
        }
        Command::Evaluate => {
            let (ws, bench) = prepare(&cfg)?;
            for &seed in &cfg.seeds {
                print_result(&SeedRun::new(&ws, &cfg, &bench, seed)?.evaluate_teacher(&cfg.baseline_arm(), Axis::Baseline)?);
            }
            write_report(&ws, &cfg)?;
        }
        Command::PseudoLabel { source } => {
            if !matches!(source, StudentArm::Pseudo | StudentArm::Oracle) {
                bail!("pseudo labels come from `pseudo` or `oracle`, not `{}`", source.slug());
            }
            let (ws, bench) = prepare(&cfg)?;
            for &seed in &cfg.seeds {
                let run = SeedRun::new(&ws, &cfg, &bench, seed)?;
                let Some(labels) = run.pseudo_labels(source)? else {
                    println!("seed {seed}: no point-only images at fraction {}", cfg.fraction);
                    continue;
                };
                let merged = merge_datasets(&[&run.boxed, &labels])?;
                let path = ws.root.join("pseudo").join(format!("{}-seed{seed}", source.slug())).join("annotations.json");
                export_coco(&merged, &path)?;
                println!("seed {seed}: {} pseudo boxes -> {}", labels.instances.len(), path.display());
            }
        }
        Command::TrainStudent { arm } => {
            let (ws, bench) = prepare(&cfg)?;
            for &seed in &cfg.seeds {
                match SeedRun::new(&ws, &cfg, &bench, seed)?.student(arm)? {
                    Some(r) => print_result(&r),
                    None => println!("seed {seed}: arm `{}` is empty for this split", arm.slug()),
                }
            }
            write_report(&ws, &cfg)?;
        }
        Command::Ablate { arms } => {
            if let Some(a) = arms {
                cfg.ablations = a;
                cfg.validate()?;
            }
            for (arm, axis) in ablation_arms(&cfg)? {
                log::info!("arm {arm} ({axis:?})");
            }
            for r in run_ablations(&cfg)? {
                print_result(&r);
            }
        }
        Command::Report => {
            let (ws, _) = prepare(&cfg)?;
            write_report(&ws, &cfg)?;
            println!("tables written to {}", ws.root.display());
        }
        Command::Run => {
            let report = run_wssod_pipeline(&cfg)?;
            for r in &report.results {
                print_result(r);
            }
            for n in &report.notes {
                println!("note: {n}");
            }
        }
    }
    Ok(())
}
