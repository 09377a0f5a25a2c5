//! Seed-aggregated CSV tables and the student bar plot.
//!
//! Every CSV starts with the run configuration as `# `-prefixed TOML lines,
//! followed by `label,seeds,map_mean,map_std,map50_mean,map50_std,consistency`.
//! Standard deviations are sample deviations, empty for a single seed.

use std::fs;
use std::path::Path;

use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};

use crate::error::{Error, Result};

use super::config::{Axis, ExperimentConfig, StudentArm, TeacherArm};
use super::{RunModel, RunResult};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub seeds: usize,
    pub map_mean: f64,
    pub map_std: Option<f64>,
    pub map50_mean: f64,
    pub map50_std: Option<f64>,
    pub consistency: Option<f64>,
}

const HEADER: &str = "label,seeds,map_mean,map_std,map50_mean,map50_std,consistency";

fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

fn aggregate(label: String, runs: &[&RunResult]) -> ReportRow {
    let (map_mean, map_std) = mean_std(&runs.iter().map(|r| r.map).collect::<Vec<_>>());
    let (map50_mean, map50_std) = mean_std(&runs.iter().map(|r| r.map50).collect::<Vec<_>>());
    let cons: Vec<f64> = runs.iter().filter_map(|r| r.consistency).collect();
    ReportRow {
        label,
        seeds: runs.len(),
        map_mean,
        map_std,
        map50_mean,
        map50_std,
        consistency: (!cons.is_empty()).then(|| mean_std(&cons).0),
    }
}

/// Rows of one ablation table: the baseline first, then each arm on
/// `axis` in order of first appearance.
pub fn ablation_rows(results: &[RunResult], base: &TeacherArm, axis: Axis) -> Vec<ReportRow> {
    let mut arms: Vec<TeacherArm> = vec![*base];
    for r in results {
        if let RunModel::Teacher { arm, axis: a } = &r.model {
            if *a == axis && !arms.contains(arm) {
                arms.push(*arm);
            }
        }
    }
    arms.iter()
        .filter_map(|arm| {
            let runs: Vec<&RunResult> = results
                .iter()
                .filter(|r| matches!(&r.model, RunModel::Teacher { arm: a, .. } if a == arm))
                .collect();
            (!runs.is_empty()).then(|| aggregate(arm.label(axis), &runs))
        })
        .collect()
}

/// Student arms in their fixed order, skipping arms without results.
pub fn student_rows(results: &[RunResult]) -> Vec<ReportRow> {
    StudentArm::ALL
        .iter()
        .filter_map(|arm| {
            let runs: Vec<&RunResult> = results
                .iter()
                .filter(|r| matches!(&r.model, RunModel::Student { arm: a } if a == arm))
                .collect();
            (!runs.is_empty()).then(|| aggregate(arm.label().to_string(), &runs))
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[ReportRow], cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    for line in cfg.to_toml().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{},{:.6},{},{}\n",
            r.label,
            r.seeds,
            r.map_mean,
            fmt_opt(r.map_std),
            r.map50_mean,
            fmt_opt(r.map50_std),
            fmt_opt(r.consistency)
        ));
    }
    out
}

/// Parses a table written by [`rows_to_csv`], skipping the config echo.
pub fn load_report_table(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(HEADER) {
        return Err(Error::Config(format!("{}: not a report table", path.display())));
    }
    let bad = |l: &str| Error::Config(format!("{}: malformed row `{l}`", path.display()));
    let opt = |s: &str, l: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(l))
        }
    };
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad(l));
            }
            Ok(ReportRow {
                label: f[0].to_string(),
                seeds: f[1].parse().map_err(|_| bad(l))?,
                map_mean: f[2].parse().map_err(|_| bad(l))?,
                map_std: opt(f[3], l)?,
                map50_mean: f[4].parse().map_err(|_| bad(l))?,
                map50_std: opt(f[5], l)?,
                consistency: opt(f[6], l)?,
            })
        })
        .collect()
}

/// Writes `table1.csv` (baseline teacher), `table2.csv`..`table5.csv`
/// (expert subsets, layer type, group count, class guidance), `fig6.csv`
/// and `fig6.svg` (student arms) under `root`.
pub fn emit_report(root: &Path, results: &[RunResult], cfg: &ExperimentConfig) -> Result<()> {
    let base = cfg.baseline_arm();
    let baseline: Vec<&RunResult> = results
        .iter()
        .filter(|r| matches!(&r.model, RunModel::Teacher { arm, .. } if *arm == base))
        .collect();
    let mut tables = vec![(
        "table1.csv",
        if baseline.is_empty() {
            Vec::new()
        } else {
            vec![aggregate(format!("Point-to-Box teacher ({:.1}% boxes)", cfg.fraction * 100.0), &baseline)]
        },
    )];
    for (name, axis) in [
        ("table2.csv", Axis::Experts),
        ("table3.csv", Axis::Layer),
        ("table4.csv", Axis::Groups),
        ("table5.csv", Axis::Guidance),
    ] {
        tables.push((name, ablation_rows(results, &base, axis)));
    }
    let students = student_rows(results);
    tables.push(("fig6.csv", students.clone()));
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (name, rows) in &tables {
        let path = root.join(name);
        fs::write(&path, rows_to_csv(rows, cfg)).map_err(|e| Error::io(&path, e))?;
    }
    plot_students(&root.join("fig6.svg"), &students)
}

/// Bars of student mAP@50 with one-deviation whiskers.
pub fn plot_students(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let top = rows
        .iter()
        .map(|r| r.map50_mean + r.map50_std.unwrap_or(0.0))
        .fold(0.0f64, f64::max)
        .max(0.1)
        * 100.0
        * 1.15;
    let n = rows.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption("Student mAP@50", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..n as f64, 0f64..top)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(0)
        .y_desc("mAP@50")
        .draw()
        .map_err(|e| plot_err(&e))?;
    let style = ("sans-serif", 13).into_font().color(&BLACK).pos(Pos::new(HPos::Center, VPos::Bottom));
    chart
        .draw_series(rows.iter().enumerate().map(|(k, r)| {
            Text::new(format!("{} {:.1}", r.label, r.map50_mean * 100.0), (k as f64 + 0.5, r.map50_mean * 100.0 + top * 0.04), style.clone())
        }))
        .map_err(|e| plot_err(&e))?;
    let palette = [BLUE, RED, GREEN, MAGENTA];
    chart
        .draw_series(rows.iter().enumerate().map(|(k, r)| {
            let x = k as f64;
            Rectangle::new([(x + 0.15, 0.0), (x + 0.85, r.map50_mean * 100.0)], palette[k % palette.len()].mix(0.7).filled())
        }))
        .map_err(|e| plot_err(&e))?;
    chart
        .draw_series(rows.iter().enumerate().filter_map(|(k, r)| {
            r.map50_std.map(|s| {
                let x = k as f64 + 0.5;
                PathElement::new(vec![(x, (r.map50_mean - s) * 100.0), (x, (r.map50_mean + s) * 100.0)], BLACK.stroke_width(2))
            })
        }))
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_moe::ExpertMode;

    fn teacher(seed: u64, arm: TeacherArm, axis: Axis, map50: f64) -> RunResult {
        RunResult {
            seed,
            model: RunModel::Teacher { arm, axis },
            map: map50 / 2.0,
            map50,
            consistency: Some(0.9),
            cache_key: String::new(),
        }
    }

    #[test]
    fn tables_aggregate_over_seeds_and_round_trip() {
        let cfg = ExperimentConfig::default();
        let base = cfg.baseline_arm();
        let n1 = base.with("groups=1").unwrap();
        let ck = base.with("experts=ck").unwrap();
        let results = vec![
            teacher(0, base, Axis::Baseline, 0.6),
            teacher(1, base, Axis::Baseline, 0.8),
            teacher(0, n1, Axis::Groups, 0.5),
            teacher(0, ck, Axis::Experts, 0.4),
            RunResult {
                seed: 0,
                model: RunModel::Student { arm: StudentArm::Supervised },
                map: 0.2,
                map50: 0.3,
                consistency: None,
                cache_key: String::new(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &results, &cfg).unwrap();
        let t4 = load_report_table(&dir.path().join("table4.csv")).unwrap();
        assert_eq!(t4.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), vec!["N=8", "N=1"]);
        assert_eq!(t4[0].seeds, 2);
        assert!((t4[0].map50_mean - 0.7).abs() < 1e-6);
        assert!((t4[0].map50_std.unwrap() - 0.02f64.sqrt()).abs() < 1e-6);
        assert_eq!(t4[1].map50_std, None);
        let t2 = load_report_table(&dir.path().join("table2.csv")).unwrap();
        assert_eq!(t2[1].label, "CK");
        assert!(matches!(ck.experts, ExpertMode::Click(_)));
        assert_eq!(load_report_table(&dir.path().join("table3.csv")).unwrap().len(), 1);
        let fig = load_report_table(&dir.path().join("fig6.csv")).unwrap();
        assert_eq!((fig[0].label.as_str(), fig[0].consistency), ("Supervised", None));
        assert!(fs::read_to_string(dir.path().join("fig6.svg")).unwrap().starts_with("<svg"));
        let text = fs::read_to_string(dir.path().join("table1.csv")).unwrap();
        assert!(text.starts_with("# "), "config echo leads every table");
        assert_eq!(load_report_table(&dir.path().join("table1.csv")).unwrap(), vec![t4[0].clone()].into_iter().map(|mut r| {
            r.label = "Point-to-Box teacher (12.5% boxes)".into();
            r
        }).collect::<Vec<_>>());
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "nope\n").unwrap();
        assert!(load_report_table(&p).is_err());
        fs::write(&p, format!("{HEADER}\na,1,x,,0.1,,\n")).unwrap();
        assert!(load_report_table(&p).is_err());
    }
}
