//! One-axis sweeps: the pipeline per axis value, everything else held fixed,
//! seeds shared.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use super::config::{ExperimentConfig, TowerSpec};
use super::manifest::Stage;
use super::pipeline::{run_stages_in, scoring_note, EvalSummary, Experiment};
use crate::codec::write_atomic;
use crate::error::{Error, Result};
use crate::evaluation::{summarize, write_csv, ReportRow, SeedSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    KdForm,
    Method,
    ProjectorLayers,
    Temperature,
    ImagesPerClass,
    TeacherCapacity,
    Epochs,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::KdForm,
        Axis::Method,
        Axis::ProjectorLayers,
        Axis::Temperature,
        Axis::ImagesPerClass,
        Axis::TeacherCapacity,
        Axis::Epochs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::KdForm => "kd_form",
            Axis::Method => "method",
            Axis::ProjectorLayers => "projector_layers",
            Axis::Temperature => "temperature",
            Axis::ImagesPerClass => "images_per_class",
            Axis::TeacherCapacity => "teacher_capacity",
            Axis::Epochs => "epochs",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::KdForm => &["logit_kl", "feature_l1", "feature_mse"],
            Axis::Method => &["prompts_and_projector", "projector_only", "full_finetune", "own_text_encoder"],
            Axis::ProjectorLayers => &["1", "2", "3"],
            Axis::Temperature => &["0.5", "1", "2", "4"],
            Axis::ImagesPerClass => &["1", "4", "16", "64", "all"],
            Axis::TeacherCapacity => &["small", "medium", "large"],
            Axis::Epochs => &["20", "40", "60"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let bad = |what: &str| Error::Config(format!("{}: {value:?} is not {what}", self.name()));
        match self {
            Axis::KdForm => c.set("distill.mode", value)?,
            Axis::Method => match value {
                "own_text_encoder" => {
                    c.set("distill.trainable", "prompts_and_projector")?;
                    c.set("distill.text_branch", "own_text_encoder")?;
                }
                other => {
                    c.set("distill.trainable", other)?;
                    c.set("distill.text_branch", "shared_cache")?;
                }
            },
            Axis::ProjectorLayers => c.set("distill.projector_layers", value)?,
            Axis::Temperature => c.set("stage2.tau", value)?,
            Axis::ImagesPerClass => c.set("stage2.per_class_cap", value)?,
            Axis::TeacherCapacity => {
                c.teacher = TowerSpec::preset(value).ok_or_else(|| bad("small, medium or large"))?;
            }
            Axis::Epochs => c.set("stage2.epochs", value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL.iter().copied().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown ablation axis {s:?}; expected one of {}",
                Axis::ALL.map(Axis::name).join(", ")
            ))
        })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Results for one axis value, one summary per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationEntry {
    pub value: String,
    pub run_dir: PathBuf,
    pub summaries: Vec<EvalSummary>,
}

impl AblationEntry {
    pub fn hm(&self) -> SeedSummary {
        summarize(&self.summaries.iter().map(|s| s.student.hm).collect::<Vec<_>>())
    }

    pub fn teacher_hm(&self) -> SeedSummary {
        summarize(&self.summaries.iter().map(|s| s.teacher.hm).collect::<Vec<_>>())
    }

    fn rows(&self, axis: Axis) -> Vec<ReportRow> {
        self.summaries
            .iter()
            .map(|s| ReportRow {
                variant: format!("{}={}", axis.name(), self.value),
                ..s.row()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub axis: Axis,
    /// In sweep order.
    pub entries: Vec<AblationEntry>,
    pub failures: Vec<(String, String)>,
}

impl AblationReport {
    pub fn entry(&self, value: &str) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.value == value)
    }

    /// Entries by mean HM, highest first; ties keep sweep order.
    pub fn sorted(&self) -> Vec<&AblationEntry> {
        let mut v: Vec<&AblationEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.hm().mean.total_cmp(&a.hm().mean));
        v
    }

    /// Per-seed rows, grouped by value in HM order.
    pub fn rows(&self) -> Vec<ReportRow> {
        self.sorted().into_iter().flat_map(|e| e.rows(self.axis)).collect()
    }

    pub fn to_csv(&self) -> String {
        write_csv(&self.rows())
    }

    /// Side-by-side table of per-value means, sorted by HM.
    pub fn to_table(&self, scoring: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ablation: {}", self.axis);
        let _ = writeln!(out, "scoring: {scoring}");
        let width = self.entries.iter().map(|e| e.value.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(
            out,
            "{:<width$} {:>15} {:>15} {:>15} {:>15} {:>15}",
            "value", "base", "novel", "hm", "agreement", "teacher_hm"
        );
        for e in self.sorted() {
            let m = |f: fn(&EvalSummary) -> f64| summarize(&e.summaries.iter().map(f).collect::<Vec<_>>());
            let cell = |s: SeedSummary| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std);
            let _ = writeln!(
                out,
                "{:<width$} {:>15} {:>15} {:>15} {:>15} {:>15}",
                e.value,
                cell(m(|s| s.student.base)),
                cell(m(|s| s.student.novel)),
                cell(e.hm()),
                cell(m(|s| s.agreement)),
                cell(e.teacher_hm())
            );
        }
        for (v, cause) in &self.failures {
            let _ = writeln!(out, "failed: {v}: {cause}");
        }
        out
    }
}

/// Runs the full pipeline for each value of `axis` (the axis defaults when
/// `values` is `None`), then writes `<root>/ablations/<axis>-<hash>.{csv,txt}`.
/// Valid artifacts are always reused, so repeated sweeps only run what is missing.
pub fn run_ablation(base: &ExperimentConfig, axis: Axis, values: Option<Vec<String>>) -> Result<AblationReport> {
    base.validate()?;
    let values = values.unwrap_or_else(|| axis.default_values());
    if values.is_empty() {
        return Err(Error::Config(format!("{axis}: no values to sweep")));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut report = AblationReport {
        axis,
        entries: Vec::new(),
        failures: Vec::new(),
    };
    for (value, cfg) in values.iter().zip(configs) {
        log::info!("ablation {axis}={value}");
        let exp = Experiment::new(cfg)?;
        let manifest = run_stages_in(&exp, &Stage::ALL, true)?;
        if let Some(r) = manifest.records.iter().find(|r| !r.status.succeeded()) {
            report.failures.push((value.clone(), format!("seed {} {}: {:?}", r.seed, r.stage.name(), r.status)));
            continue;
        }
        let summaries = exp
            .config
            .seeds
            .iter()
            .map(|&s| exp.load_eval(s))
            .collect::<Result<Vec<_>>>()?;
        report.entries.push(AblationEntry {
            value: value.clone(),
            run_dir: exp.run_dir.clone(),
            summaries,
        });
    }
    let dir = base.effective_root().join("ablations");
    let stem = format!("{axis}-{}", &base.hash()[..16]);
    write_atomic(&dir.join(format!("{stem}.csv")), report.to_csv().as_bytes())?;
    write_atomic(
        &dir.join(format!("{stem}.txt")),
        report.to_table(scoring_note(base.table_mode)).as_bytes(),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_parse_and_reject_unknown() {
        for a in Axis::ALL {
            assert_eq!(a.name().parse::<Axis>().unwrap(), a);
        }
        assert!(matches!("depth".parse::<Axis>(), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_structure() {
        assert_eq!(Axis::KdForm.default_values(), ["logit_kl", "feature_l1", "feature_mse"]);
        assert_eq!(Axis::ImagesPerClass.default_values().len(), 5);
    }

    #[test]
    fn values_change_only_their_axis() {
        let base = ExperimentConfig::default();
        for axis in Axis::ALL {
            let before = base.entries();
            for v in axis.default_values() {
                let c = axis.apply(&base, &v).unwrap();
                let changed: Vec<&str> = before
                    .iter()
                    .zip(c.entries().iter())
                    .filter(|(a, b)| a != b)
                    .map(|(a, _)| a.0.as_str())
                    .collect();
                let allowed = |k: &str| match axis {
                    Axis::KdForm => k == "distill.mode",
                    Axis::Method => k == "distill.trainable" || k == "distill.text_branch",
                    Axis::ProjectorLayers => k == "distill.projector_layers",
                    Axis::Temperature => k == "stage2.tau",
                    Axis::ImagesPerClass => k == "stage2.per_class_cap",
                    Axis::TeacherCapacity => k.starts_with("teacher."),
                    Axis::Epochs => k == "stage2.epochs",
                };
                assert!(changed.iter().all(|k| allowed(k)), "{axis}={v}: {changed:?}");
                assert_eq!(c.seeds, base.seeds);
            }
        }
        assert!(Axis::TeacherCapacity.apply(&base, "huge").is_err());
        assert!(Axis::Temperature.apply(&base, "0").is_err());
    }
}
