//! Per-run record of which stage ran for which seed, with what outcome and
//! which files it left behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::class_vectors::load_cache;
use crate::codec::write_atomic;
use crate::error::{Error, Result};
use crate::evaluation::{parse_csv, CostCounter};
use crate::model::load_checkpoint;
use crate::training::TrainingLog;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Stage1,
    Cache,
    Stage2,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Stage1, Stage::Cache, Stage::Stage2, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Cache => "cache",
            Stage::Stage2 => "stage2",
            Stage::Eval => "eval",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStatus {
    Done,
    /// Valid artifacts from an earlier invocation were reused.
    Resumed,
    Skipped(String),
    Failed(String),
}

impl StageStatus {
    fn tag(&self) -> &'static str {
        match self {
            StageStatus::Done => "done",
            StageStatus::Resumed => "resumed",
            StageStatus::Skipped(_) => "skipped",
            StageStatus::Failed(_) => "failed",
        }
    }

    fn cause(&self) -> &str {
        match self {
            StageStatus::Skipped(c) | StageStatus::Failed(c) => c,
            _ => "",
        }
    }

    pub fn succeeded(&self) -> bool {
        matches!(self, StageStatus::Done | StageStatus::Resumed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRecord {
    pub seed: u64,
    pub stage: Stage,
    pub status: StageStatus,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub records: Vec<StageRecord>,
    /// Report files relative to the run directory, once written.
    pub reports: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(config_hash: String, run_dir: PathBuf) -> Self {
        Self {
            config_hash,
            run_dir,
            records: Vec::new(),
            reports: Vec::new(),
        }
    }

    pub fn record(&self, seed: u64, stage: Stage) -> Option<&StageRecord> {
        self.records.iter().find(|r| r.seed == seed && r.stage == stage)
    }

    /// Replaces any record for the same seed and stage.
    pub fn upsert(&mut self, r: StageRecord) {
        self.records.retain(|o| !(o.seed == r.seed && o.stage == r.stage));
        self.records.push(r);
    }

    pub fn any_failed(&self) -> bool {
        self.records.iter().any(|r| matches!(r.status, StageStatus::Failed(_)))
    }

    /// Orders records by seed position in `seeds`, then by stage.
    pub fn sort(&mut self, seeds: &[u64]) {
        let pos = |s: u64| seeds.iter().position(|&x| x == s).unwrap_or(usize::MAX);
        self.records.sort_by_key(|r| (pos(r.seed), r.seed, r.stage));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "run_dir = {}", self.run_dir.display());
        for r in &self.reports {
            let _ = writeln!(out, "report = {}", r.display());
        }
        for r in &self.records {
            let artifacts = if r.artifacts.is_empty() {
                "-".to_string()
            } else {
                r.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(
                out,
                "record\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.seed,
                r.stage.name(),
                r.status.tag(),
                r.started,
                r.finished,
                artifacts,
                r.status.cause()
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::new(String::new(), PathBuf::new());
        for (i, line) in text.lines().enumerate() {
            let bad = || Error::Data(format!("manifest line {}: malformed", i + 1));
            if let Some(rest) = line.strip_prefix("record\t") {
                let f: Vec<&str> = rest.splitn(7, '\t').collect();
                if f.len() != 7 {
                    return Err(bad());
                }
                let cause = f[6].to_string();
                let status = match f[2] {
                    "done" => StageStatus::Done,
                    "resumed" => StageStatus::Resumed,
                    "skipped" => StageStatus::Skipped(cause),
                    "failed" => StageStatus::Failed(cause),
                    _ => return Err(bad()),
                };
                m.records.push(StageRecord {
                    seed: f[0].parse().map_err(|_| bad())?,
                    stage: f[1].parse()?,
                    status,
                    started: f[3].parse().map_err(|_| bad())?,
                    finished: f[4].parse().map_err(|_| bad())?,
                    artifacts: if f[5] == "-" {
                        Vec::new()
                    } else {
                        f[5].split(',').map(PathBuf::from).collect()
                    },
                });
            } else if let Some(v) = line.strip_prefix("config_hash = ") {
                m.config_hash = v.to_string();
            } else if let Some(v) = line.strip_prefix("run_dir = ") {
                m.run_dir = PathBuf::from(v);
            } else if let Some(v) = line.strip_prefix("report = ") {
                m.reports.push(PathBuf::from(v));
            } else if !line.trim().is_empty() {
                return Err(bad());
            }
        }
        Ok(m)
    }

    /// Every referenced file must exist and parse in its own format.
    pub fn validate_artifacts(&self) -> Result<()> {
        let files = self
            .records
            .iter()
            .filter(|r| r.status.succeeded())
            .flat_map(|r| r.artifacts.iter())
            .chain(&self.reports);
        for rel in files {
            validate_artifact(&self.run_dir.join(rel))?;
        }
        Ok(())
    }

    /// Validates artifacts, then writes `manifest.txt` in the run directory.
    pub fn write(&self) -> Result<()> {
        self.validate_artifacts()?;
        write_atomic(&self.run_dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map(Some)
    }
}

/// Checks one artifact by extension: checkpoints and caches decode, logs,
/// cost files and CSV reports parse, anything else must be readable text.
pub fn validate_artifact(path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "pkdc" => load_checkpoint(path).map(drop),
        "pkdw" => load_cache(path).map(drop),
        _ => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            match ext {
                "log" => TrainingLog::parse_steps(&text).map(drop),
                "costs" => CostCounter::parse(&text).map(drop),
                "csv" => parse_csv(&text).map(drop),
                _ => Ok(()),
            }
        }
    }
    .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}
