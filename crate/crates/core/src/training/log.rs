//! Append-only record of a training run.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Frozen-set checksum taken at the start of this step's epoch.
    pub frozen_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Frozen-set checksum after the epoch's last step.
    pub frozen_checksum: String,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub config: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn new(config: Vec<(String, String)>, seeds: Vec<(String, u64)>) -> Self {
        Self {
            config,
            seeds,
            steps: Vec::new(),
            epochs: Vec::new(),
        }
    }

    pub fn push_step(&mut self, r: StepRecord) {
        self.steps.push(r);
    }

    pub fn push_epoch(&mut self, r: EpochRecord) {
        self.epochs.push(r);
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    /// True when every recorded frozen checksum is the same.
    pub fn frozen_constant(&self) -> bool {
        let mut all = self
            .steps
            .iter()
            .map(|s| &s.frozen_checksum)
            .chain(self.epochs.iter().map(|e| &e.frozen_checksum));
        match all.next() {
            Some(first) => all.all(|c| c == first),
            None => true,
        }
    }

    /// Header block of `# key = value` lines, then one
    /// `step epoch loss lr frozen_checksum` record per line. Floats use
    /// round-trip formatting.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(out, "# {k} = {v}");
        }
        for (k, v) in &self.seeds {
            let _ = writeln!(out, "# seed.{k} = {v}");
        }
        for e in &self.epochs {
            let _ = write!(out, "# epoch {} mean_loss={:?} frozen={}", e.epoch, e.mean_loss, e.frozen_checksum);
            for (k, v) in &e.metrics {
                let _ = write!(out, " {k}={v:?}");
            }
            out.push('\n');
        }
        out.push_str("step epoch loss lr frozen_checksum\n");
        for s in &self.steps {
            let _ = writeln!(out, "{} {} {:?} {:?} {}", s.step, s.epoch, s.loss, s.lr, s.frozen_checksum);
        }
        out
    }

    /// Per-epoch mean losses from the `# epoch` lines of an exported log.
    pub fn parse_epoch_losses(text: &str) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let Some(rest) = line.strip_prefix("# epoch ") else {
                continue;
            };
            let bad = || Error::Data(format!("log line {}: malformed epoch record", i + 1));
            let loss = rest
                .split_whitespace()
                .find_map(|f| f.strip_prefix("mean_loss="))
                .ok_or_else(bad)?;
            out.push(loss.parse().map_err(|_| bad())?);
        }
        Ok(out)
    }

    /// Step records from an exported log; header lines are skipped.
    pub fn parse_steps(text: &str) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        let mut in_body = false;
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') {
                continue;
            }
            if !in_body {
                if line != "step epoch loss lr frozen_checksum" {
                    return Err(Error::Data(format!("log line {}: expected column header", i + 1)));
                }
                in_body = true;
                continue;
            }
            let bad = || Error::Data(format!("log line {}: malformed record", i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad());
            }
            out.push(StepRecord {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
                lr: f[3].parse().map_err(|_| bad())?,
                frozen_checksum: f[4].to_string(),
            });
        }
        Ok(out)
    }
}
