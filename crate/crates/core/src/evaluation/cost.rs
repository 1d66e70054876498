//! Encoder forward-pass accounting.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Stage1,
    Cache,
    Stage2,
    Inference,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Stage1, Phase::Cache, Phase::Stage2, Phase::Inference];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Stage1 => "stage1",
            Phase::Cache => "cache",
            Phase::Stage2 => "stage2",
            Phase::Inference => "inference",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Counts for one phase. One forward = one input (image or caption) encoded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseCounts {
    pub image_forwards_teacher: u64,
    pub image_forwards_student: u64,
    pub text_forwards: u64,
}

impl PhaseCounts {
    fn merge(&mut self, other: &PhaseCounts) {
        self.image_forwards_teacher += other.image_forwards_teacher;
        self.image_forwards_student += other.image_forwards_student;
        self.text_forwards += other.text_forwards;
    }
}

/// Monotone per-phase counters. There is no way to decrement.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostCounter {
    phases: [PhaseCounts; 4],
}

impl CostCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn teacher_images(&mut self, phase: Phase, n: usize) {
        self.phases[phase.index()].image_forwards_teacher += n as u64;
    }

    pub fn student_images(&mut self, phase: Phase, n: usize) {
        self.phases[phase.index()].image_forwards_student += n as u64;
    }

    pub fn texts(&mut self, phase: Phase, n: usize) {
        self.phases[phase.index()].text_forwards += n as u64;
    }

    pub fn get(&self, phase: Phase) -> PhaseCounts {
        self.phases[phase.index()]
    }

    pub fn total(&self) -> PhaseCounts {
        let mut t = PhaseCounts::default();
        for p in &self.phases {
            t.merge(p);
        }
        t
    }

    /// Sums counters from independent shards.
    pub fn merge(&mut self, other: &CostCounter) {
        for (a, b) in self.phases.iter_mut().zip(&other.phases) {
            a.merge(b);
        }
    }

    /// One line per phase: `<phase> <teacher images> <student images> <texts>`.
    pub fn to_text(&self) -> String {
        Phase::ALL
            .iter()
            .map(|&p| {
                let c = self.get(p);
                format!(
                    "{} {} {} {}\n",
                    p.name(),
                    c.image_forwards_teacher,
                    c.image_forwards_student,
                    c.text_forwards
                )
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Data(format!("cost line {}: malformed", i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let phase = Phase::ALL.iter().copied().find(|p| p.name() == f[0]).ok_or_else(bad)?;
            let n = |s: &str| s.parse::<u64>().map_err(|_| bad());
            let slot = &mut out.phases[phase.index()];
            slot.merge(&PhaseCounts {
                image_forwards_teacher: n(f[1])?,
                image_forwards_student: n(f[2])?,
                text_forwards: n(f[3])?,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub phases: Vec<(Phase, PhaseCounts)>,
    /// Text forwards per class during caching; 1.0 when the cache was built once.
    pub cache_text_per_class: f64,
    /// Student image forwards per inference text forward; infinite when no text was encoded.
    pub inference_image_per_text: f64,
    pub violations: Vec<String>,
}

impl CostReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Summarizes `counter` and checks the reuse contract: no text encoding in
/// Stage II or inference, exactly one text forward per class when caching.
pub fn cost_report(counter: &CostCounter, num_classes: usize) -> CostReport {
    let mut violations = Vec::new();
    for phase in [Phase::Stage2, Phase::Inference] {
        let t = counter.get(phase).text_forwards;
        if t != 0 {
            violations.push(format!("{phase} performed {t} text forwards"));
        }
    }
    let cache = counter.get(Phase::Cache).text_forwards;
    if cache != num_classes as u64 {
        violations.push(format!("cache performed {cache} text forwards for {num_classes} classes"));
    }
    let inf = counter.get(Phase::Inference);
    CostReport {
        phases: Phase::ALL.iter().map(|&p| (p, counter.get(p))).collect(),
        cache_text_per_class: if num_classes == 0 {
            0.0
        } else {
            cache as f64 / num_classes as f64
        },
        inference_image_per_text: if inf.text_forwards == 0 {
            f64::INFINITY
        } else {
            inf.image_forwards_student as f64 / inf.text_forwards as f64
        },
        violations,
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>14} {:>14} {:>8}", "phase", "teacher_image", "student_image", "text")?;
        for (p, c) in &self.phases {
            writeln!(
                f,
                "{:<10} {:>14} {:>14} {:>8}",
                p.name(),
                c.image_forwards_teacher,
                c.image_forwards_student,
                c.text_forwards
            )?;
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_accumulate_per_phase() {
        let mut c = CostCounter::new();
        c.texts(Phase::Cache, 10);
        c.teacher_images(Phase::Stage2, 8);
        c.student_images(Phase::Stage2, 8);
        c.student_images(Phase::Inference, 50);
        let r = cost_report(&c, 10);
        assert!(r.is_clean(), "{:?}", r.violations);
        assert_eq!(r.cache_text_per_class, 1.0);
        assert_eq!(c.total().image_forwards_student, 58);
    }

    #[test]
    fn text_in_stage_two_is_flagged() {
        let mut c = CostCounter::new();
        c.texts(Phase::Cache, 4);
        c.texts(Phase::Stage2, 1);
        let r = cost_report(&c, 4);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].contains("stage2"));
    }

    #[test]
    fn text_form_round_trips() {
        let mut c = CostCounter::new();
        c.texts(Phase::Cache, 10);
        c.teacher_images(Phase::Stage2, 7);
        c.student_images(Phase::Inference, 3);
        assert_eq!(CostCounter::parse(&c.to_text()).unwrap(), c);
        assert!(CostCounter::parse("stage9 1 2 3").is_err());
        assert!(CostCounter::parse("cache 1 2").is_err());
    }

    #[test]
    fn merge_sums() {
        let mut a = CostCounter::new();
        a.texts(Phase::Stage1, 2);
        let mut b = CostCounter::new();
        b.texts(Phase::Stage1, 3);
        a.merge(&b);
        assert_eq!(a.get(Phase::Stage1).text_forwards, 5);
    }
}
