use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::tensor::{join, Module};
use super::{ClipModel, StudentModel};
use crate::error::{Error, Result};

pub const TEACHER: &str = "teacher";
pub const STUDENT: &str = "student";

/// Which parameters an optimization phase may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionStage {
    /// Teacher prompts on both branches.
    TeacherPretrain,
    /// Student visual prompts and projector.
    StudentDistill,
    /// Projector alone.
    ProjectorOnly,
    /// Every student parameter.
    FullFinetune,
    /// Student prompts on both branches, scored against the student's own text tower.
    StudentOwnText,
}

impl PartitionStage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TeacherPretrain => "teacher_pretrain",
            Self::StudentDistill => "student_distill",
            Self::ProjectorOnly => "projector_only",
            Self::FullFinetune => "full_finetune",
            Self::StudentOwnText => "student_own_text",
        }
    }
}

impl fmt::Display for PartitionStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartitionStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "teacher_pretrain" => Self::TeacherPretrain,
            "student_distill" => Self::StudentDistill,
            "projector_only" => Self::ProjectorOnly,
            "full_finetune" => Self::FullFinetune,
            "student_own_text" => Self::StudentOwnText,
            other => return Err(Error::Config(format!("unknown stage {other:?}"))),
        })
    }
}

/// Disjoint trainable and frozen name sets covering every model parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterPartition {
    pub stage: PartitionStage,
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl ParameterPartition {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn all(&self) -> BTreeSet<String> {
        self.trainable.union(&self.frozen).cloned().collect()
    }
}

pub fn partition_parameters(stage: PartitionStage, teacher: &ClipModel, student: &StudentModel) -> ParameterPartition {
    partition_named(stage, &[(TEACHER, teacher), (STUDENT, student)])
}

/// Partition over arbitrary rooted modules; names follow the same prefix rules.
pub fn partition_named(stage: PartitionStage, modules: &[(&str, &dyn Module)]) -> ParameterPartition {
    let mut all = Vec::new();
    for (root, m) in modules {
        m.visit(root, &mut |n, _| all.push(n.to_string()));
    }

    let under = |root: &str, part: &str| join(root, part) + ".";
    let prefixes: Vec<String> = match stage {
        PartitionStage::TeacherPretrain => {
            vec![under(TEACHER, "image_prompts"), under(TEACHER, "text_prompts")]
        }
        PartitionStage::StudentDistill => {
            vec![under(STUDENT, "image_prompts"), under(STUDENT, "projector")]
        }
        PartitionStage::ProjectorOnly => vec![under(STUDENT, "projector")],
        PartitionStage::FullFinetune => vec![format!("{STUDENT}.")],
        PartitionStage::StudentOwnText => {
            vec![under(STUDENT, "image_prompts"), under(STUDENT, "text_prompts")]
        }
    };
    let (trainable, frozen): (Vec<String>, Vec<String>) = all
        .into_iter()
        .partition(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())));
    ParameterPartition {
        stage,
        trainable: trainable.into_iter().collect(),
        frozen: frozen.into_iter().collect(),
    }
}
