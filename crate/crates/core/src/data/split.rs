use rand::seq::index;

use super::{Image, LabeledSample};
use crate::error::{Error, Result};
use crate::rng;

/// Seen (base) and held-out (novel) class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl ClassSplit {
    pub fn num_classes(&self) -> usize {
        self.base.len() + self.novel.len()
    }

    pub fn is_base(&self, class: usize) -> bool {
        self.base.contains(&class)
    }

    pub fn is_novel(&self, class: usize) -> bool {
        self.novel.contains(&class)
    }
}

/// First ⌈N/2⌉ classes by index are base, the rest novel.
pub fn base_novel_split(class_names: &[String]) -> Result<ClassSplit> {
    let n = class_names.len();
    if n < 4 {
        return Err(Error::Config(format!("base/novel split needs at least 4 classes, got {n}")));
    }
    let cut = n.div_ceil(2);
    Ok(ClassSplit {
        base: (0..cut).collect(),
        novel: (cut..n).collect(),
    })
}

/// Exactly `k` samples from each base class, drawn without replacement.
pub fn few_shot_sample(train: &[LabeledSample], k: usize, base: &[usize], seed: u64) -> Result<Vec<LabeledSample>> {
    let mut rng = rng::stream(seed, "sampling.few_shot");
    let mut out = Vec::with_capacity(k * base.len());
    for &class in base {
        let members: Vec<usize> = train
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} training samples, {k}-shot needs {k}",
                members.len()
            )));
        }
        for pick in index::sample(&mut rng, members.len(), k) {
            out.push(train[members[pick]].clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolScope {
    /// Base and novel images: the transductive setting.
    Full,
    BaseOnly,
}

/// Images with their labels stripped.
///
/// `source_indices` point back into the training set the pool came from, so
/// protocol tests can audit membership; nothing that trains on the pool
/// reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    images: Vec<Image>,
    source_indices: Vec<usize>,
}

impl UnlabeledPool {
    pub fn from_images(images: Vec<Image>) -> Self {
        let source_indices = (0..images.len()).collect();
        Self { images, source_indices }
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Strips labels, keeping at most `per_class_cap` images of each underlying class
/// (the first ones in training order).
pub fn unlabeled_pool(
    train: &[LabeledSample],
    scope: PoolScope,
    split: &ClassSplit,
    per_class_cap: Option<usize>,
) -> UnlabeledPool {
    let mut taken = vec![0usize; split.num_classes().max(1 + train.iter().map(|s| s.label).max().unwrap_or(0))];
    let mut images = Vec::new();
    let mut source_indices = Vec::new();
    for (i, s) in train.iter().enumerate() {
        if scope == PoolScope::BaseOnly && !split.is_base(s.label) {
            continue;
        }
        if per_class_cap.is_some_and(|cap| taken[s.label] >= cap) {
            continue;
        }
        taken[s.label] += 1;
        images.push(s.image.clone());
        source_indices.push(i);
    }
    UnlabeledPool { images, source_indices }
}
