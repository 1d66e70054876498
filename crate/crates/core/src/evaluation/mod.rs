//! Accuracy, agreement and cost metrics, and the report formats built on them.

pub mod cost;
pub mod report;

pub use cost::{cost_report, CostCounter, CostReport, Phase, PhaseCounts};
pub use report::{format_table, parse_csv, summarize, write_csv, ReportRow, SeedSummary, CSV_HEADER};

use std::fmt;
use std::str::FromStr;

use crate::autograd::Graph;
use crate::class_vectors::{validate_cache, ClassVectorTable};
use crate::data::{ClassSplit, Image, LabeledSample};
use crate::error::{Error, Result};
use crate::math::{harmonic_mean, l2_normalize, similarity_logits, FeatureVector, NORM_EPS};
use crate::model::encoder::Binder;
use crate::model::projector::projector_forward;
use crate::model::{encode_images, ClipModel, EncoderParams, ProjectorParams, PromptSet, StudentModel};

const EVAL_BATCH: usize = 64;

/// Produces one feature per image, in order.
pub trait Scorer {
    fn features(&mut self, images: &[&Image]) -> Result<Vec<FeatureVector>>;
}

impl<F: FnMut(&Image) -> Result<FeatureVector>> Scorer for F {
    fn features(&mut self, images: &[&Image]) -> Result<Vec<FeatureVector>> {
        images.iter().map(|i| self(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Teacher,
    Student,
}

/// Image tower, visual prompts and an optional projector. Holds no text
/// encoder, so scoring through it cannot encode text.
pub struct ImageScorer<'a> {
    image: &'a EncoderParams,
    prompts: Option<&'a PromptSet>,
    projector: Option<&'a ProjectorParams>,
    counter: &'a mut CostCounter,
    phase: Phase,
    role: Role,
}

impl<'a> ImageScorer<'a> {
    /// The deployed student: prompted image tower followed by the projector.
    pub fn student(student: &'a StudentModel, counter: &'a mut CostCounter, phase: Phase) -> Self {
        Self {
            image: &student.clip.image,
            prompts: Some(&student.clip.image_prompts),
            projector: Some(&student.projector),
            counter,
            phase,
            role: Role::Student,
        }
    }

    /// Student image features in its own embedding space, without the projector.
    pub fn student_native(student: &'a StudentModel, counter: &'a mut CostCounter, phase: Phase) -> Self {
        Self {
            projector: None,
            ..Self::student(student, counter, phase)
        }
    }

    pub fn teacher(teacher: &'a ClipModel, counter: &'a mut CostCounter, phase: Phase) -> Self {
        Self {
            image: &teacher.image,
            prompts: Some(&teacher.image_prompts),
            projector: None,
            counter,
            phase,
            role: Role::Teacher,
        }
    }
}

impl Scorer for ImageScorer<'_> {
    fn features(&mut self, images: &[&Image]) -> Result<Vec<FeatureVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let mut feats = encode_images(self.image, self.prompts, chunk)?;
            if let Some(p) = self.projector {
                feats = project_rows(p, feats)?;
            }
            match self.role {
                Role::Teacher => self.counter.teacher_images(self.phase, chunk.len()),
                Role::Student => self.counter.student_images(self.phase, chunk.len()),
            }
            for r in 0..feats.rows {
                out.push(FeatureVector::new(feats.row(r).to_vec())?);
            }
        }
        Ok(out)
    }
}

fn project_rows(p: &ProjectorParams, x: crate::autograd::Matrix) -> Result<crate::autograd::Matrix> {
    if x.cols != p.input_dim() {
        return Err(Error::Shape(format!("projector expects {} inputs, got {}", p.input_dim(), x.cols)));
    }
    let mut g = Graph::new();
    let never = |_: &str| false;
    let mut binder = Binder::new(&mut g, &never);
    let layers = p.bind("", &mut binder);
    let x = g.constant(x);
    let y = projector_forward(&mut g, &layers, x);
    Ok(g.value(y).clone())
}

/// Predicted class for each feature: argmax of normalized similarity, lowest index on ties.
pub fn predict(features: &[FeatureVector], table: &ClassVectorTable) -> Result<Vec<usize>> {
    features
        .iter()
        .map(|f| Ok(similarity_logits(&l2_normalize(f, NORM_EPS)?, table)?.argmax()))
        .collect()
}

fn predict_images(scorer: &mut dyn Scorer, images: &[&Image], table: &ClassVectorTable) -> Result<Vec<usize>> {
    predict(&scorer.features(images)?, table)
}

/// Fraction of `samples` whose predicted class equals the label.
pub fn top1_accuracy(scorer: &mut dyn Scorer, samples: &[LabeledSample], table: &ClassVectorTable) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("accuracy over an empty sample set".into()));
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let pred = predict_images(scorer, &images, table)?;
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// How novel-class (and base-class) test images are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableMode {
    /// Every sample against all N classes.
    #[default]
    Full,
    /// Base samples against base classes only, novel against novel only.
    Split,
}

impl TableMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TableMode::Full => "full",
            TableMode::Split => "split",
        }
    }
}

impl FromStr for TableMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TableMode::Full),
            "split" => Ok(TableMode::Split),
            other => Err(Error::Config(format!("unknown table mode {other:?}"))),
        }
    }
}

impl fmt::Display for TableMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub per_class: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub mode: TableMode,
}

/// HM with the zero limit: any zero accuracy gives zero.
pub fn hm_or_zero(base: f64, novel: f64) -> f64 {
    if base <= 0.0 || novel <= 0.0 {
        0.0
    } else {
        harmonic_mean(base, novel).expect("both positive")
    }
}

/// Base and novel accuracy over `test`, each filtered by true-class membership.
pub fn evaluate_base_to_novel(
    scorer: &mut dyn Scorer,
    table: &ClassVectorTable,
    test: &[LabeledSample],
    split: &ClassSplit,
    class_names: &[String],
    mode: TableMode,
    seed: u64,
) -> Result<EvalReport> {
    validate_cache(table, class_names, None).into_result()?;
    if split.num_classes() != table.num_classes() {
        return Err(Error::Validation(format!(
            "split covers {} classes, table {}",
            split.num_classes(),
            table.num_classes()
        )));
    }
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let feats = scorer.features(&images)?;
    let pred: Vec<usize> = match mode {
        TableMode::Full => predict(&feats, table)?,
        TableMode::Split => {
            let base = table.subset(&split.base)?;
            let novel = table.subset(&split.novel)?;
            feats
                .iter()
                .zip(test)
                .map(|(f, s)| {
                    let (t, classes) = if split.is_base(s.label) {
                        (&base, &split.base)
                    } else {
                        (&novel, &split.novel)
                    };
                    Ok(classes[predict(std::slice::from_ref(f), t)?[0]])
                })
                .collect::<Result<_>>()?
        }
    };

    let n = table.num_classes();
    let mut hits = vec![0usize; n];
    let mut totals = vec![0usize; n];
    for (p, s) in pred.iter().zip(test) {
        totals[s.label] += 1;
        if *p == s.label {
            hits[s.label] += 1;
        }
    }
    let acc_over = |classes: &[usize]| -> Result<f64> {
        let t: usize = classes.iter().map(|&k| totals[k]).sum();
        if t == 0 {
            return Err(Error::Data("no test samples for a class group".into()));
        }
        Ok(classes.iter().map(|&k| hits[k]).sum::<usize>() as f64 / t as f64)
    };
    let base_acc = acc_over(&split.base)?;
    let novel_acc = acc_over(&split.novel)?;
    Ok(EvalReport {
        base_acc,
        novel_acc,
        hm: hm_or_zero(base_acc, novel_acc),
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        samples: test.len(),
        seed,
        mode,
    })
}

/// Fraction of images on which both scorers pick the same class.
pub fn agreement_rate(
    student: &mut dyn Scorer,
    teacher: &mut dyn Scorer,
    images: &[&Image],
    table: &ClassVectorTable,
) -> Result<f64> {
    agreement_between(student, table, teacher, table, images)
}

/// Agreement when the two scorers use different tables over the same classes.
pub fn agreement_between(
    student: &mut dyn Scorer,
    student_table: &ClassVectorTable,
    teacher: &mut dyn Scorer,
    teacher_table: &ClassVectorTable,
    images: &[&Image],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Data("agreement over no images".into()));
    }
    if student_table.num_classes() != teacher_table.num_classes() {
        return Err(Error::Shape("tables cover different class counts".into()));
    }
    let s = predict_images(student, images, student_table)?;
    let t = predict_images(teacher, images, teacher_table)?;
    Ok(s.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize) -> ClassVectorTable {
        let mut rows = vec![0.0f32; n * n];
        for i in 0..n {
            rows[i * n + i] = 1.0;
        }
        ClassVectorTable::new((0..n).map(|i| format!("class_{i}")).collect(), n, rows, [0; 32]).unwrap()
    }

    fn sample(label: usize, marker: f32) -> LabeledSample {
        LabeledSample {
            image: Image::new(1, vec![marker]).unwrap(),
            label,
        }
    }

    /// Reads the class index back out of the single pixel.
    fn oracle(n: usize) -> impl FnMut(&Image) -> Result<FeatureVector> {
        move |img: &Image| {
            let mut v = vec![0.0; n];
            v[img.pixels()[0] as usize] = 1.0;
            FeatureVector::new(v)
        }
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let t = table(4);
        let samples: Vec<_> = (0..4).map(|k| sample(k, k as f32)).collect();
        assert_eq!(top1_accuracy(&mut oracle(4), &samples, &t).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&mut oracle(4), &[sample(2, 2.0)], &t).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&mut oracle(4), &[sample(2, 1.0)], &t).unwrap(), 0.0);
        assert!(top1_accuracy(&mut oracle(4), &[], &t).is_err());
    }

    #[test]
    fn base_to_novel_report() {
        let t = table(4);
        let split = crate::data::base_novel_split(t.class_names()).unwrap();
        // base: 0 right, 1 wrong; novel: 2 and 3 right.
        let test = vec![sample(0, 0.0), sample(1, 0.0), sample(2, 2.0), sample(3, 3.0)];
        let r = evaluate_base_to_novel(&mut oracle(4), &t, &test, &split, t.class_names(), TableMode::Full, 0).unwrap();
        assert_eq!(r.base_acc, 0.5);
        assert_eq!(r.novel_acc, 1.0);
        assert_eq!(r.hm, harmonic_mean(r.base_acc, r.novel_acc).unwrap());
        assert_eq!(r.per_class, vec![1.0, 0.0, 1.0, 1.0]);

        // Split mode cannot confuse a base sample with a novel class.
        let test = vec![sample(0, 2.0), sample(1, 1.0), sample(2, 2.0), sample(3, 3.0)];
        let full = evaluate_base_to_novel(&mut oracle(4), &t, &test, &split, t.class_names(), TableMode::Full, 0).unwrap();
        let sub = evaluate_base_to_novel(&mut oracle(4), &t, &test, &split, t.class_names(), TableMode::Split, 0).unwrap();
        assert_eq!(full.base_acc, 0.5);
        assert_eq!(sub.base_acc, 1.0);
    }

    #[test]
    fn misaligned_names_are_a_validation_error() {
        let t = table(4);
        let split = crate::data::base_novel_split(t.class_names()).unwrap();
        let mut names = t.class_names().to_vec();
        names.swap(0, 1);
        let err = evaluate_base_to_novel(&mut oracle(4), &t, &[sample(0, 0.0)], &split, &names, TableMode::Full, 0);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn agreement_of_identical_scorers_is_one() {
        let t = table(3);
        let imgs: Vec<Image> = (0..3).map(|k| Image::new(1, vec![k as f32]).unwrap()).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        assert_eq!(agreement_rate(&mut oracle(3), &mut oracle(3), &refs, &t).unwrap(), 1.0);
    }
}
