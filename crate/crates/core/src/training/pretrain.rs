//! Image–text alignment of fresh towers, and Stage I teacher prompt learning.

use std::collections::BTreeSet;

use crate::autograd::{Graph, Var};
use crate::data::{augment, noisy_copy, Image, LabeledSample, TokenSeq, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{CostCounter, Phase};
use crate::math::NORM_EPS;
use crate::model::encoder::{image_forward, text_forward, Binder, PromptVars};
use crate::model::{partition_named, ClipModel, PartitionStage, TEACHER};
use crate::rng;

use super::{
    adam_step, batches_per_epoch, epoch_batches, frozen_checksum, learning_rate_at, named_grads, sgd_step,
    AdamState, EpochRecord, LrSchedule, SgdState, StepRecord, TrainConfig, TrainingLog,
};

/// Scaled cosine logits `s · norm(img) · norm(txt)ᵀ`, plus the normalized features.
fn scaled_logits(g: &mut Graph, img: Var, txt: Var, scale: f64) -> (Var, Var, Var) {
    let img_n = g.l2_normalize_rows(img, NORM_EPS);
    let txt_n = g.l2_normalize_rows(txt, NORM_EPS);
    let sim = g.matmul(img_n, txt_n, true);
    (g.scale(sim, scale), img_n, txt_n)
}

fn tokenize_all(vocab: &Vocabulary, template: &str, names: &[String]) -> Result<Vec<TokenSeq>> {
    names.iter().map(|c| vocab.tokenize(template, c)).collect()
}

/// Settings for aligning fresh towers before any prompt learning.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Images per class in the alignment corpus.
    pub images_per_class: usize,
    /// Pixel noise of the alignment corpus; differs from the task data.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 2e-3,
            images_per_class: 300,
            noise_std: 1.0,
            seed: 1234,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.images_per_class == 0 {
            return Err(Error::Config("pretrain epochs, batch_size and images_per_class must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("pretrain lr must be positive, got {}", self.lr)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("pretrain noise_std must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Fresh noisy draws around each prototype, class-major.
    pub fn corpus(&self, prototypes: &[Image]) -> Vec<LabeledSample> {
        let mut r = rng::stream(self.seed, "pretrain.corpus");
        prototypes
            .iter()
            .enumerate()
            .flat_map(|(label, p)| {
                (0..self.images_per_class)
                    .map(|_| LabeledSample {
                        image: noisy_copy(p, self.noise_std, &mut r),
                        label,
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Trains both towers (no prompts) so that each image scores highest against
/// the caption of its class, over all classes named in `class_names`.
/// Uses Adam with a cosine schedule and augmentation.
pub fn pretrain_backbone(
    model: &mut ClipModel,
    corpus: &[LabeledSample],
    class_names: &[String],
    vocab: &Vocabulary,
    template: &str,
    cfg: &PretrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    if let Some(s) = corpus.iter().find(|s| s.label >= class_names.len()) {
        return Err(Error::Index {
            index: s.label,
            len: class_names.len(),
        });
    }
    let seqs = tokenize_all(vocab, template, class_names)?;
    let seq_refs: Vec<&TokenSeq> = seqs.iter().collect();
    let mut backbone = BTreeSet::new();
    model.visit_backbone("", &mut |n, _| {
        backbone.insert(n.to_string());
    });
    let schedule = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        schedule: LrSchedule::Cosine,
        ..TrainConfig::default()
    };
    let mut log = TrainingLog::new(
        vec![
            ("pretrain.epochs".into(), cfg.epochs.to_string()),
            ("pretrain.batch_size".into(), cfg.batch_size.to_string()),
            ("pretrain.lr".into(), format!("{:?}", cfg.lr)),
            ("pretrain.images_per_class".into(), cfg.images_per_class.to_string()),
            ("pretrain.noise_std".into(), format!("{:?}", cfg.noise_std)),
        ],
        vec![("pretrain".into(), cfg.seed)],
    );
    let mut shuffle = rng::stream(cfg.seed, "sampling.pretrain.shuffle");
    let mut aug = rng::stream(cfg.seed, "augment.pretrain");
    let per_epoch = batches_per_epoch(corpus.len(), cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut state = AdamState::new();
    let mut step = 0;
    let scale = model.config.logit_scale;
    for epoch in 0..cfg.epochs {
        let frozen = frozen_checksum(&[("", &*model)], &backbone);
        let mut sum = 0.0;
        let batches = epoch_batches(corpus.len(), cfg.batch_size, &mut shuffle);
        for batch in &batches {
            let images: Vec<Image> = batch.iter().map(|&i| augment(&corpus[i].image, &mut aug)).collect();
            let image_refs: Vec<&Image> = images.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| corpus[i].label).collect();

            let mut g = Graph::new();
            let trainable = |n: &str| backbone.contains(n);
            let mut binder = Binder::new(&mut g, &trainable);
            let iw = binder.bind_encoder("image", &model.image);
            let tw = binder.bind_encoder("text", &model.text);
            let bound = binder.finish();
            let img = image_forward(&mut g, &model.config.image, &iw, None, &image_refs)?;
            let txt = text_forward(&mut g, &model.config.text, &tw, None, &seq_refs)?;
            let (logits, _, _) = scaled_logits(&mut g, img, txt, scale);
            let loss = g.cross_entropy(logits, &labels, 1.0);
            let value = g.value(loss).data[0];
            let grads = named_grads(&g.backward(loss), &bound);
            let lr = learning_rate_at(&schedule, step, total)?;
            adam_step(model, "", &backbone, &grads, lr, &mut state)?;
            log.push_step(StepRecord {
                step,
                epoch,
                loss: value,
                lr,
                frozen_checksum: frozen.clone(),
            });
            sum += value;
            step += 1;
        }
        log.push_epoch(EpochRecord {
            epoch,
            mean_loss: sum / batches.len() as f64,
            frozen_checksum: frozen_checksum(&[("", &*model)], &backbone),
            metrics: vec![],
        });
        log::info!("pretrain epoch {epoch}: loss {:.4}", sum / batches.len() as f64);
    }
    Ok(log)
}

/// What an auxiliary loss can see at each Stage I step.
pub struct StepContext<'a> {
    /// Normalized image features, `batch × d`.
    pub image_features: Var,
    /// Normalized text features, one row per base class.
    pub text_features: Var,
    pub logits: Var,
    /// Labels as positions within the base classes.
    pub labels: &'a [usize],
}

/// Extra term added to the Stage I objective.
pub trait AuxLoss {
    fn loss(&mut self, g: &mut Graph, ctx: &StepContext<'_>) -> Option<Var>;
}

/// Stage I: learns the teacher's prompts on both branches by cross-entropy
/// over the base classes. Text features are recomputed every step, so both
/// prompt sets receive gradients.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_teacher(
    teacher: &mut ClipModel,
    labeled: &[LabeledSample],
    base: &[usize],
    class_names: &[String],
    vocab: &Vocabulary,
    template: &str,
    cfg: &TrainConfig,
    mut aux: Option<&mut dyn AuxLoss>,
    counter: &mut CostCounter,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Data("empty labeled set for teacher pretraining".into()));
    }
    let mut position = vec![None; class_names.len()];
    for (i, &k) in base.iter().enumerate() {
        *position
            .get_mut(k)
            .ok_or(Error::Index { index: k, len: class_names.len() })? = Some(i);
    }
    let targets = labeled
        .iter()
        .map(|s| {
            position.get(s.label).copied().flatten().ok_or_else(|| {
                Error::Data(format!("labeled set contains class {} outside the base classes", s.label))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let base_names: Vec<String> = base.iter().map(|&k| class_names[k].clone()).collect();
    let seqs = tokenize_all(vocab, template, &base_names)?;
    let seq_refs: Vec<&TokenSeq> = seqs.iter().collect();

    let partition = partition_named(PartitionStage::TeacherPretrain, &[(TEACHER, &*teacher)]);
    let mut log = TrainingLog::new(cfg.snapshot("stage1"), vec![("stage1".into(), cfg.seed)]);
    let mut shuffle = rng::stream(cfg.seed, "sampling.stage1.shuffle");
    let mut aug = rng::stream(cfg.seed, "augment.stage1");
    let per_epoch = batches_per_epoch(labeled.len(), cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut state = SgdState::new();
    let mut step = 0;
    let scale = teacher.config.logit_scale;
    let image_prefix = format!("{TEACHER}.image");
    let text_prefix = format!("{TEACHER}.text");
    for epoch in 0..cfg.epochs {
        let frozen = frozen_checksum(&[(TEACHER, &*teacher)], &partition.trainable);
        let mut sum = 0.0;
        let batches = epoch_batches(labeled.len(), cfg.batch_size, &mut shuffle);
        for batch in &batches {
            let images: Vec<Image> = batch
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&labeled[i].image, &mut aug)
                    } else {
                        labeled[i].image.clone()
                    }
                })
                .collect();
            let image_refs: Vec<&Image> = images.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();

            let mut g = Graph::new();
            let trainable = |n: &str| partition.is_trainable(n);
            let mut binder = Binder::new(&mut g, &trainable);
            let iw = binder.bind_encoder(&image_prefix, &teacher.image);
            let tw = binder.bind_encoder(&text_prefix, &teacher.text);
            let ip: PromptVars = teacher.image_prompts.bind(&format!("{TEACHER}.image_prompts"), &mut binder);
            let tp: PromptVars = teacher.text_prompts.bind(&format!("{TEACHER}.text_prompts"), &mut binder);
            let bound = binder.finish();
            let img = image_forward(&mut g, &teacher.config.image, &iw, Some(&ip), &image_refs)?;
            let txt = text_forward(&mut g, &teacher.config.text, &tw, Some(&tp), &seq_refs)?;
            counter.teacher_images(Phase::Stage1, image_refs.len());
            counter.texts(Phase::Stage1, seq_refs.len());
            let (logits, img_n, txt_n) = scaled_logits(&mut g, img, txt, scale);
            let mut loss = g.cross_entropy(logits, &labels, cfg.tau);
            if let Some(extra) = aux.as_deref_mut() {
                let ctx = StepContext {
                    image_features: img_n,
                    text_features: txt_n,
                    logits,
                    labels: &labels,
                };
                if let Some(l) = extra.loss(&mut g, &ctx) {
                    loss = g.add(loss, l);
                }
            }
            let value = g.value(loss).data[0];
            let grads = named_grads(&g.backward(loss), &bound);
            let lr = learning_rate_at(cfg, step, total)?;
            sgd_step(teacher, TEACHER, &partition.trainable, &grads, lr, cfg.momentum, &mut state)?;
            log.push_step(StepRecord {
                step,
                epoch,
                loss: value,
                lr,
                frozen_checksum: frozen.clone(),
            });
            sum += value;
            step += 1;
        }
        log.push_epoch(EpochRecord {
            epoch,
            mean_loss: sum / batches.len() as f64,
            frozen_checksum: frozen_checksum(&[(TEACHER, &*teacher)], &partition.trainable),
            metrics: vec![],
        });
        log::info!("stage1 epoch {epoch}: loss {:.4}", sum / batches.len() as f64);
    }
    Ok(log)
}
