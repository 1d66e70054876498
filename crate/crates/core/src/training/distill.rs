//! Stage II: the student learns to reproduce the frozen teacher's logits on
//! unlabeled images, scoring against the cached class vectors.

use crate::autograd::{Graph, Matrix, Var};
use crate::class_vectors::{text_fingerprint, ClassVectorTable};
use crate::data::{augment, Image, TokenSeq, UnlabeledPool, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{CostCounter, Phase};
use crate::math::{FeatureLossKind, NORM_EPS};
use crate::model::encoder::{image_forward, text_forward, Binder};
use crate::model::projector::projector_forward;
use crate::model::{encode_images, partition_named, partition_parameters, ClipModel, StudentModel, STUDENT, TEACHER};
use crate::rng;

use super::{
    batches_per_epoch, epoch_batches, frozen_checksum, learning_rate_at, named_grads, sgd_step, DistillMode,
    DistillVariant, EpochRecord, SgdState, StepRecord, TextBranch, TrainConfig, TrainingLog,
};

#[derive(Debug, Clone, Default)]
pub struct DistillOptions {
    /// Accept a class-vector table produced by different teacher weights.
    pub allow_fingerprint_mismatch: bool,
    /// Class captions for the student's own text tower; required only by
    /// [`TextBranch::OwnTextEncoder`].
    pub own_text: Option<OwnText>,
}

#[derive(Debug, Clone)]
pub struct OwnText {
    pub vocab: Vocabulary,
    pub template: String,
}

/// Everything one student step reads from the student model, as graph nodes.
pub(crate) struct StudentGraph {
    pub loss: Var,
    pub bound: Vec<(String, Var)>,
}

/// Builds the Stage II loss for one batch. The teacher side enters as
/// constants: `teacher_feats` are raw teacher image features (`b × d_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn student_loss(
    g: &mut Graph,
    binder_trainable: &dyn Fn(&str) -> bool,
    perturb: Option<(&str, usize, f64)>,
    student: &StudentModel,
    images: &[&Image],
    teacher_feats: &Matrix,
    table: &ClassVectorTable,
    own_captions: Option<&[TokenSeq]>,
    variant: &DistillVariant,
    scale: f64,
    tau: f64,
) -> Result<StudentGraph> {
    let mut binder = Binder::new(g, binder_trainable);
    if let Some((n, i, d)) = perturb {
        binder = binder.with_perturbation(n, i, d);
    }
    let iw = binder.bind_encoder(&format!("{STUDENT}.image"), &student.clip.image);
    let ip = student
        .clip
        .image_prompts
        .bind(&format!("{STUDENT}.image_prompts"), &mut binder);
    let own = match (variant.text_branch, own_captions) {
        (TextBranch::OwnTextEncoder, Some(c)) => {
            let tw = binder.bind_encoder(&format!("{STUDENT}.text"), &student.clip.text);
            let tp = student
                .clip
                .text_prompts
                .bind(&format!("{STUDENT}.text_prompts"), &mut binder);
            Some((tw, tp, c))
        }
        (TextBranch::OwnTextEncoder, None) => {
            return Err(Error::Config("own_text_encoder needs class captions".into()));
        }
        _ => None,
    };
    let proj = match own {
        None => Some(student.projector.bind(&format!("{STUDENT}.projector"), &mut binder)),
        Some(_) => None,
    };
    let bound = binder.finish();

    let raw = image_forward(g, &student.clip.config.image, &iw, Some(&ip), images)?;
    let teacher_raw = g.constant(teacher_feats.clone());
    let t_norm = g.l2_normalize_rows(teacher_raw, NORM_EPS);
    let w = g.constant(Matrix::from_f32(table.num_classes(), table.dim(), table.rows()));
    let t_sim = g.matmul(t_norm, w, true);
    let q_t = g.scale(t_sim, scale);

    let loss = if let Some((tw, tp, captions)) = own {
        let refs: Vec<&TokenSeq> = captions.iter().collect();
        let txt = text_forward(g, &student.clip.config.text, &tw, Some(&tp), &refs)?;
        let txt_n = g.l2_normalize_rows(txt, NORM_EPS);
        let img_n = g.l2_normalize_rows(raw, NORM_EPS);
        let sim = g.matmul(img_n, txt_n, true);
        let q_s = g.scale(sim, scale);
        g.kd_loss(q_t, q_s, tau)
    } else {
        let projected = projector_forward(g, proj.as_ref().expect("projector bound"), raw);
        match variant.mode {
            DistillMode::LogitKl => {
                let u_s = g.l2_normalize_rows(projected, NORM_EPS);
                let sim = g.matmul(u_s, w, true);
                let q_s = g.scale(sim, scale);
                g.kd_loss(q_t, q_s, tau)
            }
            DistillMode::FeatureL1 => g.feature_loss(teacher_raw, projected, FeatureLossKind::L1),
            DistillMode::FeatureMse => g.feature_loss(teacher_raw, projected, FeatureLossKind::Mse),
        }
    };
    Ok(StudentGraph { loss, bound })
}

/// Loss of one shared-cache Stage II batch and the gradient of every
/// parameter the variant trains, as a training step computes them.
/// `teacher_feats` are raw teacher image features, one row per image.
#[allow(clippy::too_many_arguments)]
pub fn distill_batch_gradients(
    student: &StudentModel,
    images: &[&Image],
    teacher_feats: &Matrix,
    table: &ClassVectorTable,
    variant: &DistillVariant,
    scale: f64,
    tau: f64,
) -> Result<(f64, Vec<(String, Matrix)>)> {
    let partition = partition_named(variant.partition_stage(), &[(STUDENT, student)]);
    let trainable = |n: &str| partition.is_trainable(n);
    let mut g = Graph::new();
    let sg = student_loss(&mut g, &trainable, None, student, images, teacher_feats, table, None, variant, scale, tau)?;
    let value = g.value(sg.loss).data[0];
    Ok((value, named_grads(&g.backward(sg.loss), &sg.bound)))
}

/// The same loss with scalar `index` of parameter `name` shifted by `delta`.
#[allow(clippy::too_many_arguments)]
pub fn distill_batch_loss_shifted(
    student: &StudentModel,
    images: &[&Image],
    teacher_feats: &Matrix,
    table: &ClassVectorTable,
    variant: &DistillVariant,
    scale: f64,
    tau: f64,
    name: &str,
    index: usize,
    delta: f64,
) -> Result<f64> {
    let never = |_: &str| false;
    let mut g = Graph::new();
    let sg = student_loss(
        &mut g,
        &never,
        Some((name, index, delta)),
        student,
        images,
        teacher_feats,
        table,
        None,
        variant,
        scale,
        tau,
    )?;
    Ok(g.value(sg.loss).data[0])
}

/// Trains the student's variant-selected parameters to match the teacher.
///
/// Each step runs the frozen teacher's prompted image tower on the batch,
/// scores both models against `table`, and updates only the trainable set.
/// The pool carries no labels.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    teacher: &ClipModel,
    student: &mut StudentModel,
    table: &ClassVectorTable,
    pool: &UnlabeledPool,
    cfg: &TrainConfig,
    variant: &DistillVariant,
    options: &DistillOptions,
    counter: &mut CostCounter,
) -> Result<TrainingLog> {
    cfg.validate()?;
    variant.validate()?;
    if pool.is_empty() {
        return Err(Error::Data("empty unlabeled pool".into()));
    }
    let expected = text_fingerprint(&teacher.text, Some(&teacher.text_prompts));
    if &expected != table.fingerprint() {
        if options.allow_fingerprint_mismatch {
            log::warn!("class vectors were produced by different teacher weights; continuing as overridden");
        } else {
            return Err(Error::CacheIntegrity(
                "class-vector fingerprint does not match the teacher".into(),
            ));
        }
    }
    if table.dim() != teacher.config.embed_dim() {
        return Err(Error::Config(format!(
            "table width {} differs from teacher feature width {}",
            table.dim(),
            teacher.config.embed_dim()
        )));
    }
    if variant.text_branch == TextBranch::SharedCache && student.projector.output_dim() != table.dim() {
        return Err(Error::Config(format!(
            "projector output {} cannot score against {}-d class vectors",
            student.projector.output_dim(),
            table.dim()
        )));
    }
    let captions = match variant.text_branch {
        TextBranch::SharedCache => None,
        TextBranch::OwnTextEncoder => {
            let own = options
                .own_text
                .as_ref()
                .ok_or_else(|| Error::Config("own_text_encoder needs a vocabulary and template".into()))?;
            Some(
                table
                    .class_names()
                    .iter()
                    .map(|c| own.vocab.tokenize(&own.template, c))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };

    let partition = partition_parameters(variant.partition_stage(), teacher, student);
    let mut snapshot = cfg.snapshot("stage2");
    snapshot.push(("distill.mode".into(), variant.mode.as_str().into()));
    snapshot.push(("distill.trainable".into(), variant.trainable.as_str().into()));
    snapshot.push(("distill.text_branch".into(), variant.text_branch.as_str().into()));
    let mut log = TrainingLog::new(snapshot, vec![("stage2".into(), cfg.seed)]);
    let mut shuffle = rng::stream(cfg.seed, "sampling.stage2.shuffle");
    let mut aug = rng::stream(cfg.seed, "augment.stage2");
    let per_epoch = batches_per_epoch(pool.len(), cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut state = SgdState::new();
    let scale = teacher.config.logit_scale;
    let mut step = 0;
    let frozen_now = |student: &StudentModel| {
        frozen_checksum(&[(TEACHER, teacher), (STUDENT, student)], &partition.trainable)
    };
    for epoch in 0..cfg.epochs {
        let frozen = frozen_now(student);
        let mut sum = 0.0;
        let batches = epoch_batches(pool.len(), cfg.batch_size, &mut shuffle);
        for batch in &batches {
            let images: Vec<Image> = batch
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&pool.images()[i], &mut aug)
                    } else {
                        pool.images()[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Image> = images.iter().collect();
            let teacher_feats = encode_images(&teacher.image, Some(&teacher.image_prompts), &refs)?;
            counter.teacher_images(Phase::Stage2, refs.len());

            let mut g = Graph::new();
            let trainable = |n: &str| partition.is_trainable(n);
            let sg = student_loss(
                &mut g,
                &trainable,
                None,
                student,
                &refs,
                &teacher_feats,
                table,
                captions.as_deref(),
                variant,
                scale,
                cfg.tau,
            )?;
            counter.student_images(Phase::Stage2, refs.len());
            if let Some(c) = &captions {
                counter.texts(Phase::Stage2, c.len());
            }
            let value = g.value(sg.loss).data[0];
            let grads = named_grads(&g.backward(sg.loss), &sg.bound);
            let lr = learning_rate_at(cfg, step, total)?;
            sgd_step(student, STUDENT, &partition.trainable, &grads, lr, cfg.momentum, &mut state)?;
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
        let mean = sum / batches.len() as f64;
        log.push_epoch(EpochRecord {
            epoch,
            mean_loss: mean,
            frozen_checksum: frozen_now(student),
            metrics: vec![],
        });
        log::info!("stage2 epoch {epoch}: loss {mean:.5}");
    }
    Ok(log)
}
