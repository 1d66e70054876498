//! Dual-encoder models, prompt sets, the student projector and the
//! trainable/frozen partition that separates them.

pub mod checkpoint;
pub mod encoder;
pub mod partition;
pub mod projector;
pub mod prompts;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use encoder::{build_encoder, Branch, EncoderConfig, EncoderParams};
pub use partition::{partition_named, partition_parameters, ParameterPartition, PartitionStage, STUDENT, TEACHER};
pub use projector::{project, ProjectorParams};
pub use prompts::{init_prompts, PromptConfig, PromptSet};
pub use tensor::{Module, ParamTensor};

use crate::autograd::{Graph, Matrix};
use crate::data::{Image, TokenSeq};
use crate::error::{Error, Result};
use crate::math::FeatureVector;
use encoder::{image_forward, text_forward, Binder};
use tensor::join;

/// Geometry of one dual encoder (a "CLIP" stand-in).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipConfig {
    pub image: EncoderConfig,
    pub text: EncoderConfig,
    pub prompts: PromptConfig,
    /// Multiplier applied to cosine similarities before any softmax.
    pub logit_scale: f64,
}

impl ClipConfig {
    /// Six layers, width 64, four heads, 64-d joint space.
    pub fn teacher(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            image: EncoderConfig::image(6, 64, 4, 64),
            text: EncoderConfig::text(6, 64, 4, 64, vocab_size, max_seq_len),
            prompts: PromptConfig::default(),
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }

    /// Four layers, width 32, two heads, 32-d joint space.
    pub fn student(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            image: EncoderConfig::image(4, 32, 2, 32),
            text: EncoderConfig::text(4, 32, 2, 32, vocab_size, max_seq_len),
            prompts: PromptConfig::default(),
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.branch != Branch::Image || self.text.branch != Branch::Text {
            return Err(Error::Config("dual encoder needs one image and one text tower".into()));
        }
        if self.image.output_dim != self.text.output_dim {
            return Err(Error::Config(format!(
                "image output {} and text output {} differ",
                self.image.output_dim, self.text.output_dim
            )));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.image.output_dim
    }
}

pub const DEFAULT_LOGIT_SCALE: f64 = 20.0;

/// Two towers plus one prompt set per tower.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipModel {
    pub config: ClipConfig,
    pub image: EncoderParams,
    pub text: EncoderParams,
    pub image_prompts: PromptSet,
    pub text_prompts: PromptSet,
}

impl ClipModel {
    /// Fresh towers and prompts. `template_tokens` seed the textual level-0 prompts.
    pub fn build(config: &ClipConfig, template_tokens: &[u32], seed: u64) -> Result<Self> {
        config.validate()?;
        let image = build_encoder(&config.image, seed)?;
        let text = build_encoder(&config.text, seed)?;
        let image_prompts = init_prompts(config.prompts, &config.image, seed, None, template_tokens)?;
        let text_prompts = init_prompts(config.prompts, &config.text, seed, text.token_embedding(), template_tokens)?;
        Ok(Self {
            config: config.clone(),
            image,
            text,
            image_prompts,
            text_prompts,
        })
    }

    /// Re-derives both prompt sets from the current towers.
    pub fn reset_prompts(&mut self, template_tokens: &[u32], seed: u64) -> Result<()> {
        self.image_prompts = init_prompts(self.config.prompts, &self.config.image, seed, None, template_tokens)?;
        self.text_prompts = init_prompts(
            self.config.prompts,
            &self.config.text,
            seed,
            self.text.token_embedding(),
            template_tokens,
        )?;
        Ok(())
    }

    /// Visits only the towers, not the prompts.
    pub fn visit_backbone(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.image.visit(&join(prefix, "image"), f);
        self.text.visit(&join(prefix, "text"), f);
    }

    pub fn visit_backbone_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.image.visit_mut(&join(prefix, "image"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
    }

    /// Text tower and text prompts: everything a class-vector table depends on.
    pub fn visit_text_side(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.text.visit(&join(prefix, "text"), f);
        self.text_prompts.visit(&join(prefix, "text_prompts"), f);
    }
}

impl Module for ClipModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.visit_backbone(prefix, f);
        self.image_prompts.visit(&join(prefix, "image_prompts"), f);
        self.text_prompts.visit(&join(prefix, "text_prompts"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.visit_backbone_mut(prefix, f);
        self.image_prompts.visit_mut(&join(prefix, "image_prompts"), f);
        self.text_prompts.visit_mut(&join(prefix, "text_prompts"), f);
    }
}

/// Student dual encoder plus the projector into the teacher's space.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub clip: ClipModel,
    pub projector: ProjectorParams,
}

impl StudentModel {
    /// Projector hidden width equals the student feature width.
    pub fn new(clip: ClipModel, teacher_dim: usize, projector_layers: usize, seed: u64) -> Result<Self> {
        let d_s = clip.config.embed_dim();
        let projector = ProjectorParams::new(d_s, d_s, teacher_dim, projector_layers, seed)?;
        Ok(Self { clip, projector })
    }
}

impl Module for StudentModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.clip.visit(prefix, f);
        self.projector.visit(&join(prefix, "projector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.clip.visit_mut(prefix, f);
        self.projector.visit_mut(&join(prefix, "projector"), f);
    }
}

fn frozen(_: &str) -> bool {
    false
}

fn check_branch(prompts: Option<&PromptSet>, want: Branch) -> Result<()> {
    match prompts {
        Some(p) if p.branch() != want => Err(Error::Config(format!(
            "{} prompts given to the {} encoder",
            p.branch().name(),
            want.name()
        ))),
        _ => Ok(()),
    }
}

/// Raw image features for a batch, no gradients recorded.
pub fn encode_images(params: &EncoderParams, prompts: Option<&PromptSet>, images: &[&Image]) -> Result<Matrix> {
    check_branch(prompts, Branch::Image)?;
    let mut g = Graph::new();
    let mut binder = Binder::new(&mut g, &frozen);
    let w = binder.bind_encoder("", params);
    let p = prompts.map(|p| p.bind("prompts", &mut binder));
    binder.finish();
    let out = image_forward(&mut g, &params.config, &w, p.as_ref(), images)?;
    Ok(g.value(out).clone())
}

/// Raw text features for a batch, no gradients recorded.
pub fn encode_texts(params: &EncoderParams, prompts: Option<&PromptSet>, seqs: &[&TokenSeq]) -> Result<Matrix> {
    check_branch(prompts, Branch::Text)?;
    let mut g = Graph::new();
    let mut binder = Binder::new(&mut g, &frozen);
    let w = binder.bind_encoder("", params);
    let p = prompts.map(|p| p.bind("prompts", &mut binder));
    binder.finish();
    let out = text_forward(&mut g, &params.config, &w, p.as_ref(), seqs)?;
    Ok(g.value(out).clone())
}

/// Unnormalized feature of one image.
pub fn encode_image(params: &EncoderParams, prompts: Option<&PromptSet>, image: &Image) -> Result<FeatureVector> {
    let m = encode_images(params, prompts, &[image])?;
    FeatureVector::new(m.data)
}

/// Unnormalized feature of one token sequence.
pub fn encode_text(params: &EncoderParams, prompts: Option<&PromptSet>, tokens: &TokenSeq) -> Result<FeatureVector> {
    let m = encode_texts(params, prompts, &[tokens])?;
    FeatureVector::new(m.data)
}
