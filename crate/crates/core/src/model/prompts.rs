use super::encoder::{Binder, Branch, EncoderConfig, PromptVars};
use super::tensor::{join, Module, ParamTensor};
use crate::error::{Error, Result};
use crate::rng;

pub const PROMPT_INIT_STD: f64 = 0.02;

/// Requested prompt geometry, before clamping to an encoder's depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PromptConfig {
    pub depth: usize,
    pub length: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { depth: 9, length: 4 }
    }
}

/// Learnable prompt vectors for one branch: `depth` matrices of `length × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    branch: Branch,
    length: usize,
    width: usize,
    levels: Vec<ParamTensor>,
}

impl PromptSet {
    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn level(&self, l: usize) -> &ParamTensor {
        &self.levels[l]
    }

    pub fn bind(&self, prefix: &str, binder: &mut Binder<'_>) -> PromptVars {
        PromptVars {
            length: self.length,
            levels: self
                .levels
                .iter()
                .enumerate()
                .map(|(l, t)| binder.bind(&join(prefix, &format!("level{l}")), t))
                .collect(),
        }
    }
}

impl Module for PromptSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (l, t) in self.levels.iter().enumerate() {
            f(&join(prefix, &format!("level{l}")), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (l, t) in self.levels.iter_mut().enumerate() {
            f(&join(prefix, &format!("level{l}")), t);
        }
    }
}

/// Builds a prompt set for `encoder`.
///
/// Depth is clamped to the encoder's layer count. Textual level 0 copies the
/// embedding rows of `template_tokens` (which must number exactly `length`);
/// every other level, and every visual level, is drawn from N(0, 0.02²).
pub fn init_prompts(
    config: PromptConfig,
    encoder: &EncoderConfig,
    seed: u64,
    embedding_table: Option<&ParamTensor>,
    template_tokens: &[u32],
) -> Result<PromptSet> {
    if config.depth == 0 || config.length == 0 {
        return Err(Error::Config("prompt depth and length must be at least 1".into()));
    }
    let depth = config.depth.min(encoder.num_layers);
    if depth < config.depth {
        log::info!(
            "{} prompt depth {} clamped to {} layers",
            encoder.branch.name(),
            config.depth,
            encoder.num_layers
        );
    }
    let width = encoder.width;
    let mut rng = rng::stream(seed, &format!("init.prompts.{}", encoder.branch.name()));
    let mut levels = Vec::with_capacity(depth);
    for l in 0..depth {
        if l == 0 && encoder.branch == Branch::Text {
            let table = embedding_table
                .ok_or_else(|| Error::Config("textual prompts need the token embedding table".into()))?;
            if template_tokens.len() != config.length {
                return Err(Error::Config(format!(
                    "template has {} tokens but prompt length is {}",
                    template_tokens.len(),
                    config.length
                )));
            }
            let (rows, cols) = table.matrix_shape();
            if cols != width {
                return Err(Error::Shape(format!("embedding width {cols} vs encoder width {width}")));
            }
            let mut data = Vec::with_capacity(config.length * width);
            for &tok in template_tokens {
                if tok as usize >= rows {
                    return Err(Error::Config(format!("template token {tok} outside vocabulary")));
                }
                data.extend_from_slice(table.row(tok as usize));
            }
            levels.push(ParamTensor::new(vec![config.length, width], data)?);
        } else {
            levels.push(ParamTensor::normal(&[config.length, width], PROMPT_INIT_STD, &mut rng));
        }
    }
    Ok(PromptSet {
        branch: encoder.branch,
        length: config.length,
        width,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encoder::build_encoder;

    fn text_cfg() -> EncoderConfig {
        EncoderConfig::text(2, 16, 2, 16, 12, 8)
    }

    #[test]
    fn textual_level_zero_copies_embeddings() {
        let enc = build_encoder(&text_cfg(), 1).unwrap();
        let table = enc.token_embedding().unwrap();
        let template = [2u32, 3, 4, 2];
        let p = init_prompts(PromptConfig { depth: 2, length: 4 }, &enc.config, 5, Some(table), &template).unwrap();
        for (k, &tok) in template.iter().enumerate() {
            assert_eq!(p.level(0).row(k), table.row(tok as usize));
        }
        assert_ne!(p.level(1).row(0), table.row(2));
    }

    #[test]
    fn template_length_must_match() {
        let enc = build_encoder(&text_cfg(), 1).unwrap();
        let err = init_prompts(
            PromptConfig { depth: 1, length: 4 },
            &enc.config,
            5,
            enc.token_embedding(),
            &[2, 3, 4],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn depth_clamps_to_layers() {
        let cfg = EncoderConfig::image(4, 32, 2, 32);
        let p = init_prompts(PromptConfig::default(), &cfg, 0, None, &[]).unwrap();
        assert_eq!(p.depth(), 4);
        assert_eq!(p.length(), 4);
    }

    #[test]
    fn visual_init_is_seeded_with_small_std() {
        let cfg = EncoderConfig::image(6, 64, 4, 64);
        let cfg_prompts = PromptConfig { depth: 6, length: 32 };
        let a = init_prompts(cfg_prompts, &cfg, 11, None, &[]).unwrap();
        let b = init_prompts(cfg_prompts, &cfg, 11, None, &[]).unwrap();
        assert_eq!(a, b);
        let values: Vec<f64> = (0..a.depth())
            .flat_map(|l| a.level(l).data().iter().map(|&v| f64::from(v)))
            .collect();
        assert!(values.len() >= 10_000);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.004, "std {std}");
    }
}
