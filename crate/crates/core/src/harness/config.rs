//! Layered `key = value` configuration: built-in defaults, then a file, then
//! command-line overrides. Keys are dotted (`student.width = 32`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{DatasetSpec, PoolScope, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::evaluation::TableMode;
use crate::model::{ClipConfig, EncoderConfig, PromptConfig, DEFAULT_LOGIT_SCALE};
use crate::training::{DistillMode, DistillVariant, PretrainConfig, TextBranch, TrainConfig, TrainableSet};

/// Environment variable that relocates the run-directory root.
pub const RUN_ROOT_ENV: &str = "PROMPTKD_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";

/// Geometry shared by the image and text towers of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TowerSpec {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub output_dim: usize,
    pub max_seq_len: usize,
}

impl TowerSpec {
    pub const fn teacher() -> Self {
        Self {
            layers: 6,
            width: 64,
            heads: 4,
            mlp_width: 128,
            output_dim: 64,
            max_seq_len: 8,
        }
    }

    pub const fn student() -> Self {
        Self {
            layers: 4,
            width: 32,
            heads: 2,
            mlp_width: 64,
            output_dim: 32,
            max_seq_len: 8,
        }
    }

    /// Named presets for the teacher-capacity sweep, smallest first.
    pub fn preset(name: &str) -> Option<Self> {
        let (layers, width, heads) = match name {
            "small" => (2, 32, 2),
            "medium" => (4, 48, 4),
            "large" => (6, 64, 4),
            _ => return None,
        };
        Some(Self {
            layers,
            width,
            heads,
            mlp_width: 2 * width,
            output_dim: width,
            max_seq_len: 8,
        })
    }

    pub fn clip_config(
        &self,
        image_side: usize,
        patch_size: usize,
        vocab_size: usize,
        prompts: PromptConfig,
        logit_scale: f64,
    ) -> Result<ClipConfig> {
        if patch_size == 0 || image_side % patch_size != 0 {
            return Err(Error::Config(format!(
                "model.patch_size: {patch_size} does not divide image side {image_side}"
            )));
        }
        let mut image = EncoderConfig::image(self.layers, self.width, self.heads, self.output_dim);
        image.mlp_width = self.mlp_width;
        image.patch_size = patch_size;
        image.patch_grid = image_side / patch_size;
        let mut text = EncoderConfig::text(
            self.layers,
            self.width,
            self.heads,
            self.output_dim,
            vocab_size,
            self.max_seq_len,
        );
        text.mlp_width = self.mlp_width;
        Ok(ClipConfig {
            image,
            text,
            prompts,
            logit_scale,
        })
    }
}

/// Optional cap on images per class, `all` meaning no cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Cap(pub Option<usize>);

impl FromStr for Cap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self(None));
        }
        s.parse()
            .map(|n| Self(Some(n)))
            .map_err(|_| Error::Config(format!("expected an integer or `all`, got {s:?}")))
    }
}

impl std::fmt::Display for Cap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            None => f.write_str("all"),
            Some(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Settings {
    pub train: TrainConfig,
    pub shots: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Settings {
    pub train: TrainConfig,
    pub pool_scope: PoolScope,
    pub per_class_cap: Cap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSettings {
    pub variant: DistillVariant,
    pub projector_layers: usize,
    pub allow_fingerprint_mismatch: bool,
}

/// Everything that determines a run. The seed fields of the two
/// [`TrainConfig`]s are ignored; each run seed overrides them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub template: String,
    pub patch_size: usize,
    pub logit_scale: f64,
    pub teacher: TowerSpec,
    pub student: TowerSpec,
    pub prompts: PromptConfig,
    pub pretrain: PretrainConfig,
    pub stage1: Stage1Settings,
    pub stage2: Stage2Settings,
    pub distill: DistillSettings,
    pub table_mode: TableMode,
    pub seeds: Vec<u64>,
    /// Where run directories live. Not part of the config hash.
    pub run_root: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            template: DEFAULT_TEMPLATE.to_string(),
            patch_size: 4,
            logit_scale: DEFAULT_LOGIT_SCALE,
            teacher: TowerSpec::teacher(),
            student: TowerSpec::student(),
            prompts: PromptConfig::default(),
            pretrain: PretrainConfig::default(),
            stage1: Stage1Settings {
                train: TrainConfig {
                    lr: 0.001,
                    ..TrainConfig::default()
                },
                shots: 16,
            },
            stage2: Stage2Settings {
                train: TrainConfig {
                    augment: false,
                    ..TrainConfig::default()
                },
                pool_scope: PoolScope::Full,
                per_class_cap: Cap(None),
            },
            distill: DistillSettings {
                variant: DistillVariant::default(),
                projector_layers: 2,
                allow_fingerprint_mismatch: false,
            },
            table_mode: TableMode::Full,
            seeds: vec![0, 1, 2],
            run_root: PathBuf::from(DEFAULT_RUN_ROOT),
        }
    }
}

fn pool_scope_str(s: PoolScope) -> &'static str {
    match s {
        PoolScope::Full => "full",
        PoolScope::BaseOnly => "base_only",
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected {what}, got {value:?}")))
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{key}: {m}")),
        other => other,
    })
}

fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .map(|s| parse_value::<u64>(key, s.trim(), "a comma-separated list of integers"))
        .collect()
}

fn tower_entries(out: &mut Vec<(String, String)>, section: &str, t: &TowerSpec) {
    for (k, v) in [
        ("layers", t.layers),
        ("width", t.width),
        ("heads", t.heads),
        ("mlp_width", t.mlp_width),
        ("output_dim", t.output_dim),
        ("max_seq_len", t.max_seq_len),
    ] {
        out.push((format!("{section}.{k}"), v.to_string()));
    }
}

fn train_entries(out: &mut Vec<(String, String)>, section: &str, t: &TrainConfig) {
    out.push((format!("{section}.epochs"), t.epochs.to_string()));
    out.push((format!("{section}.batch_size"), t.batch_size.to_string()));
    out.push((format!("{section}.lr"), format!("{:?}", t.lr)));
    out.push((format!("{section}.momentum"), format!("{:?}", t.momentum)));
    out.push((format!("{section}.tau"), format!("{:?}", t.tau)));
    out.push((format!("{section}.schedule"), t.schedule.as_str().to_string()));
    out.push((format!("{section}.augment"), t.augment.to_string()));
}

fn set_tower(t: &mut TowerSpec, key: &str, field: &str, value: &str) -> Result<bool> {
    let v = || parse_value::<usize>(key, value, "a non-negative integer");
    match field {
        "layers" => t.layers = v()?,
        "width" => t.width = v()?,
        "heads" => t.heads = v()?,
        "mlp_width" => t.mlp_width = v()?,
        "output_dim" => t.output_dim = v()?,
        "max_seq_len" => t.max_seq_len = v()?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_train(t: &mut TrainConfig, key: &str, field: &str, value: &str) -> Result<bool> {
    match field {
        "epochs" => t.epochs = parse_value(key, value, "a non-negative integer")?,
        "batch_size" => t.batch_size = parse_value(key, value, "a non-negative integer")?,
        "lr" => t.lr = parse_value(key, value, "a number")?,
        "momentum" => t.momentum = parse_value(key, value, "a number")?,
        "tau" => t.tau = parse_value(key, value, "a number")?,
        "schedule" => t.schedule = parse_enum(key, value)?,
        "augment" => t.augment = parse_value(key, value, "true or false")?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn invariant(key: &str, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {msg}")))
    }
}

impl ExperimentConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        let d = &self.dataset;
        push("dataset.num_classes", d.num_classes.to_string());
        push("dataset.images_per_class", d.images_per_class.to_string());
        push("dataset.test_per_class", d.test_per_class.to_string());
        push("dataset.image_side", d.image_side.to_string());
        push("dataset.noise_std", format!("{:?}", d.noise_std));
        push("dataset.seed", d.seed.to_string());
        push("model.template", self.template.clone());
        push("model.patch_size", self.patch_size.to_string());
        push("model.logit_scale", format!("{:?}", self.logit_scale));
        tower_entries(&mut out, "teacher", &self.teacher);
        tower_entries(&mut out, "student", &self.student);
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("prompts.depth", self.prompts.depth.to_string());
        push("prompts.length", self.prompts.length.to_string());
        let p = &self.pretrain;
        push("pretrain.epochs", p.epochs.to_string());
        push("pretrain.batch_size", p.batch_size.to_string());
        push("pretrain.lr", format!("{:?}", p.lr));
        push("pretrain.images_per_class", p.images_per_class.to_string());
        push("pretrain.noise_std", format!("{:?}", p.noise_std));
        push("pretrain.seed", p.seed.to_string());
        train_entries(&mut out, "stage1", &self.stage1.train);
        out.push(("stage1.shots".into(), self.stage1.shots.to_string()));
        train_entries(&mut out, "stage2", &self.stage2.train);
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("stage2.pool_scope", pool_scope_str(self.stage2.pool_scope).into());
        push("stage2.per_class_cap", self.stage2.per_class_cap.to_string());
        let v = &self.distill;
        push("distill.mode", v.variant.mode.as_str().into());
        push("distill.trainable", v.variant.trainable.as_str().into());
        push("distill.text_branch", v.variant.text_branch.as_str().into());
        push("distill.projector_layers", v.projector_layers.to_string());
        push("distill.allow_fingerprint_mismatch", v.allow_fingerprint_mismatch.to_string());
        push("eval.table_mode", self.table_mode.as_str().into());
        push(
            "run.seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        push("run.root", self.run_root.display().to_string());
        out
    }

    pub fn keys() -> Vec<String> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its textual value. Unknown keys and malformed values
    /// are config errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("{key}: keys have the form section.name")))?;
        let int = |what: &str| parse_value::<usize>(key, value, what);
        let known = match section {
            "dataset" => {
                let d = &mut self.dataset;
                match field {
                    "num_classes" => d.num_classes = int("a non-negative integer")?,
                    "images_per_class" => d.images_per_class = int("a non-negative integer")?,
                    "test_per_class" => d.test_per_class = int("a non-negative integer")?,
                    "image_side" => d.image_side = int("a non-negative integer")?,
                    "noise_std" => d.noise_std = parse_value(key, value, "a number")?,
                    "seed" => d.seed = parse_value(key, value, "a non-negative integer")?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "model" => {
                match field {
                    "template" => self.template = value.to_string(),
                    "patch_size" => self.patch_size = int("a non-negative integer")?,
                    "logit_scale" => self.logit_scale = parse_value(key, value, "a number")?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "teacher" => set_tower(&mut self.teacher, key, field, value)?,
            "student" => set_tower(&mut self.student, key, field, value)?,
            "prompts" => {
                match field {
                    "depth" => self.prompts.depth = int("a non-negative integer")?,
                    "length" => self.prompts.length = int("a non-negative integer")?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "pretrain" => {
                let p = &mut self.pretrain;
                match field {
                    "epochs" => p.epochs = int("a non-negative integer")?,
                    "batch_size" => p.batch_size = int("a non-negative integer")?,
                    "lr" => p.lr = parse_value(key, value, "a number")?,
                    "images_per_class" => p.images_per_class = int("a non-negative integer")?,
                    "noise_std" => p.noise_std = parse_value(key, value, "a number")?,
                    "seed" => p.seed = parse_value(key, value, "a non-negative integer")?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "stage1" => {
                if field == "shots" {
                    self.stage1.shots = int("a non-negative integer")?;
                    true
                } else {
                    set_train(&mut self.stage1.train, key, field, value)?
                }
            }
            "stage2" => match field {
                "pool_scope" => {
                    self.stage2.pool_scope = match value {
                        "full" => PoolScope::Full,
                        "base_only" => PoolScope::BaseOnly,
                        _ => {
                            return Err(Error::Config(format!(
                                "{key}: expected full or base_only, got {value:?}"
                            )))
                        }
                    };
                    true
                }
                "per_class_cap" => {
                    self.stage2.per_class_cap = parse_enum(key, value)?;
                    true
                }
                _ => set_train(&mut self.stage2.train, key, field, value)?,
            },
            "distill" => {
                let d = &mut self.distill;
                match field {
                    "mode" => d.variant.mode = parse_enum::<DistillMode>(key, value)?,
                    "trainable" => d.variant.trainable = parse_enum::<TrainableSet>(key, value)?,
                    "text_branch" => d.variant.text_branch = parse_enum::<TextBranch>(key, value)?,
                    "projector_layers" => d.projector_layers = int("a non-negative integer")?,
                    "allow_fingerprint_mismatch" => {
                        d.allow_fingerprint_mismatch = parse_value(key, value, "true or false")?
                    }
                    _ => return Err(unknown(key)),
                }
                true
            }
            "eval" => {
                match field {
                    "table_mode" => self.table_mode = parse_enum(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "run" => {
                match field {
                    "seeds" => self.seeds = parse_seeds(key, value)?,
                    "root" => self.run_root = PathBuf::from(value),
                    _ => return Err(unknown(key)),
                }
                true
            }
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(unknown(key))
        }
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped;
    /// a key may appear only once per text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            let value = unquote(value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{key}: set twice (line {})", i + 1)));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Defaults, then `text`, then `overrides`, then validation.
    pub fn resolve(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(t) = text {
            cfg.apply_text(t)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("config file {}: {e}", p.display())))?,
            ),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    /// Checks every cross-field invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        invariant("dataset.num_classes", d.num_classes >= 4, "need at least 4 classes")?;
        invariant("dataset.images_per_class", d.images_per_class >= 1, "must be at least 1")?;
        invariant("dataset.test_per_class", d.test_per_class >= 1, "must be at least 1")?;
        invariant("dataset.image_side", d.image_side >= 1, "must be positive")?;
        invariant(
            "dataset.noise_std",
            d.noise_std.is_finite() && d.noise_std >= 0.0,
            "must be a finite number ≥ 0",
        )?;
        invariant(
            "model.template",
            self.template.contains("{classname}"),
            "must contain a {classname} slot",
        )?;
        invariant(
            "model.patch_size",
            self.patch_size >= 1 && d.image_side % self.patch_size == 0,
            "must be positive and divide dataset.image_side",
        )?;
        invariant(
            "model.logit_scale",
            self.logit_scale.is_finite() && self.logit_scale > 0.0,
            "must be positive",
        )?;
        for (section, t) in [("teacher", &self.teacher), ("student", &self.student)] {
            for (field, v) in [
                ("layers", t.layers),
                ("width", t.width),
                ("heads", t.heads),
                ("mlp_width", t.mlp_width),
                ("output_dim", t.output_dim),
            ] {
                invariant(&format!("{section}.{field}"), v >= 1, "must be positive")?;
            }
            invariant(
                &format!("{section}.heads"),
                t.width % t.heads == 0,
                "must divide the width",
            )?;
            let words = self.template.split_whitespace().count();
            invariant(
                &format!("{section}.max_seq_len"),
                t.max_seq_len > words,
                "too short for the template caption and end marker",
            )?;
        }
        invariant("prompts.depth", self.prompts.depth >= 1, "must be at least 1")?;
        let template_words = self.template.split_whitespace().filter(|w| *w != "{classname}").count();
        invariant(
            "prompts.length",
            self.prompts.length == template_words,
            &format!("must equal the {template_words} template words it is initialized from"),
        )?;
        let p = &self.pretrain;
        invariant("pretrain.epochs", p.epochs >= 1, "must be at least 1")?;
        invariant("pretrain.batch_size", p.batch_size >= 1, "must be at least 1")?;
        invariant("pretrain.lr", p.lr.is_finite() && p.lr > 0.0, "must be positive")?;
        invariant("pretrain.images_per_class", p.images_per_class >= 1, "must be at least 1")?;
        invariant(
            "pretrain.noise_std",
            p.noise_std.is_finite() && p.noise_std >= 0.0,
            "must be a finite number ≥ 0",
        )?;
        for (section, t) in [("stage1", &self.stage1.train), ("stage2", &self.stage2.train)] {
            invariant(&format!("{section}.epochs"), t.epochs >= 1, "must be at least 1")?;
            invariant(&format!("{section}.batch_size"), t.batch_size >= 1, "must be at least 1")?;
            invariant(&format!("{section}.lr"), t.lr.is_finite() && t.lr > 0.0, "must be positive")?;
            invariant(
                &format!("{section}.momentum"),
                t.momentum.is_finite() && (0.0..1.0).contains(&t.momentum),
                "must lie in [0, 1)",
            )?;
            invariant(&format!("{section}.tau"), t.tau.is_finite() && t.tau > 0.0, "must be positive")?;
        }
        invariant("stage1.shots", self.stage1.shots >= 1, "must be at least 1")?;
        invariant(
            "stage1.shots",
            self.stage1.shots <= d.images_per_class,
            "exceeds dataset.images_per_class",
        )?;
        invariant(
            "stage2.per_class_cap",
            self.stage2.per_class_cap.0 != Some(0),
            "must be at least 1 or `all`",
        )?;
        invariant(
            "distill.projector_layers",
            self.distill.projector_layers >= 1,
            "must be at least 1",
        )?;
        self.distill
            .variant
            .validate()
            .map_err(|e| Error::Config(format!("distill.text_branch: {e}")))?;
        invariant("run.seeds", !self.seeds.is_empty(), "needs at least one seed")?;
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        invariant("run.seeds", sorted.len() == self.seeds.len(), "contains duplicates")?;
        Ok(())
    }

    /// Canonical `key = value` text; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 over the canonical text without `run.root`, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k == "run.root" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Run directory: root (or the environment override) joined with the
    /// first 16 hex digits of the hash.
    pub fn run_dir(&self) -> PathBuf {
        self.effective_root().join(&self.hash()[..16])
    }

    pub fn effective_root(&self) -> PathBuf {
        match std::env::var_os(RUN_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.run_root.clone(),
        }
    }

    pub fn teacher_clip(&self, vocab_size: usize) -> Result<ClipConfig> {
        self.teacher
            .clip_config(self.dataset.image_side, self.patch_size, vocab_size, self.prompts, self.logit_scale)
    }

    pub fn student_clip(&self, vocab_size: usize) -> Result<ClipConfig> {
        self.student
            .clip_config(self.dataset.image_side, self.patch_size, vocab_size, self.prompts, self.logit_scale)
    }

    /// Stage I settings for one run seed.
    pub fn stage1_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.stage1.train.clone()
        }
    }

    pub fn stage2_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.stage2.train.clone()
        }
    }

    /// Config with one seed, used for a single-seed run.
    pub fn with_seeds(&self, seeds: Vec<u64>) -> Self {
        Self {
            seeds,
            ..self.clone()
        }
    }
}

/// Pretraining hash keyed by everything that shapes a backbone.
pub(crate) fn backbone_key(cfg: &ExperimentConfig, tower: &TowerSpec) -> String {
    let mut h = Sha256::new();
    let d = &cfg.dataset;
    let p = &cfg.pretrain;
    let text = format!(
        "classes={} side={} data_seed={} template={} patch={} scale={:?} tower={:?} prompts={:?} \
         pre_epochs={} pre_batch={} pre_lr={:?} pre_ipc={} pre_noise={:?} pre_seed={}",
        d.num_classes,
        d.image_side,
        d.seed,
        cfg.template,
        cfg.patch_size,
        cfg.logit_scale,
        tower,
        cfg.prompts,
        p.epochs,
        p.batch_size,
        p.lr,
        p.images_per_class,
        p.noise_std,
        p.seed
    );
    h.update(text.as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("{key}: unknown key"))
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

/// Splits `--section.key value` pairs out of an argument list.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .filter(|k| k.contains('.'))
            .ok_or_else(|| Error::Config(format!("{a}: expected --section.key value")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| Error::Config(format!("{key}: missing value")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}
