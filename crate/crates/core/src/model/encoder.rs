//! Pre-norm transformer towers for images and token sequences.
//!
//! The image tower embeds non-overlapping square patches behind a class
//! token; the text tower embeds token ids under a causal mask. Both accept an
//! optional [`PromptSet`](super::PromptSet): level 0 enters with the input
//! sequence, and each deeper level overwrites the same slots before its
//! layer runs.


use super::tensor::{join, Module, ParamTensor};
use crate::autograd::{Graph, Matrix, RowSpan, Var};
use crate::data::{Image, TokenSeq, EOT_TOKEN};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Image,
    Text,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Image => "image",
            Branch::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub branch: Branch,
    pub num_layers: usize,
    pub width: usize,
    pub num_heads: usize,
    pub mlp_width: usize,
    /// Image tokens per side.
    pub patch_grid: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub output_dim: usize,
}

impl EncoderConfig {
    pub fn image(num_layers: usize, width: usize, num_heads: usize, output_dim: usize) -> Self {
        Self {
            branch: Branch::Image,
            num_layers,
            width,
            num_heads,
            mlp_width: 2 * width,
            patch_grid: 4,
            patch_size: 4,
            vocab_size: 0,
            max_seq_len: 0,
            output_dim,
        }
    }

    pub fn text(
        num_layers: usize,
        width: usize,
        num_heads: usize,
        output_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            branch: Branch::Text,
            num_layers,
            width,
            num_heads,
            mlp_width: 2 * width,
            patch_grid: 0,
            patch_size: 0,
            vocab_size,
            max_seq_len,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("width", self.width),
            ("num_heads", self.num_heads),
            ("mlp_width", self.mlp_width),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{} encoder: {name} must be positive", self.branch.name())));
            }
        }
        if self.width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "{} encoder: width {} not divisible by {} heads",
                self.branch.name(),
                self.width,
                self.num_heads
            )));
        }
        match self.branch {
            Branch::Image if self.patch_grid == 0 || self.patch_size == 0 => Err(Error::Config(
                "image encoder: patch_grid and patch_size must be positive".into(),
            )),
            Branch::Text if self.vocab_size < 2 || self.max_seq_len < 2 => Err(Error::Config(
                "text encoder: vocab_size and max_seq_len must be at least 2".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn image_side(&self) -> usize {
        self.patch_grid * self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub weight: T,
    pub bias: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: Norm<T>,
    pub qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub ln2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stem<T> {
    Image { patch: Linear<T>, class_token: T, ln_pre: Norm<T> },
    Text { token_embedding: T },
}

/// Tower weights, generic so the same layout can hold stored tensors or graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub stem: Stem<T>,
    pub position: T,
    pub blocks: Vec<Block<T>>,
    pub ln_post: Norm<T>,
    /// `width × output_dim`, no bias.
    pub proj: T,
}

type MapFn<'a, T, U> = &'a mut dyn FnMut(&str, &T) -> U;
type MutFn<'a, T> = &'a mut dyn FnMut(&str, &mut T);

impl<T> Linear<T> {
    fn map<U>(&self, p: &str, f: MapFn<T, U>) -> Linear<U> {
        Linear {
            weight: f(&join(p, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(p, "bias"), b)),
        }
    }

    fn for_each_mut(&mut self, p: &str, f: MutFn<T>) {
        f(&join(p, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(p, "bias"), b);
        }
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, p: &str, f: MapFn<T, U>) -> Norm<U> {
        Norm {
            gamma: f(&join(p, "gamma"), &self.gamma),
            beta: f(&join(p, "beta"), &self.beta),
        }
    }

    fn for_each_mut(&mut self, p: &str, f: MutFn<T>) {
        f(&join(p, "gamma"), &mut self.gamma);
        f(&join(p, "beta"), &mut self.beta);
    }
}

impl<T> Block<T> {
    fn map<U>(&self, p: &str, f: MapFn<T, U>) -> Block<U> {
        Block {
            ln1: self.ln1.map(&join(p, "ln1"), f),
            qkv: self.qkv.map(&join(p, "attn.qkv"), f),
            attn_out: self.attn_out.map(&join(p, "attn.out"), f),
            ln2: self.ln2.map(&join(p, "ln2"), f),
            fc1: self.fc1.map(&join(p, "mlp.fc1"), f),
            fc2: self.fc2.map(&join(p, "mlp.fc2"), f),
        }
    }

    fn for_each_mut(&mut self, p: &str, f: MutFn<T>) {
        self.ln1.for_each_mut(&join(p, "ln1"), f);
        self.qkv.for_each_mut(&join(p, "attn.qkv"), f);
        self.attn_out.for_each_mut(&join(p, "attn.out"), f);
        self.ln2.for_each_mut(&join(p, "ln2"), f);
        self.fc1.for_each_mut(&join(p, "mlp.fc1"), f);
        self.fc2.for_each_mut(&join(p, "mlp.fc2"), f);
    }
}

impl<T> EncoderWeights<T> {
    pub fn map<U>(&self, p: &str, f: MapFn<T, U>) -> EncoderWeights<U> {
        let stem = match &self.stem {
            Stem::Image { patch, class_token, ln_pre } => Stem::Image {
                patch: patch.map(&join(p, "patch"), f),
                class_token: f(&join(p, "class_token"), class_token),
                ln_pre: ln_pre.map(&join(p, "ln_pre"), f),
            },
            Stem::Text { token_embedding } => Stem::Text {
                token_embedding: f(&join(p, "token_embedding"), token_embedding),
            },
        };
        EncoderWeights {
            stem,
            position: f(&join(p, "position"), &self.position),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(p, &format!("blocks.{i}")), f))
                .collect(),
            ln_post: self.ln_post.map(&join(p, "ln_post"), f),
            proj: f(&join(p, "proj"), &self.proj),
        }
    }

    pub fn for_each_mut(&mut self, p: &str, f: MutFn<T>) {
        match &mut self.stem {
            Stem::Image { patch, class_token, ln_pre } => {
                patch.for_each_mut(&join(p, "patch"), f);
                f(&join(p, "class_token"), class_token);
                ln_pre.for_each_mut(&join(p, "ln_pre"), f);
            }
            Stem::Text { token_embedding } => f(&join(p, "token_embedding"), token_embedding),
        }
        f(&join(p, "position"), &mut self.position);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&join(p, &format!("blocks.{i}")), f);
        }
        self.ln_post.for_each_mut(&join(p, "ln_post"), f);
        f(&join(p, "proj"), &mut self.proj);
    }
}

/// A tower's configuration together with its stored weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub weights: EncoderWeights<ParamTensor>,
}

impl Module for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.weights.map(prefix, &mut |n, t| f(n, t));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.weights.for_each_mut(prefix, f);
    }
}

impl EncoderParams {
    pub fn token_embedding(&self) -> Option<&ParamTensor> {
        match &self.weights.stem {
            Stem::Text { token_embedding } => Some(token_embedding),
            Stem::Image { .. } => None,
        }
    }

    /// Length of the positional table: class token plus patches, or `max_seq_len`.
    pub fn positions(&self) -> usize {
        match self.config.branch {
            Branch::Image => 1 + self.config.num_patches(),
            Branch::Text => self.config.max_seq_len,
        }
    }
}

fn linear_init(rng: &mut rng::Rng, fan_in: usize, fan_out: usize, std: f64, bias: bool) -> Linear<ParamTensor> {
    Linear {
        weight: ParamTensor::normal(&[fan_in, fan_out], std, rng),
        bias: bias.then(|| ParamTensor::zeros(&[fan_out])),
    }
}

fn norm_init(width: usize) -> Norm<ParamTensor> {
    Norm {
        gamma: ParamTensor::filled(&[width], 1.0),
        beta: ParamTensor::zeros(&[width]),
    }
}

/// Deterministic Gaussian initialization from `seed`.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = rng::stream(seed, &format!("init.encoder.{}", config.branch.name()));
    let w = config.width;
    let inv_w = (w as f64).powf(-0.5);
    let depth_scale = (2.0 * config.num_layers as f64).powf(-0.5);
    let (stem, positions) = match config.branch {
        Branch::Image => {
            let patch_dim = config.patch_size * config.patch_size;
            let stem = Stem::Image {
                patch: linear_init(&mut rng, patch_dim, w, (patch_dim as f64).powf(-0.5), true),
                class_token: ParamTensor::normal(&[w], inv_w, &mut rng),
                ln_pre: norm_init(w),
            };
            (stem, 1 + config.num_patches())
        }
        Branch::Text => {
            let stem = Stem::Text {
                token_embedding: ParamTensor::normal(&[config.vocab_size, w], 0.02, &mut rng),
            };
            (stem, config.max_seq_len)
        }
    };
    let pos_std = match config.branch {
        Branch::Image => inv_w,
        Branch::Text => 0.01,
    };
    let position = ParamTensor::normal(&[positions, w], pos_std, &mut rng);
    let blocks = (0..config.num_layers)
        .map(|_| Block {
            ln1: norm_init(w),
            qkv: linear_init(&mut rng, w, 3 * w, inv_w, true),
            attn_out: linear_init(&mut rng, w, w, inv_w * depth_scale, true),
            ln2: norm_init(w),
            fc1: linear_init(&mut rng, w, config.mlp_width, inv_w, true),
            fc2: linear_init(
                &mut rng,
                config.mlp_width,
                w,
                (config.mlp_width as f64).powf(-0.5) * depth_scale,
                true,
            ),
        })
        .collect();
    let proj = ParamTensor::normal(&[w, config.output_dim], inv_w, &mut rng);
    Ok(EncoderParams {
        config: config.clone(),
        weights: EncoderWeights {
            stem,
            position,
            blocks,
            ln_post: norm_init(w),
            proj,
        },
    })
}

/// Places stored parameters into a graph as leaves.
///
/// Whether a leaf takes gradients is decided per name. For finite-difference
/// checks a single scalar can be nudged in `f64` before it enters the graph.
pub struct Binder<'a> {
    graph: &'a mut Graph,
    trainable: &'a dyn Fn(&str) -> bool,
    perturbation: Option<(String, usize, f64)>,
    bound: Vec<(String, Var)>,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &'a mut Graph, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            graph,
            trainable,
            perturbation: None,
            bound: Vec::new(),
        }
    }

    pub fn with_perturbation(mut self, name: &str, index: usize, delta: f64) -> Self {
        self.perturbation = Some((name.to_string(), index, delta));
        self
    }

    pub fn bind(&mut self, name: &str, t: &ParamTensor) -> Var {
        let mut m = t.to_matrix();
        if let Some((n, i, d)) = &self.perturbation {
            if n == name {
                m.data[*i] += d;
            }
        }
        let trainable = (self.trainable)(name);
        let v = self.graph.leaf(m, trainable);
        if trainable {
            self.bound.push((name.to_string(), v));
        }
        v
    }

    pub fn bind_encoder(&mut self, prefix: &str, enc: &EncoderParams) -> EncoderWeights<Var> {
        enc.weights.map(prefix, &mut |n, t| self.bind(n, t))
    }

    /// Trainable leaves created so far, in creation order.
    pub fn finish(self) -> Vec<(String, Var)> {
        self.bound
    }
}

/// Graph handles for an injected prompt set.
#[derive(Debug, Clone)]
pub struct PromptVars {
    pub length: usize,
    pub levels: Vec<Var>,
}

fn linear(g: &mut Graph, x: Var, l: &Linear<Var>) -> Var {
    let y = g.matmul(x, l.weight, false);
    match l.bias {
        Some(b) => g.add_tiled(y, b),
        None => y,
    }
}

fn block(g: &mut Graph, cfg: &EncoderConfig, b: &Block<Var>, x: Var, seq: usize, causal: bool) -> Var {
    let h = g.layer_norm(x, b.ln1.gamma, b.ln1.beta);
    let qkv = linear(g, h, &b.qkv);
    let a = g.attention(qkv, seq, cfg.num_heads, causal);
    let a = linear(g, a, &b.attn_out);
    let x = g.add(x, a);
    let h = g.layer_norm(x, b.ln2.gamma, b.ln2.beta);
    let h = linear(g, h, &b.fc1);
    let h = g.quick_gelu(h);
    let h = linear(g, h, &b.fc2);
    g.add(x, h)
}

/// Overwrites rows `[offset, offset + M)` of every sequence with `prompt`.
fn splice_prompts(g: &mut Graph, x: Var, batch: usize, seq: usize, offset: usize, prompt: Var, m: usize) -> Var {
    let mut spans = Vec::with_capacity(batch * 3);
    for b in 0..batch {
        let base = b * seq;
        if offset > 0 {
            spans.push(RowSpan::new(x, base, offset));
        }
        spans.push(RowSpan::new(prompt, 0, m));
        let rest = seq - offset - m;
        if rest > 0 {
            spans.push(RowSpan::new(x, base + offset + m, rest));
        }
    }
    g.gather(spans)
}

fn check_prompts(cfg: &EncoderConfig, prompts: Option<&PromptVars>) -> Result<()> {
    if let Some(p) = prompts {
        if p.levels.len() > cfg.num_layers {
            return Err(Error::Config(format!(
                "prompt depth {} exceeds {} layers",
                p.levels.len(),
                cfg.num_layers
            )));
        }
        if p.levels.is_empty() || p.length == 0 {
            return Err(Error::Config("prompt set must have depth and length ≥ 1".into()));
        }
    }
    Ok(())
}

/// Flattens each image into `(batch·patches) × patch_size²` rows.
pub fn patchify(cfg: &EncoderConfig, images: &[&Image]) -> Result<Matrix> {
    let side = cfg.image_side();
    let ps = cfg.patch_size;
    let grid = cfg.patch_grid;
    let mut out = Matrix::zeros(images.len() * grid * grid, ps * ps);
    for (b, img) in images.iter().enumerate() {
        if img.side() != side {
            return Err(Error::Shape(format!(
                "image side {} does not match encoder side {side}",
                img.side()
            )));
        }
        for gy in 0..grid {
            for gx in 0..grid {
                let row = out.row_mut(b * grid * grid + gy * grid + gx);
                for py in 0..ps {
                    for px in 0..ps {
                        row[py * ps + px] = f64::from(img.pixel(gy * ps + py, gx * ps + px));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sequence length seen by the image tower's layers.
pub fn image_seq_len(cfg: &EncoderConfig, prompt_len: usize) -> usize {
    1 + prompt_len + cfg.num_patches()
}

/// Raw (unnormalized) image features, one `output_dim` row per image.
pub fn image_forward(
    g: &mut Graph,
    cfg: &EncoderConfig,
    w: &EncoderWeights<Var>,
    prompts: Option<&PromptVars>,
    images: &[&Image],
) -> Result<Var> {
    if cfg.branch != Branch::Image {
        return Err(Error::Config("image_forward needs an image encoder".into()));
    }
    check_prompts(cfg, prompts)?;
    if images.is_empty() {
        return Err(Error::Shape("empty image batch".into()));
    }
    let Stem::Image { patch, class_token, ln_pre } = &w.stem else {
        return Err(Error::Config("image encoder weights lack an image stem".into()));
    };
    let batch = images.len();
    let np = cfg.num_patches();
    let patches = g.constant(patchify(cfg, images)?);
    let tokens = linear(g, patches, patch);

    let mut spans = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        spans.push(RowSpan::new(*class_token, 0, 1));
        spans.push(RowSpan::new(tokens, b * np, np));
    }
    let x = g.gather(spans);
    let mut x = g.add_tiled(x, w.position);

    let m = prompts.map_or(0, |p| p.length);
    let seq = image_seq_len(cfg, m);
    if let Some(p) = prompts {
        let mut spans = Vec::with_capacity(3 * batch);
        for b in 0..batch {
            spans.push(RowSpan::new(x, b * (1 + np), 1));
            spans.push(RowSpan::new(p.levels[0], 0, m));
            spans.push(RowSpan::new(x, b * (1 + np) + 1, np));
        }
        x = g.gather(spans);
    }
    x = g.layer_norm(x, ln_pre.gamma, ln_pre.beta);

    for (layer, blk) in w.blocks.iter().enumerate() {
        if let Some(p) = prompts {
            if layer > 0 && layer < p.levels.len() {
                x = splice_prompts(g, x, batch, seq, 1, p.levels[layer], m);
            }
        }
        x = block(g, cfg, blk, x, seq, false);
    }

    let pooled = g.gather((0..batch).map(|b| RowSpan::new(x, b * seq, 1)).collect());
    let pooled = g.layer_norm(pooled, w.ln_post.gamma, w.ln_post.beta);
    Ok(g.matmul(pooled, w.proj, false))
}

/// Raw text features, one `output_dim` row per sequence, in input order.
///
/// With prompts, the first `M` token positions (the template words) are
/// replaced by level-0 prompt vectors. An end-of-text token is appended and
/// its final hidden state is pooled.
pub fn text_forward(
    g: &mut Graph,
    cfg: &EncoderConfig,
    w: &EncoderWeights<Var>,
    prompts: Option<&PromptVars>,
    seqs: &[&TokenSeq],
) -> Result<Var> {
    if cfg.branch != Branch::Text {
        return Err(Error::Config("text_forward needs a text encoder".into()));
    }
    check_prompts(cfg, prompts)?;
    if seqs.is_empty() {
        return Err(Error::Shape("empty text batch".into()));
    }
    let m = prompts.map_or(0, |p| p.length);
    for s in seqs {
        let len = s.len() + 1;
        if len > cfg.max_seq_len {
            return Err(Error::Length {
                len,
                limit: cfg.max_seq_len,
            });
        }
        if s.len() < m {
            return Err(Error::Config(format!(
                "token sequence of {} ids is shorter than prompt length {m}",
                s.len()
            )));
        }
        if let Some(&bad) = s.ids().iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
    }

    // Equal-length sequences share one batched pass.
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| (seqs[i].len(), i));
    let mut outputs: Vec<(Var, usize)> = Vec::new();
    let mut position_of = vec![(0usize, 0usize); seqs.len()];
    let mut start = 0;
    while start < order.len() {
        let len = seqs[order[start]].len();
        let mut end = start;
        while end < order.len() && seqs[order[end]].len() == len {
            end += 1;
        }
        let group: Vec<&TokenSeq> = order[start..end].iter().map(|&i| seqs[i]).collect();
        let out = text_group(g, cfg, w, prompts, &group)?;
        for (k, &i) in order[start..end].iter().enumerate() {
            position_of[i] = (outputs.len(), k);
        }
        outputs.push((out, group.len()));
        start = end;
    }
    if outputs.len() == 1 {
        return Ok(outputs[0].0);
    }
    let spans = position_of
        .iter()
        .map(|&(grp, k)| RowSpan::new(outputs[grp].0, k, 1))
        .collect();
    Ok(g.gather(spans))
}

fn text_group(
    g: &mut Graph,
    cfg: &EncoderConfig,
    w: &EncoderWeights<Var>,
    prompts: Option<&PromptVars>,
    seqs: &[&TokenSeq],
) -> Result<Var> {
    let Stem::Text { token_embedding } = &w.stem else {
        return Err(Error::Config("text encoder weights lack a token embedding".into()));
    };
    let batch = seqs.len();
    let m = prompts.map_or(0, |p| p.length);
    let seq = seqs[0].len() + 1;
    let mut spans = Vec::with_capacity(batch * (seq + 1));
    for s in seqs {
        if let Some(p) = prompts {
            spans.push(RowSpan::new(p.levels[0], 0, m));
        }
        for &id in &s.ids()[m..] {
            spans.push(RowSpan::new(*token_embedding, id as usize, 1));
        }
        spans.push(RowSpan::new(*token_embedding, EOT_TOKEN as usize, 1));
    }
    let x = g.gather(spans);
    let pos = g.gather(vec![RowSpan::new(w.position, 0, seq)]);
    let mut x = g.add_tiled(x, pos);

    for (layer, blk) in w.blocks.iter().enumerate() {
        if let Some(p) = prompts {
            if layer > 0 && layer < p.levels.len() {
                x = splice_prompts(g, x, batch, seq, 0, p.levels[layer], m);
            }
        }
        x = block(g, cfg, blk, x, seq, true);
    }

    let pooled = g.gather((0..batch).map(|b| RowSpan::new(x, b * seq + seq - 1, 1)).collect());
    let pooled = g.layer_norm(pooled, w.ln_post.gamma, w.ln_post.beta);
    Ok(g.matmul(pooled, w.proj, false))
}
