//! A small pre-norm vision transformer with optional token sparsification.
//!
//! The same forward pass serves the frozen teacher (no stages), the student
//! during training (fixed-length sequence, attention masking) and the student
//! at inference (surviving tokens physically gathered at every stage).

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attnmask::{masked_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::inference::{self, PruneSchedule, Strategy};
use crate::params::{leaf_params, linear, linear_init, trunc_normal, ParamTree};
use crate::predictor::{self, PredictorParams};
use crate::tensorcore::{Graph, Tensor, Var, LN_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels_in: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl ViTConfig {
    /// 32×32 grayscale, 4×4 patches, 6 blocks of width 64.
    pub fn desk() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels_in: 1,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 10,
        }
    }

    pub fn deit_s() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels_in: 3,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            num_classes: 1000,
        }
    }

    pub fn deit_ti() -> Self {
        ViTConfig {
            embed_dim: 192,
            heads: 3,
            ..Self::deit_s()
        }
    }

    /// Look up a named architecture (`desk`, `deit-s`, `deit-ti`).
    pub fn named(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "desk" => Some(Self::desk()),
            "deit-s" | "deit-small" => Some(Self::deit_s()),
            "deit-ti" | "deit-tiny" => Some(Self::deit_ti()),
            _ => None,
        }
    }

    /// Same layout at a different width; head count keeps a 64-wide head.
    pub fn with_embed_dim(&self, embed_dim: usize) -> Self {
        ViTConfig {
            embed_dim,
            heads: (embed_dim / 64).max(1),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.embed_dim < 4 || self.channels_in == 0 || self.num_classes == 0 || self.depth == 0 {
            return bad("embed_dim ≥ 4 and non-zero channels, classes and depth required".into());
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
            return bad(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels_in * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

leaf_params! {
    pub struct MlpParams { w1, b1, w2, b2 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub attn: AttentionParams<T>,
    pub ln2_g: T,
    pub ln2_b: T,
    pub mlp: MlpParams<T>,
}

impl<T> ParamTree<T> for BlockParams<T> {
    type Mapped<U> = BlockParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            ln1_g: f(&format!("{prefix}ln1_g"), &self.ln1_g),
            ln1_b: f(&format!("{prefix}ln1_b"), &self.ln1_b),
            attn: self.attn.map_named(&format!("{prefix}attn."), f),
            ln2_g: f(&format!("{prefix}ln2_g"), &self.ln2_g),
            ln2_b: f(&format!("{prefix}ln2_b"), &self.ln2_b),
            mlp: self.mlp.map_named(&format!("{prefix}mlp."), f),
        }
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&format!("{prefix}ln1_g"), &self.ln1_g);
        f(&format!("{prefix}ln1_b"), &self.ln1_b);
        self.attn.visit_named(&format!("{prefix}attn."), f);
        f(&format!("{prefix}ln2_g"), &self.ln2_g);
        f(&format!("{prefix}ln2_b"), &self.ln2_b);
        self.mlp.visit_named(&format!("{prefix}mlp."), f);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}ln1_g"), &mut self.ln1_g);
        f(&format!("{prefix}ln1_b"), &mut self.ln1_b);
        self.attn.visit_named_mut(&format!("{prefix}attn."), f);
        f(&format!("{prefix}ln2_g"), &mut self.ln2_g);
        f(&format!("{prefix}ln2_b"), &mut self.ln2_b);
        self.mlp.visit_named_mut(&format!("{prefix}mlp."), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T = Tensor> {
    /// `[channels·P·P, C]`
    pub patch_w: T,
    pub patch_b: T,
    /// `[1, 1, C]`
    pub cls_token: T,
    /// `[N+1, C]`
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: T,
    pub norm_b: T,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ParamTree<T> for ViTParams<T> {
    type Mapped<U> = ViTParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ViTParams<U> {
        ViTParams {
            patch_w: f(&format!("{prefix}patch_w"), &self.patch_w),
            patch_b: f(&format!("{prefix}patch_b"), &self.patch_b),
            cls_token: f(&format!("{prefix}cls_token"), &self.cls_token),
            pos_embed: f(&format!("{prefix}pos_embed"), &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_named(&format!("{prefix}blocks.{i}."), f))
                .collect(),
            norm_g: f(&format!("{prefix}norm_g"), &self.norm_g),
            norm_b: f(&format!("{prefix}norm_b"), &self.norm_b),
            head_w: f(&format!("{prefix}head_w"), &self.head_w),
            head_b: f(&format!("{prefix}head_b"), &self.head_b),
        }
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&format!("{prefix}patch_w"), &self.patch_w);
        f(&format!("{prefix}patch_b"), &self.patch_b);
        f(&format!("{prefix}cls_token"), &self.cls_token);
        f(&format!("{prefix}pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_named(&format!("{prefix}blocks.{i}."), f);
        }
        f(&format!("{prefix}norm_g"), &self.norm_g);
        f(&format!("{prefix}norm_b"), &self.norm_b);
        f(&format!("{prefix}head_w"), &self.head_w);
        f(&format!("{prefix}head_b"), &self.head_b);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}patch_w"), &mut self.patch_w);
        f(&format!("{prefix}patch_b"), &mut self.patch_b);
        f(&format!("{prefix}cls_token"), &mut self.cls_token);
        f(&format!("{prefix}pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_named_mut(&format!("{prefix}blocks.{i}."), f);
        }
        f(&format!("{prefix}norm_g"), &mut self.norm_g);
        f(&format!("{prefix}norm_b"), &mut self.norm_b);
        f(&format!("{prefix}head_w"), &mut self.head_w);
        f(&format!("{prefix}head_b"), &mut self.head_b);
    }
}

impl ViTParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &ViTConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let (patch_w, patch_b) = linear_init(rng, cfg.patch_dim(), c);
        let cls_token = trunc_normal(rng, &[1, 1, c], 0.02);
        let pos_embed = trunc_normal(rng, &[cfg.num_patches() + 1, c], 0.02);
        let blocks = (0..cfg.depth)
            .map(|_| {
                let mut lin = || linear_init(rng, c, c);
                let (wq, bq) = lin();
                let (wk, bk) = lin();
                let (wv, bv) = lin();
                let (wo, bo) = lin();
                let (w1, b1) = linear_init(rng, c, hidden);
                let (w2, b2) = linear_init(rng, hidden, c);
                BlockParams {
                    ln1_g: Tensor::ones([c]),
                    ln1_b: Tensor::zeros([c]),
                    attn: AttentionParams { wq, bq, wk, bk, wv, bv, wo, bo },
                    ln2_g: Tensor::ones([c]),
                    ln2_b: Tensor::zeros([c]),
                    mlp: MlpParams { w1, b1, w2, b2 },
                }
            })
            .collect();
        let (head_w, head_b) = linear_init(rng, c, cfg.num_classes);
        Ok(ViTParams {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            norm_g: Tensor::ones([c]),
            norm_b: Tensor::zeros([c]),
            head_w,
            head_b,
        })
    }
}

/// Backbone plus one prediction module per stage and the per-position
/// logits used by the static baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicParams<T = Tensor> {
    pub vit: ViTParams<T>,
    pub predictors: Vec<PredictorParams<T>>,
    /// `[S, N]` keep logits independent of the input.
    pub static_logits: T,
}

impl<T> ParamTree<T> for DynamicParams<T> {
    type Mapped<U> = DynamicParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> DynamicParams<U> {
        DynamicParams {
            vit: self.vit.map_named(&format!("{prefix}vit."), f),
            predictors: self
                .predictors
                .iter()
                .enumerate()
                .map(|(i, p)| p.map_named(&format!("{prefix}predictors.{i}."), f))
                .collect(),
            static_logits: f(&format!("{prefix}static_logits"), &self.static_logits),
        }
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.vit.visit_named(&format!("{prefix}vit."), f);
        for (i, p) in self.predictors.iter().enumerate() {
            p.visit_named(&format!("{prefix}predictors.{i}."), f);
        }
        f(&format!("{prefix}static_logits"), &self.static_logits);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.vit.visit_named_mut(&format!("{prefix}vit."), f);
        for (i, p) in self.predictors.iter_mut().enumerate() {
            p.visit_named_mut(&format!("{prefix}predictors.{i}."), f);
        }
        f(&format!("{prefix}static_logits"), &mut self.static_logits);
    }
}

impl DynamicParams {
    /// Student initialised from `vit` with fresh prediction modules.
    pub fn from_backbone<R: Rng + ?Sized>(rng: &mut R, vit: ViTParams, cfg: &ViTConfig, stages: usize) -> Self {
        let predictors = (0..stages)
            .map(|_| PredictorParams::init(rng, cfg.embed_dim))
            .collect();
        DynamicParams {
            vit,
            predictors,
            static_logits: Tensor::zeros([stages, cfg.num_patches()]),
        }
    }

    pub fn stages(&self) -> usize {
        self.predictors.len()
    }
}

/// How stage decisions are made.
pub enum Mode<'a> {
    /// Gumbel-sampled hard decisions with straight-through gradients; the
    /// sequence keeps its length and attention is masked.
    Train { rng: &'a mut dyn RngCore, tau: f64 },
    /// As `Train` but with caller-supplied Gumbel noise (`[B, N, 2]` per stage).
    TrainWithNoise { noise: &'a [Tensor], tau: f64 },
    /// Deterministic top-k decisions applied as masks at full length.
    MaskedTopK,
    /// Physical pruning; `seed` drives the random strategy only.
    Infer { seed: u64 },
}

pub struct ForwardOutput {
    /// `[B, K]`
    pub logits: Var,
    /// Cumulative patch masks `[B, N]` per stage (train and masked modes).
    pub masks: Vec<Var>,
    /// Keep probabilities `[B, n, 2]` per stage (prediction and static deciders).
    pub probs: Vec<Var>,
    /// Final normalised tokens `[B, n, C]` including the class token.
    pub final_tokens: Var,
    /// Full-length keep mask `[B, N+1]` after the last stage (masked modes).
    pub final_mask: Option<Var>,
    /// Original patch positions alive after each stage, per sample.
    pub kept: Vec<Vec<Vec<usize>>>,
}

/// Flatten `[B, ch, H, W]` into `[B, N, ch·P·P]` patch rows (row-major grid).
pub fn patchify(images: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let s = images.shape();
    let expect = [s.first().copied().unwrap_or(0), cfg.channels_in, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != expect[1..] {
        return Err(Error::shape("patch_embed", s, &expect));
    }
    let (b, ch, hw, p, grid) = (s[0], cfg.channels_in, cfg.image_size, cfg.patch_size, cfg.grid());
    let pd = cfg.patch_dim();
    let n = cfg.num_patches();
    let src = images.data();
    let mut out = vec![0.0; b * n * pd];
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = &mut out[(bi * n + gy * grid + gx) * pd..][..pd];
                let mut k = 0;
                for c in 0..ch {
                    for py in 0..p {
                        let base = ((bi * ch + c) * hw + gy * p + py) * hw + gx * p;
                        row[k..k + p].copy_from_slice(&src[base..base + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new([b, n, pd], out)
}

/// Patch projection, class token and positional embeddings: `[B, N+1, C]`.
pub fn patch_embed(g: &mut Graph, images: &Tensor, p: &ViTParams<Var>, cfg: &ViTConfig) -> Result<Var> {
    let patches = g.constant(patchify(images, cfg)?);
    let b = images.shape()[0];
    let tokens = linear(g, patches, p.patch_w, p.patch_b)?;
    let zeros = g.constant(Tensor::zeros([b, 1, cfg.embed_dim]));
    let cls = g.add(zeros, p.cls_token)?;
    let x = g.concat(cls, tokens, 1)?;
    g.add(x, p.pos_embed)
}

pub struct BlockOutput {
    pub x: Var,
    /// `[B, H, n, n]`
    pub attn: Var,
}

/// `x + MHSA(LN(x))` then `+ MLP(LN(·))`; `keep: [B, n]` masks attention.
pub fn block_forward(g: &mut Graph, x: Var, p: &BlockParams<Var>, heads: usize, keep: Option<Var>) -> Result<BlockOutput> {
    if let Some(k) = keep {
        let (xs, ks) = (g.shape(x), g.shape(k));
        if xs.len() != 3 || ks != &xs[..2] {
            return Err(Error::shape("block_forward mask", xs, ks));
        }
        if g.value(k).data().chunks(xs[1]).any(|r| r[0] != 1.0) {
            return Err(Error::Contract("class token must be kept".into()));
        }
    }
    let h = g.layer_norm(x, p.ln1_g, p.ln1_b, LN_EPS)?;
    let a = masked_attention(g, h, &p.attn, heads, keep)?;
    let x = g.add(x, a.out)?;
    let h = g.layer_norm(x, p.ln2_g, p.ln2_b, LN_EPS)?;
    let h = linear(g, h, p.mlp.w1, p.mlp.b1)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, p.mlp.w2, p.mlp.b2)?;
    Ok(BlockOutput {
        x: g.add(x, h)?,
        attn: a.attn,
    })
}

fn head(g: &mut Graph, x: Var, p: &ViTParams<Var>) -> Result<(Var, Var)> {
    let tokens = g.layer_norm(x, p.norm_g, p.norm_b, LN_EPS)?;
    let b = g.shape(tokens)[0];
    let c = g.shape(tokens)[2];
    let cls = g.slice(tokens, 1, 0, 1)?;
    let cls = g.reshape(cls, &[b, c])?;
    Ok((linear(g, cls, p.head_w, p.head_b)?, tokens))
}

/// Plain ViT forward (the teacher).
pub fn vit_forward(g: &mut Graph, images: &Tensor, p: &ViTParams<Var>, cfg: &ViTConfig) -> Result<ForwardOutput> {
    let mut x = patch_embed(g, images, p, cfg)?;
    for blk in &p.blocks {
        x = block_forward(g, x, blk, cfg.heads, None)?.x;
    }
    let (logits, final_tokens) = head(g, x, p)?;
    Ok(ForwardOutput {
        logits,
        masks: Vec::new(),
        probs: Vec::new(),
        final_tokens,
        final_mask: None,
        kept: Vec::new(),
    })
}

/// `π = softmax([0, s])` per position for the static decider, `[B, N, 2]`.
fn static_probs(g: &mut Graph, logits: Var, stage: usize, batch: usize) -> Result<Var> {
    let n = g.shape(logits)[1];
    let row = g.slice(logits, 0, stage, 1)?;
    let row = g.reshape(row, &[1, n, 1])?;
    let zeros = g.constant(Tensor::zeros([batch, n, 1]));
    let keep = g.add(zeros, row)?;
    let pair = g.concat_last(zeros, keep)?;
    g.softmax(pair)
}

/// Full sparsified forward pass.
///
/// Stage `s` runs before block `schedule.stage_blocks[s]`. In masked modes
/// the sequence stays at `N+1` tokens; in [`Mode::Infer`] it shrinks to
/// `m^s + 1` using the strategy of `schedule`.
pub fn forward(
    g: &mut Graph,
    images: &Tensor,
    p: &DynamicParams<Var>,
    cfg: &ViTConfig,
    schedule: &PruneSchedule,
    mode: Mode<'_>,
) -> Result<ForwardOutput> {
    schedule.validate(cfg.depth)?;
    let uses_predictor = schedule.strategy == Strategy::Prediction;
    if uses_predictor && p.predictors.len() < schedule.stages() {
        return Err(Error::Config(format!(
            "{} stages scheduled but only {} prediction modules",
            schedule.stages(),
            p.predictors.len()
        )));
    }
    if schedule.strategy == Strategy::Static && g.shape(p.static_logits)[0] < schedule.stages() {
        return Err(Error::Config("static logits have fewer rows than stages".into()));
    }
    match mode {
        Mode::Infer { seed } => forward_infer(g, images, p, cfg, schedule, seed),
        Mode::Train { rng, tau } => forward_masked(g, images, p, cfg, schedule, Decide::Gumbel(GumbelSource::Rng(rng), tau)),
        Mode::TrainWithNoise { noise, tau } => {
            if noise.len() < schedule.stages() {
                return Err(Error::Config("one Gumbel noise tensor per stage required".into()));
            }
            forward_masked(g, images, p, cfg, schedule, Decide::Gumbel(GumbelSource::Noise(noise), tau))
        }
        Mode::MaskedTopK => forward_masked(g, images, p, cfg, schedule, Decide::TopK),
    }
}

enum GumbelSource<'a> {
    Rng(&'a mut dyn RngCore),
    Noise(&'a [Tensor]),
}

enum Decide<'a> {
    Gumbel(GumbelSource<'a>, f64),
    TopK,
}

fn forward_masked(
    g: &mut Graph,
    images: &Tensor,
    p: &DynamicParams<Var>,
    cfg: &ViTConfig,
    schedule: &PruneSchedule,
    mut decide: Decide<'_>,
) -> Result<ForwardOutput> {
    if !matches!(schedule.strategy, Strategy::Prediction | Strategy::Static) {
        return Err(Error::Config(format!(
            "masked forward supports the prediction and static deciders, not {:?}",
            schedule.strategy
        )));
    }
    let b = images.shape().first().copied().unwrap_or(0);
    let n = cfg.num_patches();
    let counts = schedule.kept_counts(n);
    let mut x = patch_embed(g, images, &p.vit, cfg)?;
    let mut full: Option<Var> = None;
    let mut patch_mask = g.constant(Tensor::ones([b, n]));
    let (mut masks, mut probs, mut kept) = (Vec::new(), Vec::new(), Vec::new());
    let mut stage = 0;
    for (i, blk) in p.vit.blocks.iter().enumerate() {
        if stage < schedule.stages() && schedule.stage_blocks[stage] == i {
            let pi = match schedule.strategy {
                Strategy::Static => static_probs(g, p.static_logits, stage, b)?,
                _ => {
                    let tokens = g.slice(x, 1, 1, n)?;
                    predictor::predict_probs(g, tokens, patch_mask, &p.predictors[stage])?
                }
            };
            let decision = match &mut decide {
                Decide::Gumbel(GumbelSource::Rng(rng), tau) => predictor::gumbel_sample(g, pi, *tau, &mut **rng)?,
                Decide::Gumbel(GumbelSource::Noise(noise), tau) => {
                    predictor::gumbel_sample_with_noise(g, pi, *tau, &noise[stage])?
                }
                Decide::TopK => {
                    let hard = topk_mask(g.value(pi), g.value(patch_mask), counts[stage])?;
                    g.constant(hard)
                }
            };
            let alive = g.value(patch_mask).clone();
            patch_mask = g.mul(patch_mask, decision)?;
            if let Some(rescue) = rescue_empty(g.value(patch_mask), &alive, g.value(pi)) {
                let rescue = g.constant(rescue);
                patch_mask = g.add(patch_mask, rescue)?;
            }
            let ones = g.constant(Tensor::ones([b, 1]));
            full = Some(g.concat(ones, patch_mask, 1)?);
            kept.push(
                g.value(patch_mask)
                    .data()
                    .chunks(n)
                    .map(|r| (0..n).filter(|&j| r[j] != 0.0).collect())
                    .collect(),
            );
            masks.push(patch_mask);
            probs.push(pi);
            stage += 1;
        }
        x = block_forward(g, x, blk, cfg.heads, full)?.x;
    }
    let (logits, final_tokens) = head(g, x, &p.vit)?;
    Ok(ForwardOutput {
        logits,
        masks,
        probs,
        final_tokens,
        final_mask: full,
        kept,
    })
}

/// A sampled decision may drop every patch of a sample. Such samples keep
/// their most probable surviving patch; returns the indicator to add, or
/// `None` when no sample is empty.
fn rescue_empty(mask: &Tensor, alive: &Tensor, pi: &Tensor) -> Option<Tensor> {
    let n = mask.shape()[1];
    let mut out = vec![0.0; mask.numel()];
    let mut any = false;
    for (bi, row) in mask.data().chunks(n).enumerate() {
        if row.iter().any(|&v| v != 0.0) {
            continue;
        }
        let best = (0..n)
            .filter(|&j| alive.data()[bi * n + j] != 0.0)
            .max_by(|&a, &b| pi.data()[(bi * n + a) * 2 + 1].total_cmp(&pi.data()[(bi * n + b) * 2 + 1]).then(b.cmp(&a)));
        if let Some(j) = best {
            out[bi * n + j] = 1.0;
            any = true;
        }
    }
    any.then(|| Tensor::new(mask.shape().to_vec(), out).expect("mask shape"))
}

/// Top-`m` of the keep column among tokens still alive in `alive`.
fn topk_mask(pi: &Tensor, alive: &Tensor, m: usize) -> Result<Tensor> {
    let n = alive.shape()[1];
    let mut out = vec![0.0; alive.numel()];
    for (bi, row) in alive.data().chunks(n).enumerate() {
        let live: Vec<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
        let scores: Vec<f64> = live.iter().map(|&j| pi.data()[(bi * n + j) * 2 + 1]).collect();
        for k in inference::topk_select(&scores, m.min(live.len()))? {
            out[bi * n + live[k]] = 1.0;
        }
    }
    Tensor::new([alive.shape()[0], n], out)
}

fn forward_infer(
    g: &mut Graph,
    images: &Tensor,
    p: &DynamicParams<Var>,
    cfg: &ViTConfig,
    schedule: &PruneSchedule,
    seed: u64,
) -> Result<ForwardOutput> {
    let b = images.shape().first().copied().unwrap_or(0);
    let n = cfg.num_patches();
    let mut x = patch_embed(g, images, &p.vit, cfg)?;
    let mut positions: Vec<Vec<usize>> = vec![(0..n).collect(); b];
    let mut rng = inference::strategy_rng(seed);
    let mut last_attn: Option<Var> = None;
    let (mut probs, mut kept) = (Vec::new(), Vec::new());

    if schedule.strategy == Strategy::Structural {
        let at = schedule.structural_block(cfg.depth);
        for (i, blk) in p.vit.blocks.iter().enumerate() {
            if i == at {
                x = inference::structural_pool(g, x, cfg.grid())?;
                kept.push(vec![Vec::new(); b]);
            }
            x = block_forward(g, x, blk, cfg.heads, None)?.x;
        }
        let (logits, final_tokens) = head(g, x, &p.vit)?;
        return Ok(ForwardOutput {
            logits,
            masks: Vec::new(),
            probs,
            final_tokens,
            final_mask: None,
            kept,
        });
    }

    let counts = schedule.kept_counts(n);
    let mut stage = 0;
    for (i, blk) in p.vit.blocks.iter().enumerate() {
        if stage < schedule.stages() && schedule.stage_blocks[stage] == i {
            let live = positions[0].len();
            let m = counts[stage].min(live);
            if m == live {
                kept.push(positions.clone());
                stage += 1;
                let out = block_forward(g, x, blk, cfg.heads, None)?;
                x = out.x;
                last_attn = Some(out.attn);
                continue;
            }
            let select: Vec<Vec<usize>> = match schedule.strategy {
                Strategy::Prediction => {
                    let tokens = g.slice(x, 1, 1, live)?;
                    let ones = g.constant(Tensor::ones([b, live]));
                    let pi = predictor::predict_probs(g, tokens, ones, &p.predictors[stage])?;
                    let sel = (0..b)
                        .map(|bi| {
                            let keep: Vec<f64> =
                                g.value(pi).data()[bi * live * 2..(bi + 1) * live * 2].chunks(2).map(|r| r[1]).collect();
                            inference::topk_select(&keep, m)
                        })
                        .collect::<Result<_>>()?;
                    probs.push(pi);
                    sel
                }
                Strategy::Random => (0..b).map(|_| inference::random_select(&mut rng, live, m)).collect(),
                Strategy::AttentionScore => {
                    let attn = last_attn.ok_or_else(|| {
                        Error::Config("attention-score pruning needs a block before the first stage".into())
                    })?;
                    let scores = inference::cls_attention_scores(g.value(attn));
                    scores.iter().map(|s| inference::topk_select(s, m)).collect::<Result<_>>()?
                }
                Strategy::Static => {
                    let logits = g.value(p.static_logits);
                    let row = &logits.data()[stage * n..(stage + 1) * n];
                    positions
                        .iter()
                        .map(|pos| inference::topk_select(&pos.iter().map(|&j| row[j]).collect::<Vec<_>>(), m))
                        .collect::<Result<_>>()?
                }
                Strategy::Structural => unreachable!("handled above"),
            };
            x = inference::gather_kept(g, x, &select)?;
            for (pos, sel) in positions.iter_mut().zip(&select) {
                *pos = sel.iter().map(|&k| pos[k]).collect();
            }
            kept.push(positions.clone());
            stage += 1;
        }
        let out = block_forward(g, x, blk, cfg.heads, None)?;
        x = out.x;
        last_attn = Some(out.attn);
    }
    let (logits, final_tokens) = head(g, x, &p.vit)?;
    Ok(ForwardOutput {
        logits,
        masks: Vec::new(),
        probs,
        final_tokens,
        final_mask: None,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::bind_frozen;
    use crate::tensorcore::tests::random_tensor;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 2,
            channels_in: 2,
            embed_dim: 16,
            depth: 4,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
        }
    }

    fn perturbed(rng: &mut ChaCha8Rng, cfg: &ViTConfig, stages: usize) -> DynamicParams {
        let vit = ViTParams::init(rng, cfg).unwrap();
        let mut p = DynamicParams::from_backbone(rng, vit, cfg, stages);
        p.visit_named_mut("", &mut |_, t| {
            let shape = t.shape().to_vec();
            let noise = random_tensor(rng, &shape, -0.3, 0.3);
            for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += e;
            }
        });
        p
    }

    #[test]
    fn token_counts() {
        let cfg = ViTConfig {
            image_size: 16,
            patch_size: 8,
            ..tiny()
        };
        assert_eq!(cfg.num_patches(), 4);
        assert_eq!(ViTConfig::deit_s().num_patches(), 196);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let p = ViTParams::init(&mut r, &cfg).unwrap();
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let x = patch_embed(&mut g, &Tensor::zeros([2, 2, 16, 16]), &pv, &cfg).unwrap();
        assert_eq!(g.shape(x), &[2, 5, 16]);
        assert!(matches!(
            patch_embed(&mut g, &Tensor::zeros([2, 2, 12, 12]), &pv, &cfg),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_image_tokens_equal_bias() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut p = ViTParams::init(&mut r, &cfg).unwrap();
        p.pos_embed = Tensor::zeros(p.pos_embed.shape().to_vec());
        p.patch_b = random_tensor(&mut r, &[16], -1.0, 1.0);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let x = patch_embed(&mut g, &Tensor::zeros([1, 2, 8, 8]), &pv, &cfg).unwrap();
        for row in g.value(x).data().chunks(16).skip(1) {
            assert_eq!(row, p.patch_b.data());
        }
    }

    #[test]
    fn patchify_layout() {
        let cfg = ViTConfig {
            image_size: 4,
            patch_size: 2,
            channels_in: 1,
            ..tiny()
        };
        let img = Tensor::new([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(&p.data()[12..], &[10., 11., 14., 15.]);
    }

    #[test]
    fn full_mask_block_is_bitwise_identity() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let p = perturbed(&mut r, &cfg, 0);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let x = g.constant(random_tensor(&mut r, &[2, 17, 16], -1.0, 1.0));
        let a = block_forward(&mut g, x, &pv.vit.blocks[0], 2, None).unwrap();
        let ones = g.constant(Tensor::ones([2, 17]));
        let b = block_forward(&mut g, x, &pv.vit.blocks[0], 2, Some(ones)).unwrap();
        assert_eq!(g.value(a.x), g.value(b.x));
    }

    #[test]
    fn single_token_attention_is_value() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let p = perturbed(&mut r, &cfg, 0);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let x = g.constant(random_tensor(&mut r, &[1, 1, 16], -1.0, 1.0));
        let a = masked_attention(&mut g, x, &pv.vit.blocks[0].attn, 2, None).unwrap();
        let v = linear(&mut g, x, pv.vit.blocks[0].attn.wv, pv.vit.blocks[0].attn.bv).unwrap();
        let expect = linear(&mut g, v, pv.vit.blocks[0].attn.wo, pv.vit.blocks[0].attn.bo).unwrap();
        assert!(g.value(a.out).max_abs_diff(g.value(expect)).unwrap() < 1e-14);
    }

    #[test]
    fn masked_block_matches_gathered_block() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let p = perturbed(&mut r, &cfg, 0);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let x = g.constant(random_tensor(&mut r, &[2, 9, 16], -1.0, 1.0));
        let keep_rows = [vec![0, 2, 3, 7], vec![0, 1, 5, 6, 8]];
        let mut mask = vec![0.0; 18];
        for (b, rows) in keep_rows.iter().enumerate() {
            for &j in rows {
                mask[b * 9 + j] = 1.0;
            }
        }
        let keep = g.constant(Tensor::new([2, 9], mask).unwrap());
        let masked = block_forward(&mut g, x, &pv.vit.blocks[1], 2, Some(keep)).unwrap();
        for (b, rows) in keep_rows.iter().enumerate() {
            let one = g.slice(x, 0, b, 1).unwrap();
            let sub = g.gather_rows(one, std::slice::from_ref(rows)).unwrap();
            let y = block_forward(&mut g, sub, &pv.vit.blocks[1], 2, None).unwrap();
            let m1 = g.slice(masked.x, 0, b, 1).unwrap();
            let m = g.gather_rows(m1, std::slice::from_ref(rows)).unwrap();
            assert!(g.value(y.x).max_abs_diff(g.value(m)).unwrap() < 1e-8);
        }
    }

    #[test]
    fn empty_schedule_is_plain_vit() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let p = perturbed(&mut r, &cfg, 2);
        let img = random_tensor(&mut r, &[2, 2, 8, 8], 0.0, 1.0);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let teacher = vit_forward(&mut g, &img, &pv.vit, &cfg).unwrap();
        let empty = PruneSchedule::new(vec![], 0.7, Strategy::Prediction).unwrap();
        for mode in [Mode::MaskedTopK, Mode::Infer { seed: 0 }] {
            let out = forward(&mut g, &img, &pv, &cfg, &empty, mode).unwrap();
            assert_eq!(g.value(out.logits), g.value(teacher.logits));
            assert!(out.masks.is_empty());
        }
    }

    #[test]
    fn masked_and_gathered_logits_agree() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let p = perturbed(&mut r, &cfg, 3);
        let img = random_tensor(&mut r, &[3, 2, 8, 8], 0.0, 1.0);
        let sched = PruneSchedule::new(vec![1, 2, 3], 0.7, Strategy::Prediction).unwrap();
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let masked = forward(&mut g, &img, &pv, &cfg, &sched, Mode::MaskedTopK).unwrap();
        let infer = forward(&mut g, &img, &pv, &cfg, &sched, Mode::Infer { seed: 0 }).unwrap();
        assert_eq!(masked.kept, infer.kept);
        let diff = g.value(masked.logits).max_abs_diff(g.value(infer.logits)).unwrap();
        assert!(diff < 1e-6, "{diff}");
        assert_eq!(infer.kept[2][0].len(), sched.kept_counts(16)[2]);
    }

    #[test]
    fn train_masks_are_monotone_and_keep_class() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let p = perturbed(&mut r, &cfg, 3);
        let img = random_tensor(&mut r, &[4, 2, 8, 8], 0.0, 1.0);
        let sched = PruneSchedule::new(vec![1, 2, 3], 0.7, Strategy::Prediction).unwrap();
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let out = forward(&mut g, &img, &pv, &cfg, &sched, Mode::Train { rng: &mut r, tau: 1.0 }).unwrap();
        assert_eq!(g.shape(out.final_tokens), &[4, 17, 16]);
        for w in out.masks.windows(2) {
            let (a, b) = (g.value(w[0]).data(), g.value(w[1]).data());
            assert!(a.iter().zip(b).all(|(x, y)| y <= x));
        }
        let fm = g.value(out.final_mask.unwrap());
        assert!(fm.data().chunks(17).all(|r| r[0] == 1.0));
    }

    #[test]
    fn sampled_empty_sample_keeps_one_patch() {
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut p = perturbed(&mut r, &cfg, 3);
        for pr in &mut p.predictors {
            pr.head_w3 = Tensor::zeros(pr.head_w3.shape().to_vec());
            pr.head_b3 = Tensor::new([2], vec![20.0, -20.0]).unwrap();
        }
        let img = random_tensor(&mut r, &[2, 2, 8, 8], 0.0, 1.0);
        let sched = PruneSchedule::new(vec![1, 2, 3], 0.7, Strategy::Prediction).unwrap();
        let noise = vec![Tensor::zeros([2, 16, 2]); 3];
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let out = forward(&mut g, &img, &pv, &cfg, &sched, Mode::TrainWithNoise { noise: &noise, tau: 1.0 }).unwrap();
        for stage in &out.kept {
            assert!(stage.iter().all(|k| k.len() == 1));
        }
        assert_eq!(out.kept[0], out.kept[2]);
    }

    #[test]
    fn invalid_schedule_rejected() {
        assert!(PruneSchedule::new(vec![2, 1], 0.7, Strategy::Prediction).is_err());
        let cfg = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let p = perturbed(&mut r, &cfg, 3);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &p);
        let sched = PruneSchedule::new(vec![1, 2, 9], 0.7, Strategy::Prediction).unwrap();
        let img = Tensor::zeros([1, 2, 8, 8]);
        assert!(forward(&mut g, &img, &pv, &cfg, &sched, Mode::MaskedTopK).is_err());
    }
}
