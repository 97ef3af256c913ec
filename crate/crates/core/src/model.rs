//! The SAT network: patch embedding, class + spatial token, standard
//! transformer blocks, spatial-aware blocks with spatial-query attention,
//! per-layer localization maps and their fused average, and a linear
//! classification head on the class token.

use crate::locmap::LocMap;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Result as TResult, Tensor, TensorError, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture descriptor. The last `num_spatial_blocks` of the
/// `num_blocks` transformer blocks carry spatial-query attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SatConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub num_spatial_blocks: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl Default for SatConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 6,
            num_spatial_blocks: 3,
            num_classes: 4,
            mlp_ratio: 4,
        }
    }
}

impl SatConfig {
    /// Smallest config that still exercises both block kinds; used by the
    /// gradient-check suite.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            num_spatial_blocks: 1,
            num_classes: 3,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_spatial_blocks == 0 || self.num_spatial_blocks > self.num_blocks {
            return Err(ModelError::Config(format!(
                "need 1 <= spatial blocks <= total blocks, got {}/{}",
                self.num_spatial_blocks, self.num_blocks
            )));
        }
        if self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config("classes and mlp ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Patches plus class and spatial tokens.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 2
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    fn first_spatial_block(&self) -> usize {
        self.num_blocks - self.num_spatial_blocks
    }
}

/// Which sublayer a parameter belongs to, for freeze presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    PatchProj,
    ClassToken,
    SpatialToken,
    PosEmbed,
    AttnNorm,
    Attn,
    MlpNorm,
    Mlp,
    Head,
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub frozen: bool,
    pub block: Option<usize>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIdx {
    pub n1g: usize,
    pub n1b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub n2g: usize,
    pub n2b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls: usize,
    pub spa: usize,
    pub pos: usize,
    pub blocks: Vec<BlockIdx>,
    pub head_w: usize,
    pub head_b: usize,
}

/// Parameter set plus architecture descriptor.
#[derive(Debug, Clone)]
pub struct SatModel<S> {
    pub config: SatConfig,
    pub params: Vec<Param<S>>,
    pub index: ParamIndex,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller, rejected outside two standard deviations.
    loop {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<S: Scalar> SatModel<S> {
    pub fn new(config: SatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Param<S>> = Vec::new();

        let push = |params: &mut Vec<Param<S>>,
                        name: String,
                        shape: Vec<usize>,
                        block: Option<usize>,
                        group: ParamGroup,
                        init: Init,
                        rng: &mut ChaCha8Rng|
         -> usize {
            let n = shape.iter().product();
            let data: Vec<S> = match init {
                Init::TruncNormal => (0..n).map(|_| S::cast(trunc_normal(rng, INIT_STD))).collect(),
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
            };
            params.push(Param {
                name,
                tensor: Tensor::new(shape, data).expect("shape/data consistent").with_grad(),
                frozen: false,
                block,
                group,
            });
            params.len() - 1
        };

        let d = config.embed_dim;
        let patch_w = push(
            &mut params,
            "patch_proj.w".into(),
            vec![config.patch_dim(), d],
            None,
            ParamGroup::PatchProj,
            Init::TruncNormal,
            &mut rng,
        );
        let patch_b = push(&mut params, "patch_proj.b".into(), vec![d], None, ParamGroup::PatchProj, Init::Zeros, &mut rng);
        let cls = push(&mut params, "cls_token".into(), vec![d], None, ParamGroup::ClassToken, Init::TruncNormal, &mut rng);
        let spa = push(&mut params, "spa_token".into(), vec![d], None, ParamGroup::SpatialToken, Init::TruncNormal, &mut rng);
        let pos = push(
            &mut params,
            "pos_embed".into(),
            vec![config.seq_len(), d],
            None,
            ParamGroup::PosEmbed,
            Init::TruncNormal,
            &mut rng,
        );

        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let p = |s: &str| format!("block{b}.{s}");
            let hidden = config.mlp_hidden();
            let idx = BlockIdx {
                n1g: push(&mut params, p("norm1.g"), vec![d], Some(b), ParamGroup::AttnNorm, Init::Ones, &mut rng),
                n1b: push(&mut params, p("norm1.b"), vec![d], Some(b), ParamGroup::AttnNorm, Init::Zeros, &mut rng),
                wq: push(&mut params, p("attn.wq"), vec![d, d], Some(b), ParamGroup::Attn, Init::TruncNormal, &mut rng),
                bq: push(&mut params, p("attn.bq"), vec![d], Some(b), ParamGroup::Attn, Init::Zeros, &mut rng),
                wk: push(&mut params, p("attn.wk"), vec![d, d], Some(b), ParamGroup::Attn, Init::TruncNormal, &mut rng),
                bk: push(&mut params, p("attn.bk"), vec![d], Some(b), ParamGroup::Attn, Init::Zeros, &mut rng),
                wv: push(&mut params, p("attn.wv"), vec![d, d], Some(b), ParamGroup::Attn, Init::TruncNormal, &mut rng),
                bv: push(&mut params, p("attn.bv"), vec![d], Some(b), ParamGroup::Attn, Init::Zeros, &mut rng),
                wo: push(&mut params, p("attn.wo"), vec![d, d], Some(b), ParamGroup::Attn, Init::TruncNormal, &mut rng),
                bo: push(&mut params, p("attn.bo"), vec![d], Some(b), ParamGroup::Attn, Init::Zeros, &mut rng),
                n2g: push(&mut params, p("norm2.g"), vec![d], Some(b), ParamGroup::MlpNorm, Init::Ones, &mut rng),
                n2b: push(&mut params, p("norm2.b"), vec![d], Some(b), ParamGroup::MlpNorm, Init::Zeros, &mut rng),
                w1: push(&mut params, p("mlp.w1"), vec![d, hidden], Some(b), ParamGroup::Mlp, Init::TruncNormal, &mut rng),
                b1: push(&mut params, p("mlp.b1"), vec![hidden], Some(b), ParamGroup::Mlp, Init::Zeros, &mut rng),
                w2: push(&mut params, p("mlp.w2"), vec![hidden, d], Some(b), ParamGroup::Mlp, Init::TruncNormal, &mut rng),
                b2: push(&mut params, p("mlp.b2"), vec![d], Some(b), ParamGroup::Mlp, Init::Zeros, &mut rng),
            };
            blocks.push(idx);
        }
        let head_w = push(
            &mut params,
            "head.w".into(),
            vec![d, config.num_classes],
            None,
            ParamGroup::Head,
            Init::TruncNormal,
            &mut rng,
        );
        let head_b = push(&mut params, "head.b".into(), vec![config.num_classes], None, ParamGroup::Head, Init::Zeros, &mut rng);

        Ok(Self {
            config,
            params,
            index: ParamIndex {
                patch_w,
                patch_b,
                cls,
                spa,
                pos,
                blocks,
                head_w,
                head_b,
            },
        })
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_frozen_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.frozen).map(|p| p.tensor.numel()).sum()
    }

    pub fn is_spatial_block(&self, block: usize) -> bool {
        block >= self.config.first_spatial_block()
    }
}

enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// Freeze presets. Preset names follow the sublayers they pin:
/// attention/MLP/all parameters of the standard blocks, or everything except
/// the spatial pathway (spatial token, spatial-block attention, head).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePreset {
    None,
    Attn,
    Mlp,
    Blocks,
    AllButSpatial,
}

impl FreezePreset {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Self::None,
            "attn" => Self::Attn,
            "mlp" => Self::Mlp,
            "blocks" => Self::Blocks,
            "all_but_spatial" => Self::AllButSpatial,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Attn => "attn",
            Self::Mlp => "mlp",
            Self::Blocks => "blocks",
            Self::AllButSpatial => "all_but_spatial",
        }
    }
}

/// Sets the freeze mask; frozen parameters receive zero update in any
/// optimizer step.
pub fn apply_freeze<S: Scalar>(model: &mut SatModel<S>, preset: FreezePreset) {
    let first_spatial = model.config.first_spatial_block();
    for p in &mut model.params {
        let standard = p.block.map(|b| b < first_spatial).unwrap_or(false);
        let spatial = p.block.map(|b| b >= first_spatial).unwrap_or(false);
        p.frozen = match preset {
            FreezePreset::None => false,
            FreezePreset::Attn => standard && p.group == ParamGroup::Attn,
            FreezePreset::Mlp => standard && p.group == ParamGroup::Mlp,
            FreezePreset::Blocks => standard,
            FreezePreset::AllButSpatial => {
                matches!(p.group, ParamGroup::PosEmbed | ParamGroup::PatchProj)
                    || standard
                    || (spatial && matches!(p.group, ParamGroup::MlpNorm | ParamGroup::Mlp))
            }
        };
    }
}

/// Graph-side handles for one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockBound {
    pub n1g: TensorId,
    pub n1b: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub n2g: TensorId,
    pub n2b: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Model parameters loaded into a graph as leaves, in parameter order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub ids: Vec<TensorId>,
}

impl Bound {
    pub fn block(&self, index: &ParamIndex, b: usize) -> BlockBound {
        let bi = &index.blocks[b];
        BlockBound {
            n1g: self.ids[bi.n1g],
            n1b: self.ids[bi.n1b],
            wq: self.ids[bi.wq],
            bq: self.ids[bi.bq],
            wk: self.ids[bi.wk],
            bk: self.ids[bi.bk],
            wv: self.ids[bi.wv],
            bv: self.ids[bi.bv],
            wo: self.ids[bi.wo],
            bo: self.ids[bi.bo],
            n2g: self.ids[bi.n2g],
            n2b: self.ids[bi.n2b],
            w1: self.ids[bi.w1],
            b1: self.ids[bi.b1],
            w2: self.ids[bi.w2],
            b2: self.ids[bi.b2],
        }
    }
}

impl<S: Scalar> SatModel<S> {
    /// Loads every parameter into the graph; frozen ones enter as constants.
    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.grad = None;
                t.requires_grad = !p.frozen;
                g.value(t)
            })
            .collect();
        Bound { ids }
    }
}

/// Rearranges `[B, h, w, 3]` images into `[B, patches, P*P*3]` rows,
/// patches in row-major order.
pub fn extract_patches<S: Scalar>(images: &Tensor<S>, config: &SatConfig) -> Result<Tensor<S>> {
    let shape = &images.shape;
    if shape.len() != 4 || shape[1] != config.image_size || shape[2] != config.image_size || shape[3] != 3 {
        return Err(ModelError::Config(format!(
            "expected image batch [B, {0}, {0}, 3], got {shape:?}",
            config.image_size
        )));
    }
    let b = shape[0];
    let p = config.patch_size;
    let side = config.patches_per_side();
    let n = config.num_patches();
    let pd = config.patch_dim();
    let img_stride = config.image_size * config.image_size * 3;
    let mut out = vec![S::zero(); b * n * pd];
    for bi in 0..b {
        let img = &images.data[bi * img_stride..(bi + 1) * img_stride];
        for py in 0..side {
            for px in 0..side {
                let patch = py * side + px;
                let dst = &mut out[(bi * n + patch) * pd..(bi * n + patch + 1) * pd];
                let mut k = 0;
                for dy in 0..p {
                    let row = ((py * p + dy) * config.image_size + px * p) * 3;
                    dst[k..k + p * 3].copy_from_slice(&img[row..row + p * 3]);
                    k += p * 3;
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, n, pd], out).expect("sized correctly"))
}

/// Patch projection, class + spatial token prepending, and positional
/// embedding. Returns `[B, seq_len, D]` with the class token at row 0 and
/// the spatial token at row 1.
pub fn patch_embed<S: Scalar>(
    g: &mut Graph<S>,
    images: &Tensor<S>,
    model: &SatModel<S>,
    bound: &Bound,
) -> Result<TensorId> {
    let cfg = &model.config;
    let patches = extract_patches(images, cfg)?;
    let batch = patches.shape[0];
    let pid = g.constant(patches);
    let proj = g.matmul(pid, bound.ids[model.index.patch_w])?;
    let tok = g.add(proj, bound.ids[model.index.patch_b])?;

    let d = cfg.embed_dim;
    let cls_row = g.reshape(bound.ids[model.index.cls], vec![1, d])?;
    let spa_row = g.reshape(bound.ids[model.index.spa], vec![1, d])?;
    let cls_b = g.repeat(cls_row, batch)?; // [B, 1, D]
    let spa_b = g.repeat(spa_row, batch)?;
    let seq = g.concat(&[cls_b, spa_b, tok], 1)?;
    Ok(g.add(seq, bound.ids[model.index.pos])?)
}

/// How spatial-query attention modulates the attention matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqaMode {
    /// Plain multi-head self-attention.
    Standard,
    /// Post-softmax columns scaled by the learned foreground probabilities.
    Learned,
    /// Same wiring, modulation forced to all-ones (degeneracy check).
    ForcedOnes,
}

pub struct AttnOutput {
    pub out: TensorId,
    /// Foreground probabilities `[B, seq_len]`, present unless `Standard`.
    pub m_spa: Option<TensorId>,
}

/// Multi-head attention over `[B, S, D]`, optionally modulated by the
/// spatial token's query similarities.
///
/// Per head, the spatial token's query row (index 1) is dotted with all
/// keys and scaled by 1/sqrt(head_dim); head similarities are averaged and
/// squashed to one shared probability vector per layer. The probabilities
/// scale attention columns after the softmax.
pub fn sqa_attention<S: Scalar>(
    g: &mut Graph<S>,
    x_normed: TensorId,
    p: &BlockBound,
    config: &SatConfig,
    mode: SqaMode,
) -> TResult<AttnOutput> {
    let shape = g.shape(x_normed).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let heads = config.num_heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut project = |w: TensorId, bias: TensorId| -> TResult<TensorId> {
        let y = g.matmul(x_normed, w)?;
        let y = g.add(y, bias)?;
        let y = g.reshape(y, vec![b, s, heads, hd])?;
        g.transpose(y, 1, 2) // [B, heads, S, head_dim]
    };
    let q = project(p.wq, p.bq)?;
    let k = project(p.wk, p.bk)?;
    let v = project(p.wv, p.bv)?;

    let kt = g.transpose(k, 2, 3)?; // [B, heads, head_dim, S]
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, scale);
    let attn = g.softmax(scores, 3)?; // rows sum to 1

    let m_spa = if mode == SqaMode::Standard {
        None
    } else {
        let q_spa = g.slice(q, 2, 1, 2)?; // [B, heads, 1, head_dim]
        let sim = g.matmul(q_spa, kt)?; // [B, heads, 1, S]
        let sim = g.scale(sim, scale);
        let sim = g.reshape(sim, vec![b, heads, s])?;
        let sim = g.mean_axis(sim, 1)?; // heads share one probability vector
        Some(g.sigmoid(sim)) // [B, S]
    };

    let modulated = match mode {
        SqaMode::Standard => attn,
        SqaMode::Learned => {
            let m = g.reshape(m_spa.unwrap(), vec![b, 1, 1, s])?;
            g.mul(attn, m)?
        }
        SqaMode::ForcedOnes => {
            let ones = g.constant(Tensor::full(vec![b, 1, 1, s], S::one()));
            g.mul(attn, ones)?
        }
    };

    let ctx = g.matmul(modulated, v)?; // [B, heads, S, head_dim]
    let ctx = g.transpose(ctx, 1, 2)?;
    let ctx = g.reshape(ctx, vec![b, s, d])?;
    let out = g.matmul(ctx, p.wo)?;
    let out = g.add(out, p.bo)?;
    Ok(AttnOutput { out, m_spa })
}

fn block_body<S: Scalar>(
    g: &mut Graph<S>,
    f_prev: TensorId,
    p: &BlockBound,
    config: &SatConfig,
    mode: SqaMode,
) -> TResult<(TensorId, Option<TensorId>)> {
    let x = g.layer_norm(f_prev, p.n1g, p.n1b, LAYER_NORM_EPS)?;
    let attn = sqa_attention(g, x, p, config, mode)?;
    let z = g.add(f_prev, attn.out)?;
    let y = g.layer_norm(z, p.n2g, p.n2b, LAYER_NORM_EPS)?;
    let h = g.matmul(y, p.w1)?;
    let h = g.add(h, p.b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, p.w2)?;
    let o = g.add(o, p.b2)?;
    let f = g.add(z, o)?;
    Ok((f, attn.m_spa))
}

/// Pre-norm transformer block: `Z = F + MHA(LN(F))`, `F' = Z + MLP(LN(Z))`.
pub fn transformer_block<S: Scalar>(
    g: &mut Graph<S>,
    f_prev: TensorId,
    p: &BlockBound,
    config: &SatConfig,
) -> TResult<TensorId> {
    Ok(block_body(g, f_prev, p, config, SqaMode::Standard)?.0)
}

/// Spatial-aware block: same structure with modulated attention; also
/// returns the layer's foreground-probability vector `[B, seq_len]`.
pub fn sqa_transformer_block<S: Scalar>(
    g: &mut Graph<S>,
    f_prev: TensorId,
    p: &BlockBound,
    config: &SatConfig,
) -> TResult<(TensorId, TensorId)> {
    let (f, m) = block_body(g, f_prev, p, config, SqaMode::Learned)?;
    Ok((f, m.expect("learned mode produces a probability vector")))
}

/// Drops the class and spatial token entries and reshapes the patch part of
/// the probability vector into an `H x W` map.
pub fn extract_layer_map<S: Scalar>(g: &mut Graph<S>, m_spa: TensorId, h: usize, w: usize) -> TResult<TensorId> {
    let shape = g.shape(m_spa).to_vec();
    let (b, s) = (shape[0], shape[1]);
    debug_assert_eq!(s, h * w + 2);
    let patches = g.slice(m_spa, 1, 2, s)?;
    g.reshape(patches, vec![b, h, w])
}

/// In-graph handles produced by a forward pass over a batch.
pub struct GraphForward {
    pub logits: TensorId,             // [B, classes]
    pub layer_maps: Vec<TensorId>,    // each [B, H, W]
    pub fused_map: TensorId,          // [B, H, W]
    pub spatial_vectors: Vec<TensorId>, // each [B, seq_len]
    pub bound: Bound,
}

/// Per-image outputs in evaluation form.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    pub per_layer_maps: Vec<LocMap>,
    pub fused_map: LocMap,
}

impl<S: Scalar> SatModel<S> {
    /// Runs the network on `[B, h, w, 3]` images inside `g`.
    pub fn forward_graph(&self, g: &mut Graph<S>, images: &Tensor<S>) -> Result<GraphForward> {
        let bound = self.bind(g);
        self.forward_bound(g, images, bound)
    }

    /// Forward pass over an existing parameter binding (lets callers swap
    /// individual parameter tensors).
    pub fn forward_bound(&self, g: &mut Graph<S>, images: &Tensor<S>, bound: Bound) -> Result<GraphForward> {
        if images.shape.first().copied().unwrap_or(0) == 0 {
            return Err(ModelError::Config("batch must be nonempty".into()));
        }
        let cfg = &self.config;
        let mut f = patch_embed(g, images, self, &bound)?;
        let side = cfg.patches_per_side();
        let mut layer_maps = Vec::new();
        let mut spatial_vectors = Vec::new();
        for bidx in 0..cfg.num_blocks {
            let p = bound.block(&self.index, bidx);
            if self.is_spatial_block(bidx) {
                let (fi, m) = sqa_transformer_block(g, f, &p, cfg)?;
                f = fi;
                spatial_vectors.push(m);
                layer_maps.push(extract_layer_map(g, m, side, side)?);
            } else {
                f = transformer_block(g, f, &p, cfg)?;
            }
        }
        let mut fused = layer_maps[0];
        for &m in &layer_maps[1..] {
            fused = g.add(fused, m)?;
        }
        let fused_map = g.scale(fused, 1.0 / layer_maps.len() as f64);

        let batch = images.shape[0];
        let cls_rows = g.slice(f, 1, 0, 1)?;
        let cls_flat = g.reshape(cls_rows, vec![batch, cfg.embed_dim])?;
        let logits = g.matmul(cls_flat, bound.ids[self.index.head_w])?;
        let logits = g.add(logits, bound.ids[self.index.head_b])?;

        Ok(GraphForward {
            logits,
            layer_maps,
            fused_map,
            spatial_vectors,
            bound,
        })
    }

    /// Inference convenience: no tape, outputs per image.
    pub fn forward(&self, images: &Tensor<S>) -> Result<Vec<ForwardOutput>> {
        let mut g = Graph::inference();
        let fwd = self.forward_graph(&mut g, images)?;
        let batch = images.shape[0];
        let c = self.config.num_classes;
        let side = self.config.patches_per_side();
        let plane = side * side;
        let mut outs = Vec::with_capacity(batch);
        for i in 0..batch {
            let logits = g.data(fwd.logits)[i * c..(i + 1) * c].iter().map(|v| v.as_f32()).collect();
            let per_layer_maps: Vec<LocMap> = fwd
                .layer_maps
                .iter()
                .map(|&m| {
                    let vals = g.data(m)[i * plane..(i + 1) * plane].iter().map(|v| v.as_f32()).collect();
                    LocMap::new(side, side, vals)
                })
                .collect();
            let fused_vals = g.data(fwd.fused_map)[i * plane..(i + 1) * plane]
                .iter()
                .map(|v| v.as_f32())
                .collect();
            outs.push(ForwardOutput {
                logits,
                per_layer_maps,
                fused_map: LocMap::new(side, side, fused_vals),
            });
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::numel;
    use rand::Rng;

    fn rand_images(rng: &mut ChaCha8Rng, b: usize, size: usize) -> Tensor<f32> {
        let n = b * size * size * 3;
        let data = (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        Tensor::new(vec![b, size, size, 3], data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SatConfig::default().validate().is_ok());
        let mut bad = SatConfig::default();
        bad.patch_size = 7;
        assert!(bad.validate().is_err());
        let mut bad = SatConfig::default();
        bad.num_spatial_blocks = 9;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sequence_length_for_default_config() {
        let cfg = SatConfig::default();
        assert_eq!(cfg.num_patches(), 64);
        assert_eq!(cfg.seq_len(), 66);
    }

    #[test]
    fn class_and_spatial_tokens_are_distinct() {
        let m = SatModel::<f32>::new(SatConfig::tiny(), 0).unwrap();
        let cls = &m.params[m.index.cls].tensor.data;
        let spa = &m.params[m.index.spa].tensor.data;
        assert_ne!(cls, spa);
    }

    #[test]
    fn patch_embed_zero_image_gives_pos_embedding() {
        let cfg = SatConfig::tiny();
        let model = SatModel::<f32>::new(cfg, 1).unwrap();
        let images = Tensor::zeros(vec![1, cfg.image_size, cfg.image_size, 3]);
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let f0 = patch_embed(&mut g, &images, &model, &bound).unwrap();
        let d = cfg.embed_dim;
        let pos = &model.params[model.index.pos].tensor.data;
        // Patch rows (2..) see zero projections and zero bias, so they must
        // equal the positional embedding rows exactly.
        for row in 2..cfg.seq_len() {
            assert_eq!(&g.data(f0)[row * d..(row + 1) * d], &pos[row * d..(row + 1) * d]);
        }
    }

    #[test]
    fn patch_embed_is_local_per_patch() {
        let cfg = SatConfig::tiny();
        let mut model = SatModel::<f32>::new(cfg, 2).unwrap();
        // Zero the positional embedding so rows compare pre-position-add.
        let pos = model.index.pos;
        for v in &mut model.params[pos].tensor.data {
            *v = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_images(&mut rng, 1, cfg.image_size);
        let mut b = a.clone();
        // Perturb exactly one patch (patch row 1, i.e. top-right 8x8 block).
        for dy in 0..cfg.patch_size {
            for dx in 0..cfg.patch_size {
                let x = cfg.patch_size + dx;
                let i = (dy * cfg.image_size + x) * 3;
                b.data[i] = 1.0 - b.data[i];
            }
        }
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let fa = patch_embed(&mut g, &a, &model, &bound).unwrap();
        let fb = patch_embed(&mut g, &b, &model, &bound).unwrap();
        let d = cfg.embed_dim;
        for row in 0..cfg.seq_len() {
            let same = g.data(fa)[row * d..(row + 1) * d] == g.data(fb)[row * d..(row + 1) * d];
            // Token rows 0,1 and all patches except row 3 (= patch 1) agree.
            assert_eq!(same, row != 3, "row {row}");
        }
    }

    #[test]
    fn block_with_zeroed_projections_is_identity() {
        let cfg = SatConfig::tiny();
        let mut model = SatModel::<f32>::new(cfg, 4).unwrap();
        let bi = model.index.blocks[0];
        for idx in [bi.wo, bi.bo, bi.w2, bi.b2] {
            for v in &mut model.params[idx].tensor.data {
                *v = 0.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = cfg.seq_len();
        let d = cfg.embed_dim;
        let x = Tensor::new(vec![1, s, d], (0..s * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let xid = g.constant(x.clone());
        let p = bound.block(&model.index, 0);
        let y = transformer_block(&mut g, xid, &p, &cfg).unwrap();
        assert_eq!(g.data(y), x.data.as_slice());
        assert_eq!(g.shape(y), x.shape.as_slice());
    }

    #[test]
    fn sqa_forced_ones_matches_standard_attention() {
        let cfg = SatConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..20 {
            let model = SatModel::<f32>::new(cfg, seed).unwrap();
            let s = cfg.seq_len();
            let d = cfg.embed_dim;
            let x = Tensor::new(vec![2, s, d], (0..2 * s * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
            let mut g = Graph::inference();
            let bound = model.bind(&mut g);
            let xid = g.constant(x);
            let p = bound.block(&model.index, 0);
            let std = sqa_attention(&mut g, xid, &p, &cfg, SqaMode::Standard).unwrap();
            let ones = sqa_attention(&mut g, xid, &p, &cfg, SqaMode::ForcedOnes).unwrap();
            for (a, b) in g.data(std.out).iter().zip(g.data(ones.out)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sqa_zero_query_weights_give_half_modulation() {
        let cfg = SatConfig::tiny();
        let mut model = SatModel::<f32>::new(cfg, 7).unwrap();
        let bi = model.index.blocks[0];
        for idx in [bi.wq, bi.bq, bi.bo] {
            for v in &mut model.params[idx].tensor.data {
                *v = 0.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = cfg.seq_len();
        let d = cfg.embed_dim;
        let x = Tensor::new(vec![1, s, d], (0..s * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let xid = g.constant(x);
        let p = bound.block(&model.index, 0);
        let learned = sqa_attention(&mut g, xid, &p, &cfg, SqaMode::Learned).unwrap();
        for v in g.data(learned.m_spa.unwrap()) {
            assert_eq!(*v, 0.5);
        }
        // With the output bias zeroed, halving the attention matrix halves
        // the projected output as well.
        let std = sqa_attention(&mut g, xid, &p, &cfg, SqaMode::Standard).unwrap();
        for (l, s) in g.data(learned.out).iter().zip(g.data(std.out)) {
            assert!((l - 0.5 * s).abs() < 1e-6);
        }
    }

    #[test]
    fn sqa_probabilities_in_open_interval_and_rows_shrink() {
        let cfg = SatConfig::tiny();
        let model = SatModel::<f32>::new(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = cfg.seq_len();
        let d = cfg.embed_dim;
        let x = Tensor::new(vec![1, s, d], (0..s * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let xid = g.constant(x);
        let p = bound.block(&model.index, 0);
        let out = sqa_attention(&mut g, xid, &p, &cfg, SqaMode::Learned).unwrap();
        for v in g.data(out.m_spa.unwrap()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn extract_layer_map_crop_semantics() {
        let mut g = Graph::<f32>::inference();
        let m = g.constant(Tensor::new(vec![1, 6], vec![0.9, 0.8, 0.1, 0.2, 0.3, 0.4]).unwrap());
        let map = extract_layer_map(&mut g, m, 2, 2).unwrap();
        assert_eq!(g.data(map), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(g.shape(map), &[1, 2, 2]);
    }

    #[test]
    fn forward_shapes_and_fused_mean() {
        let cfg = SatConfig::default();
        let model = SatModel::<f32>::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let images = rand_images(&mut rng, 2, cfg.image_size);
        let outs = model.forward(&images).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert_eq!(o.per_layer_maps.len(), cfg.num_spatial_blocks);
            assert_eq!(o.logits.len(), cfg.num_classes);
            for (i, v) in o.fused_map.values.iter().enumerate() {
                let mean: f32 = o.per_layer_maps.iter().map(|m| m.values[i]).sum::<f32>() / cfg.num_spatial_blocks as f32;
                assert!((v - mean).abs() < 1e-6);
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn forward_identical_images_identical_outputs() {
        let cfg = SatConfig::tiny();
        let model = SatModel::<f32>::new(cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let one = rand_images(&mut rng, 1, cfg.image_size);
        let mut two = one.data.clone();
        two.extend_from_slice(&one.data);
        let images = Tensor::new(vec![2, cfg.image_size, cfg.image_size, 3], two).unwrap();
        let outs = model.forward(&images).unwrap();
        assert_eq!(outs[0].logits, outs[1].logits);
        assert_eq!(outs[0].fused_map.values, outs[1].fused_map.values);
    }

    #[test]
    fn patch_permutation_equivariance() {
        // Swapping two patches in the image together with their positional
        // embedding rows permutes the corresponding map cells.
        let cfg = SatConfig::tiny();
        let model = SatModel::<f32>::new(cfg, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let images = rand_images(&mut rng, 1, cfg.image_size);
        let (pa, pb) = (0usize, 3usize); // patch indices to swap

        let mut swapped = images.clone();
        let p = cfg.patch_size;
        let side = cfg.patches_per_side();
        let coords = |patch: usize| (patch / side, patch % side);
        let (ay, ax) = coords(pa);
        let (by, bx) = coords(pb);
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..3 {
                    let ia = (((ay * p + dy) * cfg.image_size) + ax * p + dx) * 3 + c;
                    let ib = (((by * p + dy) * cfg.image_size) + bx * p + dx) * 3 + c;
                    swapped.data.swap(ia, ib);
                }
            }
        }
        let mut permuted = model.clone();
        let d = cfg.embed_dim;
        let pos = permuted.index.pos;
        for j in 0..d {
            let ia = (2 + pa) * d + j;
            let ib = (2 + pb) * d + j;
            permuted.params[pos].tensor.data.swap(ia, ib);
        }
        let base = model.forward(&images).unwrap();
        let perm = permuted.forward(&swapped).unwrap();
        let m0 = &base[0].fused_map.values;
        let m1 = &perm[0].fused_map.values;
        for i in 0..m0.len() {
            let j = if i == pa { pb } else if i == pb { pa } else { i };
            assert!((m0[i] - m1[j]).abs() < 1e-5, "cell {i}");
        }
        for (a, b) in base[0].logits.iter().zip(&perm[0].logits) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn freeze_presets() {
        let cfg = SatConfig::default();
        let mut model = SatModel::<f32>::new(cfg, 17).unwrap();
        apply_freeze(&mut model, FreezePreset::None);
        assert_eq!(model.num_frozen_scalars(), 0);

        apply_freeze(&mut model, FreezePreset::Attn);
        for p in &model.params {
            let standard = p.block.map(|b| b < cfg.num_blocks - cfg.num_spatial_blocks).unwrap_or(false);
            assert_eq!(p.frozen, standard && p.group == ParamGroup::Attn, "{}", p.name);
        }

        apply_freeze(&mut model, FreezePreset::AllButSpatial);
        assert!(!model.params[model.index.spa].frozen);
        assert!(!model.params[model.index.cls].frozen);
        assert!(model.params[model.index.pos].frozen);
        assert!(model.params[model.index.patch_w].frozen);
        assert!(!model.params[model.index.head_w].frozen);
        // Spatial-block attention stays tunable, its MLP freezes.
        let spatial_block = cfg.num_blocks - 1;
        let bi = model.index.blocks[spatial_block];
        assert!(!model.params[bi.wq].frozen);
        assert!(model.params[bi.w1].frozen);
        // Most parameters are pinned under this preset.
        assert!(model.num_frozen_scalars() * 4 > model.num_scalars() * 3);
    }

    #[test]
    fn parameter_count_sanity() {
        let cfg = SatConfig::tiny();
        let model = SatModel::<f32>::new(cfg, 0).unwrap();
        let total: usize = model.params.iter().map(|p| numel(&p.tensor.shape)).sum();
        assert_eq!(total, model.num_scalars());
        assert!(model.param_by_name("spa_token").is_some());
    }
}
