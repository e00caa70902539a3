//! The autoregressive transformer over the manipulation prompt.
//!
//! Each block is pre-normalized: `h + MHA(norm(h))`, then `+ MLP(norm(·))`.
//! Manipulation summaries `Z̄ᵢ` are the L2-normalized mean of block `i`'s
//! output at the manipulation positions.

mod batch;

pub use batch::EpisodeBatch;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{build_layout, build_mask, AttentionMask, MaskKind, SegmentKind, SequenceLayout};
use crate::task::{Episode, Guidance, Image, TaskWorld, DESCRIPTOR_DIM};
use crate::tensor::{Graph, ParamId, Tensor, Var};

/// Standard deviation of every randomly initialized weight.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub manip_tokens: usize,
    /// Tokens per image; must equal the codec's `(grid/patch)²`.
    pub visual_tokens: usize,
    pub instr_tokens: usize,
    pub mlp_hidden: usize,
    pub mask_kind: MaskKind,
    pub seed: u64,
    /// Width of one image token; must equal the codec's `patch²·3`.
    pub token_dim: usize,
    /// The decoder sees the query image as well as the generation tokens:
    /// the head's output is added to the query tokens.
    pub query_skip: bool,
}

impl Default for ModelConfig {
    /// Toy scale. The reference system runs 40 blocks of a 13B backbone with
    /// 30 manipulation tokens and 64 visual tokens per image.
    fn default() -> Self {
        ModelConfig {
            n_blocks: 4,
            model_dim: 32,
            n_heads: 4,
            manip_tokens: 8,
            visual_tokens: 16,
            instr_tokens: 4,
            mlp_hidden: 128,
            mask_kind: MaskKind::Group,
            seed: 0,
            token_dim: 12,
            query_skip: true,
        }
    }
}

impl ModelConfig {
    /// The smallest config that still has every segment and two heads,
    /// used for gradient checks: N=2, D=8, h=2, v=2, M=2, t=1.
    pub fn tiny() -> Self {
        ModelConfig {
            n_blocks: 2,
            model_dim: 8,
            n_heads: 2,
            manip_tokens: 2,
            visual_tokens: 2,
            instr_tokens: 1,
            mlp_hidden: 16,
            mask_kind: MaskKind::Group,
            seed: 1,
            token_dim: 3,
            query_skip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_blocks", self.n_blocks),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("manip_tokens", self.manip_tokens),
            ("visual_tokens", self.visual_tokens),
            ("instr_tokens", self.instr_tokens),
            ("mlp_hidden", self.mlp_hidden),
            ("token_dim", self.token_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::ModelConfig(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn layout(&self, k: usize) -> Result<SequenceLayout> {
        build_layout(self.instr_tokens, self.visual_tokens, self.manip_tokens, k)
    }

    pub fn mask(&self, layout: &SequenceLayout) -> AttentionMask {
        build_mask(layout, self.mask_kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `DESCRIPTOR_DIM × (instr_tokens·D)`.
    pub instr_proj: Tensor,
    /// `token_dim × D`, shared by every image segment.
    pub image_proj: Tensor,
    /// Role embeddings added to exemplar-source, exemplar-target and query
    /// image tokens, each `[D]`.
    pub role_src: Tensor,
    pub role_tgt: Tensor,
    pub role_query: Tensor,
    /// Per-token position embedding shared by all image segments, `v × D`.
    pub image_pos: Tensor,
    /// `M × D`.
    pub manip_embed: Tensor,
    /// `v × D`.
    pub gen_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Tensor,
    /// `D × token_dim`.
    pub out_head: Tensor,
}

/// How a parameter is initialized and whether weight decay applies to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Embedding,
    NormGain,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// A named parameter, in the canonical order shared by gradients,
/// optimizer moments and checkpoints.
pub type ParamEntry<'a> = (String, &'a Tensor, ParamKind);
pub type ParamEntryMut<'a> = (String, &'a mut Tensor, ParamKind);

impl ModelParams {
    pub fn entries(&self) -> Vec<ParamEntry<'_>> {
        let mut out = vec![
            ("instr_proj".to_string(), &self.instr_proj, ParamKind::Weight),
            ("image_proj".to_string(), &self.image_proj, ParamKind::Weight),
            ("role_src".to_string(), &self.role_src, ParamKind::Embedding),
            ("role_tgt".to_string(), &self.role_tgt, ParamKind::Embedding),
            ("role_query".to_string(), &self.role_query, ParamKind::Embedding),
            ("image_pos".to_string(), &self.image_pos, ParamKind::Embedding),
            ("manip_embed".to_string(), &self.manip_embed, ParamKind::Embedding),
            ("gen_embed".to_string(), &self.gen_embed, ParamKind::Embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(block_entries(i, b));
        }
        out.push(("final_norm".to_string(), &self.final_norm, ParamKind::NormGain));
        out.push(("out_head".to_string(), &self.out_head, ParamKind::Weight));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        let mut out: Vec<ParamEntryMut<'_>> = vec![
            ("instr_proj".to_string(), &mut self.instr_proj, ParamKind::Weight),
            ("image_proj".to_string(), &mut self.image_proj, ParamKind::Weight),
            ("role_src".to_string(), &mut self.role_src, ParamKind::Embedding),
            ("role_tgt".to_string(), &mut self.role_tgt, ParamKind::Embedding),
            ("role_query".to_string(), &mut self.role_query, ParamKind::Embedding),
            ("image_pos".to_string(), &mut self.image_pos, ParamKind::Embedding),
            ("manip_embed".to_string(), &mut self.manip_embed, ParamKind::Embedding),
            ("gen_embed".to_string(), &mut self.gen_embed, ParamKind::Embedding),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), &mut b.attn_norm, ParamKind::NormGain));
            out.push((format!("blocks.{i}.wq"), &mut b.wq, ParamKind::Weight));
            out.push((format!("blocks.{i}.wk"), &mut b.wk, ParamKind::Weight));
            out.push((format!("blocks.{i}.wv"), &mut b.wv, ParamKind::Weight));
            out.push((format!("blocks.{i}.wo"), &mut b.wo, ParamKind::Weight));
            out.push((format!("blocks.{i}.mlp_norm"), &mut b.mlp_norm, ParamKind::NormGain));
            out.push((format!("blocks.{i}.w_up"), &mut b.w_up, ParamKind::Weight));
            out.push((format!("blocks.{i}.w_down"), &mut b.w_down, ParamKind::Weight));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm, ParamKind::NormGain));
        out.push(("out_head".to_string(), &mut self.out_head, ParamKind::Weight));
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.entries().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// Registers every parameter as a graph leaf, `ParamId` = entry index.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        let vars: Vec<Var> = self
            .entries()
            .into_iter()
            .enumerate()
            .map(|(i, (_, t, _))| g.param(ParamId(i), t.clone()))
            .collect();
        ParamVars::from_slice(&vars, self.blocks.len())
    }

    /// Clones of every parameter in entry order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries().into_iter().map(|(_, t, _)| t.clone()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, t, _)| t.all_finite())
    }
}

fn block_entries(i: usize, b: &BlockParams) -> Vec<ParamEntry<'_>> {
    vec![
        (format!("blocks.{i}.attn_norm"), &b.attn_norm, ParamKind::NormGain),
        (format!("blocks.{i}.wq"), &b.wq, ParamKind::Weight),
        (format!("blocks.{i}.wk"), &b.wk, ParamKind::Weight),
        (format!("blocks.{i}.wv"), &b.wv, ParamKind::Weight),
        (format!("blocks.{i}.wo"), &b.wo, ParamKind::Weight),
        (format!("blocks.{i}.mlp_norm"), &b.mlp_norm, ParamKind::NormGain),
        (format!("blocks.{i}.w_up"), &b.w_up, ParamKind::Weight),
        (format!("blocks.{i}.w_down"), &b.w_down, ParamKind::Weight),
    ]
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Graph leaves for every parameter of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub instr_proj: Var,
    pub image_proj: Var,
    pub role_src: Var,
    pub role_tgt: Var,
    pub role_query: Var,
    pub image_pos: Var,
    pub manip_embed: Var,
    pub gen_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub out_head: Var,
}

impl ParamVars {
    /// Rebuilds the structure from leaves given in entry order.
    pub fn from_slice(vars: &[Var], n_blocks: usize) -> ParamVars {
        assert_eq!(vars.len(), 10 + 8 * n_blocks, "one var per parameter entry");
        let blocks = vars[8..8 + 8 * n_blocks]
            .chunks(8)
            .map(|c| BlockVars {
                attn_norm: c[0],
                wq: c[1],
                wk: c[2],
                wv: c[3],
                wo: c[4],
                mlp_norm: c[5],
                w_up: c[6],
                w_down: c[7],
            })
            .collect();
        let tail = &vars[8 + 8 * n_blocks..];
        ParamVars {
            instr_proj: vars[0],
            image_proj: vars[1],
            role_src: vars[2],
            role_tgt: vars[3],
            role_query: vars[4],
            image_pos: vars[5],
            manip_embed: vars[6],
            gen_embed: vars[7],
            blocks,
            final_norm: tail[0],
            out_head: tail[1],
        }
    }
}

/// Deterministic initialization from `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("std > 0");
    let mut randn = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
    };
    let (d, v) = (cfg.model_dim, cfg.visual_tokens);
    let instr_proj = randn(&[DESCRIPTOR_DIM, cfg.instr_tokens * d]);
    let image_proj = randn(&[cfg.token_dim, d]);
    let role_src = randn(&[d]);
    let role_tgt = randn(&[d]);
    let role_query = randn(&[d]);
    let image_pos = randn(&[v, d]);
    let manip_embed = randn(&[cfg.manip_tokens, d]);
    let gen_embed = randn(&[v, d]);
    let blocks = (0..cfg.n_blocks)
        .map(|_| BlockParams {
            attn_norm: Tensor::full([d], 1.0),
            wq: randn(&[d, d]),
            wk: randn(&[d, d]),
            wv: randn(&[d, d]),
            wo: randn(&[d, d]),
            mlp_norm: Tensor::full([d], 1.0),
            w_up: randn(&[d, cfg.mlp_hidden]),
            w_down: randn(&[cfg.mlp_hidden, d]),
        })
        .collect();
    let final_norm = Tensor::full([d], 1.0);
    let out_head = randn(&[d, cfg.token_dim]);
    Ok(ModelParams {
        config: cfg.clone(),
        instr_proj,
        image_proj,
        role_src,
        role_tgt,
        role_query,
        image_pos,
        manip_embed,
        gen_embed,
        blocks,
        final_norm,
        out_head,
    })
}

/// One pre-normalized block on the graph.
pub fn block_graph(g: &mut Graph, b: &BlockVars, x: Var, heads: usize, mask: &Arc<AttentionMask>) -> Result<Var> {
    let d = g.value(x).last_dim();
    let u = g.rms_norm(x, b.attn_norm)?;
    let q = g.matmul(u, b.wq)?;
    let k = g.matmul(u, b.wk)?;
    let v = g.matmul(u, b.wv)?;
    let (q, k, v) = (g.split_heads(q, heads)?, g.split_heads(k, heads)?, g.split_heads(v, heads)?);
    // Scaling queries rather than scores touches L·D values instead of L².
    let q = g.scale(q, 1.0 / ((d / heads) as f64).sqrt());
    let scores = g.batch_matmul(q, k, true)?;
    let attn = g.masked_softmax(scores, mask.clone())?;
    let o = g.batch_matmul(attn, v, false)?;
    let o = g.merge_heads(o, heads)?;
    let o = g.matmul(o, b.wo)?;
    let x = g.add(x, o)?;

    let u = g.rms_norm(x, b.mlp_norm)?;
    let h = g.matmul(u, b.w_up)?;
    let h = g.silu(h);
    let h = g.matmul(h, b.w_down)?;
    g.add(x, h)
}

/// Value-level block: `hidden` is `[B, L, D]`, `mask` is `L×L`.
pub fn block_forward(block: &BlockParams, hidden: &Tensor, mask: &AttentionMask, heads: usize) -> Result<Tensor> {
    let s = hidden.shape();
    if s.len() != 3 || s[1] != mask.rows() || s[2] != block.wq.shape()[0] {
        return Err(Error::Shape {
            op: "block_forward",
            lhs: s.to_vec(),
            rhs: vec![mask.rows(), block.wq.shape()[0]],
        });
    }
    let mut g = Graph::new();
    let vars = BlockVars {
        attn_norm: g.input(block.attn_norm.clone()),
        wq: g.input(block.wq.clone()),
        wk: g.input(block.wk.clone()),
        wv: g.input(block.wv.clone()),
        wo: g.input(block.wo.clone()),
        mlp_norm: g.input(block.mlp_norm.clone()),
        w_up: g.input(block.w_up.clone()),
        w_down: g.input(block.w_down.clone()),
    };
    let x = g.input(hidden.clone());
    let out = block_graph(&mut g, &vars, x, heads, &Arc::new(mask.clone()))?;
    Ok(g.value(out).clone())
}

/// Graph handles produced by [`forward_graph`].
#[derive(Clone, Debug)]
pub struct Traced {
    /// `[B, v, token_dim]`.
    pub gen_out: Var,
    /// One `[B, D]` unit-row summary per block.
    pub zbars: Vec<Var>,
    /// Embedded input sequence followed by each block's output, `[B, L, D]`.
    pub hidden: Vec<Var>,
}

fn embed_image(g: &mut Graph, p: &ParamVars, tokens: &Tensor, role: Var) -> Result<Var> {
    let x = g.input(tokens.clone());
    let x = g.matmul(x, p.image_proj)?;
    let x = g.add_broadcast(x, p.image_pos)?;
    g.add_broadcast(x, role)
}

pub fn forward_graph(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    batch: &EpisodeBatch,
    layout: &SequenceLayout,
    mask: &Arc<AttentionMask>,
) -> Result<Traced> {
    batch.check_layout(layout)?;
    if batch.token_dim() != cfg.token_dim || layout.manip_len() != cfg.manip_tokens || layout.instr_len() != cfg.instr_tokens {
        return Err(Error::Layout("layout or batch does not match the model config".into()));
    }
    if mask.rows() != layout.total_len() || mask.cols() != layout.total_len() {
        return Err(Error::Layout(format!(
            "mask is {}×{}, layout has {} positions",
            mask.rows(),
            mask.cols(),
            layout.total_len()
        )));
    }
    let b = batch.batch_size();
    let d = cfg.model_dim;

    let desc = g.input(batch.descriptors.clone());
    let instr = g.matmul(desc, p.instr_proj)?;
    let mut parts = vec![g.reshape(instr, [b, cfg.instr_tokens, d])?];
    for (src, tgt) in batch.exemplar_src.iter().zip(&batch.exemplar_tgt) {
        parts.push(embed_image(g, p, src, p.role_src)?);
        parts.push(embed_image(g, p, tgt, p.role_tgt)?);
    }
    parts.push(g.broadcast_batch(p.manip_embed, b));
    parts.push(embed_image(g, p, &batch.query, p.role_query)?);
    parts.push(g.broadcast_batch(p.gen_embed, b));
    let mut h = g.concat_seq(&parts)?;

    let manip = layout.range(SegmentKind::Manip);
    let gen = layout.range(SegmentKind::Gen);
    let mut zbars = Vec::with_capacity(p.blocks.len());
    let mut hidden = vec![h];
    for bv in &p.blocks {
        h = block_graph(g, bv, h, cfg.n_heads, mask)?;
        hidden.push(h);
        let z = g.slice_seq(h, manip.start, manip.len())?;
        let z = g.mean_seq(z)?;
        zbars.push(g.l2_normalize(z));
    }
    let out = g.slice_seq(h, gen.start, gen.len())?;
    let out = g.rms_norm(out, p.final_norm)?;
    let mut gen_out = g.matmul(out, p.out_head)?;
    if cfg.query_skip {
        let q = g.input(batch.query.clone());
        gen_out = g.add(gen_out, q)?;
    }
    Ok(Traced { gen_out, zbars, hidden })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[B, v, token_dim]`.
    pub gen_out: Tensor,
    /// `[N, B, D]`, unit rows.
    pub zbar_per_block: Tensor,
    /// Embedded input followed by every block output, each `[B, L, D]`.
    pub hidden: Vec<Tensor>,
}

pub fn forward(
    params: &ModelParams,
    batch: &EpisodeBatch,
    layout: &SequenceLayout,
    mask: &AttentionMask,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let pv = params.register(&mut g);
    let mask = Arc::new(mask.clone());
    let t = forward_graph(&mut g, &pv, &params.config, batch, layout, &mask)?;
    let n = t.zbars.len();
    let (bsz, d) = (batch.batch_size(), params.config.model_dim);
    let mut z = Vec::with_capacity(n * bsz * d);
    for &v in &t.zbars {
        z.extend_from_slice(g.value(v).data());
    }
    Ok(ForwardOutput {
        gen_out: g.value(t.gen_out).clone(),
        zbar_per_block: Tensor::new([n, bsz, d], z)?,
        hidden: t.hidden.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

/// Decoded predictions for a batch of episodes sharing one `k`.
pub fn predict_images(
    params: &ModelParams,
    episodes: &[Episode],
    world: &TaskWorld,
    guidance: Guidance,
) -> Result<Vec<Image>> {
    let k = episodes.first().map_or(1, Episode::k);
    let layout = params.config.layout(k)?;
    let mask = params.config.mask(&layout);
    let batch = EpisodeBatch::from_episodes(episodes, world, guidance)?;
    let out = forward(params, &batch, &layout, &mask)?;
    let [_, v, dt] = [batch.batch_size(), batch.image_tokens(), batch.token_dim()];
    out.gen_out
        .data()
        .chunks(v * dt)
        .map(|c| world.codec.decode(&Tensor::new([v, dt], c.to_vec())?))
        .collect()
}

pub fn predict_image(
    params: &ModelParams,
    episode: &Episode,
    world: &TaskWorld,
    guidance: Guidance,
) -> Result<Image> {
    Ok(predict_images(params, std::slice::from_ref(episode), world, guidance)?.remove(0))
}
