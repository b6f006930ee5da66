//! Visual-textual alignment.
//!
//! A prompt is tokenized into a fixed hash vocabulary and embedded; the
//! frame is cut into patches and embedded. The text and visual validity
//! masks are concatenated into one unified mask, and a stack of encoder
//! layers runs twice: first with the visual patches as cross-attention
//! context, then with the first pass's output as context. The result is
//! mean-pooled over valid tokens, projected to the decoder width and
//! normalized. Two prompts share one parameter set.
//!
//! The stand-in encoders here are small and randomly initialized; they
//! keep the interfaces of the pretrained ones they replace.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::mask::ImageFrame;

/// Additive logit for masked key positions.
pub const MASKED_LOGIT: f64 = -1e9;

pub const PAD_TOKEN: usize = 0;
pub const EMPTY_TOKEN: usize = 1;
const FIRST_HASHED: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    /// Free-form scene description.
    Scene,
    /// Comma-separated list of objects that may produce sound.
    SoundingObjects,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPrompt {
    pub text: String,
    pub kind: PromptKind,
}

impl TextPrompt {
    pub fn scene(text: impl Into<String>) -> Self {
        TextPrompt {
            text: text.into(),
            kind: PromptKind::Scene,
        }
    }

    pub fn sounding(text: impl Into<String>) -> Self {
        TextPrompt {
            text: text.into(),
            kind: PromptKind::SoundingObjects,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    /// Prefix of ones (real tokens) followed by zeros (padding).
    pub attn: Vec<u8>,
}

impl TokenSeq {
    pub fn valid(&self) -> usize {
        self.attn.iter().filter(|&&a| a == 1).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalize {
    Layer,
    L2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VtaConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub patch: usize,
    pub in_channels: usize,
    /// Width of the aligned feature (decoder channel count).
    pub out_dim: usize,
    /// Whether the refinement pass reuses the first pass's layers.
    pub shared_refine: bool,
    pub normalize: Normalize,
}

impl Default for VtaConfig {
    fn default() -> Self {
        VtaConfig {
            d_model: 32,
            heads: 2,
            layers: 2,
            ffn_dim: 64,
            max_len: 16,
            vocab: 1024,
            patch: 8,
            in_channels: 3,
            out_dim: 16,
            shared_refine: true,
            normalize: Normalize::Layer,
        }
    }
}

// -------------------------------------------------------------------
// tokenizer

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases, splits on anything that is not alphanumeric, hashes each
/// word into the vocabulary, then truncates or pads to `max_len`. Text
/// with no words becomes a single [`EMPTY_TOKEN`].
pub fn tokenize(text: &str, max_len: usize, vocab: usize) -> Result<TokenSeq> {
    if max_len == 0 {
        return Err(Error::Value("max_len must be >= 1".into()));
    }
    if vocab <= FIRST_HASHED {
        return Err(Error::Value(format!("vocabulary of {vocab} is too small")));
    }
    let lower = text.to_lowercase();
    let mut ids: Vec<usize> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| FIRST_HASHED + (fnv1a(w.as_bytes()) % (vocab - FIRST_HASHED) as u64) as usize)
        .take(max_len)
        .collect();
    if ids.is_empty() {
        ids.push(EMPTY_TOKEN);
    }
    let valid = ids.len();
    ids.resize(max_len, PAD_TOKEN);
    let mut attn = vec![1u8; valid];
    attn.resize(max_len, 0);
    Ok(TokenSeq { ids, attn })
}

/// Text flags first, then visual flags.
pub fn unify_attention_masks(text_attn: &[u8], vis_attn: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(text_attn.len() + vis_attn.len());
    out.extend_from_slice(text_attn);
    out.extend_from_slice(vis_attn);
    out
}

// -------------------------------------------------------------------
// parameters

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    self_attn: AttnIds,
    norm1: NormIds,
    cross_attn: AttnIds,
    norm2: NormIds,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    norm3: NormIds,
}

/// Alignment encoder; all weights live in a caller-owned [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Vta {
    cfg: VtaConfig,
    token_table: ParamId,
    text_w: ParamId,
    text_b: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    first_pass: Vec<LayerIds>,
    refine_pass: Option<Vec<LayerIds>>,
    out_w: ParamId,
    out_b: ParamId,
}

fn dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> ParamId {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.add(name, Tensor::randn(&[fan_in, fan_out], std, rng))
}

fn attn_ids<R: Rng + ?Sized>(store: &mut ParamStore, p: &str, d: usize, rng: &mut R) -> AttnIds {
    AttnIds {
        wq: dense(store, format!("{p}.wq"), d, d, rng),
        wk: dense(store, format!("{p}.wk"), d, d, rng),
        wv: dense(store, format!("{p}.wv"), d, d, rng),
        wo: dense(store, format!("{p}.wo"), d, d, rng),
        bo: store.add(format!("{p}.bo"), Tensor::zeros(&[d])),
    }
}

fn norm_ids(store: &mut ParamStore, p: &str, d: usize) -> NormIds {
    NormIds {
        gamma: store.add(format!("{p}.gamma"), Tensor::full(&[d], 1.0)),
        beta: store.add(format!("{p}.beta"), Tensor::zeros(&[d])),
    }
}

fn layer_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &VtaConfig,
    rng: &mut R,
) -> Vec<LayerIds> {
    let d = cfg.d_model;
    (0..cfg.layers)
        .map(|l| {
            let p = format!("{prefix}.{l}");
            LayerIds {
                self_attn: attn_ids(store, &format!("{p}.self"), d, rng),
                norm1: norm_ids(store, &format!("{p}.norm1"), d),
                cross_attn: attn_ids(store, &format!("{p}.cross"), d, rng),
                norm2: norm_ids(store, &format!("{p}.norm2"), d),
                w1: dense(store, format!("{p}.ffn.w1"), d, cfg.ffn_dim, rng),
                b1: store.add(format!("{p}.ffn.b1"), Tensor::zeros(&[cfg.ffn_dim])),
                w2: dense(store, format!("{p}.ffn.w2"), cfg.ffn_dim, d, rng),
                b2: store.add(format!("{p}.ffn.b2"), Tensor::zeros(&[d])),
                norm3: norm_ids(store, &format!("{p}.norm3"), d),
            }
        })
        .collect()
}

/// Everything the two-pass encoder saw, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignTrace {
    pub tokens: TokenSeq,
    pub vis_attn: Vec<u8>,
    pub unified_attn: Vec<u8>,
}

impl Vta {
    pub fn new<R: Rng + ?Sized>(cfg: VtaConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                cfg.d_model, cfg.heads
            )));
        }
        let d = cfg.d_model;
        let patch_dim = cfg.patch * cfg.patch * cfg.in_channels;
        let token_table = store.add("vta.tokens", Tensor::randn(&[cfg.vocab, d], 1.0, rng));
        let text_w = dense(store, "vta.text.w".into(), d, d, rng);
        let text_b = store.add("vta.text.b", Tensor::zeros(&[d]));
        let patch_w = dense(store, "vta.patch.w".into(), patch_dim, d, rng);
        let patch_b = store.add("vta.patch.b", Tensor::randn(&[d], 0.1, rng));
        let first_pass = layer_stack(store, "vta.enc", &cfg, rng);
        let refine_pass = (!cfg.shared_refine).then(|| layer_stack(store, "vta.refine", &cfg, rng));
        let out_w = dense(store, "vta.out.w".into(), d, cfg.out_dim, rng);
        let out_b = store.add("vta.out.b", Tensor::zeros(&[cfg.out_dim]));
        Ok(Vta {
            cfg,
            token_table,
            text_w,
            text_b,
            patch_w,
            patch_b,
            first_pass,
            refine_pass,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &VtaConfig {
        &self.cfg
    }

    pub fn tokenize(&self, prompt: &TextPrompt) -> Result<TokenSeq> {
        tokenize(&prompt.text, self.cfg.max_len, self.cfg.vocab)
    }

    /// Token table lookup followed by a learned affine map. Padded rows
    /// are embedded like any other and masked downstream.
    pub fn embed_text(&self, g: &mut Graph, p: &Bound, tokens: &TokenSeq) -> Result<Var> {
        let (l, v) = (tokens.ids.len(), self.cfg.vocab);
        let mut onehot = vec![0.0; l * v];
        for (i, &id) in tokens.ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Value(format!("token id {id} outside vocabulary {v}")));
            }
            onehot[i * v + id] = 1.0;
        }
        let oh = g.constant(Tensor::new(vec![l, v], onehot)?);
        let rows = g.matmul(oh, p.var(self.token_table))?;
        let proj = g.matmul(rows, p.var(self.text_w))?;
        g.add(proj, p.var(self.text_b))
    }

    /// Non-overlapping square patches, flattened channel-major, then an
    /// affine projection. Rows are patches in raster order.
    pub fn embed_visual(&self, g: &mut Graph, p: &Bound, frame: &ImageFrame) -> Result<Var> {
        let patches = extract_patches(frame, self.cfg.patch)?;
        if patches.shape()[1] != self.cfg.patch * self.cfg.patch * self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "{}-channel frame for a {}-channel patch embedding",
                frame.channels(),
                self.cfg.in_channels
            )));
        }
        let x = g.constant(patches);
        let proj = g.matmul(x, p.var(self.patch_w))?;
        g.add(proj, p.var(self.patch_b))
    }

    fn attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        w: &AttnIds,
        queries: Var,
        context: Var,
        key_mask: &[u8],
    ) -> Result<Var> {
        let lk = g.shape(context)[0];
        if key_mask.len() != lk {
            return Err(Error::Shape(format!(
                "key mask of length {} for {} keys",
                key_mask.len(),
                lk
            )));
        }
        if !key_mask.contains(&1) {
            return Err(Error::Contract("attention with every key masked".into()));
        }
        let d = self.cfg.d_model;
        let dh = d / self.cfg.heads;
        let q = g.matmul(queries, p.var(w.wq))?;
        let k = g.matmul(context, p.var(w.wk))?;
        let v = g.matmul(context, p.var(w.wv))?;
        let bias = g.constant(Tensor::new(
            vec![lk],
            key_mask
                .iter()
                .map(|&m| if m == 1 { 0.0 } else { MASKED_LOGIT })
                .collect(),
        )?);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let scaled = g.scale(raw, scale);
            let logits = g.add(scaled, bias)?;
            let weights = g.softmax(logits, 1)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let cat = g.concat(&heads, 1)?;
        let out = g.matmul(cat, p.var(w.wo))?;
        g.add(out, p.var(w.bo))
    }

    fn add_norm(&self, g: &mut Graph, p: &Bound, n: &NormIds, x: Var, y: Var) -> Result<Var> {
        let s = g.add(x, y)?;
        let z = g.layer_norm(s, 1, LAYER_NORM_EPS)?;
        let zg = g.mul(z, p.var(n.gamma))?;
        g.add(zg, p.var(n.beta))
    }

    fn layer(
        &self,
        g: &mut Graph,
        p: &Bound,
        w: &LayerIds,
        x: Var,
        text_mask: &[u8],
        context: Var,
        context_mask: &[u8],
    ) -> Result<Var> {
        let sa = self.attention(g, p, &w.self_attn, x, x, text_mask)?;
        let x = self.add_norm(g, p, &w.norm1, x, sa)?;
        let ca = self.attention(g, p, &w.cross_attn, x, context, context_mask)?;
        let x = self.add_norm(g, p, &w.norm2, x, ca)?;
        let h = g.matmul(x, p.var(w.w1))?;
        let h = g.add(h, p.var(w.b1))?;
        let h = g.tanh(h);
        let f = g.matmul(h, p.var(w.w2))?;
        let f = g.add(f, p.var(w.b2))?;
        self.add_norm(g, p, &w.norm3, x, f)
    }

    fn split_unified<'a>(&self, g: &Graph, text: Var, unified: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
        let lt = g.shape(text)[0];
        if unified.len() < lt {
            return Err(Error::Shape(format!(
                "unified mask of length {} for {} text positions",
                unified.len(),
                lt
            )));
        }
        Ok(unified.split_at(lt))
    }

    /// First pass: text queries attend to themselves and to the visual
    /// patches.
    pub fn cross_encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        text_emb: Var,
        unified_attn: &[u8],
        vis_emb: Var,
        vis_attn: &[u8],
    ) -> Result<Var> {
        let (text_mask, vis_part) = self.split_unified(g, text_emb, unified_attn)?;
        if vis_part != vis_attn {
            return Err(Error::Contract(
                "visual part of the unified mask differs from the visual mask".into(),
            ));
        }
        if g.shape(vis_emb).len() != 2 || g.shape(vis_emb)[1] != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "visual embedding {:?}, expected [P, {}]",
                g.shape(vis_emb),
                self.cfg.d_model
            )));
        }
        let mut x = text_emb;
        for w in &self.first_pass {
            x = self.layer(g, p, w, x, text_mask, vis_emb, vis_attn)?;
        }
        Ok(x)
    }

    /// Second pass: the original text embedding attends to the first
    /// pass's output, restricted to valid text positions.
    pub fn refine(
        &self,
        g: &mut Graph,
        p: &Bound,
        text_emb: Var,
        unified_attn: &[u8],
        align: Var,
    ) -> Result<Var> {
        let (text_mask, _) = self.split_unified(g, text_emb, unified_attn)?;
        if g.shape(align) != g.shape(text_emb) {
            return Err(Error::Shape(format!(
                "first-pass output {:?} vs text embedding {:?}",
                g.shape(align),
                g.shape(text_emb)
            )));
        }
        let layers = self.refine_pass.as_ref().unwrap_or(&self.first_pass);
        let mut x = text_emb;
        for w in layers {
            x = self.layer(g, p, w, x, text_mask, align, text_mask)?;
        }
        Ok(x)
    }

    /// Mean over valid tokens, affine map to the output width, then
    /// normalization over that axis. Returns a rank-1 tensor.
    pub fn project_normalize(&self, g: &mut Graph, p: &Bound, align: Var, attn: &[u8]) -> Result<Var> {
        let l = g.shape(align)[0];
        if attn.len() != l {
            return Err(Error::Shape(format!("mask of length {} for {} rows", attn.len(), l)));
        }
        let valid = attn.iter().filter(|&&a| a == 1).count();
        if valid == 0 {
            return Err(Error::Contract("pooling with no valid tokens".into()));
        }
        let w = g.constant(Tensor::new(
            vec![1, l],
            attn.iter().map(|&a| a as f64 / valid as f64).collect(),
        )?);
        let pooled = g.matmul(w, align)?;
        let proj = g.matmul(pooled, p.var(self.out_w))?;
        let proj = g.add(proj, p.var(self.out_b))?;
        let v = g.reshape(proj, &[self.cfg.out_dim])?;
        normalize(g, v, self.cfg.normalize)
    }

    /// The whole procedure for one prompt and one frame.
    pub fn align(
        &self,
        g: &mut Graph,
        p: &Bound,
        prompt: &TextPrompt,
        frame: &ImageFrame,
    ) -> Result<(Var, AlignTrace)> {
        let tokens = self.tokenize(prompt)?;
        let text = self.embed_text(g, p, &tokens)?;
        let vis = self.embed_visual(g, p, frame)?;
        let vis_attn = vec![1u8; g.shape(vis)[0]];
        let unified = unify_attention_masks(&tokens.attn, &vis_attn);
        let first = self.cross_encode(g, p, text, &unified, vis, &vis_attn)?;
        let second = self.refine(g, p, text, &unified, first)?;
        let out = self.project_normalize(g, p, second, &tokens.attn)?;
        Ok((
            out,
            AlignTrace {
                tokens,
                vis_attn,
                unified_attn: unified,
            },
        ))
    }

    /// Prompt features without any visual interaction: pooled text
    /// embedding, projected and normalized.
    pub fn text_only(&self, g: &mut Graph, p: &Bound, prompt: &TextPrompt) -> Result<Var> {
        let tokens = self.tokenize(prompt)?;
        let text = self.embed_text(g, p, &tokens)?;
        self.project_normalize(g, p, text, &tokens.attn)
    }
}

fn normalize(g: &mut Graph, v: Var, how: Normalize) -> Result<Var> {
    match how {
        Normalize::Layer => g.layer_norm(v, 0, LAYER_NORM_EPS),
        Normalize::L2 => {
            let sq = g.mul(v, v)?;
            let s = g.sum(sq);
            let s = g.add_scalar(s, 1e-12);
            let n = g.sqrt(s);
            g.div(v, n)
        }
    }
}

/// `P × (C·patch·patch)` rows of non-overlapping patches in raster order.
pub fn extract_patches(frame: &ImageFrame, patch: usize) -> Result<Tensor> {
    let (h, w, c) = (frame.height(), frame.width(), frame.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} frame not divisible into {patch}x{patch} patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let mut out = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for y in 0..patch {
                    for x in 0..patch {
                        out.push(frame.get(ch, py * patch + y, px * patch + x));
                    }
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, dim], out)
}

/// Adds the two aligned vectors to every spatial position of a
/// `T×C×H×W` map along the channel axis, then normalizes each position
/// over channels.
pub fn fuse_features(g: &mut Graph, z_v: Var, a1: Var, a2: Var) -> Result<Var> {
    let s = g.shape(z_v).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("feature map {:?}, expected T×C×H×W", s)));
    }
    let c = s[1];
    for a in [a1, a2] {
        if g.shape(a) != [c] {
            return Err(Error::Shape(format!(
                "aligned feature {:?} for {} channels",
                g.shape(a),
                c
            )));
        }
    }
    let sum = g.add(a1, a2)?;
    let col = g.reshape(sum, &[c, 1, 1])?;
    let wide = g.broadcast_to(col, &s)?;
    let fused = g.add(z_v, wide)?;
    g.layer_norm(fused, 1, LAYER_NORM_EPS)
}
