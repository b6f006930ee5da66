//! Small multi-scale segmenter: pooled encoder, top-down pixel decoder,
//! audio-steered object queries with dot-product mask heads, and
//! optional prompt fusion.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::mask::ImageFrame;
use crate::vta::{fuse_features, TextPrompt, Vta, VtaConfig};

/// Added under the square roots of row norms so zero rows stay
/// differentiable; a zero row still gets a similarity of exactly 0.
const NORM_FLOOR: f64 = 1e-24;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub queries: usize,
    pub classes: usize,
    pub audio_dim: usize,
    /// Channel widths at 1/4, 1/8, 1/16 and 1/32 scale.
    pub widths: [usize; 4],
    pub decoder_dim: usize,
    #[serde(skip)]
    pub vta: VtaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            queries: 4,
            classes: 4,
            audio_dim: 16,
            widths: [8, 16, 32, 64],
            decoder_dim: 16,
            vta: VtaConfig::default(),
        }
    }
}

/// Pooling factor applied before each encoder stage.
pub const STAGE_POOL: [usize; 4] = [4, 2, 2, 2];
/// Overall reduction of the input at which masks are predicted.
pub const MASK_STRIDE: usize = 4;

#[derive(Clone, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    cfg: ModelConfig,
    encoder: Vec<Affine>,
    laterals: Vec<Affine>,
    queries: ParamId,
    embed: Affine,
    mask_bias: ParamId,
    classify: Affine,
    vta: Vta,
}

/// What the model reads for one scene.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `T × 3 × H × W`, after any pre-masking.
    pub frames: Tensor,
    /// `T × audio_dim`.
    pub audio: Tensor,
    pub prompts: (TextPrompt, TextPrompt),
    /// Unmasked first frame, seen by the alignment encoder.
    pub reference: ImageFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
pub struct PromptMode {
    pub prompts: bool,
    pub vta: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `T × N × H/4 × W/4`.
    pub mask_logits: Var,
    /// `N × K`.
    pub class_logits: Var,
    /// Mapped queries, `N × T × audio_dim`.
    pub queries: Var,
}

fn affine<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Affine {
    let std = 1.0 / (fan_in as f64).sqrt();
    Affine {
        w: store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng)),
        b: store.add(format!("{name}.b"), Tensor::randn(&[fan_out], 0.1, rng)),
    }
}

/// Stacks frames into a `T × C × H × W` tensor.
pub fn frames_tensor(frames: &[ImageFrame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::EmptyInput("no frames".into()))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        if (f.channels(), f.height(), f.width()) != (c, h, w) {
            return Err(Error::Shape("frames differ in size".into()));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), c, h, w], data)
}

/// Divides each frame by the root-mean-square of its non-zero pixels, so
/// a uniform rescaling of the visible region (as pre-masking does) leaves
/// the encoder input unchanged. All-zero frames pass through.
pub fn stem_normalize(frames: &Tensor) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("frames {:?}, expected rank 4", s)));
    }
    let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = frames.data().to_vec();
    for ti in 0..t {
        let frame = &mut out[ti * c * hw..(ti + 1) * c * hw];
        let mut sq = 0.0;
        let mut visible = 0usize;
        for i in 0..hw {
            let px: f64 = (0..c).map(|ch| frame[ch * hw + i].powi(2)).sum();
            if px > 0.0 {
                sq += px;
                visible += c;
            }
        }
        if visible > 0 {
            let rms = (sq / visible as f64).sqrt();
            frame.iter_mut().for_each(|v| *v /= rms);
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// 1×1 convolution: the same affine map at every pixel of `T × C × H × W`.
pub fn pointwise(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("pointwise input {:?}, expected rank 4", s)));
    }
    let (t, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let d = g.shape(w)[1];
    let rows = g.permute(x, &[0, 2, 3, 1])?;
    let rows = g.reshape(rows, &[t * h * wd, c])?;
    let y = g.matmul(rows, w)?;
    let y = g.add(y, b)?;
    let y = g.reshape(y, &[t, h, wd, d])?;
    g.permute(y, &[0, 3, 1, 2])
}

/// `out[n,t,:] = cos(q[n], z[t]) · q[n]`, with the cosine of a zero row
/// taken as 0.
pub fn map_object_queries_var(g: &mut Graph, z_a: Var, q: Var) -> Result<Var> {
    let (zs, qs) = (g.shape(z_a).to_vec(), g.shape(q).to_vec());
    if zs.len() != 2 || qs.len() != 2 || zs[1] != qs[1] {
        return Err(Error::Shape(format!("audio {:?} vs queries {:?}", zs, qs)));
    }
    let (t, n, c) = (zs[0], qs[0], qs[1]);
    let ones = g.constant(Tensor::full(&[c, 1], 1.0));
    let row_norm = |g: &mut Graph, x: Var| -> Result<Var> {
        let sq = g.mul(x, x)?;
        let s = g.matmul(sq, ones)?;
        let s = g.add_scalar(s, NORM_FLOOR);
        Ok(g.sqrt(s))
    };
    let nq = row_norm(g, q)?;
    let nz = row_norm(g, z_a)?;
    let nzt = g.transpose(nz)?;
    let denom = g.matmul(nq, nzt)?;
    let zt = g.transpose(z_a)?;
    let dots = g.matmul(q, zt)?;
    let s = g.div(dots, denom)?;
    let s = g.reshape(s, &[n, t, 1])?;
    let s = g.broadcast_to(s, &[n, t, c])?;
    let qb = g.reshape(q, &[n, 1, c])?;
    let qb = g.broadcast_to(qb, &[n, t, c])?;
    g.mul(s, qb)
}

/// Value-level form of [`map_object_queries_var`].
pub fn map_object_queries(z_a: &Tensor, q: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let z = g.constant(z_a.clone());
    let qv = g.constant(q.clone());
    let out = map_object_queries_var(&mut g, z, qv)?;
    Ok(g.value(out).clone())
}

impl ToyModel {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if cfg.queries < cfg.classes {
            return Err(Error::Config(format!(
                "{} queries for {} classes",
                cfg.queries, cfg.classes
            )));
        }
        if cfg.vta.out_dim != cfg.decoder_dim {
            return Err(Error::Config(format!(
                "alignment width {} differs from decoder width {}",
                cfg.vta.out_dim, cfg.decoder_dim
            )));
        }
        let mut encoder = Vec::new();
        let mut c_in = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            encoder.push(affine(store, &format!("enc.{i}"), c_in, w, rng));
            c_in = w;
        }
        let laterals = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| affine(store, &format!("lat.{i}"), w, cfg.decoder_dim, rng))
            .collect();
        let queries = store.add(
            "queries",
            Tensor::randn(&[cfg.queries, cfg.audio_dim], 1.0 / (cfg.audio_dim as f64).sqrt(), rng),
        );
        let embed = affine(store, "mask_embed", cfg.audio_dim, cfg.decoder_dim, rng);
        let mask_bias = store.add("mask_bias", Tensor::zeros(&[1]));
        let classify = affine(store, "classify", cfg.audio_dim, cfg.classes, rng);
        let vta = Vta::new(cfg.vta.clone(), store, rng)?;
        Ok(ToyModel {
            cfg,
            encoder,
            laterals,
            queries,
            embed,
            mask_bias,
            classify,
            vta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vta(&self) -> &Vta {
        &self.vta
    }

    pub fn queries_id(&self) -> ParamId {
        self.queries
    }

    /// Four maps at 1/4, 1/8, 1/16 and 1/32 of the input.
    pub fn encode(&self, g: &mut Graph, p: &Bound, frames: Var) -> Result<Vec<Var>> {
        let s = g.shape(frames).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("frames {:?}, expected T×3×H×W", s)));
        }
        let total: usize = STAGE_POOL.iter().product();
        if !s[2].is_multiple_of(total) || !s[3].is_multiple_of(total) {
            return Err(Error::Shape(format!(
                "{}x{} input not divisible by {}",
                s[2], s[3], total
            )));
        }
        let mut x = frames;
        let mut out = Vec::with_capacity(4);
        for (a, &k) in self.encoder.iter().zip(&STAGE_POOL) {
            let pooled = g.avg_pool2d(x, k)?;
            let y = pointwise(g, pooled, p.var(a.w), p.var(a.b))?;
            x = g.tanh(y);
            out.push(x);
        }
        Ok(out)
    }

    /// Top-down merge of the four maps into the 1/4-scale pixel features.
    pub fn pixel_decoder(&self, g: &mut Graph, p: &Bound, feats: &[Var]) -> Result<Var> {
        if feats.len() != self.laterals.len() {
            return Err(Error::Shape(format!("{} feature maps, expected 4", feats.len())));
        }
        let mut top: Option<Var> = None;
        for i in (0..feats.len()).rev() {
            let l = &self.laterals[i];
            let lat = pointwise(g, feats[i], p.var(l.w), p.var(l.b))?;
            top = Some(match top {
                None => lat,
                Some(prev) => {
                    let up = g.upsample2d(prev, 2)?;
                    if g.shape(up) != g.shape(lat) {
                        return Err(Error::Shape(format!(
                            "decoder merge {:?} vs {:?}",
                            g.shape(up),
                            g.shape(lat)
                        )));
                    }
                    g.add(up, lat)?
                }
            });
        }
        Ok(top.expect("four maps"))
    }

    /// Mask logits from per-frame query embeddings dotted with pixel
    /// features, and class logits from the time-pooled queries.
    pub fn heads(&self, g: &mut Graph, p: &Bound, pixels: Var, queries: Var) -> Result<(Var, Var)> {
        let ps = g.shape(pixels).to_vec();
        let qs = g.shape(queries).to_vec();
        if ps.len() != 4 || qs.len() != 3 || qs[1] != ps[0] || qs[2] != self.cfg.audio_dim {
            return Err(Error::Shape(format!(
                "pixel features {:?} with queries {:?}",
                ps, qs
            )));
        }
        let (t, d, h, w) = (ps[0], ps[1], ps[2], ps[3]);
        let n = qs[0];
        let c = qs[2];
        let per_frame = g.permute(queries, &[1, 0, 2])?;
        let rows = g.reshape(per_frame, &[t * n, c])?;
        let emb = g.matmul(rows, p.var(self.embed.w))?;
        let emb = g.add(emb, p.var(self.embed.b))?;
        let mut logits = Vec::with_capacity(t);
        for ti in 0..t {
            let e = g.slice(emb, 0, ti * n, n)?;
            let f = g.slice(pixels, 0, ti, 1)?;
            let f = g.reshape(f, &[d, h * w])?;
            logits.push(g.matmul(e, f)?);
        }
        let all = g.concat(&logits, 0)?;
        let bias = g.broadcast_to(p.var(self.mask_bias), &[t * n, h * w])?;
        let all = g.add(all, bias)?;
        let mask_logits = g.reshape(all, &[t, n, h, w])?;

        let pooled = g.mean(queries, 1)?;
        let cls = g.matmul(pooled, p.var(self.classify.w))?;
        let class_logits = g.add(cls, p.var(self.classify.b))?;
        Ok((mask_logits, class_logits))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, input: &ModelInput, mode: PromptMode) -> Result<Forward> {
        let frames = g.constant(stem_normalize(&input.frames)?);
        let audio = g.constant(input.audio.clone());
        let feats = self.encode(g, p, frames)?;
        let z_v = self.pixel_decoder(g, p, &feats)?;
        let (a1, a2) = if mode.prompts {
            let (p1, p2) = (&input.prompts.0, &input.prompts.1);
            if mode.vta {
                let (a1, _) = self.vta.align(g, p, p1, &input.reference)?;
                let (a2, _) = self.vta.align(g, p, p2, &input.reference)?;
                (a1, a2)
            } else {
                (self.vta.text_only(g, p, p1)?, self.vta.text_only(g, p, p2)?)
            }
        } else {
            let z = g.constant(Tensor::zeros(&[self.cfg.decoder_dim]));
            (z, z)
        };
        let pixels = fuse_features(g, z_v, a1, a2)?;
        let queries = map_object_queries_var(g, audio, p.var(self.queries))?;
        let (mask_logits, class_logits) = self.heads(g, p, pixels, queries)?;
        Ok(Forward {
            mask_logits,
            class_logits,
            queries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn query_mapping_identity_and_orthogonal() {
        let q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let out = map_object_queries(&z, &q).unwrap();
        assert_eq!(out.shape(), &[2, 1, 2]);
        assert!((out.data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(out.data()[1], 0.0);
        assert_eq!(&out.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn zero_rows_map_to_zero() {
        let q = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let z = Tensor::new(vec![2, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = map_object_queries(&z, &q).unwrap();
        assert!(out.all_finite());
        assert!(out.data()[..6].iter().all(|&v| v == 0.0));
        assert!(out.data()[9..].iter().all(|&v| v == 0.0));
        assert!(out.data()[6..9].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn stem_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Tensor::uniform(&[2, 3, 4, 4], 0.1, 1.0, &mut rng);
        for v in &mut x.data_mut()[..8] {
            *v = 0.0;
        }
        let half = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 0.5).collect()).unwrap();
        let (a, b) = (stem_normalize(&x).unwrap(), stem_normalize(&half).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let z = Tensor::zeros(&[1, 3, 2, 2]);
        assert_eq!(stem_normalize(&z).unwrap(), z);
    }

    #[test]
    fn encoder_scales() {
        let mut store = ParamStore::new();
        let model = ToyModel::new(ModelConfig::default(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let feats = model.encode(&mut g, &p, x).unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|&f| g.shape(f).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 8, 8, 8], vec![2, 16, 4, 4], vec![2, 32, 2, 2], vec![2, 64, 1, 1]]
        );
        // zero input: first stage is tanh of its bias at every pixel
        let b = store.get(model.encoder[0].b).data().to_vec();
        let v = g.value(feats[0]).data();
        for c in 0..8 {
            for i in 0..64 {
                assert_eq!(v[c * 64 + i], b[c].tanh());
            }
        }
        let bad = g.constant(Tensor::zeros(&[1, 3, 24, 24]));
        assert!(matches!(model.encode(&mut g, &p, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_queries_give_bias_logits() {
        let mut store = ParamStore::new();
        let model = ToyModel::new(ModelConfig::default(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        store.get_mut(model.mask_bias).data_mut()[0] = 0.25;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pixels = g.constant(Tensor::randn(&[2, 16, 8, 8], 1.0, &mut rng));
        let q = g.constant(Tensor::zeros(&[4, 2, 16]));
        let (m, c) = model.heads(&mut g, &p, pixels, q).unwrap();
        assert_eq!(g.shape(m), &[2, 4, 8, 8]);
        assert_eq!(g.shape(c), &[4, 4]);
        let eb = store.get(model.embed.b).data().to_vec();
        let px = g.value(pixels).data().to_vec();
        let ml = g.value(m).data();
        for t in 0..2 {
            for n in 0..4 {
                for i in 0..64 {
                    let expect: f64 =
                        (0..16).map(|d| eb[d] * px[(t * 16 + d) * 64 + i]).sum::<f64>() + 0.25;
                    assert!((ml[((t * 4 + n) * 64) + i] - expect).abs() < 1e-12);
                }
            }
        }
    }
}
