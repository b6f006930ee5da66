//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avseg_core::autodiff::{grad_check, grad_check_param, Bound, Graph, ParamStore, Tensor, Var};
use avseg_core::flow::{temporal_align, FlowField, FlowSequence};
use avseg_core::losses::{avs_loss, bce_mask_loss, class_bce_loss, dice_loss, total_loss, LossWeights};
use avseg_core::mask::{premask, BinaryMask, ImageFrame};
use avseg_core::toy::model::ModelConfig;
use avseg_core::toy::train::{flow_masks, prepare, scene_loss};
use avseg_core::toy::{gen_scene, ToyModel, TrainConfig};
use avseg_core::vta::{tokenize, unify_attention_masks, Normalize, TextPrompt, Vta, VtaConfig};

pub const GRAD_EPS: f64 = 1e-5;
/// Step for the whole training objective. Round-off in the ~16k-pixel
/// loss swamps small gradient components at finer steps; the error
/// shrinks monotonically as the step grows up to 1e-2.
pub const GRAD_EPS_MODEL: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: [u64; 3] = [11, 22, 33];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    let data = (0..h * w).map(|_| rng.random_bool(p) as u8).collect();
    BinaryMask::new(h, w, data).unwrap()
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> ImageFrame {
    let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
    ImageFrame::new(h, w, c, data).unwrap()
}

// ---------------------------------------------------------------------
// mask and flow rules

/// Per-pixel rule: both set → 1, exactly one set → 0.5, neither → 0.
pub fn premask_rule(flow: bool, truth: bool) -> f64 {
    match (flow, truth) {
        (true, true) => 1.0,
        (false, false) => 0.0,
        _ => 0.5,
    }
}

/// 2×2 mask from the low four bits of `bits`, row-major.
pub fn mask_2x2(bits: u8) -> BinaryMask {
    BinaryMask::new(2, 2, (0..4).map(|i| (bits >> i) & 1).collect()).unwrap()
}

/// Pairs of 2×2 masks, out of all 256, where the pre-mask disagrees
/// with [`premask_rule`].
pub fn premask_mismatches() -> Vec<(u8, u8)> {
    let mut bad = Vec::new();
    for a in 0..16u8 {
        for b in 0..16u8 {
            let tri = premask(&mask_2x2(a), &mask_2x2(b)).unwrap();
            let want: Vec<f64> = (0..4)
                .map(|i| premask_rule((a >> i) & 1 == 1, (b >> i) & 1 == 1))
                .collect();
            if tri.data() != want.as_slice() {
                bad.push((a, b));
            }
        }
    }
    bad
}

/// Checks the alignment of 1..=10 random fields; returns a description
/// of the first violation.
pub fn alignment_violation(seed: u64) -> Option<String> {
    let mut r = rng(seed);
    for n in 1..=10 {
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let fields: Vec<FlowField> = (0..n)
            .map(|_| FlowField::new(h, w, (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap())
            .collect();
        let out = temporal_align(&FlowSequence::new(fields.clone()).unwrap());
        let f = out.frames();
        if f.len() != n + 1 {
            return Some(format!("n={n}: {} outputs", f.len()));
        }
        let bits = |x: &FlowField| x.magnitude().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&f[0]) != bits(&fields[0]) || bits(&f[n]) != bits(&fields[n - 1]) {
            return Some(format!("n={n}: endpoint changed"));
        }
        for i in 1..n {
            for (k, v) in f[i].magnitude().iter().enumerate() {
                let want = (fields[i - 1].magnitude()[k] + fields[i].magnitude()[k]) / 2.0;
                if (v - want).abs() > 1e-15 {
                    return Some(format!("n={n} frame {i}: {v} vs {want}"));
                }
            }
        }
    }
    None
}

/// (composite, total) for scalar loss components.
pub fn combine_losses(m: f64, d: f64, b: f64, post: f64, w: &LossWeights) -> (f64, f64) {
    let mut g = Graph::new();
    let vm = g.constant(Tensor::scalar(m));
    let vd = g.constant(Tensor::scalar(d));
    let vb = g.constant(Tensor::scalar(b));
    let vp = g.constant(Tensor::scalar(post));
    let avs = avs_loss(&mut g, vm, vd, vb, w).unwrap();
    let tot = total_loss(&mut g, avs, vp, w).unwrap();
    (g.value(avs).item().unwrap(), g.value(tot).item().unwrap())
}

// ---------------------------------------------------------------------
// metric oracle on 8×8 masks packed into 64-bit words

pub fn pack(m: &BinaryMask) -> u64 {
    assert_eq!((m.height(), m.width()), (8, 8));
    let mut bits = 0u64;
    for y in 0..8 {
        for x in 0..8 {
            if m.get(y, x) {
                bits |= 1 << (y * 8 + x);
            }
        }
    }
    bits
}

/// (tp, fp, fn) from set operations.
pub fn oracle_counts(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64, u64) {
    let (p, g) = (pack(pred), pack(gt));
    (
        (p & g).count_ones() as u64,
        (p & !g).count_ones() as u64,
        (!p & g).count_ones() as u64,
    )
}

pub fn oracle_iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (p, g) = (pack(pred), pack(gt));
    let union = (p | g).count_ones();
    if union == 0 {
        1.0
    } else {
        (p & g).count_ones() as f64 / union as f64
    }
}

pub fn oracle_miou(preds: &[BinaryMask], gts: &[BinaryMask]) -> f64 {
    preds.iter().zip(gts).map(|(p, g)| oracle_iou(p, g)).sum::<f64>() / preds.len() as f64
}

/// F written directly in counts: (1+β²)tp / ((1+β²)tp + β²fn + fp).
pub fn oracle_fscore(preds: &[BinaryMask], gts: &[BinaryMask], beta2: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let (a, b, c) = oracle_counts(p, g);
        tp += a;
        fp += b;
        fn_ += c;
    }
    let num = (1.0 + beta2) * tp as f64;
    let den = num + beta2 * fn_ as f64 + fp as f64;
    if tp == 0 || den == 0.0 {
        0.0
    } else {
        num / den
    }
}

// ---------------------------------------------------------------------
// gradient checks

pub fn grad_dice(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::uniform(&[2, 6, 6], 0.05, 0.95, &mut r);
    let t = Tensor::new(vec![2, 6, 6], random_mask(&mut r, 12, 6, 0.4).to_f64()).unwrap();
    grad_check(|g, x| dice_loss(g, x, &t), &x, GRAD_EPS).unwrap()
}

pub fn grad_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::uniform(&[2, 6, 6], 0.05, 0.95, &mut r);
    let t = Tensor::new(vec![2, 6, 6], random_mask(&mut r, 12, 6, 0.4).to_f64()).unwrap();
    grad_check(|g, x| bce_mask_loss(g, x, &t), &x, GRAD_EPS).unwrap()
}

pub fn grad_class_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::randn(&[4, 4], 2.0, &mut r);
    let labels = Tensor::new(vec![4, 4], random_mask(&mut r, 4, 4, 0.3).to_f64()).unwrap();
    grad_check(|g, x| class_bce_loss(g, x, &labels), &x, GRAD_EPS).unwrap()
}

/// Four-token, four-patch encoder small enough to check every tensor.
pub fn small_vta_config() -> VtaConfig {
    VtaConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_dim: 8,
        max_len: 4,
        vocab: 16,
        patch: 4,
        in_channels: 3,
        out_dim: 4,
        shared_refine: false,
        normalize: Normalize::Layer,
    }
}

fn sample_coords(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut c: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Worst relative error over sampled coordinates of every parameter.
pub fn worst_param_error<F>(
    store: &ParamStore,
    seed: u64,
    per_tensor: usize,
    eps: f64,
    loss: F,
) -> (f64, String)
where
    F: Fn(&mut Graph, &Bound) -> avseg_core::Result<Var> + Copy,
{
    let mut r = rng(seed ^ 0xc0ffee);
    let mut worst = (0.0, String::new());
    for id in store.ids() {
        let coords = sample_coords(&mut r, store.get(id).numel(), per_tensor);
        let rep = grad_check_param(store, id, &coords, eps, loss).unwrap();
        if rep.max_relative_error > worst.0 || rep.max_relative_error.is_nan() {
            worst = (rep.max_relative_error, format!("{} {:?}", store.name(id), rep));
        }
    }
    worst
}

pub fn grad_vta(seed: u64) -> (f64, String) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let vta = Vta::new(small_vta_config(), &mut store, &mut r).unwrap();
    let image = random_image(&mut r, 8, 8, 3);
    let w1 = Tensor::randn(&[4], 1.0, &mut r);
    let w2 = Tensor::randn(&[4], 1.0, &mut r);
    let p1 = TextPrompt::scene("a dog barks");
    let p2 = TextPrompt::sounding("dog");
    let loss = |g: &mut Graph, p: &Bound| {
        let (a1, _) = vta.align(g, p, &p1, &image)?;
        let (a2, _) = vta.align(g, p, &p2, &image)?;
        let c1 = g.constant(w1.clone());
        let c2 = g.constant(w2.clone());
        let s1 = g.mul(a1, c1)?;
        let s2 = g.mul(a2, c2)?;
        let s = g.add(s1, s2)?;
        Ok(g.sum(s))
    };
    worst_param_error(&store, seed, usize::MAX, GRAD_EPS, loss)
}

/// Full training objective (every toggle on) on one 32×32 scene.
pub fn grad_toy(seed: u64) -> (f64, String) {
    let mut r = rng(seed);
    let cfg = TrainConfig::default();
    let mcfg = ModelConfig {
        vta: VtaConfig {
            out_dim: 16,
            patch: 8,
            ..small_vta_config()
        },
        ..cfg.model_config()
    };
    let mut store = ParamStore::new();
    let model = ToyModel::new(mcfg.clone(), &mut store, &mut r).unwrap();
    let scene = gen_scene(seed, &cfg.scene).unwrap();
    assert_eq!(scene.frames[0].height(), 32);
    let (input, truth) = scene.split();
    let flow = flow_masks(&input.frames, cfg.tau).unwrap();
    let prep = prepare(&input, &truth, &flow, &cfg, &mcfg).unwrap();
    let loss = |g: &mut Graph, p: &Bound| Ok(scene_loss(g, &model, p, &prep, &cfg)?.0);
    worst_param_error(&store, seed, 6, GRAD_EPS_MODEL, loss)
}

// ---------------------------------------------------------------------
// masked attention

/// Largest change of the aligned vector when every masked text and
/// visual position is overwritten with noise, for one random encoder.
pub fn masked_perturbation_change(seed: u64) -> f64 {
    let mut r = rng(seed);
    let heads = [1, 2, 4][r.random_range(0..3)];
    let d_model = heads * r.random_range(1..=4);
    let max_len = r.random_range(2..=8);
    let patch = [2, 4][r.random_range(0..2)];
    let side = patch * r.random_range(1..=3);
    let cfg = VtaConfig {
        d_model,
        heads,
        layers: r.random_range(1..=2),
        ffn_dim: r.random_range(2..=8),
        max_len,
        vocab: 32,
        patch,
        in_channels: 3,
        out_dim: r.random_range(2..=6),
        shared_refine: r.random_bool(0.5),
        normalize: if r.random_bool(0.5) { Normalize::Layer } else { Normalize::L2 },
    };
    let mut store = ParamStore::new();
    let vta = Vta::new(cfg, &mut store, &mut r).unwrap();
    let words = ["red", "dog", "car", "piano", "grey", "floor", "guitar", "a"];
    let n_words = r.random_range(1..max_len);
    let text: Vec<&str> = (0..n_words).map(|_| words[r.random_range(0..words.len())]).collect();
    let tokens = tokenize(&text.join(" "), max_len, 32).unwrap();
    let image = random_image(&mut r, side, side, 3);
    let n_patches = (side / patch) * (side / patch);
    let mut vis_attn: Vec<u8> = (0..n_patches).map(|_| r.random_bool(0.7) as u8).collect();
    vis_attn[r.random_range(0..n_patches)] = 1;
    let unified = unify_attention_masks(&tokens.attn, &vis_attn);
    let noise_t = Tensor::randn(&[max_len, d_model], 50.0, &mut r);
    let noise_v = Tensor::randn(&[n_patches, d_model], 50.0, &mut r);

    let run = |perturb: bool| -> Vec<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut text = vta.embed_text(&mut g, &p, &tokens).unwrap();
        let mut vis = vta.embed_visual(&mut g, &p, &image).unwrap();
        if perturb {
            text = add_masked(&mut g, text, &noise_t, &tokens.attn);
            vis = add_masked(&mut g, vis, &noise_v, &vis_attn);
        }
        let first = vta.cross_encode(&mut g, &p, text, &unified, vis, &vis_attn).unwrap();
        let second = vta.refine(&mut g, &p, text, &unified, first).unwrap();
        let out = vta.project_normalize(&mut g, &p, second, &tokens.attn).unwrap();
        g.value(out).data().to_vec()
    };
    let base = run(false);
    let moved = run(true);
    base.iter()
        .zip(&moved)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn add_masked(g: &mut Graph, x: Var, noise: &Tensor, keep: &[u8]) -> Var {
    let d = noise.shape()[1];
    let data = noise
        .data()
        .chunks(d)
        .zip(keep)
        .flat_map(|(row, &k)| row.iter().map(move |&v| if k == 1 { 0.0 } else { v }))
        .collect();
    let n = g.constant(Tensor::new(noise.shape().to_vec(), data).unwrap());
    g.add(x, n).unwrap()
}

// ---------------------------------------------------------------------
// metric gap

/// Largest deviation of the library metrics from the set oracle over
/// `n` random 8×8 pairs, per pair and pooled.
pub fn metric_oracle_gap(seed: u64, n: usize, beta2: f64) -> f64 {
    use avseg_core::metrics::{evaluate, fscore, miou, Averaging};
    let mut r = rng(seed);
    let (mut preds, mut gts) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut gap: f64 = 0.0;
    for _ in 0..n {
        let p = r.random_range(0.05..0.95);
        let pred = random_mask(&mut r, 8, 8, p);
        let q = r.random_range(0.05..0.95);
        let gt = random_mask(&mut r, 8, 8, q);
        let (one_p, one_g) = ([pred.clone()], [gt.clone()]);
        gap = gap.max((miou(&one_p, &one_g).unwrap() - oracle_iou(&pred, &gt)).abs());
        gap = gap.max((fscore(&one_p, &one_g, beta2).unwrap() - oracle_fscore(&one_p, &one_g, beta2)).abs());
        preds.push(pred);
        gts.push(gt);
    }
    let rep = evaluate(&preds, &gts, None, beta2, Averaging::Micro).unwrap();
    gap = gap.max((rep.miou - oracle_miou(&preds, &gts)).abs());
    gap.max((rep.f_score - oracle_fscore(&preds, &gts, beta2)).abs())
}
