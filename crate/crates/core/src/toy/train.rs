//! Training loop and held-out evaluation for the toy segmenter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::flow::{flow_to_gray, frame_diff_flow, temporal_align};
use crate::losses::{
    avs_loss, bce_mask_loss, class_bce_loss, dice_loss, post_mask_loss, total_loss, LossWeights,
};
use crate::mask::{
    apply_premask, binarize, postmask_label, premask, premask_without_gt, BinaryMask, ImageFrame,
    DEFAULT_TAU,
};
use crate::metrics::{evaluate, miou, Averaging, DEFAULT_BETA2};
use crate::toy::model::{frames_tensor, Forward, ModelConfig, ModelInput, PromptMode, ToyModel, MASK_STRIDE};
use crate::toy::scene::{gen_scene, SceneConfig, SceneInput, SceneTruth};
use crate::toy::truth::{GroundTruthStore, Phase};
use crate::vta::Normalize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
pub struct Toggles {
    pub premask: bool,
    pub postmask: bool,
    pub prompts: bool,
    pub vta: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        premask: true,
        postmask: true,
        prompts: true,
        vta: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// 1-based epoch from which the decayed rate applies.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weights: LossWeights,
    pub toggles: Toggles,
    pub tau: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub scene: SceneConfig,
    pub shared_refine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 60,
            lr: 0.05,
            lr_decay_epoch: 30,
            lr_decay_factor: 0.1,
            weights: LossWeights::default(),
            toggles: Toggles::FULL,
            tau: DEFAULT_TAU,
            train_scenes: 16,
            eval_scenes: 8,
            scene: SceneConfig::default(),
            shared_refine: true,
        }
    }
}

fn parse_bool(e: &crate::config::Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!(
            "line {}: `{}` expects a boolean, got `{other}`",
            e.line, e.key
        ))),
    }
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::from_text`].
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "epochs",
        "lr",
        "lr_decay_epoch",
        "lr_decay_factor",
        "lambda_mask",
        "lambda_dice",
        "lambda_bce",
        "lambda_mask_prime",
        "use_premask",
        "use_postmask",
        "use_prompts",
        "use_vta",
        "tau",
        "train_scenes",
        "eval_scenes",
        "size",
        "frames",
        "object_size",
        "max_speed",
        "stationary_prob",
        "audio_noise",
        "texture",
        "shared_refine",
    ];

    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for e in parse_kv(text)? {
            match e.key.as_str() {
                "seed" => c.seed = e.parse()?,
                "epochs" => c.epochs = e.parse()?,
                "lr" => c.lr = e.parse()?,
                "lr_decay_epoch" => c.lr_decay_epoch = e.parse()?,
                "lr_decay_factor" => c.lr_decay_factor = e.parse()?,
                "lambda_mask" => c.weights.lambda_mask = e.parse()?,
                "lambda_dice" => c.weights.lambda_dice = e.parse()?,
                "lambda_bce" => c.weights.lambda_bce = e.parse()?,
                "lambda_mask_prime" => c.weights.lambda_mask_prime = e.parse()?,
                "use_premask" => c.toggles.premask = parse_bool(&e)?,
                "use_postmask" => c.toggles.postmask = parse_bool(&e)?,
                "use_prompts" => c.toggles.prompts = parse_bool(&e)?,
                "use_vta" => c.toggles.vta = parse_bool(&e)?,
                "tau" => c.tau = e.parse()?,
                "train_scenes" => c.train_scenes = e.parse()?,
                "eval_scenes" => c.eval_scenes = e.parse()?,
                "size" => c.scene.size = e.parse()?,
                "frames" => c.scene.frames = e.parse()?,
                "object_size" => c.scene.object_size = e.parse()?,
                "max_speed" => c.scene.max_speed = e.parse()?,
                "stationary_prob" => c.scene.stationary_prob = e.parse()?,
                "audio_noise" => c.scene.audio_noise = e.parse()?,
                "texture" => c.scene.texture = e.parse()?,
                "shared_refine" => c.shared_refine = parse_bool(&e)?,
                other => {
                    return Err(Error::Config(format!("line {}: unknown key `{other}`", e.line)))
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        for (name, v) in [("lr", self.lr), ("lr_decay_factor", self.lr_decay_factor)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::Config("train_scenes and eval_scenes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !self.scene.size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "scene size {} must be a multiple of 32",
                self.scene.size
            )));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.scene.validate()
    }

    /// Rate used during the 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_epoch > 0 && epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig {
            audio_dim: self.scene.audio_dim,
            ..ModelConfig::default()
        };
        m.vta.shared_refine = self.shared_refine;
        m.vta.normalize = Normalize::Layer;
        m
    }

    fn prompt_mode(&self) -> PromptMode {
        PromptMode {
            prompts: self.toggles.prompts,
            vta: self.toggles.prompts && self.toggles.vta,
        }
    }
}

/// SplitMix64 step; used to derive independent seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;

/// Seeds of the training and held-out scenes of a run.
pub fn scene_seeds(cfg: &TrainConfig) -> (Vec<u64>, Vec<u64>) {
    let tr = (0..cfg.train_scenes as u64)
        .map(|i| derive_seed(cfg.seed, STREAM_TRAIN, i))
        .collect();
    let ev = (0..cfg.eval_scenes as u64)
        .map(|i| derive_seed(cfg.seed, STREAM_EVAL, i))
        .collect();
    (tr, ev)
}

/// Binarized per-frame motion masks: frame differences, stretched to one
/// field per frame, thresholded at `tau`.
pub fn flow_masks(frames: &[ImageFrame], tau: f64) -> Result<Vec<BinaryMask>> {
    let aligned = temporal_align(&frame_diff_flow(frames)?);
    aligned
        .frames()
        .iter()
        .map(|f| binarize(&flow_to_gray(f), tau))
        .collect()
}

/// Input to the model for one scene, with the inference-time pre-mask
/// when `premask` is on.
pub fn model_input(scene: &SceneInput, flow: &[BinaryMask], premask_on: bool) -> Result<ModelInput> {
    let frames = if premask_on {
        scene
            .frames
            .iter()
            .zip(flow)
            .map(|(f, m)| apply_premask(f, &premask_without_gt(m)))
            .collect::<Result<Vec<_>>>()?
    } else {
        scene.frames.clone()
    };
    build_input(scene, &frames)
}

fn build_input(scene: &SceneInput, frames: &[ImageFrame]) -> Result<ModelInput> {
    Ok(ModelInput {
        frames: frames_tensor(frames)?,
        audio: Tensor::new(
            vec![scene.frames.len(), scene.audio_dim],
            scene.audio.clone(),
        )?,
        prompts: scene.prompts.clone(),
        reference: scene.frames[0].clone(),
    })
}

/// Everything one training step needs for a scene.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: ModelInput,
    /// `T × N × H × W`; query `n` targets the pixels of class `n` when it
    /// sounds and nothing otherwise.
    pub targets: Tensor,
    /// Flow ∩ target, same layout.
    pub post: Tensor,
    /// `N × K` query classification labels.
    pub labels: Tensor,
}

/// Query `n` owns class `n`.
pub fn prepare(
    scene: &SceneInput,
    truth: &SceneTruth,
    flow: &[BinaryMask],
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<Prepared> {
    let frames = if cfg.toggles.premask {
        scene
            .frames
            .iter()
            .zip(flow)
            .zip(&truth.masks)
            .map(|((f, m), gt)| apply_premask(f, &premask(m, gt)?))
            .collect::<Result<Vec<_>>>()?
    } else {
        scene.frames.clone()
    };
    let input = build_input(scene, &frames)?;
    let t = scene.frames.len();
    let (h, w) = (scene.frames[0].height(), scene.frames[0].width());
    let (n, k) = (model.queries, model.classes);
    let mut targets = Vec::with_capacity(t * n * h * w);
    let mut post = Vec::with_capacity(t * n * h * w);
    for ti in 0..t {
        for q in 0..n {
            let target = if q < k && truth.sounding.contains(&(q as u32)) {
                truth.classes[ti].class_mask(q as u32 + 1)
            } else {
                BinaryMask::zeros(h, w)
            };
            targets.extend(target.to_f64());
            post.extend(postmask_label(&flow[ti], &target)?.to_f64());
        }
    }
    let mut labels = vec![0.0; n * k];
    for &c in &truth.sounding {
        let c = c as usize;
        if c < n.min(k) {
            labels[c * k + c] = 1.0;
        }
    }
    Ok(Prepared {
        input,
        targets: Tensor::new(vec![t, n, h, w], targets)?,
        post: Tensor::new(vec![t, n, h, w], post)?,
        labels: Tensor::new(vec![n, k], labels)?,
    })
}

/// Scalar loss terms of one step, weighted as they enter the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub mask: f64,
    pub dice: f64,
    pub class: f64,
    pub post: f64,
    pub total: f64,
}

/// Full-resolution mask probabilities `T × N × H × W`.
pub fn mask_probs(g: &mut Graph, fwd: &Forward) -> Result<Var> {
    let up = g.upsample2d(fwd.mask_logits, MASK_STRIDE)?;
    Ok(g.sigmoid(up))
}

/// Builds the training objective for one prepared scene.
pub fn scene_loss(
    g: &mut Graph,
    model: &ToyModel,
    p: &crate::autodiff::Bound,
    prep: &Prepared,
    cfg: &TrainConfig,
) -> Result<(Var, LossTerms)> {
    let fwd = model.forward(g, p, &prep.input, cfg.prompt_mode())?;
    let b = class_bce_loss(g, fwd.class_logits, &prep.labels)?;
    let mut w = cfg.weights;
    let probs = mask_probs(g, &fwd)?;
    let m = bce_mask_loss(g, probs, &prep.targets)?;
    let d = dice_loss(g, probs, &prep.targets)?;
    let post = if cfg.toggles.postmask {
        post_mask_loss(g, probs, &prep.post)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    if !cfg.toggles.postmask {
        w.lambda_mask_prime = 0.0;
    }
    let avs = avs_loss(g, m, d, b, &w)?;
    let total = total_loss(g, avs, post, &w)?;
    let val = |g: &Graph, v: Var| g.value(v).data()[0];
    let terms = LossTerms {
        mask: w.lambda_mask * val(g, m),
        dice: w.lambda_dice * val(g, d),
        class: w.lambda_bce * val(g, b),
        post: w.lambda_mask_prime * val(g, post),
        total: val(g, total),
    };
    Ok((total, terms))
}

/// Foreground where any query's mask probability exceeds one half.
/// Silent-class queries are trained towards empty masks, so the audio
/// gating already lives in the mask head.
pub fn predict(model: &ToyModel, store: &ParamStore, input: &ModelInput, mode: PromptMode) -> Result<Vec<BinaryMask>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let fwd = model.forward(&mut g, &p, input, mode)?;
    let probs = mask_probs(&mut g, &fwd)?;
    let s = g.shape(probs).to_vec();
    let (t, n, h, w) = (s[0], s[1], s[2], s[3]);
    let pv = g.value(probs).data();
    (0..t)
        .map(|ti| {
            let data = (0..h * w)
                .map(|i| {
                    let best = (0..n)
                        .map(|q| pv[(ti * n + q) * h * w + i])
                        .fold(0.0f64, f64::max);
                    (best > 0.5) as u8
                })
                .collect();
            BinaryMask::new(h, w, data)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub miou: f64,
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    /// mIoU of the predictions against the flow ∩ ground-truth masks.
    pub miou_vs_post: f64,
    pub gt_inference_reads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub eval: EvalSummary,
    pub gt_training_reads: usize,
    pub parameters: usize,
}

/// Trained weights alongside the report.
pub struct Trained {
    pub model: ToyModel,
    pub params: ParamStore,
    pub report: TrainReport,
}

pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    Ok(train_full(cfg)?.report)
}

fn split_scenes(seeds: &[u64], cfg: &SceneConfig) -> Result<(Vec<SceneInput>, Vec<SceneTruth>)> {
    let mut inputs = Vec::with_capacity(seeds.len());
    let mut truths = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let (i, t) = gen_scene(s, cfg)?.split();
        inputs.push(i);
        truths.push(t);
    }
    Ok((inputs, truths))
}

pub fn train_full(cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 0));
    let model = ToyModel::new(mcfg.clone(), &mut params, &mut rng)?;

    let (train_seeds, eval_seeds) = scene_seeds(cfg);
    let (inputs, truths) = split_scenes(&train_seeds, &cfg.scene)?;
    let store = GroundTruthStore::new(truths);
    let mut prepared = Vec::with_capacity(inputs.len());
    for (i, scene) in inputs.iter().enumerate() {
        let flow = flow_masks(&scene.frames, cfg.tau)?;
        prepared.push(prepare(scene, store.for_training(i)?, &flow, cfg, &mcfg)?);
    }

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut sum = LossTerms::default();
        for (si, prep) in prepared.iter().enumerate() {
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let (loss, terms) = scene_loss(&mut g, &model, &p, prep, cfg)?;
            if !terms.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    scene: si,
                    detail: format!("loss {:?}", terms),
                });
            }
            g.backward(loss)?;
            params.sgd_step(&g, &p, lr).map_err(|e| Error::Divergence {
                epoch,
                scene: si,
                detail: e.to_string(),
            })?;
            sum.mask += terms.mask;
            sum.dice += terms.dice;
            sum.class += terms.class;
            sum.post += terms.post;
            sum.total += terms.total;
        }
        let n = prepared.len() as f64;
        epochs.push(EpochLog {
            epoch,
            lr,
            losses: LossTerms {
                mask: sum.mask / n,
                dice: sum.dice / n,
                class: sum.class / n,
                post: sum.post / n,
                total: sum.total / n,
            },
        });
    }

    let (eval_inputs, eval_truths) = split_scenes(&eval_seeds, &cfg.scene)?;
    let mut eval_store = GroundTruthStore::new(eval_truths);
    let eval = evaluate_model(&model, &params, cfg, &eval_inputs, &mut eval_store)?;
    let report = TrainReport {
        seed: cfg.seed,
        config: cfg.clone(),
        epochs,
        eval,
        gt_training_reads: store.training_reads(),
        parameters: params.scalar_count(),
    };
    Ok(Trained {
        model,
        params,
        report,
    })
}

/// Predicts every scene with the store in the inference phase, then
/// scores against it.
pub fn evaluate_model(
    model: &ToyModel,
    params: &ParamStore,
    cfg: &TrainConfig,
    scenes: &[SceneInput],
    store: &mut GroundTruthStore,
) -> Result<EvalSummary> {
    store.set_phase(Phase::Inference);
    let mut preds = Vec::with_capacity(scenes.len());
    let mut flows = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let flow = flow_masks(&scene.frames, cfg.tau)?;
        let input = model_input(scene, &flow, cfg.toggles.premask)?;
        preds.push(predict(model, params, &input, cfg.prompt_mode())?);
        flows.push(flow);
    }
    store.set_phase(Phase::Scoring);
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    let mut all_post = Vec::new();
    for (i, (p, flow)) in preds.into_iter().zip(&flows).enumerate() {
        let truth = store.for_scoring(i)?;
        for (m, o) in truth.masks.iter().zip(flow) {
            all_post.push(postmask_label(o, m)?);
        }
        all_gt.extend(truth.masks.iter().cloned());
        all_pred.extend(p);
    }
    let rep = evaluate(&all_pred, &all_gt, None, DEFAULT_BETA2, Averaging::Micro)?;
    Ok(EvalSummary {
        frames: rep.frames,
        miou: rep.miou,
        f_score: rep.f_score,
        precision: rep.precision,
        recall: rep.recall,
        miou_vs_post: miou(&all_pred, &all_post)?,
        gt_inference_reads: store.inference_reads(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_overrides_defaults() {
        let c = TrainConfig::from_text("epochs = 3\nuse_vta = false\nlr = 0.05 # fast\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(!c.toggles.vta && c.toggles.prompts);
        assert_eq!(c.lr, 0.05);
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("epochs = 0").is_err());
        assert!(TrainConfig::from_text("use_vta = maybe").is_err());
        assert!(TrainConfig::from_text("lr = -1").is_err());
    }

    #[test]
    fn every_listed_key_parses() {
        let defaults = TrainConfig::default();
        for k in TrainConfig::KEYS {
            let v = match *k {
                "use_premask" | "use_postmask" | "use_prompts" | "use_vta" | "shared_refine" => "true",
                "size" => "32",
                "frames" => "4",
                "object_size" => "8",
                "max_speed" => "1",
                "stationary_prob" | "tau" | "audio_noise" | "texture" => "0.1",
                _ => "2",
            };
            TrainConfig::from_text(&format!("{k} = {v}")).unwrap();
        }
        assert_eq!(TrainConfig::from_text("").unwrap(), defaults);
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 0.05);
        assert_eq!(c.lr_at(29), 0.05);
        assert_eq!(c.lr_at(30), 0.05 * 0.1);
        assert_eq!(c.lr_at(60), 0.05 * 0.1);
    }

    #[test]
    fn derived_seeds_differ() {
        let c = TrainConfig::default();
        let (a, b) = scene_seeds(&c);
        let mut all: Vec<u64> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), c.train_scenes + c.eval_scenes);
    }
}
