//! Synthetic scenes: textured squares on a static background, one of them
//! moving and sounding, one moving and silent, and optionally one that
//! sounds without moving.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ClassMap, ImageFrame};
use crate::vta::TextPrompt;

pub const CLASS_NAMES: [&str; 4] = ["guitar", "piano", "dog", "car"];

const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.75, 0.3],
    [0.25, 0.3, 0.9],
    [0.9, 0.85, 0.2],
];

const BACKGROUND: [f64; 3] = [0.35, 0.35, 0.38];

/// Seed for the class audio signatures; shared by every scene so that a
/// class sounds the same everywhere.
const AUDIO_KEY_SEED: u64 = 0x5eed_a0d1_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneConfig {
    pub size: usize,
    pub frames: usize,
    pub object_size: usize,
    /// Largest per-frame displacement along each axis, in pixels.
    pub max_speed: usize,
    /// Chance that a scene carries a stationary sounding object.
    pub stationary_prob: f64,
    pub audio_dim: usize,
    pub audio_noise: f64,
    pub texture: f64,
    /// Spatial divisibility required of `size`.
    pub patch: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 32,
            frames: 4,
            object_size: 10,
            max_speed: 2,
            stationary_prob: 0.0,
            audio_dim: 16,
            audio_noise: 0.05,
            texture: 0.2,
            patch: 8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "scene size {} not divisible by patch {}",
                self.size, self.patch
            )));
        }
        if self.frames < 2 {
            return Err(Error::Config("a scene needs at least 2 frames".into()));
        }
        if self.object_size == 0 || self.object_size * 2 > self.size {
            return Err(Error::Config(format!(
                "object size {} does not fit a {} canvas",
                self.object_size, self.size
            )));
        }
        if self.max_speed == 0 {
            return Err(Error::Config("max_speed must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.stationary_prob) {
            return Err(Error::Config("stationary_prob must lie in [0, 1]".into()));
        }
        if self.audio_dim == 0 {
            return Err(Error::Config("audio_dim must be >= 1".into()));
        }
        if !(self.audio_noise >= 0.0 && self.texture >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectRole {
    MovingSounding,
    MovingSilent,
    StationarySounding,
}

impl ObjectRole {
    pub fn sounding(self) -> bool {
        !matches!(self, ObjectRole::MovingSilent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneObject {
    pub class: u32,
    pub role: ObjectRole,
    /// Top-left corner per frame.
    pub track: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<ImageFrame>,
    /// Sounding-object pixels per frame.
    pub gt_masks: Vec<BinaryMask>,
    /// Per-pixel class, `k + 1` for class `k`, 0 for silent or background.
    pub gt_classes: Vec<ClassMap>,
    /// Sounding class ids visible in each frame.
    pub class_labels: Vec<Vec<u32>>,
    /// `T × audio_dim`, row-major.
    pub audio: Vec<f64>,
    pub audio_dim: usize,
    pub prompts: (TextPrompt, TextPrompt),
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

/// Everything a model may look at.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    pub frames: Vec<ImageFrame>,
    pub audio: Vec<f64>,
    pub audio_dim: usize,
    pub prompts: (TextPrompt, TextPrompt),
}

/// Labels, held apart from the input.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub masks: Vec<BinaryMask>,
    pub classes: Vec<ClassMap>,
    pub sounding: Vec<u32>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn sounding_classes(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self
            .objects
            .iter()
            .filter(|o| o.role.sounding())
            .map(|o| o.class)
            .collect();
        c.sort_unstable();
        c
    }

    pub fn has_stationary(&self) -> bool {
        self.objects
            .iter()
            .any(|o| o.role == ObjectRole::StationarySounding)
    }

    pub fn split(self) -> (SceneInput, SceneTruth) {
        let sounding = self.sounding_classes();
        (
            SceneInput {
                frames: self.frames,
                audio: self.audio,
                audio_dim: self.audio_dim,
                prompts: self.prompts,
            },
            SceneTruth {
                masks: self.gt_masks,
                classes: self.gt_classes,
                sounding,
            },
        )
    }
}

/// Class signatures: one seeded unit vector per class.
pub fn audio_keys(dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(AUDIO_KEY_SEED ^ dim as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    CLASS_NAMES
        .iter()
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn overlaps(a: (usize, usize), b: (usize, usize), s: usize) -> bool {
    a.0 < b.0 + s && b.0 < a.0 + s && a.1 < b.1 + s && b.1 < a.1 + s
}

fn moving_track<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Vec<(usize, usize)> {
    let span = (cfg.size - cfg.object_size) as i64;
    let speed = cfg.max_speed as i64;
    let mut pos = (rng.random_range(0..=span), rng.random_range(0..=span));
    let mut vel = loop {
        let v = (rng.random_range(-speed..=speed), rng.random_range(-speed..=speed));
        if v != (0, 0) {
            break v;
        }
    };
    let mut out = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        out.push((pos.0 as usize, pos.1 as usize));
        for axis in 0..2 {
            let (p, v) = if axis == 0 {
                (&mut pos.0, &mut vel.0)
            } else {
                (&mut pos.1, &mut vel.1)
            };
            let next = *p + *v;
            if next < 0 || next > span {
                *v = -*v;
            }
            *p += *v;
        }
    }
    out
}

/// Deterministic scene for `seed`. Objects are placed without overlap in
/// every frame, so each one stays fully visible.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.object_size;

    let mut classes: Vec<u32> = (0..CLASS_NAMES.len() as u32).collect();
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let with_stationary = rng.random::<f64>() < cfg.stationary_prob;

    let mut objects: Vec<SceneObject> = Vec::new();
    let mut roles = vec![ObjectRole::MovingSounding, ObjectRole::MovingSilent];
    if with_stationary {
        roles.push(ObjectRole::StationarySounding);
    }
    let span = cfg.size - s;
    for (k, role) in roles.into_iter().enumerate() {
        let mut attempt = 0;
        let track = loop {
            let track = if role == ObjectRole::StationarySounding {
                let p = (rng.random_range(0..=span), rng.random_range(0..=span));
                vec![p; cfg.frames]
            } else {
                moving_track(cfg, &mut rng)
            };
            let clear = objects.iter().all(|o| {
                o.track
                    .iter()
                    .zip(&track)
                    .all(|(&a, &b)| !overlaps(a, b, s))
            });
            attempt += 1;
            if clear || attempt > 200 {
                break track;
            }
        };
        objects.push(SceneObject {
            class: classes[k],
            role,
            track,
        });
    }

    let textures: Vec<Vec<f64>> = objects
        .iter()
        .map(|_| {
            (0..3 * s * s)
                .map(|_| rng.random_range(-cfg.texture..=cfg.texture))
                .collect()
        })
        .collect();
    let bg_texture: Vec<f64> = (0..cfg.size * cfg.size)
        .map(|_| rng.random_range(-0.05..=0.05))
        .collect();

    let n = cfg.size;
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt_masks = Vec::with_capacity(cfg.frames);
    let mut gt_classes = Vec::with_capacity(cfg.frames);
    let mut class_labels = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut img = ImageFrame::zeros(n, n, 3);
        for y in 0..n {
            for x in 0..n {
                for c in 0..3 {
                    img.set(c, y, x, BACKGROUND[c] + bg_texture[y * n + x]);
                }
            }
        }
        let mut cls = vec![0u32; n * n];
        let mut labels = Vec::new();
        for (o, tex) in objects.iter().zip(&textures) {
            let (oy, ox) = o.track[t];
            let color = CLASS_COLORS[o.class as usize];
            for dy in 0..s {
                for dx in 0..s {
                    for c in 0..3 {
                        img.set(c, oy + dy, ox + dx, color[c] + tex[(c * s + dy) * s + dx]);
                    }
                    cls[(oy + dy) * n + ox + dx] = if o.role.sounding() { o.class + 1 } else { 0 };
                }
            }
            if o.role.sounding() {
                labels.push(o.class);
            }
        }
        labels.sort_unstable();
        let cmap = ClassMap::new(n, n, cls)?;
        gt_masks.push(cmap.to_binary());
        gt_classes.push(cmap);
        class_labels.push(labels);
        frames.push(img);
    }

    let keys = audio_keys(cfg.audio_dim);
    let noise = Normal::new(0.0, cfg.audio_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut audio = Vec::with_capacity(cfg.frames * cfg.audio_dim);
    for labels in &class_labels {
        for i in 0..cfg.audio_dim {
            let sig: f64 = labels.iter().map(|&c| keys[c as usize][i]).sum();
            let eps = if cfg.audio_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            audio.push(sig + eps);
        }
    }

    let mut described: Vec<&str> = objects.iter().map(|o| CLASS_NAMES[o.class as usize]).collect();
    described.sort_unstable();
    let scene_text = match described.as_slice() {
        [a, b] => format!("a {a} and a {b} on a grey floor"),
        [a, b, c] => format!("a {a}, a {b} and a {c} on a grey floor"),
        other => other.join(", "),
    };
    let sounding: Vec<&str> = {
        let mut v: Vec<u32> = objects
            .iter()
            .filter(|o| o.role.sounding())
            .map(|o| o.class)
            .collect();
        v.sort_unstable();
        v.into_iter().map(|c| CLASS_NAMES[c as usize]).collect()
    };

    Ok(SceneSequence {
        frames,
        gt_masks,
        gt_classes,
        class_labels,
        audio,
        audio_dim: cfg.audio_dim,
        prompts: (
            TextPrompt::scene(scene_text),
            TextPrompt::sounding(sounding.join(", ")),
        ),
        objects,
        seed,
    })
}
