use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use avseg_core::autodiff::{Graph, ParamStore, Tensor};
use avseg_core::flow::{flow_to_gray, frame_diff_flow, temporal_align, FlowField, FlowSequence};
use avseg_core::losses::{
    avs_loss, bce_mask_loss, class_bce_loss, dice_loss, mask_target, post_mask_loss, total_loss,
    LossWeights,
};
use avseg_core::mask::{
    apply_premask, binarize, mask_stats, postmask_label, premask, premask_without_gt,
};
use avseg_core::manifest::evaluate_manifest;
use avseg_core::metrics::Averaging;
use avseg_core::pgm;
use avseg_core::report::{fmt_g6, record, table};
use avseg_core::toy::train::flow_masks;
use avseg_core::toy::{ablate, gen_scene, train, TrainConfig, Variant};
use avseg_core::vta::{TextPrompt, Vta, VtaConfig};
use avseg_core::{Error, Result};

use crate::{
    AblateArgs, ApplyArgs, BinarizeArgs, Command, FlowAlignArgs, GenSceneArgs, LossArgs,
    MetricsArgs, PostmaskArgs, PremaskArgs, TrainArgs, VtaDemoArgs,
};

/// Runs one subcommand and returns what goes to standard output.
pub fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::FlowAlign(a) => flow_align(a),
        Command::Binarize(a) => binarize_cmd(a),
        Command::Premask(a) => premask_cmd(a),
        Command::Postmask(a) => postmask_cmd(a),
        Command::Apply(a) => apply_cmd(a),
        Command::Loss(a) => loss_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::GenScene(a) => gen_scene_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::VtaDemo(a) => vta_demo(a),
    }
}

fn seed_line(seed: u64) -> String {
    format!("seed: {seed}\n")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_text(&pgm::read_text(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn flow_align(a: FlowAlignArgs) -> Result<String> {
    let seq = if a.frames.is_empty() {
        let flows = a
            .flow
            .iter()
            .map(|p| pgm::read_gray(p).map(FlowField::from))
            .collect::<Result<Vec<_>>>()?;
        FlowSequence::new(flows)?
    } else {
        let frames = a
            .frames
            .iter()
            .map(|p| pgm::read_image(p))
            .collect::<Result<Vec<_>>>()?;
        frame_diff_flow(&frames)?
    };
    let aligned = temporal_align(&seq);
    create_dir(&a.out)?;
    let mut out = seed_line(a.seed.or(0));
    for (i, f) in aligned.frames().iter().enumerate() {
        let path = a.out.join(format!("flow_{i:03}.pgm"));
        pgm::write_text(&path, &pgm::encode_gray(&flow_to_gray(f)))?;
        let mean = f.magnitude().iter().sum::<f64>() / f.magnitude().len() as f64;
        writeln!(out, "{}  mean {}", path.display(), fmt_g6(mean)).unwrap();
    }
    Ok(out)
}

fn binarize_cmd(a: BinarizeArgs) -> Result<String> {
    let m = binarize(&pgm::read_gray(&a.flow)?, a.tau)?;
    pgm::write_text(&a.out, &pgm::encode_binary_mask(&m))?;
    Ok(format!(
        "{}tau: {}\nforeground: {} of {}\n",
        seed_line(a.seed.or(0)),
        fmt_g6(a.tau),
        m.count(),
        m.height() * m.width()
    ))
}

fn premask_cmd(a: PremaskArgs) -> Result<String> {
    let m_o = pgm::read_binary_mask(&a.flow_mask)?;
    let tri = match &a.gt {
        Some(gt) => premask(&m_o, &pgm::read_binary_mask(gt)?)?,
        None => premask_without_gt(&m_o),
    };
    pgm::write_text(&a.out, &pgm::encode_tri_mask(&tri))?;
    let (one, half, zero) = mask_stats(&tri);
    Ok(format!(
        "{}zero: {zero}\nhalf: {half}\none: {one}\n",
        seed_line(a.seed.or(0))
    ))
}

fn postmask_cmd(a: PostmaskArgs) -> Result<String> {
    let m = postmask_label(
        &pgm::read_binary_mask(&a.flow_mask)?,
        &pgm::read_binary_mask(&a.gt)?,
    )?;
    pgm::write_text(&a.out, &pgm::encode_binary_mask(&m))?;
    Ok(format!("{}foreground: {}\n", seed_line(a.seed.or(0)), m.count()))
}

fn apply_cmd(a: ApplyArgs) -> Result<String> {
    let frame = pgm::read_image(&a.frame)?;
    let out = apply_premask(&frame, &pgm::read_tri_mask(&a.mask)?)?;
    let text = if out.channels() == 1 {
        let g = avseg_core::mask::GrayFrame::new(out.height(), out.width(), out.data().to_vec())?;
        pgm::encode_gray(&g)
    } else {
        pgm::encode_image(&out)
    };
    pgm::write_text(&a.out, &text)?;
    Ok(format!(
        "{}{}x{}x{}\n",
        seed_line(a.seed.or(0)),
        out.height(),
        out.width(),
        out.channels()
    ))
}

fn loss_cmd(a: LossArgs) -> Result<String> {
    let w = LossWeights {
        lambda_mask: a.lambda_mask,
        lambda_dice: a.lambda_dice,
        lambda_bce: a.lambda_bce,
        lambda_mask_prime: a.lambda_mask_prime,
    };
    w.validate()?;
    let pred = pgm::read_gray(&a.pred)?;
    let target_mask = pgm::read_binary_mask(&a.target)?;
    let target = mask_target(&target_mask);
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(
        vec![pred.height(), pred.width()],
        pred.data().to_vec(),
    )?);
    let m = bce_mask_loss(&mut g, p, &target)?;
    let d = dice_loss(&mut g, p, &target)?;
    let b = if a.class_logits.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        if a.class_logits.len() != a.class_labels.len() {
            return Err(Error::Shape(format!(
                "{} class logits with {} labels",
                a.class_logits.len(),
                a.class_labels.len()
            )));
        }
        let n = a.class_logits.len();
        let logits = g.constant(Tensor::new(vec![1, n], a.class_logits.clone())?);
        class_bce_loss(&mut g, logits, &Tensor::new(vec![1, n], a.class_labels.clone())?)?
    };
    let post = match &a.flow_mask {
        Some(f) => {
            let label = postmask_label(&pgm::read_binary_mask(f)?, &target_mask)?;
            post_mask_loss(&mut g, p, &mask_target(&label))?
        }
        None => g.constant(Tensor::scalar(0.0)),
    };
    let avs = avs_loss(&mut g, m, d, b, &w)?;
    let total = total_loss(&mut g, avs, post, &w)?;
    let v = |x| g.value(x).data()[0];
    let rows = [
        ("mask", v(m), w.lambda_mask),
        ("dice", v(d), w.lambda_dice),
        ("class", v(b), w.lambda_bce),
        ("post", v(post), w.lambda_mask_prime),
    ];
    let mut body: Vec<Vec<String>> = rows
        .iter()
        .map(|&(n, x, l)| vec![n.to_string(), fmt_g6(x), fmt_g6(l), fmt_g6(l * x)])
        .collect();
    body.push(vec!["avs".into(), String::new(), String::new(), fmt_g6(v(avs))]);
    body.push(vec!["total".into(), String::new(), String::new(), fmt_g6(v(total))]);
    let mut out = seed_line(a.seed.or(0));
    out.push_str(&table(&["term", "value", "weight", "weighted"], &body));
    Ok(out)
}

fn metrics_cmd(a: MetricsArgs) -> Result<String> {
    let averaging = if a.macro_average {
        Averaging::Macro
    } else {
        Averaging::Micro
    };
    let rep = evaluate_manifest(&a.manifest, a.beta2, averaging)?;
    let rec = record(&json!({"seed": a.seed.or(0), "report": rep}))?;
    if let Some(p) = &a.out {
        pgm::write_text(p, &format!("{rec}\n"))?;
    }
    let mut rows = vec![
        vec!["frames".to_string(), rep.frames.to_string()],
        vec!["miou".into(), fmt_g6(rep.miou)],
        vec!["precision".into(), fmt_g6(rep.precision)],
        vec!["recall".into(), fmt_g6(rep.recall)],
        vec!["f_score".into(), fmt_g6(rep.f_score)],
        vec!["beta2".into(), fmt_g6(rep.beta2)],
    ];
    if let Some(pc) = &rep.per_class_iou {
        for (c, iou) in pc {
            rows.push(vec![format!("iou class {c}"), fmt_g6(*iou)]);
        }
    }
    let mut out = seed_line(a.seed.or(0));
    out.push_str(&table(&["metric", "value"], &rows));
    out.push_str(&rec);
    out.push('\n');
    Ok(out)
}

fn gen_scene_cmd(a: GenSceneArgs) -> Result<String> {
    let cfg = read_config(a.config.as_deref())?;
    let seed = a.seed.or(cfg.seed);
    let scene = gen_scene(seed, &cfg.scene)?;
    let flow = flow_masks(&scene.frames, a.tau)?;
    let aligned = temporal_align(&frame_diff_flow(&scene.frames)?);
    create_dir(&a.out)?;
    let mut manifest = String::new();
    for t in 0..scene.len() {
        let names = [
            format!("frame_{t:03}.ppm"),
            format!("flow_{t:03}.pgm"),
            format!("gt_{t:03}.pgm"),
            format!("flowmask_{t:03}.pgm"),
        ];
        let texts = [
            pgm::encode_image(&scene.frames[t]),
            pgm::encode_gray(&flow_to_gray(&aligned.frames()[t])),
            pgm::encode_binary_mask(&scene.gt_masks[t]),
            pgm::encode_binary_mask(&flow[t]),
        ];
        for (n, text) in names.iter().zip(&texts) {
            pgm::write_text(&a.out.join(n), text)?;
        }
        let line = json!({
            "frame": names[0], "flow": names[1], "gt": names[2], "pred": names[3],
            "prompt1": scene.prompts.0.text, "prompt2": scene.prompts.1.text,
        });
        writeln!(manifest, "{line}").unwrap();
    }
    pgm::write_text(&a.out.join("manifest.jsonl"), &manifest)?;
    let audio: Vec<&[f64]> = scene.audio.chunks(scene.audio_dim).collect();
    let meta = record(&json!({
        "seed": seed,
        "config": cfg.scene,
        "tau": a.tau,
        "prompt1": scene.prompts.0.text,
        "prompt2": scene.prompts.1.text,
        "sounding": scene.sounding_classes(),
        "class_labels": scene.class_labels,
        "stationary_sounding": scene.has_stationary(),
        "audio": audio,
    }))?;
    pgm::write_text(&a.out.join("scene.json"), &format!("{meta}\n"))?;
    let mut out = seed_line(seed);
    writeln!(out, "frames: {}", scene.len()).unwrap();
    writeln!(out, "prompt1: {}", scene.prompts.0.text).unwrap();
    writeln!(out, "prompt2: {}", scene.prompts.1.text).unwrap();
    writeln!(out, "written: {}", a.out.display()).unwrap();
    Ok(out)
}

fn train_cmd(a: TrainArgs) -> Result<String> {
    let mut cfg = read_config(a.config.as_deref())?;
    cfg.seed = a.seed.or(cfg.seed);
    let rep = train(&cfg)?;
    let mut records = String::new();
    writeln!(records, "{}", record(&json!({"record": "config", "seed": rep.seed, "config": rep.config}))?).unwrap();
    for e in &rep.epochs {
        writeln!(records, "{}", record(&json!({"record": "epoch", "epoch": e.epoch, "lr": e.lr, "losses": e.losses}))?).unwrap();
    }
    writeln!(
        records,
        "{}",
        record(&json!({
            "record": "eval",
            "seed": rep.seed,
            "eval": rep.eval,
            "gt_training_reads": rep.gt_training_reads,
            "parameters": rep.parameters,
        }))?
    )
    .unwrap();
    if let Some(p) = &a.out {
        pgm::write_text(p, &records)?;
    }
    let rows: Vec<Vec<String>> = rep
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                fmt_g6(e.lr),
                fmt_g6(e.losses.mask),
                fmt_g6(e.losses.dice),
                fmt_g6(e.losses.class),
                fmt_g6(e.losses.post),
                fmt_g6(e.losses.total),
            ]
        })
        .collect();
    let mut out = seed_line(rep.seed);
    out.push_str(&table(&["epoch", "lr", "mask", "dice", "class", "post", "total"], &rows));
    out.push('\n');
    out.push_str(&table(
        &["eval", "value"],
        &[
            vec!["frames".into(), rep.eval.frames.to_string()],
            vec!["miou".into(), fmt_g6(rep.eval.miou)],
            vec!["f_score".into(), fmt_g6(rep.eval.f_score)],
            vec!["precision".into(), fmt_g6(rep.eval.precision)],
            vec!["recall".into(), fmt_g6(rep.eval.recall)],
            vec!["miou_vs_post".into(), fmt_g6(rep.eval.miou_vs_post)],
            vec!["gt_inference_reads".into(), rep.eval.gt_inference_reads.to_string()],
        ],
    ));
    Ok(out)
}

fn ablate_cmd(a: AblateArgs) -> Result<String> {
    let mut cfg = read_config(a.config.as_deref())?;
    cfg.seed = a.seed.or(cfg.seed);
    let variants = if a.variants.is_empty() {
        Variant::standard()
    } else {
        a.variants
            .iter()
            .map(|n| {
                Variant::by_name(n).ok_or_else(|| Error::Config(format!("unknown variant `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.seed + i).collect();
    let rep = ablate(&cfg, &variants, &seeds)?;
    let mut records = String::new();
    for r in &rep.rows {
        writeln!(records, "{}", record(r)?).unwrap();
    }
    if let Some(p) = &a.out {
        pgm::write_text(p, &records)?;
    }
    let flag = |b: bool| if b { "x" } else { "-" }.to_string();
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                flag(r.toggles.premask),
                flag(r.toggles.postmask),
                flag(r.toggles.prompts),
                flag(r.toggles.vta),
                fmt_g6(r.median_miou),
                fmt_g6(r.median_f_score),
            ]
        })
        .collect();
    let mut out = seed_line(cfg.seed);
    writeln!(out, "seeds: {:?}", seeds).unwrap();
    out.push_str(&table(
        &["variant", "pre", "post", "prompts", "vta", "miou", "f_score"],
        &rows,
    ));
    Ok(out)
}

fn vta_demo(a: VtaDemoArgs) -> Result<String> {
    let seed = a.seed.or(0);
    let image = pgm::read_image(&a.image)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vta = Vta::new(VtaConfig::default(), &mut store, &mut rng)?;
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let mut out = seed_line(seed);
    let mut records = String::new();
    for (name, prompt) in [
        ("align1", TextPrompt::scene(a.prompt1)),
        ("align2", TextPrompt::sounding(a.prompt2)),
    ] {
        let (v, trace) = vta.align(&mut g, &p, &prompt, &image)?;
        let values = g.value(v).data().to_vec();
        let bits = |m: &[u8]| m.iter().map(|b| char::from(b'0' + b)).collect::<String>();
        writeln!(out, "{name} prompt: {}", prompt.text).unwrap();
        writeln!(out, "{name} tokens: {:?}", trace.tokens.ids).unwrap();
        writeln!(out, "{name} text mask:    {}", bits(&trace.tokens.attn)).unwrap();
        writeln!(out, "{name} visual mask:  {}", bits(&trace.vis_attn)).unwrap();
        writeln!(out, "{name} unified mask: {}", bits(&trace.unified_attn)).unwrap();
        let shown: Vec<String> = values.iter().map(|&x| fmt_g6(x)).collect();
        writeln!(out, "{name}: [{}]", shown.join(", ")).unwrap();
        writeln!(
            records,
            "{}",
            record(&json!({
                "seed": seed,
                "name": name,
                "prompt": prompt.text,
                "tokens": trace.tokens.ids,
                "text_mask": trace.tokens.attn,
                "visual_mask": trace.vis_attn,
                "unified_mask": trace.unified_attn,
                "align": values,
            }))?
        )
        .unwrap();
    }
    if let Some(path) = &a.out {
        pgm::write_text(path, &records)?;
    }
    Ok(out)
}
