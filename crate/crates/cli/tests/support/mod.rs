//! Drives the `avseg` binary for the CLI and acceptance tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn avseg<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_avseg"))
        .args(args)
        .output()
        .expect("spawn avseg")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Runs and insists on success.
pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> String {
    let out = avseg(args);
    assert!(
        out.status.success(),
        "{:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    stdout(&out)
}

pub const TINY_CONFIG: &str = "\
# two short epochs on three scenes
epochs = 2
train_scenes = 2
eval_scenes = 1
";

/// A generated scene plus a short training config under `dir`.
pub struct Fixture {
    pub dir: PathBuf,
    pub scene: PathBuf,
    pub config: PathBuf,
}

impl Fixture {
    pub fn new(dir: &Path) -> Fixture {
        let scene = dir.join("scene");
        let config = dir.join("tiny.cfg");
        fs::write(&config, TINY_CONFIG).unwrap();
        ok(&[
            "gen-scene".as_ref(),
            "--seed".as_ref(),
            "3".as_ref(),
            "--out".as_ref(),
            scene.as_os_str(),
        ]);
        Fixture {
            dir: dir.to_path_buf(),
            scene,
            config,
        }
    }

    pub fn input(&self, name: &str) -> String {
        self.scene.join(name).display().to_string()
    }

    pub fn output(&self, name: &str) -> String {
        self.dir.join("out").join(name).display().to_string()
    }
}

/// One invocation and the paths (files or directories) it writes.
pub struct Case {
    pub name: &'static str,
    pub args: Vec<String>,
    pub outputs: Vec<PathBuf>,
}

fn case(name: &'static str, args: &[&str], outputs: &[&str]) -> Case {
    Case {
        name,
        args: args.iter().map(|s| s.to_string()).collect(),
        outputs: outputs.iter().map(PathBuf::from).collect(),
    }
}

/// Every subcommand once, all reading the fixture scene.
pub fn all_cases(fx: &Fixture) -> Vec<Case> {
    fs::create_dir_all(fx.dir.join("out")).unwrap();
    let (f0, f1, f2) = (fx.input("frame_000.ppm"), fx.input("frame_001.ppm"), fx.input("frame_002.ppm"));
    let flow0 = fx.input("flow_000.pgm");
    let flow1 = fx.input("flow_001.pgm");
    let gt = fx.input("gt_001.pgm");
    let fm = fx.input("flowmask_001.pgm");
    let manifest = fx.input("manifest.jsonl");
    let cfg = fx.config.display().to_string();
    let o = |n: &str| fx.output(n);
    let (aligned, aligned_frames) = (o("aligned"), o("aligned_frames"));
    let (bin, pre, pre_gt, post, applied) = (
        o("bin.pgm"),
        o("pre.pgm"),
        o("pre_gt.pgm"),
        o("post.pgm"),
        o("applied.ppm"),
    );
    let (metrics, scene, train, ablation, vta) = (
        o("metrics.jsonl"),
        o("scene"),
        o("train.jsonl"),
        o("ablate.jsonl"),
        o("vta.jsonl"),
    );
    vec![
        case("flow-align", &["flow-align", "--flow", &flow0, &flow1, "--out", &aligned], &[&aligned]),
        case(
            "flow-align --frames",
            &["flow-align", "--frames", &f0, &f1, &f2, "--out", &aligned_frames],
            &[&aligned_frames],
        ),
        case("binarize", &["binarize", "--flow", &flow1, "--tau", "0.05", "--out", &bin], &[&bin]),
        case("premask", &["premask", "--flow-mask", &fm, "--out", &pre], &[&pre]),
        case(
            "premask --gt",
            &["premask", "--flow-mask", &fm, "--gt", &gt, "--out", &pre_gt],
            &[&pre_gt],
        ),
        case("postmask", &["postmask", "--flow-mask", &fm, "--gt", &gt, "--out", &post], &[&post]),
        case("apply", &["apply", "--frame", &f1, "--mask", &fx.input("flowmask_001.pgm"), "--out", &applied], &[&applied]),
        case(
            "loss",
            &[
                "loss", "--pred", &flow1, "--target", &gt, "--flow-mask", &fm,
                "--class-logits", "0.5,-1.25", "--class-labels", "1,0",
            ],
            &[],
        ),
        case("metrics", &["metrics", "--manifest", &manifest, "--out", &metrics], &[&metrics]),
        case("gen-scene", &["gen-scene", "--seed", "9", "--out", &scene], &[&scene]),
        case("train", &["train", "--config", &cfg, "--seed", "4", "--out", &train], &[&train]),
        case(
            "ablate",
            &["ablate", "--config", &cfg, "--seeds", "2", "--variants", "baseline,full", "--out", &ablation],
            &[&ablation],
        ),
        case(
            "vta-demo",
            &["vta-demo", "--prompt1", "a red dog on grey floor", "--prompt2", "dog", "--image", &f0, "--out", &vta],
            &[&vta],
        ),
    ]
}

/// Stdout followed by every written file, in path order.
pub fn snapshot(case: &Case) -> Vec<(String, Vec<u8>)> {
    let mut snap = vec![("stdout".to_string(), ok(&case.args).into_bytes())];
    for p in &case.outputs {
        collect(p, &mut snap);
    }
    snap
}

fn collect(p: &Path, snap: &mut Vec<(String, Vec<u8>)>) {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for e in entries {
            collect(&e, snap);
        }
    } else {
        snap.push((p.display().to_string(), fs::read(p).unwrap()));
    }
}

pub fn remove_outputs(case: &Case) {
    for p in &case.outputs {
        if p.is_dir() {
            fs::remove_dir_all(p).unwrap();
        } else if p.exists() {
            fs::remove_file(p).unwrap();
        }
    }
}

/// Runs `case` twice from a clean slate; `None` when both runs match
/// byte for byte, else the first differing item.
pub fn rerun_difference(case: &Case) -> Option<String> {
    remove_outputs(case);
    let first = snapshot(case);
    remove_outputs(case);
    let second = snapshot(case);
    if first.len() != second.len() {
        return Some(format!("{} files vs {}", first.len(), second.len()));
    }
    first
        .iter()
        .zip(&second)
        .find(|(a, b)| a != b)
        .map(|(a, _)| a.0.clone())
}
