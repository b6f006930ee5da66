//! Batch evaluation from a JSON-lines manifest.
//!
//! Each non-blank line is an object with `frame`, `flow`, `gt` and `pred`
//! paths, relative to the manifest's directory unless absolute, plus
//! optional `class`, `prompt1` and `prompt2`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::{evaluate, Averaging, EvalReport};
use crate::pgm;

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub frame: PathBuf,
    pub flow: PathBuf,
    pub gt: PathBuf,
    pub pred: PathBuf,
    #[serde(default)]
    pub class: Option<u32>,
    #[serde(default)]
    pub prompt1: Option<String>,
    #[serde(default)]
    pub prompt2: Option<String>,
    /// 1-based manifest line.
    #[serde(skip)]
    pub line: usize,
}

fn at_line(line: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Manifest {
        line,
        source: Box::new(e),
    }
}

/// Parses manifest text, resolving paths against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(raw)
            .map_err(|err| Error::format("manifest record", err.to_string()))
            .map_err(at_line(line))?;
        e.line = line;
        for p in [&mut e.frame, &mut e.flow, &mut e.gt, &mut e.pred] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("manifest has no records".into()));
    }
    Ok(out)
}

/// Loads every referenced file and scores `pred` against `gt`. Frame and
/// flow files must parse and match the mask size. Per-class IoU is
/// reported when every record carries a class.
pub fn evaluate_manifest(path: &Path, beta2: f64, averaging: Averaging) -> Result<EvalReport> {
    let text = pgm::read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base)?;
    let mut preds = Vec::with_capacity(entries.len());
    let mut gts = Vec::with_capacity(entries.len());
    for e in &entries {
        let (p, g) = load_entry(e).map_err(at_line(e.line))?;
        preds.push(p);
        gts.push(g);
    }
    let classes: Option<Vec<u32>> = entries.iter().map(|e| e.class).collect();
    evaluate(&preds, &gts, classes.as_deref(), beta2, averaging)
}

fn load_entry(e: &ManifestEntry) -> Result<(BinaryMask, BinaryMask)> {
    let frame = pgm::read_image(&e.frame)?;
    let flow = pgm::read_gray(&e.flow)?;
    let gt = pgm::read_binary_mask(&e.gt)?;
    let pred = pgm::read_binary_mask(&e.pred)?;
    let dims = (gt.height(), gt.width());
    for (what, d) in [
        ("frame", (frame.height(), frame.width())),
        ("flow", (flow.height(), flow.width())),
        ("pred", (pred.height(), pred.width())),
    ] {
        if d != dims {
            return Err(Error::Shape(format!(
                "{what} is {}x{} but gt is {}x{}",
                d.0, d.1, dims.0, dims.1
            )));
        }
    }
    Ok((pred, gt))
}
