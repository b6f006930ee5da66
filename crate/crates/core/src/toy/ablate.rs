//! Trains toggle variants over several seeds and reports medians.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::toy::train::{train, Toggles, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub toggles: Toggles,
}

impl Variant {
    pub fn new(name: &str, premask: bool, postmask: bool, prompts: bool, vta: bool) -> Self {
        Variant {
            name: name.to_string(),
            toggles: Toggles {
                premask,
                postmask,
                prompts,
                vta,
            },
        }
    }

    /// The standard module ladder, plus the full model without pre-masking.
    pub fn standard() -> Vec<Variant> {
        vec![
            Variant::new("premask", true, false, false, false),
            Variant::new("premask+postmask", true, true, false, false),
            Variant::new("prompts", false, false, true, false),
            Variant::new("prompts+vta", false, false, true, true),
            Variant::new("no-postmask", true, false, true, true),
            Variant::new("no-premask", false, true, true, true),
            Variant::new("full", true, true, true, true),
        ]
    }

    pub fn by_name(name: &str) -> Option<Variant> {
        if name == "baseline" {
            return Some(Variant::new("baseline", false, false, false, false));
        }
        Variant::standard().into_iter().find(|v| v.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub seeds: Vec<u64>,
    pub miou: Vec<f64>,
    pub f_score: Vec<f64>,
    pub median_miou: f64,
    pub median_f_score: f64,
    pub gt_inference_reads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// The first row is `base` as configured (named `base`); each variant
/// overrides only the toggles. Cells run in parallel; results are
/// gathered in input order.
pub fn ablate(base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut all = vec![Variant {
        name: "base".into(),
        toggles: base.toggles,
    }];
    all.extend(variants.iter().cloned());
    let cells: Vec<(usize, u64)> = (0..all.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<(f64, f64, usize)>> = cells
        .par_iter()
        .map(|&(v, s)| {
            let cfg = TrainConfig {
                seed: s,
                toggles: all[v].toggles,
                ..base.clone()
            };
            let r = train(&cfg)?;
            Ok((r.eval.miou, r.eval.f_score, r.eval.gt_inference_reads))
        })
        .collect();
    let mut rows = Vec::with_capacity(all.len());
    let mut it = results.into_iter();
    for v in all {
        let mut miou = Vec::with_capacity(seeds.len());
        let mut f = Vec::with_capacity(seeds.len());
        let mut reads = 0;
        for _ in seeds {
            let (m, fs, r) = it.next().expect("one result per cell")?;
            miou.push(m);
            f.push(fs);
            reads += r;
        }
        rows.push(AblationRow {
            name: v.name,
            toggles: v.toggles,
            seeds: seeds.to_vec(),
            median_miou: median(&miou),
            median_f_score: median(&f),
            miou,
            f_score: f,
            gt_inference_reads: reads,
        });
    }
    Ok(AblationReport { rows })
}
