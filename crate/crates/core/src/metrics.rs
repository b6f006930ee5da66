//! Foreground Jaccard (mIoU), semantic per-class IoU, and the β-weighted
//! F-score.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{same_dims, BinaryMask, ClassMap};

/// β² for the F-score unless overridden.
pub const DEFAULT_BETA2: f64 = 0.3;

/// Pixel confusion counts for a foreground/background split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        same_dims((pred.height(), pred.width()), (gt.height(), gt.width()))?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    /// |P∩G| / |P∪G|, or 1 when both are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Neither prediction nor ground truth has foreground.
    pub fn is_degenerate(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(1+β²)·P·R / (β²·P + R)`, 0 when the denominator is 0.
pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

fn check_pairs<A, B>(preds: &[A], gts: &[B]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

fn confusions(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Vec<Confusion>> {
    check_pairs(preds, gts)?;
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| Confusion::of(p, g))
        .collect()
}

/// Per-frame foreground Jaccard averaged over frames.
pub fn miou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    let cs = confusions(preds, gts)?;
    if cs.is_empty() {
        return Err(Error::EmptyInput("miou over zero frames".into()));
    }
    Ok(cs.iter().map(Confusion::iou).sum::<f64>() / cs.len() as f64)
}

/// Per-class IoU pooled over all frames, averaged over the classes that
/// occur in the ground truth. Background (class 0) counts as a class.
pub fn miou_semantic(preds: &[ClassMap], gts: &[ClassMap], classes: u32) -> Result<f64> {
    let per_class = semantic_class_iou(preds, gts, classes)?;
    Ok(per_class.iter().map(|&(_, v)| v).sum::<f64>() / per_class.len() as f64)
}

/// `(class, IoU)` for every class present in the ground truth, ascending.
pub fn semantic_class_iou(
    preds: &[ClassMap],
    gts: &[ClassMap],
    classes: u32,
) -> Result<Vec<(u32, f64)>> {
    check_pairs(preds, gts)?;
    let k = classes as usize;
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    let mut present = vec![false; k];
    for (p, g) in preds.iter().zip(gts) {
        same_dims((p.height(), p.width()), (g.height(), g.width()))?;
        for (&pc, &gc) in p.data().iter().zip(g.data()) {
            if pc >= classes || gc >= classes {
                return Err(Error::Value(format!(
                    "class id {} >= {classes}",
                    pc.max(gc)
                )));
            }
            present[gc as usize] = true;
            if pc == gc {
                inter[pc as usize] += 1;
                union[pc as usize] += 1;
            } else {
                union[pc as usize] += 1;
                union[gc as usize] += 1;
            }
        }
    }
    let out: Vec<(u32, f64)> = (0..k)
        .filter(|&c| present[c])
        .map(|c| (c as u32, inter[c] as f64 / union[c] as f64))
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyInput("no ground-truth pixels".into()));
    }
    Ok(out)
}

/// Micro-averaged F-score: precision and recall over pixels pooled across
/// all frames.
pub fn fscore(preds: &[BinaryMask], gts: &[BinaryMask], beta2: f64) -> Result<f64> {
    check_beta2(beta2)?;
    let total = confusions(preds, gts)?
        .into_iter()
        .fold(Confusion::default(), Confusion::merge);
    Ok(f_measure(total.precision(), total.recall(), beta2))
}

/// Macro-averaged F-score: mean of per-frame F values.
pub fn fscore_macro(preds: &[BinaryMask], gts: &[BinaryMask], beta2: f64) -> Result<f64> {
    check_beta2(beta2)?;
    let cs = confusions(preds, gts)?;
    if cs.is_empty() {
        return Err(Error::EmptyInput("fscore over zero frames".into()));
    }
    Ok(cs
        .iter()
        .map(|c| f_measure(c.precision(), c.recall(), beta2))
        .sum::<f64>()
        / cs.len() as f64)
}

fn check_beta2(beta2: f64) -> Result<()> {
    if !(beta2 >= 0.0) || !beta2.is_finite() {
        return Err(Error::Value(format!("beta2 must be >= 0, got {beta2}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Micro,
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub frames: usize,
    pub per_frame_iou: Vec<f64>,
    /// Filled only when class ids are known.
    pub per_class_iou: Option<Vec<(u32, f64)>>,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub beta2: f64,
    pub averaging: Averaging,
    pub counts: Confusion,
    /// Frames with no foreground in either mask.
    pub degenerate_frames: Vec<usize>,
}

/// Full report over aligned prediction/ground-truth pairs.
pub fn evaluate(
    preds: &[BinaryMask],
    gts: &[BinaryMask],
    classes: Option<&[u32]>,
    beta2: f64,
    averaging: Averaging,
) -> Result<EvalReport> {
    check_beta2(beta2)?;
    let cs = confusions(preds, gts)?;
    if cs.is_empty() {
        return Err(Error::EmptyInput("nothing to evaluate".into()));
    }
    let per_frame_iou: Vec<f64> = cs.iter().map(Confusion::iou).collect();
    let miou = per_frame_iou.iter().sum::<f64>() / cs.len() as f64;
    let counts = cs.iter().copied().fold(Confusion::default(), Confusion::merge);
    let (precision, recall, f_score) = match averaging {
        Averaging::Micro => (
            counts.precision(),
            counts.recall(),
            f_measure(counts.precision(), counts.recall(), beta2),
        ),
        Averaging::Macro => {
            let n = cs.len() as f64;
            (
                cs.iter().map(Confusion::precision).sum::<f64>() / n,
                cs.iter().map(Confusion::recall).sum::<f64>() / n,
                cs.iter()
                    .map(|c| f_measure(c.precision(), c.recall(), beta2))
                    .sum::<f64>()
                    / n,
            )
        }
    };
    let per_class_iou = match classes {
        Some(ids) => {
            check_pairs(ids, preds)?;
            let k = ids.iter().copied().max().unwrap_or(0) + 1;
            let to_map = |m: &BinaryMask, c: u32| {
                ClassMap::new(
                    m.height(),
                    m.width(),
                    m.data().iter().map(|&v| v as u32 * c).collect(),
                )
            };
            let pm = preds
                .iter()
                .zip(ids)
                .map(|(m, &c)| to_map(m, c))
                .collect::<Result<Vec<_>>>()?;
            let gm = gts
                .iter()
                .zip(ids)
                .map(|(m, &c)| to_map(m, c))
                .collect::<Result<Vec<_>>>()?;
            Some(semantic_class_iou(&pm, &gm, k)?)
        }
        None => None,
    };
    let degenerate_frames = cs
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_degenerate())
        .map(|(i, _)| i)
        .collect();
    Ok(EvalReport {
        frames: cs.len(),
        per_frame_iou,
        per_class_iou,
        miou,
        precision,
        recall,
        f_score,
        beta2,
        averaging,
        counts,
        degenerate_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bm(v: &[u8]) -> BinaryMask {
        BinaryMask::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let m = vec![bm(&[1, 0, 1]), bm(&[0, 0, 1])];
        assert_eq!(miou(&m, &m).unwrap(), 1.0);
        assert_eq!(fscore(&m, &m, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn worked_iou() {
        let v = miou(&[bm(&[1, 1, 0, 0])], &[bm(&[0, 1, 1, 0])]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_pair_convention() {
        assert_eq!(miou(&[bm(&[0, 0])], &[bm(&[0, 0])]).unwrap(), 1.0);
        assert_eq!(fscore(&[bm(&[0, 0])], &[bm(&[0, 0])], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn worked_f_value() {
        let f = f_measure(0.5, 1.0, 0.3);
        assert!((f - 0.65 / 1.15).abs() < 1e-15);
        assert_eq!(format!("{f:.6}"), "0.565217");
        // P = 1/2, R = 1 from masks
        let f2 = fscore(&[bm(&[1, 1, 0])], &[bm(&[1, 0, 0])], 0.3).unwrap();
        assert!((f2 - f).abs() < 1e-15);
        for b in [0.0, 0.3, 1.0, 4.0] {
            assert_eq!(f_measure(1.0, 1.0, b), 1.0);
        }
    }

    #[test]
    fn mismatches_are_errors() {
        assert!(matches!(miou(&[bm(&[1])], &[]), Err(Error::Shape(_))));
        assert!(miou(&[bm(&[1, 0])], &[bm(&[1])]).is_err());
        assert!(fscore(&[bm(&[1])], &[bm(&[1])], -1.0).is_err());
    }

    fn cm(v: &[u32]) -> ClassMap {
        ClassMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn semantic_cases() {
        let g = vec![cm(&[0, 1, 2, 2])];
        assert_eq!(miou_semantic(&g, &g, 3).unwrap(), 1.0);
        let gts = vec![cm(&[1, 1]), cm(&[2, 2])];
        let preds = vec![cm(&[1, 1]), cm(&[0, 0])];
        assert_eq!(miou_semantic(&preds, &gts, 3).unwrap(), 0.5);
        assert!(matches!(
            miou_semantic(&[cm(&[5])], &[cm(&[0])], 3),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn macro_differs_from_micro() {
        let preds = vec![bm(&[1, 1, 1, 1]), bm(&[1, 0])];
        let gts = vec![bm(&[1, 0, 0, 0]), bm(&[1, 0])];
        let micro = fscore(&preds, &gts, 1.0).unwrap();
        let mac = fscore_macro(&preds, &gts, 1.0).unwrap();
        assert!((micro - 2.0 * 0.4 / 1.4).abs() < 1e-15);
        assert!((mac - (0.4 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn report_flags_degenerate_frames() {
        let preds = vec![bm(&[0, 0]), bm(&[1, 0])];
        let gts = vec![bm(&[0, 0]), bm(&[1, 1])];
        let r = evaluate(&preds, &gts, None, 0.3, Averaging::Micro).unwrap();
        assert_eq!(r.degenerate_frames, vec![0]);
        assert_eq!(r.counts.tp, 1);
        assert_eq!(r.counts.fn_, 1);
        assert_eq!(r.per_frame_iou, vec![1.0, 0.5]);
        assert!(matches!(
            evaluate(&[], &[], None, 0.3, Averaging::Micro),
            Err(Error::EmptyInput(_))
        ));
    }

    fn pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..30).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..2, n),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn jaccard_symmetric((a, b) in pair()) {
            prop_assert_eq!(miou(&[bm(&a)], &[bm(&b)]).unwrap(), miou(&[bm(&b)], &[bm(&a)]).unwrap());
        }

        #[test]
        fn perfect_frame_never_lowers_miou((a, b) in pair(), (c, _d) in pair()) {
            let before = miou(&[bm(&a)], &[bm(&b)]).unwrap();
            let after = miou(&[bm(&a), bm(&c)], &[bm(&b), bm(&c)]).unwrap();
            prop_assert!(after >= before);
        }

        #[test]
        fn beta_one_is_harmonic_mean((a, b) in pair()) {
            let c = Confusion::of(&bm(&a), &bm(&b)).unwrap();
            let (p, r) = (c.precision(), c.recall());
            let f = fscore(&[bm(&a)], &[bm(&b)], 1.0).unwrap();
            let h = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            prop_assert!((f - h).abs() < 1e-12);
        }

        #[test]
        fn metrics_in_unit_interval((a, b) in pair(), beta2 in 0.0f64..5.0) {
            let r = evaluate(&[bm(&a)], &[bm(&b)], None, beta2, Averaging::Micro).unwrap();
            for v in [r.miou, r.precision, r.recall, r.f_score] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
