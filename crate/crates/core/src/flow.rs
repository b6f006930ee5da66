//! Motion fields: temporal alignment of T−1 inter-frame fields to T
//! per-frame fields, grayscale conversion, and a frame-difference
//! estimator.

use crate::error::{Error, Result};
use crate::mask::{GrayFrame, ImageFrame};

/// Scalar motion magnitude per pixel, normalized to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    magnitude: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, magnitude: Vec<f64>) -> Result<Self> {
        if height * width != magnitude.len() {
            return Err(Error::Shape(format!(
                "{}x{} flow needs {} values, got {}",
                height,
                width,
                height * width,
                magnitude.len()
            )));
        }
        if let Some(v) = magnitude.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Value(format!("flow magnitude {v} outside [0, 1]")));
        }
        Ok(FlowField {
            height,
            width,
            magnitude,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            magnitude: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }
}

impl From<GrayFrame> for FlowField {
    fn from(g: GrayFrame) -> Self {
        FlowField {
            height: g.height(),
            width: g.width(),
            magnitude: g.data().to_vec(),
        }
    }
}

/// Non-empty ordered fields of uniform dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSequence {
    frames: Vec<FlowField>,
}

impl FlowSequence {
    pub fn new(frames: Vec<FlowField>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::EmptyInput("flow sequence has no frames".into()))?;
        let dims = (first.height, first.width);
        if let Some(bad) = frames.iter().find(|f| (f.height, f.width) != dims) {
            return Err(Error::Shape(format!(
                "flow frame {}x{} in a {}x{} sequence",
                bad.height, bad.width, dims.0, dims.1
            )));
        }
        Ok(FlowSequence { frames })
    }

    pub fn frames(&self) -> &[FlowField] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn into_frames(self) -> Vec<FlowField> {
        self.frames
    }
}

/// Stretches T−1 inter-frame fields into T per-frame fields: the first and
/// last inputs become the endpoints, and each interior frame is the
/// pixelwise mean of the two fields around it.
///
/// ```text
/// [F1, F2, …, F(T−1)]  →  [F1, (F1+F2)/2, …, (F(T−2)+F(T−1))/2, F(T−1)]
/// ```
pub fn temporal_align(flows: &FlowSequence) -> FlowSequence {
    let f = &flows.frames;
    let mut out = Vec::with_capacity(f.len() + 1);
    out.push(f[0].clone());
    for pair in f.windows(2) {
        let magnitude = pair[0]
            .magnitude
            .iter()
            .zip(&pair[1].magnitude)
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        out.push(FlowField {
            height: pair[0].height,
            width: pair[0].width,
            magnitude,
        });
    }
    out.push(f[f.len() - 1].clone());
    FlowSequence { frames: out }
}

/// Checked variant for callers holding a possibly empty list.
pub fn temporal_align_frames(flows: Vec<FlowField>) -> Result<FlowSequence> {
    Ok(temporal_align(&FlowSequence::new(flows)?))
}

pub fn flow_to_gray(flow: &FlowField) -> GrayFrame {
    GrayFrame::new(flow.height, flow.width, flow.magnitude.clone())
        .expect("flow magnitudes are validated to [0, 1]")
}

/// Absolute luma difference between consecutive frames.
pub fn frame_diff_flow(frames: &[ImageFrame]) -> Result<FlowSequence> {
    if frames.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: frames.len(),
        });
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    if let Some(bad) = frames.iter().find(|f| (f.height(), f.width()) != (h, w)) {
        return Err(Error::Shape(format!(
            "frame {}x{} in a {}x{} sequence",
            bad.height(),
            bad.width(),
            h,
            w
        )));
    }
    let lumas: Vec<Vec<f64>> = frames.iter().map(ImageFrame::luma).collect();
    let fields = lumas
        .windows(2)
        .map(|p| FlowField {
            height: h,
            width: w,
            magnitude: p[0]
                .iter()
                .zip(&p[1])
                .map(|(a, b)| (b - a).abs().min(1.0))
                .collect(),
        })
        .collect();
    FlowSequence::new(fields)
}
