//! Pixel grids and exact mask algebra.
//!
//! All grids are row-major. [`ImageFrame`] stores channels as planes
//! (channel-major), matching the `C×H×W` layout of the feature tensors.

use crate::error::{Error, Result};

/// Foreground threshold for binarizing grayscale motion magnitude.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_len(height, width, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Value(format!("binary mask value {v}")));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        same_dims(self.dims(), other.dims())?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Grid over {0, 0.5, 1}: background, uncertain, agreed foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl TriMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height, width, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 0.5 && v != 1.0) {
            return Err(Error::Value(format!("tri-mask value {v}")));
        }
        Ok(TriMask {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The agreed-foreground (value 1) region.
    pub fn certain_region(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v == 1.0) as u8).collect(),
        }
    }

    pub fn uncertain_region(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v == 0.5) as u8).collect(),
        }
    }
}

impl From<&BinaryMask> for TriMask {
    fn from(m: &BinaryMask) -> Self {
        TriMask {
            height: m.height,
            width: m.width,
            data: m.to_f64(),
        }
    }
}

/// Single-channel intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayFrame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayFrame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height, width, data.len())?;
        check_unit_range(&data)?;
        Ok(GrayFrame {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// One or three channel image with intensities in [0, 1], channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageFrame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("image with {channels} channels")));
        }
        if height * width * channels != data.len() {
            return Err(Error::shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                channels,
                height,
                width,
                height * width * channels,
                data.len()
            )));
        }
        check_unit_range(&data)?;
        Ok(ImageFrame {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageFrame {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let v = v.clamp(0.0, 1.0);
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Per-pixel channel mean.
    pub fn luma(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(&self.data[c * hw..(c + 1) * hw]) {
                *o += v;
            }
        }
        let n = self.channels as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Per-pixel class ids; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        check_len(height, width, data.len())?;
        Ok(ClassMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Any non-background class becomes foreground.
    pub fn to_binary(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&c| (c != 0) as u8).collect(),
        }
    }

    pub fn class_mask(&self, class: u32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&c| (c == class) as u8).collect(),
        }
    }
}

// -------------------------------------------------------------------
// operations

/// Foreground wherever intensity strictly exceeds `tau`.
pub fn binarize(gray: &GrayFrame, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Value(format!("threshold {tau} outside [0, 1]")));
    }
    Ok(BinaryMask {
        height: gray.height,
        width: gray.width,
        data: gray.data.iter().map(|&v| (v > tau) as u8).collect(),
    })
}

/// 1 where flow and ground truth agree on foreground, 0.5 where exactly one
/// of them marks foreground, 0 elsewhere.
pub fn premask(m_o: &BinaryMask, m_gt: &BinaryMask) -> Result<TriMask> {
    same_dims(m_o.dims(), m_gt.dims())?;
    let data = m_o
        .data
        .iter()
        .zip(&m_gt.data)
        .map(|(&a, &b)| match (a, b) {
            (1, 1) => 1.0,
            (0, 0) => 0.0,
            _ => 0.5,
        })
        .collect();
    Ok(TriMask {
        height: m_o.height,
        width: m_o.width,
        data,
    })
}

/// Pre-mask used when ground truth is unavailable: every flow pixel is
/// uncertain (0.5), nothing is agreed foreground.
pub fn premask_without_gt(m_o: &BinaryMask) -> TriMask {
    TriMask {
        height: m_o.height,
        width: m_o.width,
        data: m_o.data.iter().map(|&a| 0.5 * a as f64).collect(),
    }
}

/// Pixelwise intersection of the flow mask and ground truth.
pub fn postmask_label(m_o: &BinaryMask, m_gt: &BinaryMask) -> Result<BinaryMask> {
    same_dims(m_o.dims(), m_gt.dims())?;
    Ok(BinaryMask {
        height: m_o.height,
        width: m_o.width,
        data: m_o.data.iter().zip(&m_gt.data).map(|(a, b)| a & b).collect(),
    })
}

/// Multiplies every channel by the tri-mask value at each pixel.
pub fn apply_premask(frame: &ImageFrame, m: &TriMask) -> Result<ImageFrame> {
    same_dims((frame.height, frame.width), (m.height, m.width))?;
    let hw = frame.height * frame.width;
    let data = frame
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| v * m.data[i % hw])
        .collect();
    Ok(ImageFrame {
        height: frame.height,
        width: frame.width,
        channels: frame.channels,
        data,
    })
}

/// Counts of (value 1, value 0.5, value 0) pixels.
pub fn mask_stats(m: &TriMask) -> (usize, usize, usize) {
    m.data.iter().fold((0, 0, 0), |(one, half, zero), &v| {
        if v == 1.0 {
            (one + 1, half, zero)
        } else if v == 0.5 {
            (one, half + 1, zero)
        } else {
            (one, half, zero + 1)
        }
    })
}

fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
    if height * width != len {
        return Err(Error::shape(format!(
            "{}x{} grid needs {} values, got {}",
            height,
            width,
            height * width,
            len
        )));
    }
    Ok(())
}

fn check_unit_range(data: &[f64]) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Value(format!("intensity {v} outside [0, 1]")));
    }
    Ok(())
}

pub(crate) fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}
