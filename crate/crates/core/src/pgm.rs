//! Plain-text Netpbm I/O (P2 graymap, P3 pixmap), maxval 255.
//!
//! Binary masks encode {0, 255}; tri-masks encode {0, 128, 255} with 128
//! decoding to exactly 0.5. Gray frames and flow magnitudes decode as
//! `value / 255`. Any value a typed decoder does not accept is a format
//! error.
//! <https://netpbm.sourceforge.net/doc/pgm.html>

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, GrayFrame, ImageFrame, TriMask};

pub const MAXVAL: u32 = 255;
pub const TRI_HALF: u32 = 128;

/// A decoded plain Netpbm raster, samples interleaved per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u32>,
}

pub fn parse(text: &str, context: &str) -> Result<RawImage> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let magic = tokens
        .next()
        .ok_or_else(|| Error::format(context, "empty file"))?;
    let channels = match magic {
        "P2" => 1,
        "P3" => 3,
        other => {
            return Err(Error::format(
                context,
                format!("unsupported magic {other:?}, expected P2 or P3"),
            ))
        }
    };
    let mut header = |what: &str| -> Result<usize> {
        let tok = tokens
            .next()
            .ok_or_else(|| Error::format(context, format!("missing {what}")))?;
        tok.parse::<usize>()
            .map_err(|_| Error::format(context, format!("bad {what} {tok:?}")))
    };
    let width = header("width")?;
    let height = header("height")?;
    let maxval = header("maxval")?;
    if maxval != MAXVAL as usize {
        return Err(Error::format(
            context,
            format!("maxval {maxval}, expected {MAXVAL}"),
        ));
    }
    let n = width * height * channels;
    let mut samples = Vec::with_capacity(n);
    for tok in tokens {
        let v: u32 = tok
            .parse()
            .map_err(|_| Error::format(context, format!("bad sample {tok:?}")))?;
        if v > MAXVAL {
            return Err(Error::format(context, format!("sample {v} exceeds maxval")));
        }
        samples.push(v);
    }
    if samples.len() != n {
        return Err(Error::format(
            context,
            format!("expected {n} samples, found {}", samples.len()),
        ));
    }
    Ok(RawImage {
        width,
        height,
        channels,
        samples,
    })
}

pub fn encode(img: &RawImage) -> String {
    let magic = if img.channels == 3 { "P3" } else { "P2" };
    let mut out = format!("{magic}\n{} {}\n{MAXVAL}\n", img.width, img.height);
    let row_len = img.width * img.channels;
    for row in img.samples.chunks(row_len.max(1)) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

fn gray_only(img: &RawImage, context: &str) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::format(context, "expected a P2 graymap"));
    }
    Ok(())
}

pub fn decode_binary_mask(text: &str, context: &str) -> Result<BinaryMask> {
    let img = parse(text, context)?;
    gray_only(&img, context)?;
    let data = img
        .samples
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::format(
                context,
                format!("binary mask sample {other}, expected 0 or 255"),
            )),
        })
        .collect::<Result<Vec<u8>>>()?;
    BinaryMask::new(img.height, img.width, data)
}

pub fn encode_binary_mask(m: &BinaryMask) -> String {
    encode(&RawImage {
        width: m.width(),
        height: m.height(),
        channels: 1,
        samples: m.data().iter().map(|&v| v as u32 * MAXVAL).collect(),
    })
}

pub fn decode_tri_mask(text: &str, context: &str) -> Result<TriMask> {
    let img = parse(text, context)?;
    gray_only(&img, context)?;
    let data = img
        .samples
        .iter()
        .map(|&v| match v {
            0 => Ok(0.0),
            TRI_HALF => Ok(0.5),
            255 => Ok(1.0),
            other => Err(Error::format(
                context,
                format!("tri-mask sample {other}, expected 0, 128 or 255"),
            )),
        })
        .collect::<Result<Vec<f64>>>()?;
    TriMask::new(img.height, img.width, data)
}

pub fn encode_tri_mask(m: &TriMask) -> String {
    encode(&RawImage {
        width: m.width(),
        height: m.height(),
        channels: 1,
        samples: m
            .data()
            .iter()
            .map(|&v| {
                if v == 1.0 {
                    MAXVAL
                } else if v == 0.5 {
                    TRI_HALF
                } else {
                    0
                }
            })
            .collect(),
    })
}

fn quantize(v: f64) -> u32 {
    (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u32
}

fn dequantize(v: u32) -> f64 {
    v as f64 / MAXVAL as f64
}

pub fn decode_gray(text: &str, context: &str) -> Result<GrayFrame> {
    let img = parse(text, context)?;
    gray_only(&img, context)?;
    GrayFrame::new(
        img.height,
        img.width,
        img.samples.iter().map(|&v| dequantize(v)).collect(),
    )
}

/// Quantizes to the nearest of 256 levels.
pub fn encode_gray(g: &GrayFrame) -> String {
    encode(&RawImage {
        width: g.width(),
        height: g.height(),
        channels: 1,
        samples: g.data().iter().map(|&v| quantize(v)).collect(),
    })
}

/// P2 decodes to one channel, P3 to three.
pub fn decode_image(text: &str, context: &str) -> Result<ImageFrame> {
    let img = parse(text, context)?;
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut data = vec![0.0; h * w * c];
    for p in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + p] = dequantize(img.samples[p * c + ch]);
        }
    }
    ImageFrame::new(h, w, c, data)
}

pub fn encode_image(f: &ImageFrame) -> String {
    let (h, w, c) = (f.height(), f.width(), f.channels());
    let mut samples = Vec::with_capacity(h * w * c);
    for p in 0..h * w {
        for ch in 0..c {
            samples.push(quantize(f.data()[ch * h * w + p]));
        }
    }
    encode(&RawImage {
        width: w,
        height: h,
        channels: c,
        samples,
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_binary_mask(path: &Path) -> Result<BinaryMask> {
    decode_binary_mask(&read_text(path)?, &path.display().to_string())
}

pub fn read_tri_mask(path: &Path) -> Result<TriMask> {
    decode_tri_mask(&read_text(path)?, &path.display().to_string())
}

pub fn read_gray(path: &Path) -> Result<GrayFrame> {
    decode_gray(&read_text(path)?, &path.display().to_string())
}

pub fn read_image(path: &Path) -> Result<ImageFrame> {
    decode_image(&read_text(path)?, &path.display().to_string())
}
