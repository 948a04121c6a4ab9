//! Binary PPM (`P6`) images.

use std::path::Path;

use crate::error::{format_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Interleaved RGB samples, one byte each (maxval ≤ 255) or two
    /// big-endian bytes each otherwise.
    pub data: Vec<u8>,
}

/// Largest accepted side, to bound allocations on hostile headers.
pub const MAX_SIDE: usize = 1 << 14;

fn skip_space_and_comments(buf: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(buf: &[u8], pos: &mut usize) -> Result<usize> {
    *pos = skip_space_and_comments(buf, *pos);
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
        if *pos - start > 6 {
            return Err(format_err("ppm", "header number too long"));
        }
    }
    if start == *pos {
        return Err(format_err("ppm", format!("expected a number at byte {start}")));
    }
    std::str::from_utf8(&buf[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| format_err("ppm", "bad header number"))
}

impl Ppm {
    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 2 || &buf[..2] != b"P6" {
            return Err(format_err("ppm", "missing P6 magic"));
        }
        let mut pos = 2;
        let width = header_number(buf, &mut pos)?;
        let height = header_number(buf, &mut pos)?;
        let maxval = header_number(buf, &mut pos)?;
        if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
            return Err(format_err("ppm", format!("unsupported size {width}×{height}")));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(format_err("ppm", format!("maxval {maxval} out of range")));
        }
        match buf.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(format_err("ppm", "header must end in one whitespace byte")),
        }
        let bytes = if maxval > 255 { 2 } else { 1 };
        let need = width * height * 3 * bytes;
        let data = buf
            .get(pos..pos + need)
            .ok_or_else(|| format_err("ppm", format!("expected {need} sample bytes, found {}", buf.len() - pos)))?;
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            data: data.to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Quantises an `H×W×3` tensor with values in `[0, 1]` to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        crate::error::expect_dim("image channels", 3, c)?;
        Ok(Self {
            width: w,
            height: h,
            maxval: 255,
            data: t.data().iter().map(|&v| quantize(v)).collect(),
        })
    }

    /// Samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let m = self.maxval as f64;
        let data = if self.maxval > 255 {
            self.data
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / m)
                .collect()
        } else {
            self.data.iter().map(|&b| b as f64 / m).collect()
        };
        Tensor::from_parts(&[self.height, self.width, 3], data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an image file straight into a model input tensor.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(Ppm::read(path)?.to_tensor())
}
