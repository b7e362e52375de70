//! Portable float map files.
//!
//! Layout: magic line (`Pf` grayscale, `PF` RGB), `W H` line, scale line
//! (negative = little-endian), then 4-byte floats with rows stored bottom to
//! top. In memory rows run top to bottom and channels are interleaved.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    /// 1 or 3.
    pub channels: usize,
    pub data: Vec<f32>,
}

fn perr<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Pfm {
        offset,
        message: message.into(),
    })
}

impl PfmImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "PFM supports 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "PFM payload of {} floats does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn header(&self) -> String {
        let magic = if self.channels == 3 { "PF" } else { "Pf" };
        format!("{magic}\n{} {}\n-1.0\n", self.width, self.height)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "PFM value {i} is not finite"
            )));
        }
        let row = self.width * self.channels;
        let mut out = self.header().into_bytes();
        out.reserve(self.data.len() * 4);
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"Pf") => 1,
            Some(b"PF") => 3,
            _ => return perr(0, "bad magic, expected `Pf` or `PF`"),
        };
        let mut pos = 2;
        let mut token = |what: &str| -> Result<(String, usize)> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return perr(start, format!("missing {what}"));
            }
            let text = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
            Ok((text, start))
        };
        let (w, w_at) = token("width")?;
        let (h, h_at) = token("height")?;
        let (scale, s_at) = token("scale")?;
        let width: usize = w
            .parse()
            .or_else(|_| perr(w_at, format!("invalid width `{w}`")))?;
        let height: usize = h
            .parse()
            .or_else(|_| perr(h_at, format!("invalid height `{h}`")))?;
        let scale: f64 = scale
            .parse()
            .or_else(|_| perr(s_at, format!("invalid scale `{scale}`")))?;
        if width == 0 || height == 0 {
            return perr(w_at, "zero image extent");
        }
        if scale == 0.0 || !scale.is_finite() {
            return perr(s_at, "scale must be finite and non-zero");
        }
        // Exactly one whitespace byte separates the header from the payload.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return perr(pos, "missing newline after scale");
        }
        pos += 1;
        let row = width * channels;
        let need = width * height * channels * 4;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return perr(
                bytes.len(),
                format!("truncated payload: {} of {need} bytes", payload.len()),
            );
        }
        if payload.len() > need {
            return perr(pos + need, "trailing bytes after payload");
        }
        let little = scale < 0.0;
        let mut data = vec![0.0f32; width * height * channels];
        for (k, chunk) in payload.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            let file_row = k / row;
            data[(height - 1 - file_row) * row + k % row] = v;
        }
        Self::new(width, height, channels, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// `[H, W]` map from a grayscale image.
    pub fn from_map(map: &Tensor) -> Result<Self> {
        let [h, w] = *map.shape() else {
            return Err(Error::Shape(format!("expected [H, W], got {:?}", map.shape())));
        };
        Self::new(w, h, 1, map.values().iter().map(|&v| v as f32).collect())
    }

    /// `[3, H, W]` planar image from an RGB file.
    pub fn from_image(image: &Tensor) -> Result<Self> {
        let [3, h, w] = *image.shape() else {
            return Err(Error::Shape(format!("expected [3, H, W], got {:?}", image.shape())));
        };
        let v = image.values();
        let plane = h * w;
        let data = (0..plane)
            .flat_map(|p| (0..3).map(move |c| v[c * plane + p] as f32))
            .collect();
        Self::new(w, h, 3, data)
    }

    pub fn to_map(&self) -> Result<Tensor> {
        if self.channels != 1 {
            return Err(Error::Shape("expected a grayscale PFM".into()));
        }
        Tensor::new(
            vec![self.height, self.width],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn to_image(&self) -> Result<Tensor> {
        if self.channels != 3 {
            return Err(Error::Shape("expected an RGB PFM".into()));
        }
        let plane = self.width * self.height;
        let mut v = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                v[c * plane + p] = f64::from(self.data[p * 3 + c]);
            }
        }
        Tensor::new(vec![3, self.height, self.width], v)
    }
}
