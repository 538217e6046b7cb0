//! Binary portable graymap (P5) and pixmap (P6) files, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 (P5) or 3 (P6).
    pub channels: usize,
    /// Interleaved 8-bit samples, row-major.
    pub pixels: Vec<u8>,
}

impl Pnm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PNM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::Format(format!("unsupported PNM magic '{other}'"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field '{s}'")));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format("only maxval 255 is supported".into()));
        }
        let n = width * height * channels;
        if bytes.len() < pos + n {
            return Err(Error::Format("truncated PNM pixel data".into()));
        }
        Ok(Self { width, height, channels, pixels: bytes[pos..pos + n].to_vec() })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    /// `C x H x W` tensor with values `k / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0; self.channels * hw];
        for p in 0..hw {
            for c in 0..self.channels {
                data[c * hw + p] = f64::from(self.pixels[p * self.channels + c]) / 255.0;
            }
        }
        Tensor::from_parts(vec![self.channels, self.height, self.width], data)
    }

    /// Quantises a `C x H x W` tensor in `[0, 1]` (C = 1 or 3) to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 && c != 3 {
            return Err(invalid(format!("PNM needs 1 or 3 channels, got {c}")));
        }
        let hw = h * w;
        let mut pixels = vec![0u8; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                pixels[p * c + ch] = (t.data()[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(Self { width: w, height: h, channels: c, pixels })
    }
}
