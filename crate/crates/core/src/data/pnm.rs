//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!(
                "images have 1 or 3 channels, not {channels}"
            )));
        }
        if width == 0 || height == 0 || pixels.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{width}x{height}x{channels} image with {} bytes",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Planar `[C, H, W]` values scaled to `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; self.channels * hw];
        for (i, &p) in self.pixels.iter().enumerate() {
            let (pix, c) = (i / self.channels, i % self.channels);
            out[c * hw + pix] = f64::from(p) / 255.0;
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut p = Parser { bytes, pos: 0 };
        let channels = match p.token()? {
            b"P5" => 1,
            b"P6" => 3,
            _ => return Err(p.error(0, "expected P5 or P6 magic")),
        };
        let width = p.number()?;
        let height = p.number()?;
        let maxval_at = p.pos;
        let maxval = p.number()?;
        if maxval != 255 {
            return Err(p.error(maxval_at, "only 8-bit images (maxval 255) are supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
            return Err(p.error(p.pos, "missing whitespace after header"));
        }
        let start = p.pos + 1;
        let need = width * height * channels;
        if width == 0 || height == 0 {
            return Err(p.error(start, "image dimensions must be positive"));
        }
        if bytes.len() - start < need {
            return Err(p.error(
                bytes.len(),
                &format!("raster truncated: {} of {need} bytes", bytes.len() - start),
            ));
        }
        Image::new(width, height, channels, bytes[start..start + need].to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, offset: usize, message: &str) -> Error {
        Error::Parse {
            offset,
            message: message.to_string(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(start, "unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        let at = self.pos - tok.len();
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.error(at, "expected a decimal number"))
    }
}
