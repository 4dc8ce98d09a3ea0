//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::raster::{Mask, RgbImage};

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height);
    out.extend_from_slice(&img.data);
    out
}

/// Masks are stored as 0 / 255.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = header("P5", mask.width, mask.height);
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

struct Parser<'b> {
    bytes: &'b [u8],
    pos: usize,
    file: &'b str,
}

impl Parser<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        format_err(self.file, self.pos as u64, msg)
    }

    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(self.file, start as u64, format!("{what} out of range")))
    }

    /// Magic, width, height, maxval and the single whitespace byte before
    /// the raster.
    fn header(&mut self, magic: &[u8; 2]) -> Result<(usize, usize)> {
        if self.bytes.get(..2) != Some(&magic[..]) {
            return Err(self.err(format!("expected magic {}", String::from_utf8_lossy(magic))));
        }
        self.pos = 2;
        let w = self.number("width")?;
        let h = self.number("height")?;
        let maxval = self.number("maxval")?;
        if maxval != 255 {
            return Err(self.err(format!("unsupported maxval {maxval}")));
        }
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => self.pos += 1,
            _ => return Err(self.err("expected whitespace after maxval")),
        }
        Ok((w, h))
    }

    fn raster(&mut self, n: usize) -> Result<&[u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(self.err(format!("truncated raster: need {n} bytes, {rest} left")));
        }
        if rest > n {
            return Err(format_err(self.file, (self.pos + n) as u64, format!("{} trailing bytes", rest - n)));
        }
        Ok(&self.bytes[self.pos..])
    }
}

pub fn decode_ppm(bytes: &[u8], file: &str) -> Result<RgbImage> {
    let mut p = Parser { bytes, pos: 0, file };
    let (width, height) = p.header(b"P6")?;
    let data = p.raster(width * height * 3)?.to_vec();
    Ok(RgbImage { width, height, data })
}

/// Accepts only 0 and 255 pixels.
pub fn decode_pgm(bytes: &[u8], file: &str) -> Result<Mask> {
    let mut p = Parser { bytes, pos: 0, file };
    let (width, height) = p.header(b"P5")?;
    let start = p.pos;
    let raw = p.raster(width * height)?;
    let mut data = Vec::with_capacity(raw.len());
    for (i, &v) in raw.iter().enumerate() {
        match v {
            0 => data.push(false),
            255 => data.push(true),
            _ => return Err(format_err(file, (start + i) as u64, format!("mask pixel value {v} is not 0 or 255"))),
        }
    }
    Ok(Mask { width, height, data })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path)?, &path.display().to_string())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    decode_pgm(&std::fs::read(path)?, &path.display().to_string())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    std::fs::write(path, encode_pgm(mask))?;
    Ok(())
}
