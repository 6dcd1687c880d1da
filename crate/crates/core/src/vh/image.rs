use std::io::{BufRead, Write};
use std::path::Path;

use crate::{Error, Result};

/// Row-major grayscale intensities, nominally in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension {
                expected: width * height,
                got: pixels.len(),
            });
        }
        if let Some(p) = pixels.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite pixel {p}")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub(crate) fn require_min(&self, min: usize) -> Result<()> {
        if self.width < min || self.height < min {
            return Err(Error::ImageTooSmall {
                width: self.width,
                height: self.height,
                min,
            });
        }
        Ok(())
    }

    /// Binary `P5` graymap with maxval 255. Pixels are rounded and clamped to 0..=255.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|p| p.round().clamp(0.0, 255.0) as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Reads a binary `P5` graymap with maxval ≤ 255. Sample values are kept
    /// as-is (no rescaling by maxval).
    pub fn read_pgm<R: BufRead>(mut r: R) -> Result<Self> {
        let magic = header_token(&mut r)?;
        if magic != "P5" {
            return Err(Error::Format(format!("expected P5 graymap, found {magic:?}")));
        }
        let width = header_number(&mut r, "width")?;
        let height = header_number(&mut r, "height")?;
        let maxval = header_number(&mut r, "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        let mut buf = vec![0u8; width * height];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated pixel data: {e}")))?;
        Self::new(width, height, buf.into_iter().map(f64::from).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_pgm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_pgm(std::io::BufReader::new(f))
    }
}

fn read_byte<R: BufRead>(r: &mut R) -> Result<Option<u8>> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(None),
        _ => Ok(Some(b[0])),
    }
}

/// Next whitespace-delimited header token; `#` comments run to end of line.
/// Consumes exactly one whitespace byte after the token.
fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    while let Some(b) = read_byte(r)? {
        if b == b'#' && tok.is_empty() {
            while let Some(c) = read_byte(r)? {
                if c == b'\n' {
                    break;
                }
            }
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ascii header".into()))
}

fn header_number<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let tok = header_token(r)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("bad {what} {tok:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact() {
        let img = GrayImage::from_fn(5, 3, |x, y| ((x * 37 + y * 91) % 256) as f64).unwrap();
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n5 3\n255\n"));
        let back = GrayImage::read_pgm(&buf[..]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_header_comments() {
        let mut data = b"P5\n# made by hand\n2 1\n# another\n255\n".to_vec();
        data.extend([7u8, 200]);
        let img = GrayImage::read_pgm(&data[..]).unwrap();
        assert_eq!(img.pixels(), &[7.0, 200.0]);
    }

    #[test]
    fn pgm_errors() {
        assert!(GrayImage::read_pgm(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(GrayImage::read_pgm(&b"P5\n2 2\n255\n\x01"[..]).is_err());
        assert!(GrayImage::read_pgm(&b"P5\n1 1\n65535\n\x00\x00"[..]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
    }
}
