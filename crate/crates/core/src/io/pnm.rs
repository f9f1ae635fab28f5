//! Binary PPM (P6) / PGM (P5) reading and writing, maxval 255 only.

use std::path::Path;

use crate::error::Result;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PnmError {
    #[error("unsupported format magic `{0}` (expected P5 or P6)")]
    UnsupportedFormat(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("short sample data: expected {expected} bytes, got {actual}")]
    ShortData { expected: usize, actual: usize },
    #[error("expected {expected} channel(s), file has {actual}")]
    WrongChannels { expected: usize, actual: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmFormat {
    /// Binary graymap.
    P5,
    /// Binary pixmap.
    P6,
}

impl PnmFormat {
    pub fn channels(self) -> usize {
        match self {
            PnmFormat::P5 => 1,
            PnmFormat::P6 => 3,
        }
    }
}

/// Interleaved 8-bit image: 3 channels for images, 1 for masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if samples.len() != width * height * channels {
            return Err(PnmError::ShortData {
                expected: width * height * channels,
                actual: samples.len(),
            }
            .into());
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            samples: vec![value; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.samples[i..i + self.channels]
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
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

    fn token(&mut self) -> Option<&str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && !self.bytes[self.pos].is_ascii_whitespace()
            && self.bytes[self.pos] != b'#'
        {
            self.pos += 1;
        }
        (self.pos > start)
            .then(|| std::str::from_utf8(&self.bytes[start..self.pos]).ok())
            .flatten()
    }

    fn number(&mut self, what: &str) -> Result<u32, PnmError> {
        let tok = self
            .token()
            .ok_or_else(|| PnmError::MalformedHeader(format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| PnmError::MalformedHeader(format!("{what} `{tok}` is not a number")))
    }
}

/// Parses a P5/P6 file. The format must match `expected`.
pub fn read_image(bytes: &[u8], expected: PnmFormat) -> Result<ImageBuffer, PnmError> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let magic = cur
        .token()
        .ok_or_else(|| PnmError::MalformedHeader("empty file".into()))?
        .to_owned();
    let format = match magic.as_str() {
        "P5" => PnmFormat::P5,
        "P6" => PnmFormat::P6,
        _ => return Err(PnmError::UnsupportedFormat(magic)),
    };
    if format != expected {
        return Err(PnmError::WrongChannels {
            expected: expected.channels(),
            actual: format.channels(),
        });
    }
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PnmError::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(PnmError::MalformedHeader(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let channels = format.channels();
    let expected_len = width * height * channels;
    let data = &bytes[cur.pos..];
    if data.len() < expected_len {
        return Err(PnmError::ShortData {
            expected: expected_len,
            actual: data.len(),
        });
    }
    Ok(ImageBuffer {
        width,
        height,
        channels,
        samples: data[..expected_len].to_vec(),
    })
}

/// Reads either format, deciding by the magic number.
pub fn read_any(bytes: &[u8]) -> Result<ImageBuffer, PnmError> {
    match bytes.get(..2) {
        Some(b"P5") => read_image(bytes, PnmFormat::P5),
        Some(b"P6") => read_image(bytes, PnmFormat::P6),
        _ => Err(PnmError::UnsupportedFormat(
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        )),
    }
}

pub fn write_image(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.samples);
    out
}

/// Writes a single-channel mask as P5 with samples mapped to 0 / 255.
pub fn write_mask(mask: &ImageBuffer) -> Vec<u8> {
    let bin = ImageBuffer {
        samples: mask
            .samples
            .iter()
            .map(|&v| if v > 0 { 255 } else { 0 })
            .collect(),
        channels: 1,
        ..*mask
    };
    write_image(&bin)
}

pub fn read_file(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path)?;
    Ok(read_any(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let img = read_image(b"P6\n1 1\n255\n\xff\xff\xff", PnmFormat::P6).unwrap();
        assert_eq!((img.width, img.height, img.channels), (1, 1, 3));
        assert_eq!(img.samples, vec![255, 255, 255]);
    }

    #[test]
    fn mask_round_trip() {
        let mask = ImageBuffer::new(3, 2, 1, vec![0, 255, 255, 0, 0, 255]).unwrap();
        let back = read_image(&write_mask(&mask), PnmFormat::P5).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn comments_in_header() {
        let bytes = b"P6 # magic\n# a full comment line\n2 # width\n1\n# before maxval\n255\n\x01\x02\x03\x04\x05\x06";
        let img = read_image(bytes, PnmFormat::P6).unwrap();
        assert_eq!(img.samples, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn raster_may_start_with_whitespace_bytes() {
        // sample value 10 is '\n'; only the single separator byte is header
        let img = read_image(b"P5\n2 1\n255\n\n\x20", PnmFormat::P5).unwrap();
        assert_eq!(img.samples, vec![10, 32]);
    }

    #[test]
    fn distinct_errors() {
        assert_eq!(
            read_image(b"P5\n2 2\n65535\n", PnmFormat::P5),
            Err(PnmError::UnsupportedMaxval(65535))
        );
        assert!(matches!(
            read_image(b"P5\n2 x\n255\n", PnmFormat::P5),
            Err(PnmError::MalformedHeader(_))
        ));
        assert_eq!(
            read_image(b"P5\n2 2\n255\n\x00\x00", PnmFormat::P5),
            Err(PnmError::ShortData {
                expected: 4,
                actual: 2
            })
        );
        assert!(matches!(
            read_image(b"P3\n1 1\n255\n0 0 0", PnmFormat::P6),
            Err(PnmError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            read_image(b"P5\n1 1\n255\n\x00", PnmFormat::P6),
            Err(PnmError::WrongChannels { .. })
        ));
    }
}
