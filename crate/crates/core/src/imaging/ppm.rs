//! Binary P6 portable pixmap codec, maxval 255 only.

use super::{ImagingError, RgbImage};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PpmError {
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u64),
    #[error("truncated data: expected {expected} pixel bytes, found {got}")]
    TruncatedData { expected: usize, got: usize },
    #[error(transparent)]
    Image(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &'static str) -> Result<u64, PpmError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        let mut value: u64 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(u64::from(b - b'0')))
                .ok_or(PpmError::MalformedHeader("header number overflows"))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(PpmError::MalformedHeader(what));
        }
        Ok(value)
    }
}

/// Decodes a P6 file held in memory. Bytes after the pixel payload are ignored.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::MalformedHeader("missing P6 magic"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    match cur.bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() || *b == b'#' => {}
        _ => return Err(PpmError::MalformedHeader("missing P6 magic")),
    }
    let width = cur.number("expected width")?;
    let height = cur.number("expected height")?;
    let maxval = cur.number("expected maxval")?;
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    match cur.bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(PpmError::MalformedHeader(
                "expected single whitespace after maxval",
            ))
        }
    }
    if width == 0 || height == 0 {
        return Err(PpmError::MalformedHeader("zero dimension"));
    }
    let expected = usize::try_from(width)
        .ok()
        .zip(usize::try_from(height).ok())
        .and_then(|(w, h)| w.checked_mul(h))
        .and_then(|n| n.checked_mul(3))
        .ok_or(PpmError::MalformedHeader("dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(PpmError::TruncatedData {
            expected,
            got: payload.len(),
        });
    }
    Ok(RgbImage::new(
        width as usize,
        height as usize,
        payload[..expected].to_vec(),
    )?)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.data());
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<RgbImage, PpmError> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn save_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<(), PpmError> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}
