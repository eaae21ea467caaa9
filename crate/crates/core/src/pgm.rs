//! Binary (P5) portable graymap images with 8-bit samples.

use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("not a binary PGM file")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    BadHeader(String),
    #[error("expected {expected} pixel bytes, found {found}")]
    BadLength { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, PgmError> {
        if pixels.len() != width * height {
            return Err(PgmError::BadLength {
                expected: width * height,
                found: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(&self.encode())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PgmError> {
        if !bytes.starts_with(b"P5") {
            return Err(PgmError::BadMagic);
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            // whitespace and `#` comments may separate header fields
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PgmError::BadHeader(format!("expected a number at byte {start}")))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(PgmError::BadHeader("missing separator before pixel data".into()));
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(PgmError::BadHeader(format!("unsupported maxval {maxval}")));
        }
        Self::new(width, height, bytes[pos + 1..].to_vec())
    }
}

/// Tiles equally sized images row-major into a grid `per_row` wide,
/// separated by one black pixel.
///
/// # Panics
/// If the images differ in size or `per_row` is zero.
pub fn tile(images: &[GrayImage], per_row: usize) -> GrayImage {
    assert!(per_row > 0, "per_row must be positive");
    let Some(first) = images.first() else {
        return GrayImage {
            width: 0,
            height: 0,
            pixels: Vec::new(),
        };
    };
    let (w, h) = (first.width, first.height);
    assert!(
        images.iter().all(|i| i.width == w && i.height == h),
        "images differ in size"
    );
    let cols = per_row.min(images.len());
    let rows = images.len().div_ceil(cols);
    let width = cols * (w + 1) - 1;
    let height = rows * (h + 1) - 1;
    let mut pixels = vec![0u8; width * height];
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for y in 0..h {
            let dst = (oy + y) * width + ox;
            pixels[dst..dst + w].copy_from_slice(&img.pixels[y * w..(y + 1) * w]);
        }
    }
    GrayImage {
        width,
        height,
        pixels,
    }
}
