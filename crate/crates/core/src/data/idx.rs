use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::DataError;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const NUM_CLASSES: u8 = 10;

/// Grayscale images with one label each, pixels row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    /// The subset with label `class_id`, in original order.
    pub fn filter_class(&self, class_id: u8) -> Result<LabeledImages, DataError> {
        if class_id >= NUM_CLASSES {
            return Err(DataError::InvalidClass(class_id));
        }
        let (images, labels): (Vec<_>, Vec<_>) = self
            .images
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == class_id)
            .map(|(img, &l)| (img.clone(), l))
            .unzip();
        if images.is_empty() {
            return Err(DataError::EmptyClass(class_id));
        }
        Ok(LabeledImages {
            rows: self.rows,
            cols: self.cols,
            images,
            labels,
        })
    }

    pub fn take(&self, n: usize) -> LabeledImages {
        let n = n.min(self.len());
        LabeledImages {
            rows: self.rows,
            cols: self.cols,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(out)
            }
            None => Err(DataError::TruncatedFile {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                expected: self.offset.saturating_add(n),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<(), DataError> {
        let offset = self.offset;
        let found = self.u32()?;
        if found != expected {
            return Err(DataError::BadMagic {
                path: self.path.to_path_buf(),
                offset,
                found,
                expected,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), DataError> {
        if self.offset != self.bytes.len() {
            return Err(DataError::DimMismatch {
                path: self.path.to_path_buf(),
                offset: self.offset,
                detail: format!(
                    "{} bytes beyond the declared size",
                    self.bytes.len() - self.offset
                ),
            });
        }
        Ok(())
    }
}

/// Parses an IDX image file body: `(rows, cols, images)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<Vec<u8>>), DataError> {
    let mut cur = Cursor {
        bytes,
        offset: 0,
        path,
    };
    cur.magic(IMAGES_MAGIC)?;
    let n = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let size = rows * cols;
    let images = (0..n)
        .map(|_| cur.take(size).map(<[u8]>::to_vec))
        .collect::<Result<Vec<_>, _>>()?;
    cur.finish()?;
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    let mut cur = Cursor {
        bytes,
        offset: 0,
        path,
    };
    cur.magic(LABELS_MAGIC)?;
    let n = cur.u32()? as usize;
    let start = cur.offset;
    let labels = cur.take(n)?.to_vec();
    cur.finish()?;
    if let Some(pos) = labels.iter().position(|&l| l >= NUM_CLASSES) {
        return Err(DataError::DimMismatch {
            path: path.to_path_buf(),
            offset: start + pos,
            detail: format!("label {} outside 0..=9", labels[pos]),
        });
    }
    Ok(labels)
}

/// Loads an image file and its label file; gzip-compressed files are
/// decompressed transparently.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledImages, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (rows, cols, images) = parse_idx_images(&read_maybe_gzip(ip)?, ip)?;
    let labels = parse_idx_labels(&read_maybe_gzip(lp)?, lp)?;
    if labels.len() != images.len() {
        return Err(DataError::DimMismatch {
            path: lp.to_path_buf(),
            offset: 4,
            detail: format!("{} labels for {} images", labels.len(), images.len()),
        });
    }
    Ok(LabeledImages {
        rows,
        cols,
        images,
        labels,
    })
}

/// Writes both IDX files; paths ending in `.gz` are gzip-compressed.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    data: &LabeledImages,
) -> Result<(), DataError> {
    let n = data.len() as u32;
    let mut images = Vec::with_capacity(16 + data.len() * data.pixels_per_image());
    for word in [IMAGES_MAGIC, n, data.rows as u32, data.cols as u32] {
        images.extend_from_slice(&word.to_be_bytes());
    }
    data.images.iter().for_each(|img| images.extend_from_slice(img));

    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend_from_slice(&data.labels);

    write_maybe_gzip(images_path.as_ref(), &images)?;
    write_maybe_gzip(labels_path.as_ref(), &labels)
}

fn write_maybe_gzip(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let payload = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(io_err)?;
        enc.finish().map_err(io_err)?
    } else {
        bytes.to_vec()
    };
    fs::write(path, payload).map_err(io_err)
}
