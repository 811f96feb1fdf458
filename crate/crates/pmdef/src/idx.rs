//! IDX (MNIST-family) and CIFAR-10 binary readers and writers.

use std::path::Path;

use pmdef_core::data::Dataset;
use pmdef_core::Tensor;

use crate::error::{Error, Result};
use crate::io;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Class count for IDX and CIFAR-10 data.
pub const NUM_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

struct Reader<'a> {
    what: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                what: self.what.into(),
                offset: self.bytes.len(),
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn magic(r: &mut Reader<'_>, expected: u32) -> Result<()> {
    let found = r.u32()?;
    if found != expected {
        return Err(Error::BadMagic {
            what: r.what.into(),
            expected: expected.into(),
            found: found.into(),
        });
    }
    Ok(())
}

/// Parses IDX image and label payloads (already inflated).
pub fn parse_idx_bytes(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let mut ri = Reader {
        what: "IDX images",
        bytes: images,
        pos: 0,
    };
    magic(&mut ri, IDX_IMAGES_MAGIC)?;
    let n = ri.u32()? as usize;
    let rows = ri.u32()? as usize;
    let cols = ri.u32()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            what: "IDX images".into(),
            reason: format!("zero-sized dimension {n}x{rows}x{cols}"),
        });
    }
    let pixels = ri.take(n * rows * cols)?;
    if ri.pos != images.len() {
        return Err(Error::Format {
            what: "IDX images".into(),
            reason: format!("{} trailing bytes after the payload", images.len() - ri.pos),
        });
    }

    let mut rl = Reader {
        what: "IDX labels",
        bytes: labels,
        pos: 0,
    };
    magic(&mut rl, IDX_LABELS_MAGIC)?;
    let nl = rl.u32()? as usize;
    if nl != n {
        return Err(Error::CountMismatch { images: n, labels: nl });
    }
    let lbytes = rl.take(nl)?;
    if rl.pos != labels.len() {
        return Err(Error::Format {
            what: "IDX labels".into(),
            reason: format!("{} trailing bytes after the payload", labels.len() - rl.pos),
        });
    }
    let labels = check_labels(lbytes)?;
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::new(vec![n, rows, cols, 1], data)?;
    Ok(Dataset::new(name, images, labels, NUM_CLASSES)?)
}

fn check_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    bytes
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if usize::from(label) < NUM_CLASSES {
                Ok(usize::from(label))
            } else {
                Err(Error::LabelRange {
                    index,
                    label,
                    classes: NUM_CLASSES,
                })
            }
        })
        .collect()
}

/// Reads an IDX image/label file pair; either file may be gzipped.
pub fn parse_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let name = images.file_name().map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    parse_idx_bytes(&io::read_maybe_gz(images)?, &io::read_maybe_gz(labels)?, &name)
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Serialises a single-channel dataset back into IDX image and label bytes.
pub fn write_idx_bytes(d: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = d.images.shape();
    if s.len() != 4 || s[3] != 1 {
        return Err(Error::Format {
            what: "IDX writer".into(),
            reason: format!("needs N x H x W x 1 images, got {s:?}"),
        });
    }
    let mut img = Vec::with_capacity(16 + d.images.len());
    img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in &s[..3] {
        img.extend((*dim as u32).to_be_bytes());
    }
    img.extend(d.images.data().iter().map(|&v| quantize(v)));
    let mut lab = Vec::with_capacity(8 + d.len());
    lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend((d.len() as u32).to_be_bytes());
    lab.extend(d.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

/// Parses concatenated CIFAR-10 binary records (label byte, then the R, G
/// and B planes of a 32x32 image) into `N x 32 x 32 x 3`.
pub fn parse_cifar_bytes(bytes: &[u8], name: &str) -> Result<Dataset> {
    check_cifar_len(bytes, "CIFAR binary")?;
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut data = vec![0.0; n * plane * 3];
    let mut raw_labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        raw_labels.push(rec[0]);
        let out = &mut data[i * plane * 3..(i + 1) * plane * 3];
        for c in 0..3 {
            for p in 0..plane {
                out[p * 3 + c] = f64::from(rec[1 + c * plane + p]) / 255.0;
            }
        }
    }
    let labels = check_labels(&raw_labels)?;
    let images = Tensor::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], data)?;
    Ok(Dataset::new(name, images, labels, NUM_CLASSES)?)
}

fn check_cifar_len(bytes: &[u8], what: &str) -> Result<()> {
    if bytes.is_empty() {
        return Err(Error::Format {
            what: what.into(),
            reason: "no records".into(),
        });
    }
    let rem = bytes.len() % CIFAR_RECORD;
    if rem != 0 {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Truncated {
            what: format!("{what} record {whole}"),
            offset: whole * CIFAR_RECORD,
            needed: CIFAR_RECORD - rem,
        });
    }
    Ok(())
}

/// Reads and concatenates CIFAR-10 binary batch files.
pub fn parse_cifar_binary(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut all = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = io::read_maybe_gz(p)?;
        check_cifar_len(&bytes, &p.display().to_string())?;
        all.extend(bytes);
    }
    parse_cifar_bytes(&all, "cifar10")
}

/// Serialises an `N x 32 x 32 x 3` dataset into CIFAR-10 records.
pub fn write_cifar_bytes(d: &Dataset) -> Result<Vec<u8>> {
    if d.images.shape()[1..] != [CIFAR_SIDE, CIFAR_SIDE, 3] {
        return Err(Error::Format {
            what: "CIFAR writer".into(),
            reason: format!("needs N x 32 x 32 x 3 images, got {:?}", d.images.shape()),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(d.len() * CIFAR_RECORD);
    for i in 0..d.len() {
        out.push(d.labels[i] as u8);
        let item = d.images.item(i);
        for c in 0..3 {
            out.extend((0..plane).map(|p| quantize(item[p * 3 + c])));
        }
    }
    Ok(out)
}
