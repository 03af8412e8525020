//! Big-endian IDX files as distributed for MNIST, optionally gzip-compressed.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Dataset;
use crate::error::{BnnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Unsigned-byte data with 3 dimensions.
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte data with 1 dimension.
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => BnnError::NotFound(path.to_path_buf()),
            _ => e.into(),
        })?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| BnnError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX file.
pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = read_maybe_gz(path)?;
    let fmt = |m: String| BnnError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 4 {
        return Err(fmt("shorter than the IDX magic".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE || bytes[3] == 0 {
        return Err(fmt(format!("unsupported IDX magic {magic:#010x}")));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header != n {
        return Err(BnnError::Data(format!(
            "{}: header declares {n} values but {} bytes follow",
            path.display(),
            bytes.len() - header
        )));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Writes an unsigned-byte IDX file, gzip-compressed when `gzip` is set.
pub fn write_idx(path: &Path, dims: &[usize], data: &[u8], gzip: bool) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() || dims.is_empty() || dims.len() > 255 {
        return Err(BnnError::dim("idx write", dims, &[data.len()]));
    }
    let mut buf = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| BnnError::Parameter(format!("IDX dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_be_bytes());
    }
    buf.extend_from_slice(data);
    let mut f = File::create(path)?;
    if gzip {
        let mut enc = GzEncoder::new(f, Compression::default());
        enc.write_all(&buf)?;
        enc.finish()?;
    } else {
        f.write_all(&buf)?;
    }
    Ok(())
}

/// Loads an image/label pair as `[N, H, W, 1]` pixels scaled to `[0, 1]`.
pub fn load_mnist<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let images = read_idx(images_path)?;
    if images.magic != IMAGE_MAGIC {
        return Err(BnnError::Format(format!(
            "{}: image magic {:#010x}, expected {IMAGE_MAGIC:#010x}",
            images_path.display(),
            images.magic
        )));
    }
    let labels = read_idx(labels_path)?;
    if labels.magic != LABEL_MAGIC {
        return Err(BnnError::Format(format!(
            "{}: label magic {:#010x}, expected {LABEL_MAGIC:#010x}",
            labels_path.display(),
            labels.magic
        )));
    }
    if images.dims[0] != labels.dims[0] {
        return Err(BnnError::Data(format!(
            "{} images but {} labels",
            images.dims[0], labels.dims[0]
        )));
    }
    let scale = T::of(1.0 / 255.0);
    let pixels = images.data.iter().map(|&p| T::of(f64::from(p)) * scale).collect();
    let shape = [images.dims[0], images.dims[1], images.dims[2], 1];
    let split = images_path
        .file_name()
        .and_then(|n| n.to_str())
        .map_or("", |n| n.split('-').next().unwrap_or(""));
    Dataset::new(
        Tensor::from_vec(&shape, pixels)?,
        labels.data.iter().map(|&l| usize::from(l)).collect(),
        split,
    )
}

/// The standard MNIST files split into training, held-out and test sets.
#[derive(Clone, Debug)]
pub struct MnistSplits<T> {
    pub train: Dataset<T>,
    pub heldout: Dataset<T>,
    pub test: Dataset<T>,
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(BnnError::NotFound(dir.join(stem)))
}

/// Reads `train-*` and `t10k-*` from `dir`; the first `n_train` training
/// images train, the remainder is held out.
pub fn load_mnist_dir<T: Scalar>(dir: &Path, n_train: usize) -> Result<MnistSplits<T>> {
    let full: Dataset<T> = load_mnist(
        &find(dir, "train-images-idx3-ubyte")?,
        &find(dir, "train-labels-idx1-ubyte")?,
    )?;
    let mut test: Dataset<T> = load_mnist(
        &find(dir, "t10k-images-idx3-ubyte")?,
        &find(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    test.split = "test".into();
    let (mut train, mut heldout) = full.split_at(n_train)?;
    train.split = "train".into();
    heldout.split = "heldout".into();
    Ok(MnistSplits { train, heldout, test })
}
