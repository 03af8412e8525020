//! `BNNC` checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header   "BNNC" | version u32 | dtype u8 | 0u8 ×3 | sections u32 | crc32 u32
//! section  tag u8 | len u64 | payload[len] | crc32 u32   (crc over tag, len, payload)
//! ```
//!
//! Sections appear in tag order: meta (step, epoch, rng state), topology,
//! tensors (`"<layer>/<variable>"` → tensor), pruning masks, optimizer state.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ByteReader, ByteWriter};
use crate::error::{BnnError, Result};
use crate::layers::{LayerSpec, ModelGraph};
use crate::rng::RngState;
use crate::scalar::{DType, Scalar};
use crate::tensor::{Padding, Tensor};
use crate::train::{Optimizer, OptimizerKind};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BNNC";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 20;
const TAG_META: u8 = 1;
const TAG_TOPOLOGY: u8 = 2;
const TAG_TENSORS: u8 = 3;
const TAG_MASKS: u8 = 4;
const TAG_OPTIMIZER: u8 = 5;
const TAGS: [u8; 5] = [TAG_META, TAG_TOPOLOGY, TAG_TENSORS, TAG_MASKS, TAG_OPTIMIZER];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub graph: ModelGraph<T>,
    pub optimizer: Option<Optimizer<T>>,
    pub rng: RngState,
    pub step: u64,
    pub epoch: u64,
}

/// `<dir>/model-<iteration>.ckpt`.
pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("model-{iteration}.ckpt"))
}

fn encode_spec(w: &mut ByteWriter, spec: &LayerSpec) {
    match *spec {
        LayerSpec::DenseFlipout { inputs, outputs, bias } => {
            w.u8(0);
            w.u64(inputs as u64);
            w.u64(outputs as u64);
            w.u8(bias as u8);
        }
        LayerSpec::Conv2dFlipout {
            kh,
            kw,
            cin,
            cout,
            stride,
            padding,
            bias,
        } => {
            w.u8(1);
            for v in [kh, kw, cin, cout, stride] {
                w.u64(v as u64);
            }
            w.u8(matches!(padding, Padding::Same) as u8);
            w.u8(bias as u8);
        }
        LayerSpec::MaxPool2d { window, stride } => {
            w.u8(2);
            w.u64(window as u64);
            w.u64(stride as u64);
        }
        LayerSpec::Flatten => w.u8(3),
        LayerSpec::Relu => w.u8(4),
    }
}

fn flag(r: &mut ByteReader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(r.fail(format!("invalid flag byte {v}"))),
    }
}

fn decode_spec(r: &mut ByteReader) -> Result<LayerSpec> {
    let at = r.offset();
    Ok(match r.u8()? {
        0 => LayerSpec::DenseFlipout {
            inputs: r.usize()?,
            outputs: r.usize()?,
            bias: flag(r)?,
        },
        1 => {
            let [kh, kw, cin, cout, stride] = [r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?];
            let padding = if flag(r)? { Padding::Same } else { Padding::Valid };
            LayerSpec::Conv2dFlipout {
                kh,
                kw,
                cin,
                cout,
                stride,
                padding,
                bias: flag(r)?,
            }
        }
        2 => LayerSpec::MaxPool2d {
            window: r.usize()?,
            stride: r.usize()?,
        },
        3 => LayerSpec::Flatten,
        4 => LayerSpec::Relu,
        k => {
            return Err(BnnError::Integrity {
                offset: at,
                reason: format!("unknown layer kind {k}"),
            })
        }
    })
}

fn section(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    let start = out.len();
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

pub fn encode_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Vec<u8> {
    let g = &ck.graph;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&[T::DTYPE.code(), 0, 0, 0]);
    out.extend_from_slice(&(TAGS.len() as u32).to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());

    let mut w = ByteWriter::default();
    for v in [ck.step, ck.epoch, ck.rng.seed, ck.rng.stream, ck.rng.word] {
        w.u64(v);
    }
    section(&mut out, TAG_META, &w.buf);

    let mut w = ByteWriter::default();
    w.dims(g.input_shape());
    w.u32(g.layers().len() as u32);
    for l in g.layers() {
        w.str(&l.name);
        encode_spec(&mut w, &l.spec);
    }
    section(&mut out, TAG_TOPOLOGY, &w.buf);

    let mut w = ByteWriter::default();
    let ids = g.param_ids();
    w.u32(ids.len() as u32);
    for id in &ids {
        w.str(&g.param_name(*id));
        w.tensor(g.tensor(*id).expect("listed id"));
    }
    section(&mut out, TAG_TENSORS, &w.buf);

    let mut w = ByteWriter::default();
    let masked: Vec<_> = g
        .layers()
        .iter()
        .filter_map(|l| Some((&l.name, l.param.as_ref()?.kept.as_ref()?)))
        .collect();
    w.u32(masked.len() as u32);
    for (name, kept) in masked {
        w.str(name);
        w.u64(kept.len() as u64);
        let mut packed = vec![0u8; kept.len().div_ceil(8)];
        for (i, _) in kept.iter().enumerate().filter(|(_, &k)| k) {
            packed[i / 8] |= 1 << (i % 8);
        }
        w.buf.extend_from_slice(&packed);
    }
    section(&mut out, TAG_MASKS, &w.buf);

    let mut w = ByteWriter::default();
    match &ck.optimizer {
        None => w.u8(0),
        Some(opt) => {
            w.u8(1);
            w.u8(opt.kind.code());
            w.f64(opt.lr);
            w.u64(opt.step);
            w.u32(opt.v.len() as u32);
            for (i, id) in opt.ids.iter().enumerate() {
                w.str(&g.param_name(*id));
                match opt.m.get(i) {
                    Some(m) => {
                        w.u8(1);
                        w.tensor(m);
                    }
                    None => w.u8(0),
                }
                w.tensor(&opt.v[i]);
            }
        }
    }
    section(&mut out, TAG_OPTIMIZER, &w.buf);
    out
}

/// Verifies the header and every section checksum before building anything.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = ByteReader::new(bytes, 0);
    let header = r.take(HEADER_LEN)?;
    let stored = u32::from_le_bytes(header[16..20].try_into().expect("4 bytes"));
    if crc32fast::hash(&header[..16]) != stored {
        return Err(BnnError::Integrity {
            offset: 0,
            reason: "header checksum mismatch".into(),
        });
    }
    if &header[..4] != CHECKPOINT_MAGIC {
        return Err(BnnError::Format("not a BNNC checkpoint".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(BnnError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    match DType::from_code(header[8]) {
        Some(d) if d == T::DTYPE => {}
        other => {
            return Err(BnnError::Format(format!(
                "checkpoint element type {other:?} (code {}) does not match requested {:?}",
                header[8],
                T::DTYPE
            )))
        }
    }
    let count = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
    if count != TAGS.len() {
        return Err(BnnError::Integrity {
            offset: 12,
            reason: format!("expected {} sections, header says {count}", TAGS.len()),
        });
    }
    let mut payloads = Vec::with_capacity(count);
    for &tag in &TAGS {
        let start = r.offset();
        let got = r.u8()?;
        if got != tag {
            return Err(BnnError::Integrity {
                offset: start,
                reason: format!("expected section {tag}, found {got}"),
            });
        }
        let len = r.usize()?;
        let payload_at = r.offset();
        let payload = r.take(len)?;
        let stored = r.u32()?;
        let end = (payload_at as usize) + len;
        if crc32fast::hash(&bytes[start as usize..end]) != stored {
            return Err(BnnError::Integrity {
                offset: start,
                reason: format!("section {tag} checksum mismatch"),
            });
        }
        payloads.push(ByteReader::new(payload, payload_at));
    }
    if !r.is_done() {
        return Err(r.fail("trailing bytes after last section"));
    }
    let [mut meta, mut topo, mut tens, mut masks, mut opt] = <[ByteReader; 5]>::try_from(payloads)
        .ok()
        .expect("five sections");

    let (step, epoch) = (meta.u64()?, meta.u64()?);
    let rng = RngState {
        seed: meta.u64()?,
        stream: meta.u64()?,
        word: meta.u64()?,
    };

    let input = topo.dims()?;
    let n_layers = topo.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        layers.push((topo.str()?, decode_spec(&mut topo)?));
    }
    let mut graph = ModelGraph::new(&input, layers)?;

    let n = tens.u32()? as usize;
    let mut seen = std::collections::HashSet::new();
    for _ in 0..n {
        let at = tens.offset();
        let name = tens.str()?;
        let t: Tensor<T> = tens.tensor()?;
        let id = graph.param_by_name(&name).ok_or_else(|| BnnError::Consistency(format!(
            "checkpoint tensor {name:?} is not a variable of the stored topology"
        )))?;
        let slot = graph.tensor_mut(id).expect("resolved");
        if slot.shape() != t.shape() {
            return Err(BnnError::Integrity {
                offset: at,
                reason: format!("{name}: shape {:?}, topology expects {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
        seen.insert(id);
    }
    if let Some(missing) = graph.param_ids().into_iter().find(|id| !seen.contains(id)) {
        return Err(BnnError::Consistency(format!(
            "checkpoint lacks variable {}",
            graph.param_name(missing)
        )));
    }

    let n = masks.u32()? as usize;
    for _ in 0..n {
        let name = masks.str()?;
        let len = masks.usize()?;
        let packed = masks.take(len.div_ceil(8))?;
        let kept: Vec<bool> = (0..len).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        let p = graph
            .layer_index(&name)
            .and_then(|i| graph.layers_mut()[i].param.as_mut())
            .ok_or_else(|| BnnError::Consistency(format!("mask for unknown layer {name:?}")))?;
        if p.len() != len {
            return Err(masks.fail(format!("mask for {name} has {len} entries, kernel has {}", p.len())));
        }
        p.kept = Some(kept);
    }

    let optimizer = if flag(&mut opt)? {
        let at = opt.offset();
        let kind = OptimizerKind::from_code(opt.u8()?).ok_or_else(|| BnnError::Integrity {
            offset: at,
            reason: "unknown optimizer kind".into(),
        })?;
        let mut o = Optimizer::new(kind, opt.f64()?);
        o.step = opt.u64()?;
        let slots = opt.u32()? as usize;
        for _ in 0..slots {
            let name = opt.str()?;
            let id = graph
                .param_by_name(&name)
                .ok_or_else(|| BnnError::Consistency(format!("optimizer slot for unknown variable {name:?}")))?;
            o.ids.push(id);
            if flag(&mut opt)? {
                o.m.push(opt.tensor()?);
            }
            o.v.push(opt.tensor()?);
        }
        Some(o)
    } else {
        None
    };
    for (name, r) in [("meta", &meta), ("topology", &topo), ("tensors", &tens), ("masks", &masks), ("optimizer", &opt)] {
        if !r.is_done() {
            return Err(r.fail(format!("unparsed bytes at end of {name} section")));
        }
    }
    Ok(Checkpoint {
        graph,
        optimizer,
        rng,
        step,
        epoch,
    })
}

/// Writes atomically through a temporary sibling file.
pub fn write_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode_checkpoint(ck))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `<dir>/model-<iteration>.ckpt` and returns its path.
pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, dir: &Path, iteration: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = checkpoint_path(dir, iteration);
    write_checkpoint(ck, &path)?;
    Ok(path)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => BnnError::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    decode_checkpoint(&bytes)
}
