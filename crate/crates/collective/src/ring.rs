//! Ring all-reduce: `W − 1` scatter-reduce steps followed by `W − 1`
//! all-gather steps between ring neighbours. Chunk `c` covers elements
//! `c·n/W .. (c+1)·n/W`; each chunk is finished on one rank and copied to the
//! rest, so every rank ends with bitwise-identical values.

use std::fmt::Debug;
use std::ops::Add;
use std::time::Duration;

use crate::error::{CommError, Result};
use crate::frame::{Frame, Get, MsgKind, Put};
use crate::transport::Transport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element types the engine reduces.
pub trait Element: Copy + Send + Sync + Debug + PartialEq + Add<Output = Self> + 'static {
    const DTYPE: DType;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
    fn div_count(self, n: usize) -> Self;
    fn wrap(v: Vec<Self>) -> Buffer;
    fn unwrap(b: Buffer) -> Option<Vec<Self>>;
}

/// A tensor payload of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buffer {
    pub fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> usize {
        self.len() * self.dtype().size()
    }

    pub fn into_vec<E: Element>(self) -> Option<Vec<E>> {
        E::unwrap(self)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn div_count(self, n: usize) -> Self {
        self / n as f32
    }
    fn wrap(v: Vec<Self>) -> Buffer {
        Buffer::F32(v)
    }
    fn unwrap(b: Buffer) -> Option<Vec<Self>> {
        match b {
            Buffer::F32(v) => Some(v),
            _ => None,
        }
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn div_count(self, n: usize) -> Self {
        self / n as f64
    }
    fn wrap(v: Vec<Self>) -> Buffer {
        Buffer::F64(v)
    }
    fn unwrap(b: Buffer) -> Option<Vec<Self>> {
        match b {
            Buffer::F64(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Average,
}

impl ReduceOp {
    pub fn code(self) -> u8 {
        match self {
            ReduceOp::Sum => 0,
            ReduceOp::Average => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ReduceOp::Sum),
            1 => Some(ReduceOp::Average),
            _ => None,
        }
    }
}

fn bounds(chunk: usize, n: usize, w: usize) -> (usize, usize) {
    (chunk * n / w, (chunk + 1) * n / w)
}

const SCATTER: u8 = 0;
const GATHER: u8 = 1;

fn send_chunk<E: Element>(t: &dyn Transport, to: usize, phase: u8, step: usize, chunk: usize, data: &[E], n: usize) -> Result<usize> {
    let mut p = Put::default();
    p.u8(phase).u32(step as u32).u32(chunk as u32).u64(n as u64).u8(E::DTYPE.code());
    p.0.reserve(data.len() * E::DTYPE.size());
    for &v in data {
        v.put(&mut p.0);
    }
    let frame = Frame::new(MsgKind::DataChunk, p.0);
    let bytes = frame.wire_len();
    t.send(to, frame)?;
    Ok(bytes)
}

#[allow(clippy::too_many_arguments)]
fn recv_chunk<E: Element>(
    t: &dyn Transport,
    from: usize,
    phase: u8,
    step: usize,
    chunk: usize,
    n: usize,
    len: usize,
    timeout: Duration,
    mut apply: impl FnMut(usize, E),
) -> Result<()> {
    let f = t.recv(from, timeout)?;
    if f.kind != MsgKind::DataChunk {
        return Err(CommError::Protocol(format!("expected a data chunk from rank {from}, got {:?}", f.kind)));
    }
    let mut g = Get::new(&f.payload, "data chunk");
    let (ph, st, ch, total, dt) = (g.u8()?, g.u32()? as usize, g.u32()? as usize, g.u64()? as usize, g.u8()?);
    if total != n {
        return Err(CommError::Protocol(format!(
            "length mismatch: rank {from} reduces {total} elements, rank {} has {n}",
            t.rank()
        )));
    }
    if dt != E::DTYPE.code() {
        return Err(CommError::Protocol(format!("dtype mismatch with rank {from}")));
    }
    if (ph, st, ch) != (phase, step, chunk) {
        return Err(CommError::Protocol(format!(
            "out-of-order chunk from rank {from}: phase {ph} step {st} chunk {ch}, expected {phase}/{step}/{chunk}"
        )));
    }
    let body = g.rest();
    if body.len() != len * E::DTYPE.size() {
        return Err(CommError::Protocol(format!("chunk from rank {from} holds {} bytes, expected {}", body.len(), len * E::DTYPE.size())));
    }
    for (i, b) in body.chunks_exact(E::DTYPE.size()).enumerate() {
        apply(i, E::get(b));
    }
    Ok(())
}

/// Reduces `data` in place across all ranks of `t`. Returns the bytes this rank sent.
pub fn ring_allreduce<E: Element>(t: &dyn Transport, data: &mut [E], op: ReduceOp, timeout: Duration) -> Result<usize> {
    let (w, r, n) = (t.world(), t.rank(), data.len());
    if w == 1 {
        return Ok(0);
    }
    let right = (r + 1) % w;
    let left = (r + w - 1) % w;
    let mut sent = 0;
    for step in 0..w - 1 {
        let out = (r + w - step) % w;
        let inc = (r + 2 * w - step - 1) % w;
        let (a, b) = bounds(out, n, w);
        sent += send_chunk(t, right, SCATTER, step, out, &data[a..b], n)?;
        let (a, b) = bounds(inc, n, w);
        let dst = &mut data[a..b];
        recv_chunk::<E>(t, left, SCATTER, step, inc, n, b - a, timeout, |i, v| dst[i] = v + dst[i])?;
    }
    let owned = (r + 1) % w;
    if op == ReduceOp::Average {
        let (a, b) = bounds(owned, n, w);
        for v in &mut data[a..b] {
            *v = v.div_count(w);
        }
    }
    for step in 0..w - 1 {
        let out = (r + 1 + w - step) % w;
        let inc = (r + w - step) % w;
        let (a, b) = bounds(out, n, w);
        sent += send_chunk(t, right, GATHER, step, out, &data[a..b], n)?;
        let (a, b) = bounds(inc, n, w);
        let dst = &mut data[a..b];
        recv_chunk::<E>(t, left, GATHER, step, inc, n, b - a, timeout, |i, v| dst[i] = v)?;
    }
    Ok(sent)
}
