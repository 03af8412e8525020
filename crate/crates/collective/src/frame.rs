//! Wire frames: `u32 payload length | u8 kind | payload`, little-endian.

use std::io::{Read, Write};

use crate::error::{CommError, Result};

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME: usize = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgKind {
    ReadyBitmap = 1,
    Schedule = 2,
    DataChunk = 3,
    Stats = 4,
}

impl MsgKind {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => MsgKind::ReadyBitmap,
            2 => MsgKind::Schedule,
            3 => MsgKind::DataChunk,
            4 => MsgKind::Stats,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgKind,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: MsgKind, payload: Vec<u8>) -> Self {
        Self { kind, payload }
    }

    /// Bytes on the wire, header included.
    pub fn wire_len(&self) -> usize {
        5 + self.payload.len()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let len = u32::try_from(self.payload.len())
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "frame payload exceeds u32"))?;
        let mut header = [0u8; 5];
        header[..4].copy_from_slice(&len.to_le_bytes());
        header[4] = self.kind as u8;
        w.write_all(&header)?;
        w.write_all(&self.payload)
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream before a header.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Frame>> {
        let mut header = [0u8; 5];
        let mut got = 0;
        while got < header.len() {
            match r.read(&mut header[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(CommError::Protocol("stream ended inside a frame header".into())),
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(CommError::Protocol(format!("frame read failed: {e}"))),
            }
        }
        let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME {
            return Err(CommError::Protocol(format!("frame of {len} bytes exceeds the limit")));
        }
        let kind = MsgKind::from_code(header[4])
            .ok_or_else(|| CommError::Protocol(format!("unknown message kind {}", header[4])))?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)
            .map_err(|e| CommError::Protocol(format!("truncated {kind:?} frame: {e}")))?;
        Ok(Some(Frame { kind, payload }))
    }
}

/// Little-endian payload builder.
#[derive(Default)]
pub(crate) struct Put(pub Vec<u8>);

impl Put {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
        self
    }
}

/// Little-endian payload reader; every shortfall is a protocol error.
pub(crate) struct Get<'a> {
    buf: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Get<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, at: 0, what }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(CommError::Protocol(format!(
                "{} payload truncated at byte {} (need {n} more)",
                self.what, self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec())
            .map_err(|_| CommError::Protocol(format!("{} payload holds invalid UTF-8", self.what)))
    }
    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.at..];
        self.at = self.buf.len();
        s
    }
    pub fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(CommError::Protocol(format!(
                "{} payload has {} trailing bytes",
                self.what,
                self.buf.len() - self.at
            )));
        }
        Ok(())
    }
}
