use crate::error::{BnnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn dims(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
    }

    pub fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.dims(t.shape());
        self.buf.reserve(t.len() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut self.buf);
        }
    }
}

/// Cursor over a byte slice; errors report absolute file offsets.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], base: u64) -> Self {
        Self { buf, pos: 0, base }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn fail(&self, reason: impl Into<String>) -> BnnError {
        BnnError::Integrity {
            offset: self.offset(),
            reason: reason.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let at = self.offset();
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| BnnError::Integrity {
            offset: at,
            reason: format!("value {v} does not fit in usize"),
        })
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.offset();
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| BnnError::Integrity {
            offset: at,
            reason: "invalid UTF-8 in name".into(),
        })
    }

    pub fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.fail(format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| self.usize()).collect()
    }

    pub fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let shape = self.dims()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.fail("tensor size overflows"))?;
        let width = T::DTYPE.size_of();
        let bytes = self.take(n.checked_mul(width).ok_or_else(|| self.fail("tensor size overflows"))?)?;
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        Tensor::from_vec(&shape, data)
    }
}
