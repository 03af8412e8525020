//! Binary output of a pruned inference run.
//!
//! Little-endian: `"BPRN"`, version `u32`, threshold `f64`, sample shape and
//! `f32` pixels, `u32` labels, per-layer `(name, nnz u64)` and the total,
//! predictive samples `[S, B, C]` as `f32`, runtime seconds `f64`.

use std::path::Path;

use crate::error::{BnnError, Result};
use crate::infer::PredictiveSamples;
use crate::io::{ByteReader, ByteWriter};
use crate::tensor::Tensor;

pub const REPORT_MAGIC: [u8; 4] = *b"BPRN";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub threshold: f64,
    pub samples: Tensor<f32>,
    pub labels: Vec<u32>,
    pub layer_nnz: Vec<(String, u64)>,
    pub total_nnz: u64,
    pub predictive: PredictiveSamples,
    pub runtime_seconds: f64,
}

impl PruneReport {
    pub fn new(
        threshold: f64,
        samples: Tensor<f32>,
        labels: Vec<u32>,
        layer_nnz: Vec<(String, u64)>,
        mut predictive: PredictiveSamples,
        runtime_seconds: f64,
    ) -> Result<Self> {
        let n = samples.shape().first().copied().unwrap_or(0);
        if labels.len() != n || predictive.batch != n {
            return Err(BnnError::Data(format!(
                "report has {n} samples, {} labels and {} predictions",
                labels.len(),
                predictive.batch
            )));
        }
        let as_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        if predictive.labels.as_ref().is_some_and(|p| *p != as_usize) {
            return Err(BnnError::Data("predictive labels differ from the report labels".into()));
        }
        predictive.labels = Some(as_usize);
        let total_nnz = layer_nnz.iter().map(|(_, c)| c).sum();
        Ok(Self {
            threshold,
            samples,
            labels,
            layer_nnz,
            total_nnz,
            predictive,
            runtime_seconds,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.buf.extend_from_slice(&REPORT_MAGIC);
        w.u32(REPORT_VERSION);
        w.f64(self.threshold);
        w.tensor(&self.samples);
        w.u64(self.labels.len() as u64);
        for &l in &self.labels {
            w.u32(l);
        }
        w.u64(self.layer_nnz.len() as u64);
        for (name, nnz) in &self.layer_nnz {
            w.str(name);
            w.u64(*nnz);
        }
        w.u64(self.total_nnz);
        let p = &self.predictive;
        w.dims(&[p.n_samples, p.batch, p.classes]);
        for &v in &p.probs {
            w.buf.extend_from_slice(&v.to_le_bytes());
        }
        w.f64(self.runtime_seconds);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, 0);
        if r.take(4)? != REPORT_MAGIC {
            return Err(BnnError::Format("not a prune report (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != REPORT_VERSION {
            return Err(BnnError::Version {
                found: version,
                expected: REPORT_VERSION,
            });
        }
        let threshold = r.f64()?;
        let samples = r.tensor::<f32>()?;
        let n = r.usize()?;
        let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let layers = r.usize()?;
        let mut layer_nnz = Vec::with_capacity(layers.min(1024));
        for _ in 0..layers {
            layer_nnz.push((r.str()?, r.u64()?));
        }
        let total_nnz = r.u64()?;
        let dims = r.dims()?;
        let &[s, b, c] = dims.as_slice() else {
            return Err(r.fail(format!("predictive samples must be rank 3, got {dims:?}")));
        };
        let raw = r.take(s * b * c * 4)?;
        let probs = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let runtime_seconds = r.f64()?;
        if !r.is_done() {
            return Err(r.fail("trailing bytes"));
        }
        let report = Self::new(
            threshold,
            samples,
            labels,
            layer_nnz,
            PredictiveSamples::new(s, b, c, probs, None)?,
            runtime_seconds,
        )?;
        if report.total_nnz != total_nnz {
            return Err(BnnError::Consistency(format!(
                "total nonzeros {total_nnz} differs from the per-layer sum {}",
                report.total_nnz
            )));
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        match std::fs::read(path) {
            Ok(bytes) => Self::decode(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(BnnError::NotFound(path.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}
