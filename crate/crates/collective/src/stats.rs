//! Per-operation communication counters.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{CommError, Result};
use crate::frame::{Frame, Get, MsgKind, Put};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OpStats {
    pub calls: u64,
    pub bytes: u64,
    pub seconds: f64,
}

impl OpStats {
    pub fn avg_bytes(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.bytes as f64 / self.calls as f64
        }
    }
}

/// Counters keyed by operation name: `allreduce` (one call per tensor),
/// `ring` (one per fused group), `negotiate`, `broadcast` and `barrier`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommStats {
    ops: BTreeMap<String, OpStats>,
}

impl CommStats {
    pub fn record(&mut self, op: &str, bytes: usize, seconds: f64) {
        let e = self.ops.entry(op.to_string()).or_default();
        e.calls += 1;
        e.bytes += bytes as u64;
        e.seconds += seconds;
    }

    /// Zero counters for ops never recorded.
    pub fn get(&self, op: &str) -> OpStats {
        self.ops.get(op).copied().unwrap_or_default()
    }

    pub fn reset(&mut self) {
        self.ops.clear();
    }

    pub fn ops(&self) -> impl Iterator<Item = (&str, &OpStats)> {
        self.ops.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Sums counters; seconds take the maximum, the time the slowest rank spent.
    pub fn merge_max_time(all: &[CommStats]) -> CommStats {
        let mut out = CommStats::default();
        for s in all {
            for (op, v) in &s.ops {
                let e = out.ops.entry(op.clone()).or_default();
                e.calls += v.calls;
                e.bytes += v.bytes;
                e.seconds = e.seconds.max(v.seconds);
            }
        }
        out
    }

    /// `op,calls,avg_bytes,seconds`, one row per op.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| CommError::Config(format!("writing stats: {e}"));
        out.write_record(["op", "calls", "avg_bytes", "seconds"]).map_err(io)?;
        for (op, v) in &self.ops {
            out.write_record([op.clone(), v.calls.to_string(), format!("{:.1}", v.avg_bytes()), format!("{:.6}", v.seconds)])
                .map_err(io)?;
        }
        out.flush().map_err(|e| CommError::Config(format!("writing stats: {e}")))
    }

    pub(crate) fn encode(&self) -> Frame {
        let mut p = Put::default();
        p.u32(self.ops.len() as u32);
        for (op, v) in &self.ops {
            p.str(op).u64(v.calls).u64(v.bytes).f64(v.seconds);
        }
        Frame::new(MsgKind::Stats, p.0)
    }

    pub(crate) fn decode(f: &Frame) -> Result<Self> {
        if f.kind != MsgKind::Stats {
            return Err(CommError::Protocol(format!("expected stats, got {:?}", f.kind)));
        }
        let mut g = Get::new(&f.payload, "stats");
        let mut out = CommStats::default();
        for _ in 0..g.u32()? {
            let op = g.str()?;
            let v = OpStats {
                calls: g.u64()?,
                bytes: g.u64()?,
                seconds: g.f64()?,
            };
            out.ops.insert(op, v);
        }
        g.finish()?;
        Ok(out)
    }
}
