//! Tensor fusion: consecutive scheduled tensors are packed into one buffer
//! and reduced by a single ring pass, cutting per-message latency.

use std::ops::Range;

use crate::error::{CommError, Result};
use crate::negotiate::TensorMeta;
use crate::ring::{DType, ReduceOp};

/// Default fusion buffer capacity in bytes.
pub const DEFAULT_FUSION_BYTES: usize = 64 << 20;

/// A run of scheduled tensors reduced together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionGroup {
    /// Positions in the schedule.
    pub members: Range<usize>,
    pub bytes: usize,
    pub dtype: DType,
    pub op: ReduceOp,
}

/// Greedily packs `schedule` in order. A group closes when the next tensor
/// would exceed `capacity` or has a different dtype or op.
pub fn fuse(schedule: &[TensorMeta], capacity: usize) -> Result<Vec<FusionGroup>> {
    let mut groups: Vec<FusionGroup> = Vec::new();
    for (i, m) in schedule.iter().enumerate() {
        let bytes = m.bytes();
        if bytes > capacity {
            return Err(CommError::Config(format!(
                "tensor {} has {bytes} bytes, more than the {capacity}-byte fusion buffer",
                m.name
            )));
        }
        match groups.last_mut() {
            Some(g) if g.dtype == m.dtype && g.op == m.op && g.bytes + bytes <= capacity => {
                g.members.end = i + 1;
                g.bytes += bytes;
            }
            _ => groups.push(FusionGroup {
                members: i..i + 1,
                bytes,
                dtype: m.dtype,
                op: m.op,
            }),
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(name: &str, bytes: usize, dtype: DType) -> TensorMeta {
        TensorMeta {
            name: name.into(),
            count: bytes / dtype.size(),
            dtype,
            op: ReduceOp::Average,
        }
    }

    #[test]
    fn packs_greedily_in_order() {
        const MB: usize = 1 << 20;
        let s = [t("a", 30 * MB, DType::F32), t("b", 30 * MB, DType::F32), t("c", 30 * MB, DType::F32)];
        let g = fuse(&s, 64 * MB).unwrap();
        assert_eq!(g.iter().map(|g| g.members.clone()).collect::<Vec<_>>(), [0..2, 2..3]);
        assert_eq!(g[0].bytes, 60 * MB);
    }

    #[test]
    fn dtype_change_splits_and_oversize_fails() {
        let s = [t("a", 8, DType::F32), t("b", 8, DType::F64), t("c", 8, DType::F64)];
        let g = fuse(&s, 1024).unwrap();
        assert_eq!(g.iter().map(|g| g.members.clone()).collect::<Vec<_>>(), [0..1, 1..3]);
        assert!(matches!(fuse(&s, 4), Err(CommError::Config(_))));
        assert!(fuse(&[], 4).unwrap().is_empty());
    }
}
