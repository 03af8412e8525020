use std::fmt;
use std::time::Duration;

use thiserror::Error;

/// Names that were never submitted by every rank, with the ranks missing each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StallReport {
    pub waited: Duration,
    pub missing: Vec<(String, Vec<usize>)>,
}

impl fmt::Display for StallReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stalled for {:?}:", self.waited)?;
        for (name, ranks) in &self.missing {
            write!(f, " {{{name}: missing rank")?;
            if ranks.len() > 1 {
                write!(f, "s")?;
            }
            let list: Vec<String> = ranks.iter().map(|r| r.to_string()).collect();
            write!(f, " {}}}", list.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CommError {
    #[error("transport error on rank {rank}: {reason}")]
    Transport { rank: usize, reason: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Stall(StallReport),
}

pub type Result<T, E = CommError> = std::result::Result<T, E>;

impl CommError {
    pub(crate) fn transport(rank: usize, reason: impl fmt::Display) -> Self {
        CommError::Transport {
            rank,
            reason: reason.to_string(),
        }
    }
}
