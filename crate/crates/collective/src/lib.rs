//! Collective communication for data-parallel training: a coordinator
//! negotiates which named tensors every rank has ready, fuses them into
//! large buffers and reduces each buffer with a ring all-reduce over
//! in-process channels or TCP.

pub mod comm;
pub mod error;
pub mod frame;
pub mod fusion;
pub mod negotiate;
pub mod ring;
pub mod stats;
pub mod transport;

pub use comm::{channel_group, run_group, tcp_group_local, CommConfig, Communicator, Tick};
pub use error::{CommError, Result, StallReport};
pub use fusion::{fuse, FusionGroup, DEFAULT_FUSION_BYTES};
pub use negotiate::{negotiate_order, CollectiveRequest, Coordinator, ReadyMsg, ResponseCache, Schedule, TensorMeta};
pub use ring::{ring_allreduce, Buffer, DType, Element, ReduceOp};
pub use stats::{CommStats, OpStats};
pub use transport::{channel_mesh, tcp_mesh_local, ChannelTransport, TcpTransport, Transport, TransportKind};
