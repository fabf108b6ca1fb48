//! The cascaded U-net with reverse concatenations, a gated recurrent
//! bottleneck and channel-wise fusion of the per-iteration outputs.

mod checkpoint;
mod config;
mod flops;
mod network;

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::NetworkConfig;
pub(crate) use config::NETWORK_KEYS;
pub use flops::{count_flops, FlopCount};
pub use network::{
    check_extents, IterationState, Network, ParamKind, RecurrentTrace, Session, SessionOutput,
};
