//! Closed-loop stepping service: an agent submits each frame's controls over TCP and
//! receives the generated multi-view frame, one sampling session per connection.

pub mod agent;
pub mod error;
pub mod server;
pub mod wire;

pub use agent::{
    scripted_agent, AgentOptions, FrameRecord, LatencyStats, Perturbation, Transcript,
};
pub use error::{Result, SimError};
pub use server::{Server, ServerOptions, DEFAULT_MAX_LINE};
pub use wire::{ClientMessage, ControlUpdate, ServerMessage, WireTensor};

/// Environment variable holding the listen address.
pub const ADDR_ENV: &str = "FAR_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";

/// Listen address: the explicit value if given, else `FAR_ADDR`, else [`DEFAULT_ADDR`].
pub fn resolve_addr(flag: Option<&str>) -> String {
    flag.map(str::to_string)
        .or_else(|| std::env::var(ADDR_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_ADDR.to_string())
}
