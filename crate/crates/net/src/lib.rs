//! TCP roles around the router: a broker hosting it, the publisher's admission
//! service, and subscriber/producer client code. Every connection carries
//! newline-delimited frames as produced by [`scbr_core::envelope::encode_frame`].

pub mod broker;
pub mod client;
pub mod config;
pub mod publisher;
mod wire;

use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::time::Duration;

use scbr_core::envelope::{CryptoError, FrameError};
use serde::{Deserialize, Serialize};

pub use broker::{run_broker, BrokerConfig, BrokerHandle, BrokerStats};
pub use client::{client_subscribe, producer_publish, Delivery, Listener, Producer};
pub use config::{Config, ConfigError, KeyPaths};
pub use publisher::{publisher_admit, run_publisher, AdmissionPolicy, PublisherConfig, PublisherHandle};
pub use wire::Connection;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);
/// Longest accepted line. A 1 MB payload is about 1.4 MB once Base64-encoded.
pub const MAX_FRAME_BYTES: usize = 16 << 20;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("timed out")]
    Timeout,
    #[error("connection closed")]
    Closed,
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("unexpected {0} reply")]
    Unexpected(&'static str),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for NetError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => NetError::Timeout,
            _ => NetError::Io(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Broker,
    Publisher,
    Client,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
    pub role: Role,
}

impl Endpoint {
    pub fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    pub fn resolve(&self) -> io::Result<SocketAddr> {
        resolve(&self.addr())
    }
}

pub(crate) fn resolve(addr: &str) -> io::Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {addr}")))
}
