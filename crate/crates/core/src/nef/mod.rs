//! Emulated 5G network exposure API.
//!
//! Clients create radio links, PDU sessions, QoS flows and fwmark filters.
//! Each QoS flow becomes a class in a qdisc/class/filter tree carrying the
//! flow's delay and optional rate; packets are classified by fwmark and
//! delivered in virtual time.
//!
//! The [`EmulatorClient`] trait is the one surface the daemon talks to. It is
//! implemented by the in-process [`Emulator`], by [`HttpEmulatorClient`] for a
//! remote REST service, and by [`AmfClient`], which stands in for the
//! control-plane path and refuses every call.

mod client;
mod model;
pub mod rest;
mod shaper;

use thiserror::Error;

pub use client::{AmfClient, EmulatorClient, HttpEmulatorClient};
pub use model::{
    Classification, CreateFilter, CreateFlow, DeleteOpts, Delivery, Emulator, LinkState, MarkFilter,
    PduSession, QosFlow, RadioLink, TransmitRequest, DEFAULT_AVERAGING_WINDOW_MS,
};
pub use shaper::TokenBucket;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EmulatorError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("dependency violation: {0}")]
    DependencyViolation(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("emulator unreachable: {0}")]
    Unreachable(String),
    #[error("{0} is not implemented")]
    NotImplemented(&'static str),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

impl EmulatorError {
    /// Stable machine-readable kind, also used on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::NotFound(_) => "not-found",
            Self::Conflict(_) => "conflict",
            Self::DependencyViolation(_) => "dependency-violation",
            Self::Invalid(_) => "invalid",
            Self::Unreachable(_) => "unreachable",
            Self::NotImplemented(_) => "not-implemented",
            Self::Protocol(_) => "protocol",
        }
    }

    pub(crate) fn from_kind(kind: &str, message: String) -> Self {
        match kind {
            "not-found" => Self::NotFound(message),
            "conflict" => Self::Conflict(message),
            "dependency-violation" => Self::DependencyViolation(message),
            "invalid" => Self::Invalid(message),
            _ => Self::Protocol(format!("{kind}: {message}")),
        }
    }
}
