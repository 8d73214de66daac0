//! Endpoint belief state: what an endpoint thinks happened.
//!
//! Interoperability checking compares beliefs, not wire history. Each
//! implementation maintains its own belief bookkeeping; this module
//! holds the shared vocabulary plus the legal phase-transition
//! relation both implementations enforce on themselves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::netmodel::PayloadByte;

/// Connection lifecycle phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Connecting,
    Established,
    Closing,
    Closed,
    Failed,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Closed | Phase::Failed)
    }

    /// Whether moving from `self` to `next` is a legal transition.
    ///
    /// Legal moves follow the lifecycle forward: Idle starts
    /// connecting, Connecting either establishes, aborts to Closing
    /// (local close before completion), or Fails; Established closes
    /// or fails; Closing drains to Closed or Fails. Terminal phases
    /// never move. Any phase may Fail.
    pub fn can_move_to(self, next: Phase) -> bool {
        use Phase::*;
        if self == next {
            return false;
        }
        match (self, next) {
            (_, Failed) => !self.is_terminal(),
            (Idle, Connecting) => true,
            (Connecting, Established) | (Connecting, Closing) => true,
            (Established, Closing) => true,
            // A side that answers a peer CLOSE confirms and is done in
            // one step.
            (Connecting, Closed) | (Established, Closed) => true,
            (Closing, Closed) => true,
            _ => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Connecting => "connecting",
            Phase::Established => "established",
            Phase::Closing => "closing",
            Phase::Closed => "closed",
            Phase::Failed => "failed",
        }
    }
}

/// Per-stream belief.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamState {
    Open,
    HalfClosedLocal,
    HalfClosedRemote,
    Closed,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamBelief {
    pub state: StreamState,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub fin_sent: bool,
    pub fin_received: bool,
}

impl Default for StreamBelief {
    fn default() -> Self {
        StreamBelief {
            state: StreamState::Open,
            bytes_sent: 0,
            bytes_received: 0,
            fin_sent: false,
            fin_received: false,
        }
    }
}

impl StreamBelief {
    /// Recompute the stream state from the half-close flags. Reset
    /// state is sticky and set explicitly.
    pub fn settle_state(&mut self) {
        if self.state == StreamState::Reset {
            return;
        }
        self.state = match (self.fin_sent, self.fin_received) {
            (false, false) => StreamState::Open,
            (true, false) => StreamState::HalfClosedLocal,
            (false, true) => StreamState::HalfClosedRemote,
            (true, true) => StreamState::Closed,
        };
    }
}

/// A snapshot of everything an endpoint believes about the
/// connection. Produced by both implementations in the same shape so
/// the interop oracle can compare them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub phase: Phase,
    /// The negotiated (or proposed) version, if any. May hold
    /// symbolic bytes when the proposal itself was symbolic.
    pub version_in_use: Option<[PayloadByte; 4]>,
    pub streams: BTreeMap<u8, StreamBelief>,
    /// Application payload totals across all streams.
    pub app_bytes_sent: u64,
    pub app_bytes_received: u64,
    /// The close code this endpoint associates with the connection
    /// end: its own close reason, or the code received from the peer.
    pub close_code: Option<u8>,
    /// Set when the endpoint's own idle timeout fired.
    pub timeout_flag: bool,
}

impl BeliefState {
    pub fn new() -> Self {
        BeliefState {
            phase: Phase::Idle,
            version_in_use: None,
            streams: BTreeMap::new(),
            app_bytes_sent: 0,
            app_bytes_received: 0,
            close_code: None,
            timeout_flag: false,
        }
    }

    pub fn stream(&self, sid: u8) -> Option<&StreamBelief> {
        self.streams.get(&sid)
    }
}

impl Default for BeliefState {
    fn default() -> Self {
        BeliefState::new()
    }
}
