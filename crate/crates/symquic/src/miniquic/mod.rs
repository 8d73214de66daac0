//! MiniQUIC: a miniature QUIC-shaped protocol, fully specified at the
//! byte level, with two independently structured implementations.
//!
//! The protocol keeps just enough of QUIC to make interoperability
//! interesting: long and short header forms, a three-stage handshake,
//! version negotiation with a reserved version pattern, one
//! client-initiated stream with FIN semantics, cumulative ACKs,
//! retransmission on idle ticks, and an explicit CLOSE exchange.
//! Everything is fixed-width; there are no varints, no flow control,
//! and no real cryptography.
//!
//! The two implementations deliberately differ in architecture, the
//! way two real codebases would:
//!
//! - [`pull::PullEndpoint`] is a poll-driven state machine: a single
//!   `advance` function that pulls one datagram, reacts, and prepares
//!   packets for sending.
//! - [`evloop::LoopEndpoint`] is callback-driven: datagrams are routed
//!   through an event-loop watcher dispatch, and a connection object
//!   owns per-packet handlers.
//!
//! Seeded defects (D1..D5) are behavioral bugs gated by
//! [`DefectSet`]; with every flag off, both implementations complete
//! all three scenarios against each other cleanly.

pub mod belief;
pub mod defect;
pub mod evloop;
pub mod pull;
pub mod wire;

use serde::{Deserialize, Serialize};

use crate::explore::{FaultSignature, Interrupt, StepCtx};
use crate::netmodel::{Datagram, PayloadByte};

pub use belief::{BeliefState, Phase, StreamBelief, StreamState};
pub use defect::{DefectError, DefectSet};
pub use evloop::LoopEndpoint;
pub use pull::PullEndpoint;

/// Which side of the connection an endpoint plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Client,
    Server,
}

/// The three application scenarios driven over the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Connect, then close.
    S1,
    /// Connect, send `GET /index.html` on stream 0; the server closes
    /// the stream without response data; close.
    S2,
    /// Like S2, but the server sends a one-byte response before
    /// closing the stream.
    S3,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::S1 => "s1",
            Scenario::S2 => "s2",
            Scenario::S3 => "s3",
        }
    }

    pub fn parse(text: &str) -> Option<Scenario> {
        match text.to_ascii_lowercase().as_str() {
            "s1" => Some(Scenario::S1),
            "s2" => Some(Scenario::S2),
            "s3" => Some(Scenario::S3),
            _ => None,
        }
    }

    /// The request body S2 and S3 send.
    pub const REQUEST: &'static [u8] = b"GET /index.html";
    /// The response body S3 answers with.
    pub const RESPONSE: &'static [u8] = b"!";

    pub fn sends_request(self) -> bool {
        matches!(self, Scenario::S2 | Scenario::S3)
    }

    pub fn has_response(self) -> bool {
        matches!(self, Scenario::S3)
    }
}

/// Which implementation to instantiate for an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplKind {
    /// Poll-driven implementation.
    Pull,
    /// Event-loop-driven implementation.
    EventLoop,
}

impl ImplKind {
    pub fn name(self) -> &'static str {
        match self {
            ImplKind::Pull => "pull",
            ImplKind::EventLoop => "evloop",
        }
    }

    pub fn parse(text: &str) -> Option<ImplKind> {
        match text.to_ascii_lowercase().as_str() {
            "pull" => Some(ImplKind::Pull),
            "evloop" => Some(ImplKind::EventLoop),
            _ => None,
        }
    }
}

/// What one activation of an endpoint accomplished.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Progress {
    /// Work was done: a datagram processed, packets prepared, a timer
    /// acted on.
    Progressed,
    /// Nothing to do until new input arrives.
    Blocked,
    /// The endpoint reached a terminal phase this activation.
    Finished,
    /// The endpoint detected a fault in itself.
    Fault(FaultSignature),
}

/// I/O services an endpoint sees during one activation: inbound
/// datagrams that already passed the channel, and a staging area for
/// plaintext packets to transmit.
///
/// Endpoints never touch sockets or crypto directly; they consume
/// datagrams handed in here and push plaintext payloads out. The
/// world's transmit pipeline applies mutation, sealing, and the
/// channel verdict afterwards.
#[derive(Debug, Default)]
pub struct EndpointIo {
    pub inbound: Option<Datagram>,
    pub outbound: Vec<Vec<PayloadByte>>,
}

impl EndpointIo {
    pub fn with_inbound(dg: Datagram) -> Self {
        EndpointIo { inbound: Some(dg), outbound: Vec::new() }
    }

    pub fn empty() -> Self {
        EndpointIo::default()
    }

    pub(crate) fn take_inbound(&mut self) -> Option<Datagram> {
        self.inbound.take()
    }

    pub(crate) fn has_inbound(&self) -> bool {
        self.inbound.is_some()
    }

    pub(crate) fn send(&mut self, plaintext: Vec<PayloadByte>) {
        self.outbound.push(plaintext);
    }
}

/// An endpoint of either implementation, dispatched by value.
///
/// An enum rather than a trait object keeps endpoints plain
/// serializable values, which the whole snapshot/fork machinery
/// depends on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointBox {
    Pull(PullEndpoint),
    EventLoop(LoopEndpoint),
}

impl EndpointBox {
    /// Instantiate an endpoint, validating that every armed defect is
    /// applicable to this implementation and role.
    pub fn create(
        kind: ImplKind,
        role: Role,
        scenario: Scenario,
        defects: DefectSet,
    ) -> Result<EndpointBox, DefectError> {
        defects.check_applicable(kind, role)?;
        Ok(match kind {
            ImplKind::Pull => EndpointBox::Pull(PullEndpoint::new(role, scenario, defects)),
            ImplKind::EventLoop => {
                EndpointBox::EventLoop(LoopEndpoint::new(role, scenario, defects))
            }
        })
    }

    pub fn kind(&self) -> ImplKind {
        match self {
            EndpointBox::Pull(_) => ImplKind::Pull,
            EndpointBox::EventLoop(_) => ImplKind::EventLoop,
        }
    }

    pub fn role(&self) -> Role {
        match self {
            EndpointBox::Pull(ep) => ep.role(),
            EndpointBox::EventLoop(ep) => ep.role(),
        }
    }

    /// Rewrite the scenario before the run starts. Used by the
    /// symbolic scenario selector, which picks the scenario on the
    /// first world step, after the endpoints already exist.
    pub fn set_scenario(&mut self, scenario: Scenario) {
        match self {
            EndpointBox::Pull(ep) => ep.set_scenario(scenario),
            EndpointBox::EventLoop(ep) => ep.set_scenario(scenario),
        }
    }

    /// Make a client propose a fresh symbolic version at connect.
    pub fn set_symbolic_version(&mut self, symbolic: bool) {
        match self {
            EndpointBox::Pull(ep) => ep.set_symbolic_version(symbolic),
            EndpointBox::EventLoop(ep) => ep.set_symbolic_version(symbolic),
        }
    }

    pub fn advance(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
    ) -> Result<Progress, Interrupt> {
        match self {
            EndpointBox::Pull(ep) => ep.advance(ctx, io),
            EndpointBox::EventLoop(ep) => ep.advance(ctx, io),
        }
    }

    pub fn tick(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
    ) -> Result<Progress, Interrupt> {
        match self {
            EndpointBox::Pull(ep) => ep.tick(ctx, io),
            EndpointBox::EventLoop(ep) => ep.tick(ctx, io),
        }
    }

    pub fn belief(&self) -> BeliefState {
        match self {
            EndpointBox::Pull(ep) => ep.belief(),
            EndpointBox::EventLoop(ep) => ep.belief(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.belief().phase.is_terminal()
    }

    /// True when the endpoint still holds a dispatch surface that
    /// queued input would route through, even after the connection
    /// reached a terminal phase. The harness combines this with its
    /// own view of the socket queue to decide whether leftover
    /// datagrams must still be dispatched. Pull endpoints simply stop
    /// polling, so the answer there is always no.
    pub fn wants_drain(&self) -> bool {
        match self {
            EndpointBox::Pull(_) => false,
            EndpointBox::EventLoop(ep) => ep.retains_dispatch(),
        }
    }

    /// Route one queued datagram through a terminal endpoint's event
    /// machinery (see [`Self::wants_drain`]).
    pub fn drain_one(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
    ) -> Result<Progress, Interrupt> {
        match self {
            EndpointBox::Pull(_) => unreachable!("pull endpoints never drain after close"),
            EndpointBox::EventLoop(ep) => ep.drain_one(ctx, io),
        }
    }

    pub fn choice_sites(&self) -> Vec<&'static str> {
        match self {
            EndpointBox::Pull(ep) => ep.choice_sites(),
            EndpointBox::EventLoop(ep) => ep.choice_sites(),
        }
    }

    pub fn probe_points(&self) -> Vec<&'static str> {
        match self {
            EndpointBox::Pull(ep) => ep.probe_points(),
            EndpointBox::EventLoop(ep) => ep.probe_points(),
        }
    }
}
