//! Poll-driven MiniQUIC implementation.
//!
//! Everything happens inside one `advance` call: pull at most one
//! datagram, react to it, and prepare packets for sending. When no
//! input is pending, app-driven work runs instead (connecting,
//! sending the request, closing). The connection is a flat state
//! machine over [`Phase`] with an explicit transition guard.
//!
//! The pull implementation hosts one seeded defect: D3 skips the
//! reserved-version validation in the client connect path.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::explore::{FaultKind, FaultSignature, Interrupt, Party, StepCtx};
use crate::netmodel::{crypto, PayloadByte};

use super::belief::{BeliefState, Phase, StreamBelief};
use super::defect::DefectSet;
use super::wire::{self, Frame, Header, LongType, ParsedFrame, WireSites};
use super::{EndpointIo, Progress, Role, Scenario};

/// The single stream id the scenarios use.
pub const STREAM_ID: u8 = 0;

/// Consecutive idle ticks before retransmitting the oldest
/// unacknowledged packet (also fires at twice this count).
pub const TICKS_TO_RETRANSMIT: u8 = 2;

/// Consecutive idle ticks before the endpoint gives up.
pub const TICKS_TO_TIMEOUT: u8 = 6;

/// Probe-point names for one role of the pull implementation.
struct Names {
    connect: &'static str,
    version_fallback: &'static str,
    vn_retry: &'static str,
    vn_sent: &'static str,
    reserved_ignored: &'static str,
    stage0: &'static str,
    established: &'static str,
    request_sent: &'static str,
    request_received: &'static str,
    response_sent: &'static str,
    response_fin: &'static str,
    close_sent: &'static str,
    close_received: &'static str,
    closed: &'static str,
    timeout: &'static str,
    stateless_ignore: &'static str,
    reject: &'static str,
    transition_guard: &'static str,
}

const CLIENT_NAMES: Names = Names {
    connect: "pull.client.connect",
    version_fallback: "pull.client.version_fallback",
    vn_retry: "pull.client.vn_retry",
    vn_sent: "pull.client.vn_sent",
    reserved_ignored: "pull.client.reserved_ignored",
    stage0: "pull.client.stage0",
    established: "pull.client.established",
    request_sent: "pull.client.request_sent",
    request_received: "pull.client.request_received",
    response_sent: "pull.client.response_sent",
    response_fin: "pull.client.response_fin",
    close_sent: "pull.client.close_sent",
    close_received: "pull.client.close_received",
    closed: "pull.client.closed",
    timeout: "pull.client.timeout",
    stateless_ignore: "pull.client.stateless_ignore",
    reject: "pull.client.reject",
    transition_guard: "pull.client.transition_guard",
};

const SERVER_NAMES: Names = Names {
    connect: "pull.server.connect",
    version_fallback: "pull.server.version_fallback",
    vn_retry: "pull.server.vn_retry",
    vn_sent: "pull.server.vn_sent",
    reserved_ignored: "pull.server.reserved_ignored",
    stage0: "pull.server.stage0",
    established: "pull.server.established",
    request_sent: "pull.server.request_sent",
    request_received: "pull.server.request_received",
    response_sent: "pull.server.response_sent",
    response_fin: "pull.server.response_fin",
    close_sent: "pull.server.close_sent",
    close_received: "pull.server.close_received",
    closed: "pull.server.closed",
    timeout: "pull.server.timeout",
    stateless_ignore: "pull.server.stateless_ignore",
    reject: "pull.server.reject",
    transition_guard: "pull.server.transition_guard",
};

const CLIENT_VERSION_GUARD: &str = "pull.client.version_guard";

/// Kinds of packet a sender can build.
enum PacketKind {
    Initial([PayloadByte; 4]),
    HandshakeLong,
    Short,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PullEndpoint {
    role: Role,
    scenario: Scenario,
    defects: DefectSet,
    phase: Phase,
    symbolic_version: bool,
    version_in_use: Option<[PayloadByte; 4]>,
    vn_retried: bool,
    next_pn: u8,
    unacked: BTreeMap<u8, Vec<PayloadByte>>,
    peer_seen: BTreeSet<u8>,
    ack_due: bool,
    tick_count: u8,
    hs_reply_sent: bool,
    handshake_complete: bool,
    streams: BTreeMap<u8, StreamBelief>,
    stream_bufs: BTreeMap<u8, Vec<u8>>,
    app_sent: u64,
    app_received: u64,
    request_sent: bool,
    responded: bool,
    response_pending: bool,
    close_code: Option<u8>,
    timeout_flag: bool,
}

impl PullEndpoint {
    pub fn new(role: Role, scenario: Scenario, defects: DefectSet) -> Self {
        PullEndpoint {
            role,
            scenario,
            defects,
            phase: Phase::Idle,
            symbolic_version: false,
            version_in_use: None,
            vn_retried: false,
            next_pn: 0,
            unacked: BTreeMap::new(),
            peer_seen: BTreeSet::new(),
            ack_due: false,
            tick_count: 0,
            hs_reply_sent: false,
            handshake_complete: false,
            streams: BTreeMap::new(),
            stream_bufs: BTreeMap::new(),
            app_sent: 0,
            app_received: 0,
            request_sent: false,
            responded: false,
            response_pending: false,
            close_code: None,
            timeout_flag: false,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_scenario(&mut self, scenario: Scenario) {
        self.scenario = scenario;
    }

    /// Make the client propose a fresh symbolic version at connect
    /// instead of the shipped one.
    pub fn set_symbolic_version(&mut self, symbolic: bool) {
        self.symbolic_version = symbolic;
    }

    fn names(&self) -> &'static Names {
        match self.role {
            Role::Client => &CLIENT_NAMES,
            Role::Server => &SERVER_NAMES,
        }
    }

    fn party(&self) -> Party {
        match self.role {
            Role::Client => Party::Client,
            Role::Server => Party::Server,
        }
    }

    fn fault(&self, kind: FaultKind, probe: &str, tag: Option<&str>) -> FaultSignature {
        FaultSignature {
            kind,
            endpoint: self.party(),
            probe: probe.to_string(),
            defect_tag: tag.map(str::to_string),
        }
    }

    fn transition(&mut self, ctx: &mut StepCtx<'_>, to: Phase) -> Option<FaultSignature> {
        if self.phase.can_move_to(to) {
            self.phase = to;
            None
        } else {
            ctx.probe(self.names().transition_guard);
            Some(self.fault(
                FaultKind::InvalidTransition,
                self.names().transition_guard,
                None,
            ))
        }
    }

    /// Largest packet number such that every packet up to it was
    /// processed, the value our cumulative ACK frames carry.
    fn cum_ack(&self) -> Option<u8> {
        if !self.peer_seen.contains(&0) {
            return None;
        }
        let mut n = 0u8;
        while n < u8::MAX && self.peer_seen.contains(&(n + 1)) {
            n += 1;
        }
        Some(n)
    }

    fn apply_ack(&mut self, largest: u8) {
        self.unacked.retain(|&pn, _| pn > largest);
    }

    /// Build and stage one packet. A due acknowledgement is
    /// piggybacked in front; ack-eliciting packets are retained for
    /// retransmission under their packet number.
    fn send_packet(&mut self, io: &mut EndpointIo, kind: PacketKind, mut frames: Vec<Frame>) {
        if self.ack_due {
            if let Some(largest) = self.cum_ack() {
                frames.insert(0, Frame::Ack { largest });
                self.ack_due = false;
            }
        }
        if frames.is_empty() {
            return;
        }
        let pn = self.next_pn;
        self.next_pn += 1;
        let header = match kind {
            PacketKind::Initial(version) => {
                Header::Long { ptype: LongType::Initial, version, pn }
            }
            PacketKind::HandshakeLong => Header::Long {
                ptype: LongType::Handshake,
                version: wire::version_bytes(wire::VERSION_ONE),
                pn,
            },
            PacketKind::Short => Header::Short { pn },
        };
        let payload = wire::encode(&header, &frames);
        if frames.iter().any(Frame::is_eliciting) {
            self.unacked.insert(pn, payload.clone());
        }
        io.send(payload);
    }

    fn flush_ack(&mut self, io: &mut EndpointIo) {
        if self.ack_due && self.cum_ack().is_some() {
            self.send_packet(io, PacketKind::Short, Vec::new());
        }
    }

    pub fn advance(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
    ) -> Result<Progress, Interrupt> {
        if self.phase.is_terminal() {
            return Ok(Progress::Blocked);
        }
        if let Some(dg) = io.take_inbound() {
            self.tick_count = 0;
            if let Some(fault) = self.process_datagram(ctx, io, &dg.payload)? {
                return Ok(Progress::Fault(fault));
            }
            self.flush_ack(io);
            return Ok(if self.phase.is_terminal() {
                Progress::Finished
            } else {
                Progress::Progressed
            });
        }
        self.app_step(ctx, io)
    }

    /// App-driven work when no datagram is pending: connect, send the
    /// request, or close, at most one action per activation.
    fn app_step(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
    ) -> Result<Progress, Interrupt> {
        match self.role {
            Role::Client => {
                if self.phase == Phase::Idle {
                    self.connect(ctx, io)?;
                    return Ok(Progress::Progressed);
                }
                if self.phase == Phase::Established {
                    if self.scenario.sends_request() && !self.request_sent {
                        self.send_request(ctx, io);
                        return Ok(Progress::Progressed);
                    }
                    let stream_done = self
                        .streams
                        .get(&STREAM_ID)
                        .is_some_and(|s| s.fin_received);
                    let ready = match self.scenario {
                        Scenario::S1 => true,
                        Scenario::S2 | Scenario::S3 => stream_done,
                    };
                    if ready {
                        return Ok(match self.close_connection(ctx, io) {
                            Some(fault) => Progress::Fault(fault),
                            None => Progress::Progressed,
                        });
                    }
                }
                Ok(Progress::Blocked)
            }
            Role::Server => {
                if self.response_pending && self.phase == Phase::Established {
                    self.emit_response(ctx, io);
                    return Ok(Progress::Progressed);
                }
                Ok(Progress::Blocked)
            }
        }
    }

    fn connect(&mut self, ctx: &mut StepCtx<'_>, io: &mut EndpointIo) -> Result<(), Interrupt> {
        let proposed: [PayloadByte; 4] = if self.symbolic_version {
            [
                PayloadByte::Symbolic(ctx.fresh_byte()?),
                PayloadByte::Symbolic(ctx.fresh_byte()?),
                PayloadByte::Symbolic(ctx.fresh_byte()?),
                PayloadByte::Symbolic(ctx.fresh_byte()?),
            ]
        } else {
            wire::version_bytes(wire::VERSION_ONE)
        };
        let version = if self.defects.d3 {
            proposed
        } else if self.proposal_is_reserved(ctx, &proposed)? {
            ctx.probe(self.names().version_fallback);
            wire::version_bytes(wire::VERSION_ONE)
        } else {
            proposed
        };
        self.version_in_use = Some(version);
        ctx.probe(self.names().connect);
        debug_assert!(self.phase.can_move_to(Phase::Connecting));
        self.phase = Phase::Connecting;
        self.send_packet(
            io,
            PacketKind::Initial(version),
            vec![Frame::Handshake { stage: wire::STAGE_HELLO }],
        );
        Ok(())
    }

    /// The connect-path validation D3 skips: proposed versions whose
    /// four bytes all match the reserved nibble are refused and
    /// replaced by the shipped version.
    fn proposal_is_reserved(
        &self,
        ctx: &mut StepCtx<'_>,
        version: &[PayloadByte; 4],
    ) -> Result<bool, Interrupt> {
        for byte in version {
            if !wire::nibble_is(ctx, CLIENT_VERSION_GUARD, *byte, 0x0f, wire::RESERVED_NIBBLE)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn send_request(&mut self, ctx: &mut StepCtx<'_>, io: &mut EndpointIo) {
        let data = Scenario::REQUEST.to_vec();
        let len = data.len() as u64;
        let rec = self.streams.entry(STREAM_ID).or_default();
        rec.bytes_sent += len;
        rec.fin_sent = true;
        rec.settle_state();
        self.app_sent += len;
        self.request_sent = true;
        ctx.probe(self.names().request_sent);
        self.send_packet(
            io,
            PacketKind::Short,
            vec![Frame::Stream { sid: STREAM_ID, fin: true, offset: 0, data }],
        );
    }

    fn close_connection(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
    ) -> Option<FaultSignature> {
        self.close_code = Some(wire::CLOSE_NORMAL);
        ctx.probe(self.names().close_sent);
        if let Some(fault) = self.transition(ctx, Phase::Closing) {
            return Some(fault);
        }
        self.send_packet(io, PacketKind::Short, vec![Frame::Close { code: wire::CLOSE_NORMAL }]);
        None
    }

    fn emit_response(&mut self, ctx: &mut StepCtx<'_>, io: &mut EndpointIo) {
        self.responded = true;
        self.response_pending = false;
        let data = if self.scenario.has_response() {
            Scenario::RESPONSE.to_vec()
        } else {
            Vec::new()
        };
        let len = data.len() as u64;
        let rec = self.streams.entry(STREAM_ID).or_default();
        rec.bytes_sent += len;
        rec.fin_sent = true;
        rec.settle_state();
        self.app_sent += len;
        ctx.probe(self.names().response_sent);
        self.send_packet(
            io,
            PacketKind::Short,
            vec![Frame::Stream { sid: STREAM_ID, fin: true, offset: 0, data }],
        );
    }

    fn process_datagram(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        sealed: &[PayloadByte],
    ) -> Result<Option<FaultSignature>, Interrupt> {
        let payload = match crypto::open(sealed, |v| ctx.witness_peek(v)) {
            Ok(p) => p,
            Err(_) => {
                ctx.probe(self.names().reject);
                return Ok(None);
            }
        };
        let sites = WireSites::for_role(self.role);
        if payload.len() < wire::SHORT_HEADER_LEN {
            ctx.probe(self.names().reject);
            return Ok(None);
        }
        let b0 = payload[0];
        if !wire::bit_clear(ctx, sites.header_form, b0, wire::HEADER_FORM_BIT)? {
            self.process_long(ctx, io, sites, &payload)
        } else {
            self.process_short(ctx, io, sites, &payload)
        }
    }

    fn process_long(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        sites: &WireSites,
        payload: &[PayloadByte],
    ) -> Result<Option<FaultSignature>, Interrupt> {
        if payload.len() < wire::LONG_HEADER_LEN {
            ctx.probe(self.names().reject);
            return Ok(None);
        }
        let b0 = payload[0];
        let ptype = if wire::nibble_is(ctx, sites.long_type, b0, wire::LONG_TYPE_MASK, 0)? {
            LongType::Initial
        } else if wire::nibble_is(ctx, sites.long_type, b0, wire::LONG_TYPE_MASK, 1)? {
            LongType::Handshake
        } else if wire::nibble_is(ctx, sites.long_type, b0, wire::LONG_TYPE_MASK, 2)? {
            LongType::VersionNegotiation
        } else {
            ctx.probe(self.names().reject);
            return Ok(None);
        };
        if !wire::cid_matches(ctx, payload, 5)? {
            ctx.probe(self.names().reject);
            return Ok(None);
        }
        let version = [payload[1], payload[2], payload[3], payload[4]];
        let pn = wire::to_concrete(ctx, payload[9])?;
        let body = &payload[wire::LONG_HEADER_LEN..];
        match ptype {
            LongType::Initial => self.on_initial(ctx, io, sites, version, pn, body),
            LongType::Handshake => self.on_handshake_packet(ctx, io, sites, version, pn, body),
            LongType::VersionNegotiation => self.on_version_negotiation(ctx, io, body),
        }
    }

    fn process_short(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        sites: &WireSites,
        payload: &[PayloadByte],
    ) -> Result<Option<FaultSignature>, Interrupt> {
        let b0 = payload[0];
        if wire::bit_clear(ctx, sites.fixed_bit, b0, wire::SHORT_FIXED_BIT)? {
            ctx.probe(self.names().reject);
            return Ok(None);
        }
        if !wire::cid_matches(ctx, payload, 1)? {
            ctx.probe(self.names().reject);
            return Ok(None);
        }
        if self.phase == Phase::Idle {
            ctx.probe(self.names().stateless_ignore);
            return Ok(None);
        }
        let pn = wire::to_concrete(ctx, payload[5])?;
        let body = &payload[wire::SHORT_HEADER_LEN..];
        self.ingest_frames(ctx, io, sites, pn, body)
    }

    fn on_initial(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        sites: &WireSites,
        version: [PayloadByte; 4],
        pn: u8,
        body: &[PayloadByte],
    ) -> Result<Option<FaultSignature>, Interrupt> {
        match self.role {
            Role::Server => {
                if !wire::version_is_one(ctx, sites, &version)? {
                    if wire::version_is_reserved(ctx, sites, &version)? {
                        ctx.probe(self.names().reserved_ignored);
                        return Ok(None);
                    }
                    ctx.probe(self.names().vn_sent);
                    self.send_version_negotiation(io);
                    return Ok(None);
                }
                if self.phase == Phase::Idle {
                    if let Some(fault) = self.transition(ctx, Phase::Connecting) {
                        return Ok(Some(fault));
                    }
                    self.version_in_use = Some(version);
                    ctx.probe(self.names().stage0);
                }
                self.ingest_frames(ctx, io, sites, pn, body)
            }
            Role::Client => {
                if !wire::version_is_one(ctx, sites, &version)? {
                    ctx.probe(self.names().reject);
                    return Ok(None);
                }
                if self.phase == Phase::Idle {
                    ctx.probe(self.names().stateless_ignore);
                    return Ok(None);
                }
                self.ingest_frames(ctx, io, sites, pn, body)
            }
        }
    }

    fn on_handshake_packet(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        sites: &WireSites,
        version: [PayloadByte; 4],
        pn: u8,
        body: &[PayloadByte],
    ) -> Result<Option<FaultSignature>, Interrupt> {
        if !wire::version_is_one(ctx, sites, &version)? {
            ctx.probe(self.names().reject);
            return Ok(None);
        }
        if self.phase == Phase::Idle {
            ctx.probe(self.names().stateless_ignore);
            return Ok(None);
        }
        self.ingest_frames(ctx, io, sites, pn, body)
    }

    fn send_version_negotiation(&mut self, io: &mut EndpointIo) {
        let pn = self.next_pn;
        self.next_pn += 1;
        let header = Header::Long {
            ptype: LongType::VersionNegotiation,
            version: wire::version_bytes(wire::VERSION_NONE),
            pn,
        };
        let mut payload = wire::encode(&header, &[]);
        payload.extend(wire::VERSION_ONE.iter().map(|&b| PayloadByte::Concrete(b)));
        io.send(payload);
    }

    fn on_version_negotiation(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        body: &[PayloadByte],
    ) -> Result<Option<FaultSignature>, Interrupt> {
        if self.role == Role::Server || self.phase != Phase::Connecting || self.vn_retried {
            ctx.probe(self.names().stateless_ignore);
            return Ok(None);
        }
        let mut offered = Vec::new();
        for chunk in body.chunks_exact(4) {
            let mut v = [0u8; 4];
            for (slot, byte) in v.iter_mut().zip(chunk) {
                *slot = wire::to_concrete(ctx, *byte)?;
            }
            offered.push(v);
        }
        if !offered.contains(&wire::VERSION_ONE) {
            ctx.probe(self.names().reject);
            return Ok(self.transition(ctx, Phase::Failed));
        }
        ctx.probe(self.names().vn_retry);
        self.vn_retried = true;
        self.version_in_use = Some(wire::version_bytes(wire::VERSION_ONE));
        self.unacked.clear();
        self.send_packet(
            io,
            PacketKind::Initial(wire::version_bytes(wire::VERSION_ONE)),
            vec![Frame::Handshake { stage: wire::STAGE_HELLO }],
        );
        Ok(None)
    }

    /// Shared tail of packet acceptance: duplicate filtering, frame
    /// parsing, and frame application. Frames of a packet parse fully
    /// before any of them takes effect.
    fn ingest_frames(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        sites: &WireSites,
        pn: u8,
        body: &[PayloadByte],
    ) -> Result<Option<FaultSignature>, Interrupt> {
        if self.peer_seen.contains(&pn) {
            self.ack_due = true;
            return Ok(None);
        }
        let frames = match wire::parse_frames(ctx, sites, body)? {
            Ok(frames) => frames,
            Err(_) => {
                ctx.probe(self.names().reject);
                return Ok(None);
            }
        };
        self.peer_seen.insert(pn);
        if wire::any_eliciting(&frames) {
            self.ack_due = true;
        }
        for frame in frames {
            if let Some(fault) = self.apply_frame(ctx, io, frame)? {
                return Ok(Some(fault));
            }
        }
        Ok(None)
    }

    fn apply_frame(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        frame: ParsedFrame,
    ) -> Result<Option<FaultSignature>, Interrupt> {
        match frame {
            ParsedFrame::Padding | ParsedFrame::Ping => Ok(None),
            ParsedFrame::Ack { largest } => {
                self.apply_ack(largest);
                Ok(None)
            }
            ParsedFrame::Handshake { stage } => Ok(self.apply_handshake_stage(ctx, io, stage)),
            ParsedFrame::Stream { sid, fin, offset, data } => {
                self.apply_stream(ctx, io, sid, fin, offset, data)
            }
            ParsedFrame::Close { code } => Ok(self.apply_close(ctx, io, code)),
            ParsedFrame::Reset { sid, .. } => {
                if let Some(rec) = self.streams.get_mut(&sid) {
                    rec.state = super::belief::StreamState::Reset;
                }
                Ok(None)
            }
        }
    }

    fn apply_handshake_stage(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        stage: u8,
    ) -> Option<FaultSignature> {
        match (self.role, stage) {
            (Role::Server, wire::STAGE_HELLO) => {
                if !self.hs_reply_sent {
                    self.hs_reply_sent = true;
                    self.send_packet(
                        io,
                        PacketKind::Initial(wire::version_bytes(wire::VERSION_ONE)),
                        vec![Frame::Handshake { stage: wire::STAGE_REPLY }],
                    );
                }
                None
            }
            (Role::Client, wire::STAGE_REPLY) => {
                if self.handshake_complete {
                    return None;
                }
                self.handshake_complete = true;
                self.send_packet(
                    io,
                    PacketKind::HandshakeLong,
                    vec![Frame::Handshake { stage: wire::STAGE_FINISH }],
                );
                let fault = self.transition(ctx, Phase::Established);
                if fault.is_none() {
                    ctx.probe(self.names().established);
                }
                fault
            }
            (Role::Server, wire::STAGE_FINISH) => {
                if self.handshake_complete {
                    return None;
                }
                self.handshake_complete = true;
                let fault = self.transition(ctx, Phase::Established);
                if fault.is_some() {
                    return fault;
                }
                ctx.probe(self.names().established);
                if self.response_pending {
                    self.emit_response(ctx, io);
                }
                None
            }
            _ => None,
        }
    }

    fn apply_stream(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        sid: u8,
        fin: bool,
        offset: u8,
        data: Vec<PayloadByte>,
    ) -> Result<Option<FaultSignature>, Interrupt> {
        let mut bytes = Vec::with_capacity(data.len());
        for byte in data {
            bytes.push(wire::to_concrete(ctx, byte)?);
        }
        let rec = self.streams.entry(sid).or_default();
        if u64::from(offset) == rec.bytes_received {
            rec.bytes_received += bytes.len() as u64;
            self.app_received += bytes.len() as u64;
            self.stream_bufs.entry(sid).or_default().extend(&bytes);
        }
        if fin {
            rec.fin_received = true;
        }
        rec.settle_state();
        let fin_received = rec.fin_received;

        match self.role {
            Role::Server => {
                if sid == STREAM_ID
                    && fin_received
                    && !self.responded
                    && self.scenario.sends_request()
                    && self.stream_bufs.get(&sid).map(Vec::as_slice) == Some(Scenario::REQUEST)
                {
                    ctx.probe(self.names().request_received);
                    if self.handshake_complete {
                        self.emit_response(ctx, io);
                    } else {
                        self.response_pending = true;
                    }
                }
            }
            Role::Client => {
                if sid == STREAM_ID && fin_received {
                    ctx.probe(self.names().response_fin);
                }
            }
        }
        Ok(None)
    }

    fn apply_close(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        code: u8,
    ) -> Option<FaultSignature> {
        match self.phase {
            Phase::Closing => {
                let fault = self.transition(ctx, Phase::Closed);
                if fault.is_none() {
                    ctx.probe(self.names().closed);
                }
                fault
            }
            Phase::Connecting | Phase::Established => {
                self.close_code = Some(code);
                ctx.probe(self.names().close_received);
                self.send_packet(io, PacketKind::Short, vec![Frame::Close { code }]);
                let fault = self.transition(ctx, Phase::Closed);
                if fault.is_none() {
                    ctx.probe(self.names().closed);
                }
                fault
            }
            _ => None,
        }
    }

    pub fn tick(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
    ) -> Result<Progress, Interrupt> {
        if self.phase.is_terminal() {
            return Ok(Progress::Blocked);
        }
        self.tick_count += 1;
        if self.tick_count >= TICKS_TO_TIMEOUT {
            self.timeout_flag = true;
            ctx.probe(self.names().timeout);
            if self.phase == Phase::Closing {
                return Ok(match self.transition(ctx, Phase::Closed) {
                    Some(fault) => Progress::Fault(fault),
                    None => Progress::Finished,
                });
            }
            self.close_code = Some(wire::CLOSE_TIMEOUT);
            self.send_packet(io, PacketKind::Short, vec![Frame::Close {
                code: wire::CLOSE_TIMEOUT,
            }]);
            return Ok(match self.transition(ctx, Phase::Failed) {
                Some(fault) => Progress::Fault(fault),
                None => Progress::Finished,
            });
        }
        if self.tick_count.is_multiple_of(TICKS_TO_RETRANSMIT) {
            if let Some((_, payload)) = self.unacked.iter().next() {
                io.send(payload.clone());
                return Ok(Progress::Progressed);
            }
        }
        Ok(Progress::Blocked)
    }

    pub fn belief(&self) -> BeliefState {
        BeliefState {
            phase: self.phase,
            version_in_use: self.version_in_use,
            streams: self.streams.clone(),
            app_bytes_sent: self.app_sent,
            app_bytes_received: self.app_received,
            close_code: self.close_code,
            timeout_flag: self.timeout_flag,
        }
    }

    pub fn choice_sites(&self) -> Vec<&'static str> {
        let mut sites = WireSites::for_role(self.role).all();
        if self.role == Role::Client && !self.defects.d3 {
            sites.push(CLIENT_VERSION_GUARD);
        }
        sites
    }

    pub fn probe_points(&self) -> Vec<&'static str> {
        let n = self.names();
        let mut probes = vec![
            n.established,
            n.close_received,
            n.closed,
            n.timeout,
            n.stateless_ignore,
            n.reject,
            n.transition_guard,
        ];
        match self.role {
            Role::Client => {
                probes.extend([n.connect, n.vn_retry, n.close_sent, n.response_fin]);
                if self.scenario.sends_request() {
                    probes.push(n.request_sent);
                }
                if !self.defects.d3 {
                    probes.push(n.version_fallback);
                }
            }
            Role::Server => {
                probes.extend([n.stage0, n.vn_sent, n.reserved_ignored]);
                if self.scenario.sends_request() {
                    probes.extend([n.request_received, n.response_sent]);
                }
            }
        }
        probes
    }
}
