//! Event-loop-driven MiniQUIC implementation.
//!
//! Architecture mirrors a libev-style program: a socket watcher is
//! registered at construction, datagrams route through the loop's
//! dispatch, packet types select handlers from a dispatch chain, and
//! application actions run as deferred jobs queued by handlers. The
//! protocol logic matches the pull implementation: the two should be
//! wire-compatible in both directions.
//!
//! This implementation hosts four seeded defects, all off unless
//! armed: D1 drops the empty-FIN notification for response-less
//! stream closes, D2 releases the io watcher at teardown without
//! stopping it or forgetting its id, D4 discards an in-progress
//! handshake record when a short packet arrives early, and D5 routes
//! unknown long-packet types into a bogus handler instead of the
//! guarded reject.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::explore::{FaultKind, FaultSignature, Interrupt, Party, StepCtx};
use crate::netmodel::{crypto, Dispatch, EventLoop, PayloadByte, WatcherId};

use super::belief::{BeliefState, Phase, StreamBelief, StreamState};
use super::defect::DefectSet;
use super::wire::{self, Frame, Header, LongType, ParsedFrame, WireSites};
use super::{EndpointIo, Progress, Role, Scenario};

/// The single stream id the scenarios use.
const STREAM_ID: u8 = 0;

const TICKS_TO_RETRANSMIT: u8 = 2;
const TICKS_TO_TIMEOUT: u8 = 6;

/// Callback tags registered with the event loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum LoopTag {
    SockRead,
}

/// Deferred application work queued by handlers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Job {
    Connect,
    Request,
    CloseLocal,
}

/// Transcript of an in-progress handshake. Created when the
/// handshake starts, consumed when it completes; stage 2 cannot be
/// verified without it.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct HandshakeRecord {
    stages: Vec<u8>,
}

struct Names {
    connect: &'static str,
    version_fallback: &'static str,
    vn_retry: &'static str,
    vn_sent: &'static str,
    reserved_ignored: &'static str,
    accept: &'static str,
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
    io_dispatch: &'static str,
    invalid_type_guard: &'static str,
    hs_record_missing: &'static str,
    hs_discarded: &'static str,
    silent_stream_close: &'static str,
    dispatch_slot: &'static str,
}

const CLIENT_NAMES: Names = Names {
    connect: "loop.client.connect",
    version_fallback: "loop.client.version_fallback",
    vn_retry: "loop.client.vn_retry",
    vn_sent: "loop.client.vn_sent",
    reserved_ignored: "loop.client.reserved_ignored",
    accept: "loop.client.accept",
    established: "loop.client.established",
    request_sent: "loop.client.request_sent",
    request_received: "loop.client.request_received",
    response_sent: "loop.client.response_sent",
    response_fin: "loop.client.response_fin",
    close_sent: "loop.client.close_sent",
    close_received: "loop.client.close_received",
    closed: "loop.client.closed",
    timeout: "loop.client.timeout",
    stateless_ignore: "loop.client.stateless_ignore",
    reject: "loop.client.reject",
    transition_guard: "loop.client.transition_guard",
    io_dispatch: "loop.client.io_dispatch",
    invalid_type_guard: "loop.client.invalid_type_guard",
    hs_record_missing: "loop.client.hs_record_missing",
    hs_discarded: "loop.client.hs_discarded",
    silent_stream_close: "loop.client.silent_stream_close",
    dispatch_slot: "loop.client.dispatch_slot",
};

const SERVER_NAMES: Names = Names {
    connect: "loop.server.connect",
    version_fallback: "loop.server.version_fallback",
    vn_retry: "loop.server.vn_retry",
    vn_sent: "loop.server.vn_sent",
    reserved_ignored: "loop.server.reserved_ignored",
    accept: "loop.server.accept",
    established: "loop.server.established",
    request_sent: "loop.server.request_sent",
    request_received: "loop.server.request_received",
    response_sent: "loop.server.response_sent",
    response_fin: "loop.server.response_fin",
    close_sent: "loop.server.close_sent",
    close_received: "loop.server.close_received",
    closed: "loop.server.closed",
    timeout: "loop.server.timeout",
    stateless_ignore: "loop.server.stateless_ignore",
    reject: "loop.server.reject",
    transition_guard: "loop.server.transition_guard",
    io_dispatch: "loop.server.io_dispatch",
    invalid_type_guard: "loop.server.invalid_type_guard",
    hs_record_missing: "loop.server.hs_record_missing",
    hs_discarded: "loop.server.hs_discarded",
    silent_stream_close: "loop.server.silent_stream_close",
    dispatch_slot: "loop.server.dispatch_slot",
};

const CLIENT_VERSION_GUARD: &str = "loop.client.version_guard";
const D5_FLAG_SITE: &str = "loop.server.d5_flags";

enum PacketKind {
    Initial([PayloadByte; 4]),
    HandshakeLong,
    Short,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopEndpoint {
    role: Role,
    scenario: Scenario,
    defects: DefectSet,
    ev: EventLoop<LoopTag>,
    io_watcher: Option<WatcherId>,
    jobs: Vec<Job>,
    phase: Phase,
    symbolic_version: bool,
    version_in_use: Option<[PayloadByte; 4]>,
    vn_retried: bool,
    send_pn: u8,
    sent_store: BTreeMap<u8, Vec<PayloadByte>>,
    recv_log: BTreeSet<u8>,
    ack_owed: bool,
    idle_ticks: u8,
    hs_record: Option<HandshakeRecord>,
    hs_replied: bool,
    hs_done: bool,
    streams: BTreeMap<u8, StreamBelief>,
    inbox: BTreeMap<u8, Vec<u8>>,
    app_sent: u64,
    app_received: u64,
    request_sent: bool,
    responded: bool,
    response_queued: bool,
    close_code: Option<u8>,
    timeout_flag: bool,
}

impl LoopEndpoint {
    pub fn new(role: Role, scenario: Scenario, defects: DefectSet) -> Self {
        let mut ev = EventLoop::default();
        let io_watcher = Some(ev.register(LoopTag::SockRead));
        let jobs = match role {
            Role::Client => vec![Job::Connect],
            Role::Server => Vec::new(),
        };
        LoopEndpoint {
            role,
            scenario,
            defects,
            ev,
            io_watcher,
            jobs,
            phase: Phase::Idle,
            symbolic_version: false,
            version_in_use: None,
            vn_retried: false,
            send_pn: 0,
            sent_store: BTreeMap::new(),
            recv_log: BTreeSet::new(),
            ack_owed: false,
            idle_ticks: 0,
            hs_record: None,
            hs_replied: false,
            hs_done: false,
            streams: BTreeMap::new(),
            inbox: BTreeMap::new(),
            app_sent: 0,
            app_received: 0,
            request_sent: false,
            responded: false,
            response_queued: false,
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

    pub fn set_symbolic_version(&mut self, symbolic: bool) {
        self.symbolic_version = symbolic;
    }

    /// Whether the endpoint still holds a dispatch surface for
    /// incoming events. After a clean teardown this is false; D2
    /// leaves the released watcher id behind.
    pub fn retains_dispatch(&self) -> bool {
        self.io_watcher.is_some()
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

    /// Close out the connection's io resources. The clean path stops
    /// the watcher, releases it, and forgets the id. Under D2 the
    /// watcher is released while still registered as active and the
    /// id stays behind, so later events still route to it.
    fn teardown(&mut self) {
        if let Some(w) = self.io_watcher {
            if self.defects.d2 {
                self.ev.release(w);
            } else {
                self.ev.stop(w);
                self.ev.release(w);
                self.io_watcher = None;
            }
        }
    }

    fn cum_ack(&self) -> Option<u8> {
        if !self.recv_log.contains(&0) {
            return None;
        }
        let mut n = 0u8;
        while n < u8::MAX && self.recv_log.contains(&(n + 1)) {
            n += 1;
        }
        Some(n)
    }

    fn push_packet(&mut self, io: &mut EndpointIo, kind: PacketKind, mut frames: Vec<Frame>) {
        if self.ack_owed {
            if let Some(largest) = self.cum_ack() {
                frames.insert(0, Frame::Ack { largest });
                self.ack_owed = false;
            }
        }
        if frames.is_empty() {
            return;
        }
        let pn = self.send_pn;
        self.send_pn += 1;
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
            self.sent_store.insert(pn, payload.clone());
        }
        io.send(payload);
    }

    fn flush_ack(&mut self, io: &mut EndpointIo) {
        if self.ack_owed && self.cum_ack().is_some() {
            self.push_packet(io, PacketKind::Short, Vec::new());
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
        if io.has_inbound() {
            self.idle_ticks = 0;
            return self.on_socket_event(ctx, io);
        }
        if !self.jobs.is_empty() {
            let job = self.jobs.remove(0);
            return self.run_job(ctx, io, job);
        }
        Ok(Progress::Blocked)
    }

    /// Feed one already-queued datagram through the loop's dispatch.
    /// Used by the harness when a terminal endpoint still retains a
    /// dispatch surface and data sits in its socket.
    pub fn drain_one(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
    ) -> Result<Progress, Interrupt> {
        if io.has_inbound() {
            self.on_socket_event(ctx, io)
        } else {
            Ok(Progress::Blocked)
        }
    }

    fn on_socket_event(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
    ) -> Result<Progress, Interrupt> {
        let dg = io.take_inbound().expect("socket event without a datagram");
        let Some(w) = self.io_watcher else {
            ctx.probe(self.names().stateless_ignore);
            return Ok(Progress::Progressed);
        };
        match self.ev.dispatch(w) {
            Dispatch::Invoke(LoopTag::SockRead) => {
                let before = self.phase;
                if let Some(fault) = self.on_readable(ctx, io, &dg.payload)? {
                    return Ok(Progress::Fault(fault));
                }
                self.flush_ack(io);
                Ok(if self.phase.is_terminal() && before != self.phase {
                    Progress::Finished
                } else {
                    Progress::Progressed
                })
            }
            Dispatch::Stopped => Ok(Progress::Progressed),
            Dispatch::ReleasedFault => {
                ctx.probe(self.names().io_dispatch);
                let tag = if self.defects.d2 { Some("d2") } else { None };
                Ok(Progress::Fault(self.fault(
                    FaultKind::LifecycleFault,
                    self.names().io_dispatch,
                    tag,
                )))
            }
        }
    }

    fn run_job(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        job: Job,
    ) -> Result<Progress, Interrupt> {
        match job {
            Job::Connect => {
                if self.phase == Phase::Idle {
                    self.connect(ctx, io)?;
                }
                Ok(Progress::Progressed)
            }
            Job::Request => {
                if self.phase == Phase::Established && !self.request_sent {
                    self.send_request(ctx, io);
                }
                Ok(Progress::Progressed)
            }
            Job::CloseLocal => {
                if matches!(self.phase, Phase::Connecting | Phase::Established) {
                    self.close_code = Some(wire::CLOSE_NORMAL);
                    ctx.probe(self.names().close_sent);
                    if let Some(fault) = self.transition(ctx, Phase::Closing) {
                        return Ok(Progress::Fault(fault));
                    }
                    self.push_packet(io, PacketKind::Short, vec![Frame::Close {
                        code: wire::CLOSE_NORMAL,
                    }]);
                }
                Ok(Progress::Progressed)
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
        let mut reserved = true;
        for byte in &proposed {
            if !wire::nibble_is(ctx, CLIENT_VERSION_GUARD, *byte, 0x0f, wire::RESERVED_NIBBLE)? {
                reserved = false;
                break;
            }
        }
        let version = if reserved {
            ctx.probe(self.names().version_fallback);
            wire::version_bytes(wire::VERSION_ONE)
        } else {
            proposed
        };
        self.version_in_use = Some(version);
        self.hs_record = Some(HandshakeRecord { stages: Vec::new() });
        ctx.probe(self.names().connect);
        debug_assert!(self.phase.can_move_to(Phase::Connecting));
        self.phase = Phase::Connecting;
        self.push_packet(
            io,
            PacketKind::Initial(version),
            vec![Frame::Handshake { stage: wire::STAGE_HELLO }],
        );
        Ok(())
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
        self.push_packet(
            io,
            PacketKind::Short,
            vec![Frame::Stream { sid: STREAM_ID, fin: true, offset: 0, data }],
        );
    }

    fn on_readable(
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
            self.on_long_packet(ctx, io, sites, &payload)
        } else {
            self.on_short_packet(ctx, io, sites, &payload)
        }
    }

    fn on_long_packet(
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
        } else if self.defects.d5 {
            return Ok(Some(self.bogus_dispatch(ctx, b0)?));
        } else {
            ctx.probe(self.names().invalid_type_guard);
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
            LongType::Initial => self.on_initial_pkt(ctx, io, sites, version, pn, body),
            LongType::Handshake => self.on_handshake_pkt(ctx, io, sites, version, pn, body),
            LongType::VersionNegotiation => self.on_vn_pkt(ctx, io, body),
        }
    }

    /// D5's handler slot for unknown long-packet types. The clean
    /// build never gets here; the defective one inspects a handful of
    /// flag bits off the first byte and then hits an unimplemented
    /// branch.
    fn bogus_dispatch(
        &self,
        ctx: &mut StepCtx<'_>,
        b0: PayloadByte,
    ) -> Result<FaultSignature, Interrupt> {
        for mask in [0x40, 0x20, 0x10, 0x08, 0x04] {
            let _ = wire::bit_clear(ctx, D5_FLAG_SITE, b0, mask)?;
        }
        ctx.probe(self.names().dispatch_slot);
        Ok(self.fault(FaultKind::GuardFault, self.names().dispatch_slot, Some("d5")))
    }

    fn on_initial_pkt(
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
                    self.hs_record = Some(HandshakeRecord { stages: Vec::new() });
                    ctx.probe(self.names().accept);
                }
                self.deliver_frames(ctx, io, sites, pn, body)
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
                self.deliver_frames(ctx, io, sites, pn, body)
            }
        }
    }

    fn on_handshake_pkt(
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
        self.deliver_frames(ctx, io, sites, pn, body)
    }

    fn send_version_negotiation(&mut self, io: &mut EndpointIo) {
        let pn = self.send_pn;
        self.send_pn += 1;
        let header = Header::Long {
            ptype: LongType::VersionNegotiation,
            version: wire::version_bytes(wire::VERSION_NONE),
            pn,
        };
        let mut payload = wire::encode(&header, &[]);
        payload.extend(wire::VERSION_ONE.iter().map(|&b| PayloadByte::Concrete(b)));
        io.send(payload);
    }

    fn on_vn_pkt(
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
        self.sent_store.clear();
        self.hs_record = Some(HandshakeRecord { stages: Vec::new() });
        self.push_packet(
            io,
            PacketKind::Initial(wire::version_bytes(wire::VERSION_ONE)),
            vec![Frame::Handshake { stage: wire::STAGE_HELLO }],
        );
        Ok(None)
    }

    fn on_short_packet(
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
        if self.defects.d4 && self.hs_record.is_some() && !self.hs_done {
            self.hs_record = None;
            ctx.probe(self.names().hs_discarded);
        }
        let pn = wire::to_concrete(ctx, payload[5])?;
        let body = &payload[wire::SHORT_HEADER_LEN..];
        self.deliver_frames(ctx, io, sites, pn, body)
    }

    fn deliver_frames(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        sites: &WireSites,
        pn: u8,
        body: &[PayloadByte],
    ) -> Result<Option<FaultSignature>, Interrupt> {
        if self.recv_log.contains(&pn) {
            self.ack_owed = true;
            return Ok(None);
        }
        let frames = match wire::parse_frames(ctx, sites, body)? {
            Ok(frames) => frames,
            Err(_) => {
                ctx.probe(self.names().reject);
                return Ok(None);
            }
        };
        self.recv_log.insert(pn);
        if wire::any_eliciting(&frames) {
            self.ack_owed = true;
        }
        for frame in frames {
            if let Some(fault) = self.handle_frame(ctx, io, frame)? {
                return Ok(Some(fault));
            }
        }
        Ok(None)
    }

    fn handle_frame(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        frame: ParsedFrame,
    ) -> Result<Option<FaultSignature>, Interrupt> {
        match frame {
            ParsedFrame::Padding | ParsedFrame::Ping => Ok(None),
            ParsedFrame::Ack { largest } => {
                self.sent_store.retain(|&pn, _| pn > largest);
                Ok(None)
            }
            ParsedFrame::Handshake { stage } => Ok(self.handle_stage(ctx, io, stage)),
            ParsedFrame::Stream { sid, fin, offset, data } => {
                self.handle_stream(ctx, io, sid, fin, offset, data)
            }
            ParsedFrame::Close { code } => Ok(self.handle_close(ctx, io, code)),
            ParsedFrame::Reset { sid, .. } => {
                if let Some(rec) = self.streams.get_mut(&sid) {
                    rec.state = StreamState::Reset;
                }
                Ok(None)
            }
        }
    }

    fn handle_stage(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        stage: u8,
    ) -> Option<FaultSignature> {
        match (self.role, stage) {
            (Role::Server, wire::STAGE_HELLO) => {
                if let Some(rec) = &mut self.hs_record {
                    if !rec.stages.contains(&wire::STAGE_HELLO) {
                        rec.stages.push(wire::STAGE_HELLO);
                    }
                }
                if !self.hs_replied {
                    self.hs_replied = true;
                    self.push_packet(
                        io,
                        PacketKind::Initial(wire::version_bytes(wire::VERSION_ONE)),
                        vec![Frame::Handshake { stage: wire::STAGE_REPLY }],
                    );
                }
                None
            }
            (Role::Client, wire::STAGE_REPLY) => {
                if self.hs_done {
                    return None;
                }
                self.hs_done = true;
                self.hs_record = None;
                self.push_packet(
                    io,
                    PacketKind::HandshakeLong,
                    vec![Frame::Handshake { stage: wire::STAGE_FINISH }],
                );
                let fault = self.transition(ctx, Phase::Established);
                if fault.is_some() {
                    return fault;
                }
                ctx.probe(self.names().established);
                self.jobs.push(match self.scenario {
                    Scenario::S1 => Job::CloseLocal,
                    Scenario::S2 | Scenario::S3 => Job::Request,
                });
                None
            }
            (Role::Server, wire::STAGE_FINISH) => match (self.hs_record.take(), self.hs_done) {
                (Some(mut rec), _) => {
                    rec.stages.push(wire::STAGE_FINISH);
                    self.hs_done = true;
                    let fault = self.transition(ctx, Phase::Established);
                    if fault.is_some() {
                        return fault;
                    }
                    ctx.probe(self.names().established);
                    if self.response_queued {
                        self.push_response(ctx, io);
                    }
                    None
                }
                (None, true) => None,
                (None, false) => {
                    ctx.probe(self.names().hs_record_missing);
                    let tag = if self.defects.d4 { Some("d4") } else { None };
                    Some(self.fault(
                        FaultKind::GuardFault,
                        self.names().hs_record_missing,
                        tag,
                    ))
                }
            },
            _ => None,
        }
    }

    fn handle_stream(
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
        let was_done = rec.fin_received;
        if u64::from(offset) == rec.bytes_received {
            rec.bytes_received += bytes.len() as u64;
            self.app_received += bytes.len() as u64;
            self.inbox.entry(sid).or_default().extend(&bytes);
        }
        if fin {
            rec.fin_received = true;
        }
        rec.settle_state();
        let newly_done = !was_done && rec.fin_received;

        match self.role {
            Role::Server => {
                if sid == STREAM_ID
                    && newly_done
                    && !self.responded
                    && self.scenario.sends_request()
                    && self.inbox.get(&sid).map(Vec::as_slice) == Some(Scenario::REQUEST)
                {
                    ctx.probe(self.names().request_received);
                    if self.hs_done {
                        self.push_response(ctx, io);
                    } else {
                        self.response_queued = true;
                    }
                }
            }
            Role::Client => {
                if sid == STREAM_ID && newly_done {
                    ctx.probe(self.names().response_fin);
                    self.jobs.push(Job::CloseLocal);
                }
            }
        }
        Ok(None)
    }

    fn push_response(&mut self, ctx: &mut StepCtx<'_>, io: &mut EndpointIo) {
        self.responded = true;
        self.response_queued = false;
        if !self.scenario.has_response() && self.defects.d1 {
            // D1: there is no data to write, so nothing reminds this
            // path to send the closing empty FIN. The stream is marked
            // done locally and the peer is never told.
            let rec = self.streams.entry(STREAM_ID).or_default();
            rec.state = StreamState::Closed;
            ctx.probe(self.names().silent_stream_close);
            return;
        }
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
        self.push_packet(
            io,
            PacketKind::Short,
            vec![Frame::Stream { sid: STREAM_ID, fin: true, offset: 0, data }],
        );
    }

    fn handle_close(
        &mut self,
        ctx: &mut StepCtx<'_>,
        io: &mut EndpointIo,
        code: u8,
    ) -> Option<FaultSignature> {
        match self.phase {
            Phase::Closing => {
                let fault = self.transition(ctx, Phase::Closed);
                if fault.is_some() {
                    return fault;
                }
                ctx.probe(self.names().closed);
                self.teardown();
                None
            }
            Phase::Connecting | Phase::Established => {
                self.close_code = Some(code);
                ctx.probe(self.names().close_received);
                self.push_packet(io, PacketKind::Short, vec![Frame::Close { code }]);
                let fault = self.transition(ctx, Phase::Closed);
                if fault.is_some() {
                    return fault;
                }
                ctx.probe(self.names().closed);
                self.teardown();
                None
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
        self.idle_ticks += 1;
        if self.idle_ticks >= TICKS_TO_TIMEOUT {
            self.timeout_flag = true;
            ctx.probe(self.names().timeout);
            if self.phase == Phase::Closing {
                let progress = match self.transition(ctx, Phase::Closed) {
                    Some(fault) => Progress::Fault(fault),
                    None => Progress::Finished,
                };
                self.teardown();
                return Ok(progress);
            }
            self.close_code = Some(wire::CLOSE_TIMEOUT);
            self.push_packet(io, PacketKind::Short, vec![Frame::Close {
                code: wire::CLOSE_TIMEOUT,
            }]);
            let progress = match self.transition(ctx, Phase::Failed) {
                Some(fault) => Progress::Fault(fault),
                None => Progress::Finished,
            };
            self.teardown();
            return Ok(progress);
        }
        if self.idle_ticks.is_multiple_of(TICKS_TO_RETRANSMIT) {
            if let Some((_, payload)) = self.sent_store.iter().next() {
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
        if self.role == Role::Client {
            sites.push(CLIENT_VERSION_GUARD);
        }
        if self.role == Role::Server && self.defects.d5 {
            sites.push(D5_FLAG_SITE);
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
            n.io_dispatch,
        ];
        match self.role {
            Role::Client => {
                probes.extend([
                    n.connect,
                    n.version_fallback,
                    n.vn_retry,
                    n.close_sent,
                    n.response_fin,
                ]);
                if self.scenario.sends_request() {
                    probes.push(n.request_sent);
                }
            }
            Role::Server => {
                probes.extend([
                    n.accept,
                    n.vn_sent,
                    n.reserved_ignored,
                    n.invalid_type_guard,
                    n.hs_record_missing,
                ]);
                if self.scenario.sends_request() {
                    probes.extend([n.request_received, n.response_sent]);
                }
                if self.defects.d1 && !self.scenario.has_response() {
                    probes.push(n.silent_stream_close);
                }
                if self.defects.d4 {
                    probes.push(n.hs_discarded);
                }
                if self.defects.d5 {
                    probes.push(n.dispatch_slot);
                }
            }
        }
        probes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explore::{explore, Limits, StepStatus, Strategy, World};
    use crate::netmodel::{Datagram, WatcherState};

    fn addr(port: u16) -> std::net::SocketAddr {
        use std::net::{IpAddr, Ipv4Addr};
        std::net::SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port)
    }

    fn sealed(header: &Header, frames: &[Frame]) -> Datagram {
        let plain = wire::encode(header, frames);
        Datagram {
            src: addr(1),
            dst: addr(2),
            payload: crypto::seal(&plain, |_| 0),
            transmit_index: 0,
        }
    }

    fn long_initial(pn: u8, frames: &[Frame]) -> Datagram {
        sealed(
            &Header::Long {
                ptype: LongType::Initial,
                version: wire::version_bytes(wire::VERSION_ONE),
                pn,
            },
            frames,
        )
    }

    fn long_finish(pn: u8, frames: &[Frame]) -> Datagram {
        sealed(
            &Header::Long {
                ptype: LongType::Handshake,
                version: wire::version_bytes(wire::VERSION_ONE),
                pn,
            },
            frames,
        )
    }

    fn short(pn: u8, frames: &[Frame]) -> Datagram {
        sealed(&Header::Short { pn }, frames)
    }

    /// Runs a closure as a one-shot world so it gets a live context.
    #[derive(Clone, serde::Serialize)]
    struct Drive {
        ep: LoopEndpoint,
        #[serde(skip)]
        script: fn(&mut LoopEndpoint, &mut StepCtx<'_>) -> Result<StepStatus, Interrupt>,
    }

    impl World for Drive {
        fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt> {
            (self.script)(&mut self.ep, ctx)
        }
        fn choice_sites(&self) -> Vec<&'static str> {
            self.ep.choice_sites()
        }
        fn probe_points(&self) -> Vec<&'static str> {
            self.ep.probe_points()
        }
    }

    fn run_script(
        ep: LoopEndpoint,
        script: fn(&mut LoopEndpoint, &mut StepCtx<'_>) -> Result<StepStatus, Interrupt>,
    ) -> crate::explore::PathStatus {
        let outcome = explore(Drive { ep, script }, Strategy::Dfs, &Limits::default())
            .expect("scripted run should explore");
        assert_eq!(outcome.paths.len(), 1, "concrete scripts take one path");
        outcome.paths[0].status.clone()
    }

    fn feed(
        ep: &mut LoopEndpoint,
        ctx: &mut StepCtx<'_>,
        dg: Datagram,
    ) -> Result<(Progress, Vec<Vec<PayloadByte>>), Interrupt> {
        let mut io = EndpointIo::with_inbound(dg);
        let progress = ep.advance(ctx, &mut io)?;
        Ok((progress, io.outbound))
    }

    fn establish_server(
        ep: &mut LoopEndpoint,
        ctx: &mut StepCtx<'_>,
    ) -> Result<(), Interrupt> {
        feed(ep, ctx, long_initial(0, &[Frame::Handshake { stage: wire::STAGE_HELLO }]))?;
        feed(
            ep,
            ctx,
            long_finish(1, &[Frame::Ack { largest: 0 }, Frame::Handshake {
                stage: wire::STAGE_FINISH,
            }]),
        )?;
        assert_eq!(ep.phase, Phase::Established);
        Ok(())
    }

    #[test]
    fn clean_teardown_forgets_the_watcher() {
        let status = run_script(
            LoopEndpoint::new(Role::Server, Scenario::S1, DefectSet::NONE),
            |ep, ctx| {
                establish_server(ep, ctx)?;
                let (progress, out) =
                    feed(ep, ctx, short(2, &[Frame::Close { code: wire::CLOSE_NORMAL }]))?;
                assert_eq!(progress, Progress::Finished);
                assert_eq!(ep.phase, Phase::Closed);
                assert_eq!(out.len(), 1, "close confirm goes out");
                assert!(!ep.retains_dispatch(), "clean teardown drops the watcher id");
                Ok(StepStatus::FinishedOk)
            },
        );
        assert!(status.is_ok());
    }

    #[test]
    fn d2_leaves_a_released_watcher_behind() {
        let defects = DefectSet::parse("d2").unwrap();
        let status = run_script(
            LoopEndpoint::new(Role::Server, Scenario::S1, defects),
            |ep, ctx| {
                establish_server(ep, ctx)?;
                feed(ep, ctx, short(2, &[Frame::Close { code: wire::CLOSE_NORMAL }]))?;
                assert_eq!(ep.phase, Phase::Closed);
                let w = ep.io_watcher.expect("D2 keeps the watcher id");
                assert_eq!(ep.ev.state(w), WatcherState::Released);

                // A straggler datagram now routes into released memory.
                let mut io = EndpointIo::with_inbound(short(3, &[]));
                let progress = ep.drain_one(ctx, &mut io)?;
                match progress {
                    Progress::Fault(sig) => {
                        assert_eq!(sig.kind, FaultKind::LifecycleFault);
                        assert_eq!(sig.defect_tag.as_deref(), Some("d2"));
                    }
                    other => panic!("expected a lifecycle fault, got {other:?}"),
                }
                Ok(StepStatus::FinishedOk)
            },
        );
        assert!(status.is_ok());
    }

    #[test]
    fn d4_discards_the_handshake_record() {
        let defects = DefectSet::parse("d4").unwrap();
        let status = run_script(
            LoopEndpoint::new(Role::Server, Scenario::S2, defects),
            |ep, ctx| {
                feed(ep, ctx, long_initial(0, &[Frame::Handshake { stage: wire::STAGE_HELLO }]))?;
                assert!(ep.hs_record.is_some());

                // An early short packet hits the defective path.
                feed(ep, ctx, short(1, &[Frame::Ping]))?;
                assert!(ep.hs_record.is_none(), "D4 threw the record away");

                // Stage 2 then trips the guard.
                let (progress, _) = feed(
                    ep,
                    ctx,
                    long_finish(2, &[Frame::Handshake { stage: wire::STAGE_FINISH }]),
                )?;
                match progress {
                    Progress::Fault(sig) => {
                        assert_eq!(sig.kind, FaultKind::GuardFault);
                        assert_eq!(sig.defect_tag.as_deref(), Some("d4"));
                    }
                    other => panic!("expected a guard fault, got {other:?}"),
                }
                Ok(StepStatus::FinishedOk)
            },
        );
        assert!(status.is_ok());
    }

    #[test]
    fn clean_server_survives_early_short_packets() {
        let status = run_script(
            LoopEndpoint::new(Role::Server, Scenario::S2, DefectSet::NONE),
            |ep, ctx| {
                feed(ep, ctx, long_initial(0, &[Frame::Handshake { stage: wire::STAGE_HELLO }]))?;
                feed(ep, ctx, short(1, &[Frame::Ping]))?;
                assert!(ep.hs_record.is_some(), "the record survives early data");
                let (progress, _) = feed(
                    ep,
                    ctx,
                    long_finish(2, &[Frame::Handshake { stage: wire::STAGE_FINISH }]),
                )?;
                assert_eq!(progress, Progress::Progressed);
                assert_eq!(ep.phase, Phase::Established);
                Ok(StepStatus::FinishedOk)
            },
        );
        assert!(status.is_ok());
    }

    #[test]
    fn d1_swallows_the_empty_fin() {
        let defects = DefectSet::parse("d1").unwrap();
        let status = run_script(
            LoopEndpoint::new(Role::Server, Scenario::S2, defects),
            |ep, ctx| {
                establish_server(ep, ctx)?;
                let request = Frame::Stream {
                    sid: STREAM_ID,
                    fin: true,
                    offset: 0,
                    data: Scenario::REQUEST.to_vec(),
                };
                let (_, out) = feed(ep, ctx, short(2, &[request]))?;
                assert_eq!(out.len(), 1, "only the bare ack leaves");
                let bytes: Vec<u8> =
                    out[0].iter().map(|b| b.as_concrete().unwrap()).collect();
                assert_eq!(bytes, vec![0x40, 0, 0, 0, 0x42, 2, 0x02, 0x02]);
                let rec = &ep.streams[&STREAM_ID];
                assert_eq!(rec.state, StreamState::Closed, "locally believed done");
                assert!(!rec.fin_sent, "but no FIN ever went out");
                Ok(StepStatus::FinishedOk)
            },
        );
        assert!(status.is_ok());
    }

    #[test]
    fn clean_s2_server_sends_the_empty_fin() {
        let status = run_script(
            LoopEndpoint::new(Role::Server, Scenario::S2, DefectSet::NONE),
            |ep, ctx| {
                establish_server(ep, ctx)?;
                let request = Frame::Stream {
                    sid: STREAM_ID,
                    fin: true,
                    offset: 0,
                    data: Scenario::REQUEST.to_vec(),
                };
                let (_, out) = feed(ep, ctx, short(2, &[request]))?;
                assert_eq!(out.len(), 1);
                let bytes: Vec<u8> =
                    out[0].iter().map(|b| b.as_concrete().unwrap()).collect();
                assert_eq!(
                    bytes,
                    vec![0x40, 0, 0, 0, 0x42, 2, 0x02, 0x02, 0x04, 0x80, 0x00, 0x00],
                    "ack plus a zero-length FIN stream frame"
                );
                assert!(ep.streams[&STREAM_ID].fin_sent);
                Ok(StepStatus::FinishedOk)
            },
        );
        assert!(status.is_ok());
    }

    /// A long-header packet whose type bits name no known handler:
    /// first byte 0xff, every inspected flag bit set.
    fn unknown_type_packet() -> Datagram {
        let mut plain = wire::encode(
            &Header::Long {
                ptype: LongType::Initial,
                version: wire::version_bytes(wire::VERSION_ONE),
                pn: 0,
            },
            &[],
        );
        plain[0] = PayloadByte::Concrete(0xff);
        Datagram {
            src: addr(1),
            dst: addr(2),
            payload: crypto::seal(&plain, |_| 0),
            transmit_index: 0,
        }
    }

    #[test]
    fn d5_routes_unknown_types_into_the_bogus_handler() {
        let defects = DefectSet::parse("d5").unwrap();
        let status = run_script(
            LoopEndpoint::new(Role::Server, Scenario::S1, defects),
            |ep, ctx| {
                let (progress, _) = feed(ep, ctx, unknown_type_packet())?;
                match progress {
                    Progress::Fault(sig) => {
                        assert_eq!(sig.kind, FaultKind::GuardFault);
                        assert_eq!(sig.defect_tag.as_deref(), Some("d5"));
                    }
                    other => panic!("expected a guard fault, got {other:?}"),
                }
                Ok(StepStatus::FinishedOk)
            },
        );
        assert!(status.is_ok());
    }

    #[test]
    fn clean_server_rejects_unknown_types_gracefully() {
        let status = run_script(
            LoopEndpoint::new(Role::Server, Scenario::S1, DefectSet::NONE),
            |ep, ctx| {
                let (progress, out) = feed(ep, ctx, unknown_type_packet())?;
                assert_eq!(progress, Progress::Progressed);
                assert!(out.is_empty(), "guarded reject stays quiet");
                Ok(StepStatus::FinishedOk)
            },
        );
        assert!(status.is_ok());
    }
}
