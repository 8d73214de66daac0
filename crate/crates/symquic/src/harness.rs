//! The interop world: two endpoints, the socket table, and the
//! adversarial channel, advanced in lockstep as one deterministic
//! state machine.
//!
//! One [`HarnessWorld`] step performs exactly one activation: a client
//! or server `advance`, a post-close drain, or an idle tick. Keeping
//! activations small keeps forks cheap, because the engine re-runs
//! only the interrupted step. Ticks fire only after a full
//! client/server round made no progress, the lockstep reading of "the
//! network went quiet". Within a tick round the client goes first,
//! and a tick that emitted a packet (or ended the endpoint) hands
//! control back to the exchange before the server's clock moves, so a
//! retransmission in flight gets the chance to reset the peer's idle
//! counter before the peer also times out.
//!
//! Once both endpoints are terminal and nothing is left to drain, the
//! next step runs the interop oracle over their final beliefs and
//! turns its verdict into the path status.

use std::collections::BTreeSet;
use std::net::SocketAddr;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelState};
use crate::explore::{
    DropDecision, FaultKind, FaultSignature, Interrupt, Party, StepCtx, StepStatus, World,
};
use crate::miniquic::wire::{CLOSE_NORMAL, CLOSE_TIMEOUT};
use crate::miniquic::{
    BeliefState, DefectError, DefectSet, EndpointBox, EndpointIo, ImplKind, Phase, Progress,
    Role, Scenario, StreamBelief,
};
use crate::netmodel::{crypto, PayloadByte, SocketId, SocketTable};
use crate::symval::Predicate;

/// Choice site of the symbolic scenario selector.
pub const SCENARIO_SITE: &str = "world.scenario_select";

/// Probe points owned by the interop oracle, one per check.
pub const ORACLE_PROBES: [&str; 5] = [
    "oracle.phase",
    "oracle.stream_bytes",
    "oracle.fin",
    "oracle.app_totals",
    "oracle.scenario",
];

/// The stream id both request scenarios run over.
const APP_STREAM: u8 = 0;

const CLIENT_ADDR: &str = "192.0.2.1:5000";
const SERVER_ADDR: &str = "192.0.2.2:4433";

/// How the scenario driving the run is determined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioChoice {
    /// Run exactly this scenario.
    Fixed(Scenario),
    /// Let the engine pick: the first step allocates a symbolic
    /// selector byte and forks once per scenario.
    Symbolic,
}

/// Everything needed to assemble one interop world.
#[derive(Debug, Clone)]
pub struct HarnessSetup {
    pub client_impl: ImplKind,
    pub server_impl: ImplKind,
    /// Defects armed in the client endpoint, already restricted to
    /// what fits a client of `client_impl`.
    pub client_defects: DefectSet,
    /// Defects armed in the server endpoint.
    pub server_defects: DefectSet,
    pub scenario: ScenarioChoice,
    /// Propose a fresh symbolic version in the client hello instead of
    /// the concrete version one.
    pub symbolic_version: bool,
    pub channel: ChannelConfig,
}

impl HarnessSetup {
    /// A defect-free setup over a passive channel.
    pub fn clean(client: ImplKind, server: ImplKind, scenario: ScenarioChoice) -> Self {
        HarnessSetup {
            client_impl: client,
            server_impl: server,
            client_defects: DefectSet::NONE,
            server_defects: DefectSet::NONE,
            scenario,
            symbolic_version: false,
            channel: ChannelConfig::passive(),
        }
    }
}

/// Whose activation the next step runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Turn {
    Client,
    Server,
    TickClient,
    TickServer,
}

/// What one activation produced.
struct Acted {
    /// The activation did something observable: processed a datagram,
    /// transmitted, ticked into a retransmission.
    worked: bool,
    /// The endpoint detected a fault; the path ends on it.
    fault: Option<FaultSignature>,
}

impl Acted {
    const IDLE: Acted = Acted { worked: false, fault: None };
}

/// Two endpoints, the sockets between them, and the channel, as one
/// explorable [`World`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarnessWorld {
    client: EndpointBox,
    server: EndpointBox,
    sockets: SocketTable,
    channel: ChannelState,
    client_sock: SocketId,
    server_sock: SocketId,
    turn: Turn,
    scenario_mode: ScenarioChoice,
    /// `None` until the symbolic selector has run.
    scenario: Option<Scenario>,
    /// Whether the current client/server round did any work; decides
    /// if the tick phase runs.
    round_had_work: bool,
}

impl HarnessWorld {
    pub fn new(setup: HarnessSetup) -> Result<HarnessWorld, DefectError> {
        let placeholder = match setup.scenario {
            ScenarioChoice::Fixed(s) => s,
            ScenarioChoice::Symbolic => Scenario::S1,
        };
        let mut client = EndpointBox::create(
            setup.client_impl,
            Role::Client,
            placeholder,
            setup.client_defects,
        )?;
        let server = EndpointBox::create(
            setup.server_impl,
            Role::Server,
            placeholder,
            setup.server_defects,
        )?;
        if setup.symbolic_version {
            client.set_symbolic_version(true);
        }
        let mut sockets = SocketTable::new();
        let client_sock = sockets.bind(CLIENT_ADDR.parse().expect("fixed client address"));
        let server_sock = sockets.bind(SERVER_ADDR.parse().expect("fixed server address"));
        Ok(HarnessWorld {
            client,
            server,
            sockets,
            channel: ChannelState::new(setup.channel),
            client_sock,
            server_sock,
            turn: Turn::Client,
            scenario_mode: setup.scenario,
            scenario: match setup.scenario {
                ScenarioChoice::Fixed(s) => Some(s),
                ScenarioChoice::Symbolic => None,
            },
            round_had_work: false,
        })
    }

    pub fn client(&self) -> &EndpointBox {
        &self.client
    }

    pub fn server(&self) -> &EndpointBox {
        &self.server
    }

    pub fn channel(&self) -> &ChannelState {
        &self.channel
    }

    /// The scenario the run settled on; `None` while a symbolic
    /// selection is still pending.
    pub fn scenario(&self) -> Option<Scenario> {
        self.scenario
    }

    /// Rehydrate a world from the `final_world` snapshot of a
    /// [`PathResult`](crate::explore::PathResult).
    pub fn from_snapshot(snapshot: serde_json::Value) -> serde_json::Result<HarnessWorld> {
        serde_json::from_value(snapshot)
    }

    fn endpoint(&self, role: Role) -> &EndpointBox {
        match role {
            Role::Client => &self.client,
            Role::Server => &self.server,
        }
    }

    fn endpoint_mut(&mut self, role: Role) -> &mut EndpointBox {
        match role {
            Role::Client => &mut self.client,
            Role::Server => &mut self.server,
        }
    }

    fn sock_of(&self, role: Role) -> SocketId {
        match role {
            Role::Client => self.client_sock,
            Role::Server => self.server_sock,
        }
    }

    fn peer_addr(&self, role: Role) -> SocketAddr {
        match role {
            Role::Client => self.sockets.bound_addr(self.server_sock),
            Role::Server => self.sockets.bound_addr(self.client_sock),
        }
    }

    fn side_wants_drain(&self, role: Role) -> bool {
        self.endpoint(role).wants_drain() && self.sockets.queue_len(self.sock_of(role)) > 0
    }

    fn session_over(&self) -> bool {
        self.client.is_terminal()
            && self.server.is_terminal()
            && !self.side_wants_drain(Role::Client)
            && !self.side_wants_drain(Role::Server)
    }

    fn select_scenario(&mut self, ctx: &mut StepCtx<'_>) -> Result<Scenario, Interrupt> {
        let sel = ctx.fresh_byte()?;
        if ctx.decide(SCENARIO_SITE, Predicate::eq(sel, 0))? {
            return Ok(Scenario::S1);
        }
        if ctx.decide(SCENARIO_SITE, Predicate::eq(sel, 1))? {
            return Ok(Scenario::S2);
        }
        Ok(Scenario::S3)
    }

    /// Push one side's staged plaintext through mutation, sealing, the
    /// channel verdict, and (on delivery) the peer's receive queue.
    fn transmit_all(
        &mut self,
        ctx: &mut StepCtx<'_>,
        from: Role,
        payloads: Vec<Vec<PayloadByte>>,
    ) -> Result<(), Interrupt> {
        let src = self.sock_of(from);
        let dst = self.peer_addr(from);
        for mut payload in payloads {
            let vars = self.channel.mutate_prefix(ctx, &mut payload)?;
            let sealed = crypto::seal(&payload, |v| ctx.witness_peek(v));
            let dg = self
                .sockets
                .socket_send(src, dst, sealed)
                .expect("endpoints stay under the datagram size cap");
            self.channel.note_mutation(dg.transmit_index, &vars);
            match self.channel.verdict(ctx, dg.transmit_index)? {
                DropDecision::Delivered => self.sockets.deliver(dg),
                DropDecision::Dropped => {}
            }
        }
        Ok(())
    }

    /// One advance (or post-close drain) of one side.
    fn activate(&mut self, ctx: &mut StepCtx<'_>, role: Role) -> Result<Acted, Interrupt> {
        let sock = self.sock_of(role);
        if self.endpoint(role).is_terminal() {
            if !self.side_wants_drain(role) {
                return Ok(Acted::IDLE);
            }
            let dg = self.sockets.socket_recv(sock).expect("drain checked the queue");
            let mut io = EndpointIo::with_inbound(dg);
            let progress = self.endpoint_mut(role).drain_one(ctx, &mut io)?;
            if let Progress::Fault(fault) = progress {
                return Ok(Acted { worked: true, fault: Some(fault) });
            }
            self.transmit_all(ctx, role, io.outbound)?;
            return Ok(Acted { worked: true, fault: None });
        }

        let mut io = match self.sockets.socket_recv(sock) {
            Some(dg) => EndpointIo::with_inbound(dg),
            None => EndpointIo::empty(),
        };
        let progress = self.endpoint_mut(role).advance(ctx, &mut io)?;
        if let Progress::Fault(fault) = progress {
            return Ok(Acted { worked: true, fault: Some(fault) });
        }
        let worked = !matches!(progress, Progress::Blocked) || !io.outbound.is_empty();
        self.transmit_all(ctx, role, io.outbound)?;
        Ok(Acted { worked, fault: None })
    }

    /// One idle tick of one side.
    fn tick_side(&mut self, ctx: &mut StepCtx<'_>, role: Role) -> Result<Acted, Interrupt> {
        let mut io = EndpointIo::empty();
        let progress = self.endpoint_mut(role).tick(ctx, &mut io)?;
        if let Progress::Fault(fault) = progress {
            return Ok(Acted { worked: true, fault: Some(fault) });
        }
        let emitted = !io.outbound.is_empty();
        self.transmit_all(ctx, role, io.outbound)?;
        Ok(Acted { worked: emitted, fault: None })
    }

    /// Run the oracle over the final beliefs and commit the path's
    /// terminal status. Oracle faults are attributed to the client by
    /// convention, so equivalent divergences dedup to one signature.
    fn verdict(&self, ctx: &mut StepCtx<'_>) -> StepStatus {
        let scenario = self.scenario.expect("the scenario is fixed before endpoints run");
        let checked = check_interop(
            scenario,
            &self.client.belief(),
            &self.server.belief(),
            self.channel.interference(),
        );
        match checked {
            Ok(()) => StepStatus::FinishedOk,
            Err(found) => {
                ctx.probe(found.probe);
                StepStatus::FinishedError(FaultSignature {
                    kind: found.kind,
                    endpoint: Party::Client,
                    probe: found.probe.to_string(),
                    defect_tag: None,
                })
            }
        }
    }

    fn possible_scenarios(&self) -> Vec<Scenario> {
        match self.scenario_mode {
            ScenarioChoice::Fixed(s) => vec![s],
            ScenarioChoice::Symbolic => vec![Scenario::S1, Scenario::S2, Scenario::S3],
        }
    }

    /// Union a per-endpoint declaration over every scenario the run
    /// could settle on, since registries are built before a symbolic
    /// selector has picked one.
    fn declare(&self, list: impl Fn(&EndpointBox) -> Vec<&'static str>) -> Vec<&'static str> {
        let mut out = Vec::new();
        for scenario in self.possible_scenarios() {
            for side in [&self.client, &self.server] {
                let mut ep = side.clone();
                ep.set_scenario(scenario);
                out.extend(list(&ep));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

impl World for HarnessWorld {
    fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt> {
        if self.scenario.is_none() {
            let scenario = self.select_scenario(ctx)?;
            self.scenario = Some(scenario);
            self.client.set_scenario(scenario);
            self.server.set_scenario(scenario);
            return Ok(StepStatus::Running);
        }
        if self.session_over() {
            return Ok(self.verdict(ctx));
        }

        let acted = match self.turn {
            Turn::Client => {
                let acted = self.activate(ctx, Role::Client)?;
                self.round_had_work = acted.worked;
                self.turn = Turn::Server;
                acted
            }
            Turn::Server => {
                let acted = self.activate(ctx, Role::Server)?;
                self.turn = if self.round_had_work || acted.worked {
                    Turn::Client
                } else {
                    Turn::TickClient
                };
                self.round_had_work = false;
                acted
            }
            Turn::TickClient => {
                if self.client.is_terminal() {
                    self.turn = Turn::TickServer;
                    Acted::IDLE
                } else {
                    let acted = self.tick_side(ctx, Role::Client)?;
                    self.turn = if acted.worked || self.client.is_terminal() {
                        Turn::Client
                    } else {
                        Turn::TickServer
                    };
                    acted
                }
            }
            Turn::TickServer => {
                let acted = if self.server.is_terminal() {
                    Acted::IDLE
                } else {
                    self.tick_side(ctx, Role::Server)?
                };
                self.turn = Turn::Client;
                acted
            }
        };
        match acted.fault {
            Some(fault) => Ok(StepStatus::FinishedError(fault)),
            None => Ok(StepStatus::Running),
        }
    }

    fn choice_sites(&self) -> Vec<&'static str> {
        let mut sites = self.channel.choice_sites();
        if let ScenarioChoice::Symbolic = self.scenario_mode {
            sites.push(SCENARIO_SITE);
        }
        sites.extend(self.declare(|ep| ep.choice_sites()));
        sites.sort_unstable();
        sites.dedup();
        sites
    }

    fn probe_points(&self) -> Vec<&'static str> {
        let mut probes = ORACLE_PROBES.to_vec();
        probes.extend(self.declare(|ep| ep.probe_points()));
        probes.sort_unstable();
        probes.dedup();
        probes
    }
}

/// One failed interop check: the fault category plus the oracle probe
/// naming the rule that tripped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteropFinding {
    pub kind: FaultKind,
    pub probe: &'static str,
}

/// The two-tier interop oracle over final beliefs.
///
/// On paths where the channel interfered (dropped or mutated
/// anything), terminal phases only need to be weakly compatible and an
/// unfulfilled scenario is excused. On clean paths the endpoints have
/// no excuse: terminal phases must agree exactly and the scenario must
/// have completed. The data-consistency rules in the middle, byte
/// conservation, FIN agreement, and application totals, hold in both
/// regimes.
pub fn check_interop(
    scenario: Scenario,
    client: &BeliefState,
    server: &BeliefState,
    interference: bool,
) -> Result<(), InteropFinding> {
    let fail = |kind, probe| Err(InteropFinding { kind, probe });

    let phases_ok = if interference {
        weakly_compatible(client, server)
    } else {
        client.phase == server.phase
            && matches!(client.phase, Phase::Closed | Phase::Failed)
    };
    if !phases_ok {
        return fail(FaultKind::InteropDivergence, "oracle.phase");
    }

    for sid in stream_ids(client, server) {
        let c = stream_view(client, sid);
        let s = stream_view(server, sid);
        if c.bytes_received > s.bytes_sent || s.bytes_received > c.bytes_sent {
            return fail(FaultKind::InteropDivergence, "oracle.stream_bytes");
        }
        if (c.fin_sent && !s.fin_received && closed_normally(server))
            || (s.fin_sent && !c.fin_received && closed_normally(client))
        {
            return fail(FaultKind::InteropDivergence, "oracle.fin");
        }
    }

    if client.phase == Phase::Closed && server.phase == Phase::Closed {
        let totals_agree = client.app_bytes_sent == server.app_bytes_received
            && server.app_bytes_sent == client.app_bytes_received;
        if !totals_agree {
            return fail(FaultKind::InteropDivergence, "oracle.app_totals");
        }
    }

    if !interference && !fulfilled(scenario, client, server) {
        return fail(FaultKind::ScenarioUnfulfilled, "oracle.scenario");
    }
    Ok(())
}

/// Weak phase compatibility for paths where the channel interfered:
/// both sides ended, or one side is still winding down while the
/// other already ended, or one side failed while the other saw the
/// failure coming. A side that ended cleanly against a failed peer
/// without ever noticing a timeout holds a one-sided belief, which is
/// exactly what this relation must reject.
fn weakly_compatible(a: &BeliefState, b: &BeliefState) -> bool {
    match (a.phase, b.phase) {
        (Phase::Closed, Phase::Closed) | (Phase::Failed, Phase::Failed) => true,
        (Phase::Closed | Phase::Failed, Phase::Closing) => true,
        (Phase::Closing, Phase::Closed | Phase::Failed) => true,
        (Phase::Failed, Phase::Closed) => saw_timeout(b),
        (Phase::Closed, Phase::Failed) => saw_timeout(a),
        _ => false,
    }
}

/// Whether a closed endpoint's record shows the timeout that failed
/// its peer: it adopted the peer's timeout close code, or its own
/// close attempt timed out quietly.
fn saw_timeout(closed: &BeliefState) -> bool {
    closed.close_code == Some(CLOSE_TIMEOUT) || closed.timeout_flag
}

fn closed_normally(b: &BeliefState) -> bool {
    b.phase == Phase::Closed && b.close_code == Some(CLOSE_NORMAL)
}

fn stream_ids(a: &BeliefState, b: &BeliefState) -> BTreeSet<u8> {
    a.streams.keys().chain(b.streams.keys()).copied().collect()
}

fn stream_view(b: &BeliefState, sid: u8) -> StreamBelief {
    b.stream(sid).cloned().unwrap_or_default()
}

/// Whether the application scenario ran to completion: a clean close
/// on both sides and, for the request scenarios, the stream fully
/// exchanged and finished in both directions.
fn fulfilled(scenario: Scenario, client: &BeliefState, server: &BeliefState) -> bool {
    if client.phase != Phase::Closed || server.phase != Phase::Closed {
        return false;
    }
    if !scenario.sends_request() {
        return true;
    }
    let c = stream_view(client, APP_STREAM);
    let s = stream_view(server, APP_STREAM);
    let request = Scenario::REQUEST.len() as u64;
    let response = if scenario.has_response() {
        Scenario::RESPONSE.len() as u64
    } else {
        0
    };
    c.fin_sent
        && c.fin_received
        && s.fin_sent
        && s.fin_received
        && client.app_bytes_sent == request
        && server.app_bytes_received == request
        && server.app_bytes_sent == response
        && client.app_bytes_received == response
}
