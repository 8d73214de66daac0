//! The modeled execution environment: datagram sockets, an event loop
//! with watcher-lifecycle auditing, and a null-encryption crypto layer
//! with real integrity tags.
//!
//! Nothing here talks to an operating system. Sockets are FIFO queues
//! keyed by address, the event loop is a table of watcher states, and
//! "encryption" copies bytes while appending a real 32-bit hash. The
//! point of modeling these at all is that the endpoints under test
//! interact with them exactly the way real implementations interact
//! with UDP sockets, libev-style loops, and an AEAD seal/open API, so
//! the same classes of misuse (double-free of a watcher, parsing
//! unauthenticated garbage) stay expressible.

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symval::SymVarId;

/// Largest datagram payload the model carries, in bytes.
pub const MAX_DATAGRAM: usize = 1200;

/// One byte of a datagram payload: either a fixed value or a symbolic
/// variable whose value is still an unresolved domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadByte {
    Concrete(u8),
    Symbolic(SymVarId),
}

impl PayloadByte {
    pub fn as_concrete(self) -> Option<u8> {
        match self {
            PayloadByte::Concrete(b) => Some(b),
            PayloadByte::Symbolic(_) => None,
        }
    }
}

impl From<u8> for PayloadByte {
    fn from(b: u8) -> Self {
        PayloadByte::Concrete(b)
    }
}

/// Turn a concrete byte string into a payload.
pub fn concrete_payload(bytes: &[u8]) -> Vec<PayloadByte> {
    bytes.iter().copied().map(PayloadByte::Concrete).collect()
}

/// A datagram in flight or queued for receive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Datagram {
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub payload: Vec<PayloadByte>,
    /// Position in the global send order; unique per run.
    pub transmit_index: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("payload of {len} bytes exceeds the {MAX_DATAGRAM}-byte datagram limit")]
    PayloadTooLarge { len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SocketId(u32);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SocketState {
    bound_addr: SocketAddr,
    receive_queue: VecDeque<Datagram>,
}

/// All sockets of one world, plus the global transmit counter.
///
/// Delivery is strictly FIFO per destination; the model never reorders
/// or duplicates. Loss is not modeled here at all: a dropped packet is
/// simply one the channel never delivers.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SocketTable {
    sockets: BTreeMap<SocketId, SocketState>,
    next_socket: u32,
    next_transmit: u64,
}

impl SocketTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, addr: SocketAddr) -> SocketId {
        assert!(
            self.sockets.values().all(|s| s.bound_addr != addr),
            "address {addr} is already bound"
        );
        let id = SocketId(self.next_socket);
        self.next_socket += 1;
        self.sockets.insert(id, SocketState { bound_addr: addr, receive_queue: VecDeque::new() });
        id
    }

    fn socket(&self, sock: SocketId) -> &SocketState {
        self.sockets.get(&sock).unwrap_or_else(|| panic!("socket {sock:?} is not bound"))
    }

    pub fn bound_addr(&self, sock: SocketId) -> SocketAddr {
        self.socket(sock).bound_addr
    }

    /// Stamp a payload into an outbound datagram.
    ///
    /// The datagram is handed back to the caller, not enqueued
    /// anywhere: between endpoints sits the channel, which rules on
    /// every packet's fate before (maybe) delivering it.
    pub fn socket_send(
        &mut self,
        sock: SocketId,
        dst: SocketAddr,
        payload: Vec<PayloadByte>,
    ) -> Result<Datagram, NetError> {
        if payload.len() > MAX_DATAGRAM {
            return Err(NetError::PayloadTooLarge { len: payload.len() });
        }
        let src = self.socket(sock).bound_addr;
        let transmit_index = self.next_transmit;
        self.next_transmit += 1;
        Ok(Datagram { src, dst, payload, transmit_index })
    }

    /// Enqueue a datagram at the socket bound to its destination.
    /// Called by the channel for packets it decided to deliver.
    pub fn deliver(&mut self, dg: Datagram) {
        let state = self
            .sockets
            .values_mut()
            .find(|s| s.bound_addr == dg.dst)
            .unwrap_or_else(|| panic!("no socket bound to {}", dg.dst));
        state.receive_queue.push_back(dg);
    }

    /// Pop the oldest queued datagram; `None` means would-block, the
    /// signal the lockstep scheduler uses to switch endpoints.
    pub fn socket_recv(&mut self, sock: SocketId) -> Option<Datagram> {
        self.sockets
            .get_mut(&sock)
            .unwrap_or_else(|| panic!("socket {sock:?} is not bound"))
            .receive_queue
            .pop_front()
    }

    pub fn queue_len(&self, sock: SocketId) -> usize {
        self.socket(sock).receive_queue.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WatcherId(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatcherState {
    Active,
    Stopped,
    /// The owner freed the watcher's backing resources. A correct
    /// owner stops the watcher and forgets its id first; a released
    /// watcher that still gets dispatched is the moral equivalent of a
    /// use-after-free.
    Released,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Watcher<T> {
    tag: T,
    state: WatcherState,
}

/// Outcome of dispatching an event to a watcher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dispatch<T> {
    /// The watcher is active; run the callback this tag names.
    Invoke(T),
    /// The watcher was stopped; the event is ignored.
    Stopped,
    /// The watcher's resources were already released: lifecycle fault.
    /// The callback is never invoked.
    ReleasedFault,
}

/// A libev-flavored event loop reduced to its auditing essentials:
/// which callbacks are registered, and whether dispatch ever reaches a
/// watcher whose resources are gone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventLoop<T> {
    watchers: BTreeMap<WatcherId, Watcher<T>>,
    next_id: u32,
}

impl<T> Default for EventLoop<T> {
    fn default() -> Self {
        EventLoop { watchers: BTreeMap::new(), next_id: 0 }
    }
}

impl<T: Clone> EventLoop<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tag: T) -> WatcherId {
        let id = WatcherId(self.next_id);
        self.next_id += 1;
        self.watchers.insert(id, Watcher { tag, state: WatcherState::Active });
        id
    }

    fn watcher_mut(&mut self, id: WatcherId) -> &mut Watcher<T> {
        self.watchers.get_mut(&id).unwrap_or_else(|| panic!("watcher {id:?} was never registered"))
    }

    pub fn state(&self, id: WatcherId) -> WatcherState {
        self.watchers
            .get(&id)
            .unwrap_or_else(|| panic!("watcher {id:?} was never registered"))
            .state
    }

    /// Deactivate a watcher. Events arriving afterwards are ignored.
    pub fn stop(&mut self, id: WatcherId) {
        let w = self.watcher_mut(id);
        assert!(
            w.state != WatcherState::Released,
            "stopping {id:?} after release; the owner kept a dangling handle"
        );
        w.state = WatcherState::Stopped;
    }

    /// Free the watcher's backing resources. The entry stays in the
    /// table so a later dispatch can be recognized as a fault.
    pub fn release(&mut self, id: WatcherId) {
        self.watcher_mut(id).state = WatcherState::Released;
    }

    /// Route an event to a watcher.
    pub fn dispatch(&self, id: WatcherId) -> Dispatch<T> {
        let w = self
            .watchers
            .get(&id)
            .unwrap_or_else(|| panic!("watcher {id:?} was never registered"));
        match w.state {
            WatcherState::Active => Dispatch::Invoke(w.tag.clone()),
            WatcherState::Stopped => Dispatch::Stopped,
            WatcherState::Released => Dispatch::ReleasedFault,
        }
    }
}

/// Why `open` rejected a payload.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IntegrityError {
    #[error("payload of {len} bytes is too short to carry a tag")]
    TooShort { len: usize },
    #[error("integrity tag mismatch: expected {expected:#010x}, found {found:#010x}")]
    TagMismatch { expected: u32, found: u32 },
    #[error("integrity tag bytes are symbolic")]
    SymbolicTag,
}

/// Null-encryption crypto: seal copies the payload and appends a real
/// 32-bit FNV-1a tag; open verifies and strips it.
///
/// Symbolic payload bytes contribute their *witness* value to the
/// hash, looked up through the caller-supplied resolver (normally
/// [`StepCtx::witness_peek`](crate::explore::StepCtx::witness_peek)).
/// Their domains are not narrowed: the tag is a concrete function of
/// the witnesses, so the exploration engine never needs to invert the
/// hash, and branching on those bytes after delivery stays possible.
/// The flip side is a proof obligation on callers: a variable's domain
/// must not narrow between seal and the matching open, or the
/// recomputed tag will differ and the packet will be discarded as
/// garbage. Endpoints meet the obligation by sealing at transmit time
/// (retransmissions re-seal) and opening on receipt before any
/// parsing.
pub mod crypto {
    use super::{IntegrityError, PayloadByte};
    use crate::symval::SymVarId;

    pub const FNV_OFFSET_BASIS: u32 = 0x811c_9dc5;
    pub const FNV_PRIME: u32 = 0x0100_0193;

    /// 32-bit FNV-1a.
    pub fn hash32(bytes: impl IntoIterator<Item = u8>) -> u32 {
        let mut h = FNV_OFFSET_BASIS;
        for b in bytes {
            h ^= b as u32;
            h = h.wrapping_mul(FNV_PRIME);
        }
        h
    }

    fn resolved<'a>(
        payload: &'a [PayloadByte],
        mut resolve: impl FnMut(SymVarId) -> u8 + 'a,
    ) -> impl Iterator<Item = u8> + 'a {
        payload.iter().map(move |b| match *b {
            PayloadByte::Concrete(v) => v,
            PayloadByte::Symbolic(var) => resolve(var),
        })
    }

    /// Append the 4-byte big-endian tag over the payload.
    pub fn seal(
        payload: &[PayloadByte],
        resolve: impl FnMut(SymVarId) -> u8,
    ) -> Vec<PayloadByte> {
        let tag = hash32(resolved(payload, resolve));
        let mut sealed = payload.to_vec();
        sealed.extend(tag.to_be_bytes().map(PayloadByte::Concrete));
        sealed
    }

    /// Verify and strip the tag. A failure means the payload is
    /// garbage; callers drop the packet silently, the way an AEAD
    /// decrypt failure is handled.
    pub fn open(
        payload: &[PayloadByte],
        resolve: impl FnMut(SymVarId) -> u8,
    ) -> Result<Vec<PayloadByte>, IntegrityError> {
        if payload.len() < 4 {
            return Err(IntegrityError::TooShort { len: payload.len() });
        }
        let (body, tag_bytes) = payload.split_at(payload.len() - 4);
        let mut found_bytes = [0u8; 4];
        for (slot, byte) in found_bytes.iter_mut().zip(tag_bytes) {
            *slot = byte.as_concrete().ok_or(IntegrityError::SymbolicTag)?;
        }
        let found = u32::from_be_bytes(found_bytes);
        let expected = hash32(resolved(body, resolve));
        if expected != found {
            return Err(IntegrityError::TagMismatch { expected, found });
        }
        Ok(body.to_vec())
    }
}
