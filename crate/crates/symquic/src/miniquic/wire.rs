//! The MiniQUIC wire format and the parsing primitives both
//! implementations build on.
//!
//! All fields are fixed-width bytes. Two header forms exist:
//!
//! ```text
//! long  (10 bytes): 0x80|type  version[4]  cid[4]  pn
//! short (6 bytes):  0x40       cid[4]      pn
//! ```
//!
//! Long-header types: 0 = Initial, 1 = Handshake, 2 = Version
//! Negotiation; type value 3 is unassigned. Frames follow the header
//! back to back until the payload ends:
//!
//! ```text
//! PADDING      0x00
//! PING         0x01
//! ACK          0x02  largest_acked
//! HANDSHAKE    0x03  stage
//! STREAM       0x04  sid|0x80(FIN)  offset  len  data[len]
//! CLOSE        0x06  code
//! RESET_STREAM 0x07  sid  code
//! ```
//!
//! The parsing helpers in this module take a [`StepCtx`] so that a
//! symbolic payload byte turns into a recorded branch
//! ([`bit_clear`], [`equals`], [`nibble_is`]) or a concretization
//! ([`to_concrete`]) at exactly the point where the byte influences
//! control flow. Concrete bytes take native branches and record
//! nothing.

use serde::{Deserialize, Serialize};

use crate::explore::{Interrupt, StepCtx};
use crate::netmodel::PayloadByte;
use crate::symval::Predicate;

/// The only version this protocol family has shipped.
pub const VERSION_ONE: [u8; 4] = [0x00, 0x00, 0x00, 0x01];

/// Version field value carried by Version Negotiation packets.
pub const VERSION_NONE: [u8; 4] = [0x00, 0x00, 0x00, 0x00];

/// The single connection id both sides use. Connection setup with cid
/// exchange is out of scope; receivers still validate the field.
pub const CID: [u8; 4] = [0x00, 0x00, 0x00, 0x42];

/// A version byte is "reserved for validation" when its low nibble is
/// 0xa. A whole version is reserved when all four bytes match.
pub const RESERVED_NIBBLE: u8 = 0x0a;

pub const HEADER_FORM_BIT: u8 = 0x80;
pub const SHORT_FIXED_BIT: u8 = 0x40;
pub const LONG_TYPE_MASK: u8 = 0x03;
pub const FIN_BIT: u8 = 0x80;

pub const LONG_HEADER_LEN: usize = 10;
pub const SHORT_HEADER_LEN: usize = 6;

pub const FRAME_PADDING: u8 = 0x00;
pub const FRAME_PING: u8 = 0x01;
pub const FRAME_ACK: u8 = 0x02;
pub const FRAME_HANDSHAKE: u8 = 0x03;
pub const FRAME_STREAM: u8 = 0x04;
pub const FRAME_CLOSE: u8 = 0x06;
pub const FRAME_RESET: u8 = 0x07;

/// Connection close codes.
pub const CLOSE_NORMAL: u8 = 0x00;
pub const CLOSE_TIMEOUT: u8 = 0x7e;

/// Handshake stages carried in HANDSHAKE frames.
pub const STAGE_HELLO: u8 = 0;
pub const STAGE_REPLY: u8 = 1;
pub const STAGE_FINISH: u8 = 2;

/// Long-header packet types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongType {
    Initial,
    Handshake,
    VersionNegotiation,
}

impl LongType {
    pub fn bits(self) -> u8 {
        match self {
            LongType::Initial => 0,
            LongType::Handshake => 1,
            LongType::VersionNegotiation => 2,
        }
    }
}

/// Packet headers as built by senders. The version field holds
/// [`PayloadByte`] so a client may propose a symbolic version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Header {
    Long { ptype: LongType, version: [PayloadByte; 4], pn: u8 },
    Short { pn: u8 },
}

/// Frames as built by senders. Sender-side fields are concrete; only
/// received frames can carry symbolic content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Padding,
    Ping,
    Ack { largest: u8 },
    Handshake { stage: u8 },
    Stream { sid: u8, fin: bool, offset: u8, data: Vec<u8> },
    Close { code: u8 },
    Reset { sid: u8, code: u8 },
}

impl Frame {
    /// Whether this frame obligates the receiver to acknowledge.
    pub fn is_eliciting(&self) -> bool {
        !matches!(self, Frame::Ack { .. } | Frame::Padding)
    }
}

/// Serialize a header plus frames into plaintext payload bytes.
pub fn encode(header: &Header, frames: &[Frame]) -> Vec<PayloadByte> {
    let mut out = Vec::new();
    match header {
        Header::Long { ptype, version, pn } => {
            out.push(PayloadByte::Concrete(HEADER_FORM_BIT | ptype.bits()));
            out.extend(version.iter().copied());
            out.extend(CID.iter().map(|&b| PayloadByte::Concrete(b)));
            out.push(PayloadByte::Concrete(*pn));
        }
        Header::Short { pn } => {
            out.push(PayloadByte::Concrete(SHORT_FIXED_BIT));
            out.extend(CID.iter().map(|&b| PayloadByte::Concrete(b)));
            out.push(PayloadByte::Concrete(*pn));
        }
    }
    for frame in frames {
        match frame {
            Frame::Padding => out.push(PayloadByte::Concrete(FRAME_PADDING)),
            Frame::Ping => out.push(PayloadByte::Concrete(FRAME_PING)),
            Frame::Ack { largest } => {
                out.push(PayloadByte::Concrete(FRAME_ACK));
                out.push(PayloadByte::Concrete(*largest));
            }
            Frame::Handshake { stage } => {
                out.push(PayloadByte::Concrete(FRAME_HANDSHAKE));
                out.push(PayloadByte::Concrete(*stage));
            }
            Frame::Stream { sid, fin, offset, data } => {
                assert!(data.len() <= u8::MAX as usize, "stream frame data too long");
                assert_eq!(sid & FIN_BIT, 0, "stream id collides with FIN bit");
                out.push(PayloadByte::Concrete(FRAME_STREAM));
                let sid_byte = if *fin { sid | FIN_BIT } else { *sid };
                out.push(PayloadByte::Concrete(sid_byte));
                out.push(PayloadByte::Concrete(*offset));
                out.push(PayloadByte::Concrete(data.len() as u8));
                out.extend(data.iter().map(|&b| PayloadByte::Concrete(b)));
            }
            Frame::Close { code } => {
                out.push(PayloadByte::Concrete(FRAME_CLOSE));
                out.push(PayloadByte::Concrete(*code));
            }
            Frame::Reset { sid, code } => {
                out.push(PayloadByte::Concrete(FRAME_RESET));
                out.push(PayloadByte::Concrete(*sid));
                out.push(PayloadByte::Concrete(*code));
            }
        }
    }
    out
}

/// Convenience for constructing a concrete version field.
pub fn version_bytes(version: [u8; 4]) -> [PayloadByte; 4] {
    [
        PayloadByte::Concrete(version[0]),
        PayloadByte::Concrete(version[1]),
        PayloadByte::Concrete(version[2]),
        PayloadByte::Concrete(version[3]),
    ]
}

/// Choice-site names for one parsing direction. Each endpoint role
/// parses with its own set so branch coverage distinguishes the two
/// directions of the same wire code.
#[derive(Debug, Clone, Copy)]
pub struct WireSites {
    pub header_form: &'static str,
    pub fixed_bit: &'static str,
    pub long_type: &'static str,
    pub version_eq: &'static str,
    pub version_reserved: &'static str,
    pub frame_type: &'static str,
    pub stream_fin: &'static str,
}

pub const CLIENT_SITES: WireSites = WireSites {
    header_form: "client.wire.header_form",
    fixed_bit: "client.wire.fixed_bit",
    long_type: "client.wire.long_type",
    version_eq: "client.wire.version_eq",
    version_reserved: "client.wire.version_reserved",
    frame_type: "client.wire.frame_type",
    stream_fin: "client.wire.stream_fin",
};

pub const SERVER_SITES: WireSites = WireSites {
    header_form: "server.wire.header_form",
    fixed_bit: "server.wire.fixed_bit",
    long_type: "server.wire.long_type",
    version_eq: "server.wire.version_eq",
    version_reserved: "server.wire.version_reserved",
    frame_type: "server.wire.frame_type",
    stream_fin: "server.wire.stream_fin",
};

impl WireSites {
    pub fn all(&self) -> Vec<&'static str> {
        vec![
            self.header_form,
            self.fixed_bit,
            self.long_type,
            self.version_eq,
            self.version_reserved,
            self.frame_type,
            self.stream_fin,
        ]
    }

    pub fn for_role(role: super::Role) -> &'static WireSites {
        match role {
            super::Role::Client => &CLIENT_SITES,
            super::Role::Server => &SERVER_SITES,
        }
    }
}

/// True when `(byte & mask) == 0`. Symbolic bytes branch through the
/// engine; concrete bytes answer natively.
pub fn bit_clear(
    ctx: &mut StepCtx<'_>,
    site: &'static str,
    byte: PayloadByte,
    mask: u8,
) -> Result<bool, Interrupt> {
    match byte {
        PayloadByte::Concrete(b) => Ok(b & mask == 0),
        PayloadByte::Symbolic(v) => ctx.decide(site, Predicate::mask_eq(v, mask, 0x00)),
    }
}

/// True when `byte == value`.
pub fn equals(
    ctx: &mut StepCtx<'_>,
    site: &'static str,
    byte: PayloadByte,
    value: u8,
) -> Result<bool, Interrupt> {
    match byte {
        PayloadByte::Concrete(b) => Ok(b == value),
        PayloadByte::Symbolic(v) => ctx.decide(site, Predicate::eq(v, value)),
    }
}

/// True when `(byte & mask) == pattern`.
pub fn nibble_is(
    ctx: &mut StepCtx<'_>,
    site: &'static str,
    byte: PayloadByte,
    mask: u8,
    pattern: u8,
) -> Result<bool, Interrupt> {
    match byte {
        PayloadByte::Concrete(b) => Ok(b & mask == pattern),
        PayloadByte::Symbolic(v) => ctx.decide(site, Predicate::mask_eq(v, mask, pattern)),
    }
}

/// Collapse a byte to a concrete value. Symbolic bytes concretize to
/// their current witness and the event is recorded on the trace.
/// Identifier-like fields (connection ids, packet numbers, stream ids,
/// lengths) go through here instead of branching.
pub fn to_concrete(ctx: &mut StepCtx<'_>, byte: PayloadByte) -> Result<u8, Interrupt> {
    match byte {
        PayloadByte::Concrete(b) => Ok(b),
        PayloadByte::Symbolic(v) => ctx.concretize(v),
    }
}

/// Check a received version field for equality with `VERSION_ONE`,
/// short-circuiting on the first differing byte.
pub fn version_is_one(
    ctx: &mut StepCtx<'_>,
    sites: &WireSites,
    version: &[PayloadByte; 4],
) -> Result<bool, Interrupt> {
    for (byte, expect) in version.iter().zip(VERSION_ONE) {
        if !equals(ctx, sites.version_eq, *byte, expect)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Check a version field for the reserved pattern: every byte's low
/// nibble equals 0xa. Short-circuits on the first miss.
pub fn version_is_reserved(
    ctx: &mut StepCtx<'_>,
    sites: &WireSites,
    version: &[PayloadByte; 4],
) -> Result<bool, Interrupt> {
    for byte in version {
        if !nibble_is(ctx, sites.version_reserved, *byte, 0x0f, RESERVED_NIBBLE)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Concretize four bytes and compare against the expected connection
/// id. Identifier discipline: no branching, one concretization per
/// symbolic byte.
pub fn cid_matches(
    ctx: &mut StepCtx<'_>,
    payload: &[PayloadByte],
    at: usize,
) -> Result<bool, Interrupt> {
    for (i, &expect) in CID.iter().enumerate() {
        let got = to_concrete(ctx, payload[at + i])?;
        if got != expect {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Why a received payload was rejected without taking effect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reject {
    Truncated,
    BadFixedBit,
    UnknownLongType,
    CidMismatch,
    UnknownFrame { type_byte: u8 },
    FrameOverrun,
    BadStage { stage: u8 },
}

/// A frame as seen by a receiver. Stream data stays as raw payload
/// bytes; appliers concretize if anything symbolic survives this far.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedFrame {
    Padding,
    Ping,
    Ack { largest: u8 },
    Handshake { stage: u8 },
    Stream { sid: u8, fin: bool, offset: u8, data: Vec<PayloadByte> },
    Close { code: u8 },
    Reset { sid: u8, code: u8 },
}

impl ParsedFrame {
    pub fn is_eliciting(&self) -> bool {
        !matches!(self, ParsedFrame::Ack { .. } | ParsedFrame::Padding)
    }
}

/// Parse the frame sequence in `body`. The whole body parses or the
/// whole packet is rejected; effects are applied only afterwards.
pub fn parse_frames(
    ctx: &mut StepCtx<'_>,
    sites: &WireSites,
    body: &[PayloadByte],
) -> Result<Result<Vec<ParsedFrame>, Reject>, Interrupt> {
    let mut frames = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let tb = body[i];
        i += 1;
        if equals(ctx, sites.frame_type, tb, FRAME_PADDING)? {
            frames.push(ParsedFrame::Padding);
        } else if equals(ctx, sites.frame_type, tb, FRAME_PING)? {
            frames.push(ParsedFrame::Ping);
        } else if equals(ctx, sites.frame_type, tb, FRAME_ACK)? {
            let Some(&b) = body.get(i) else { return Ok(Err(Reject::Truncated)) };
            frames.push(ParsedFrame::Ack { largest: to_concrete(ctx, b)? });
            i += 1;
        } else if equals(ctx, sites.frame_type, tb, FRAME_HANDSHAKE)? {
            let Some(&b) = body.get(i) else { return Ok(Err(Reject::Truncated)) };
            let stage = to_concrete(ctx, b)?;
            if stage > STAGE_FINISH {
                return Ok(Err(Reject::BadStage { stage }));
            }
            frames.push(ParsedFrame::Handshake { stage });
            i += 1;
        } else if equals(ctx, sites.frame_type, tb, FRAME_STREAM)? {
            if i + 3 > body.len() {
                return Ok(Err(Reject::Truncated));
            }
            let fin = !bit_clear(ctx, sites.stream_fin, body[i], FIN_BIT)?;
            let sid = to_concrete(ctx, body[i])? & !FIN_BIT;
            let offset = to_concrete(ctx, body[i + 1])?;
            let len = to_concrete(ctx, body[i + 2])? as usize;
            i += 3;
            if i + len > body.len() {
                return Ok(Err(Reject::FrameOverrun));
            }
            let data = body[i..i + len].to_vec();
            i += len;
            frames.push(ParsedFrame::Stream { sid, fin, offset, data });
        } else if equals(ctx, sites.frame_type, tb, FRAME_CLOSE)? {
            let Some(&b) = body.get(i) else { return Ok(Err(Reject::Truncated)) };
            frames.push(ParsedFrame::Close { code: to_concrete(ctx, b)? });
            i += 1;
        } else if equals(ctx, sites.frame_type, tb, FRAME_RESET)? {
            if i + 2 > body.len() {
                return Ok(Err(Reject::Truncated));
            }
            let sid = to_concrete(ctx, body[i])?;
            let code = to_concrete(ctx, body[i + 1])?;
            i += 2;
            frames.push(ParsedFrame::Reset { sid, code });
        } else {
            let type_byte = to_concrete(ctx, tb)?;
            return Ok(Err(Reject::UnknownFrame { type_byte }));
        }
    }
    Ok(Ok(frames))
}

/// True when any parsed frame obligates an acknowledgement.
pub fn any_eliciting(frames: &[ParsedFrame]) -> bool {
    frames.iter().any(ParsedFrame::is_eliciting)
}
