//! Seeded defect catalog.
//!
//! Each defect is a small behavioral bug that one implementation can
//! arm. With all flags off both implementations are interoperable;
//! each flag reintroduces one historical class of bug so the harness
//! has something real to find.
//!
//! | tag | lives in        | behavior                                              |
//! |-----|-----------------|-------------------------------------------------------|
//! | d1  | evloop server   | closes a response-less stream without notifying      |
//! | d2  | evloop teardown | releases the read watcher while still registered     |
//! | d3  | pull client     | accepts reserved-pattern versions from the app       |
//! | d4  | evloop server   | discards handshake state on the first short packet   |
//! | d5  | evloop server   | long-header dispatch lacks a bounds guard on type 3  |

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ImplKind, Role};

/// Which seeded defects an endpoint has armed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectSet {
    pub d1: bool,
    pub d2: bool,
    pub d3: bool,
    pub d4: bool,
    pub d5: bool,
}

/// A defect tag was requested somewhere it cannot live.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DefectError {
    #[error("unknown defect tag {0:?}")]
    UnknownTag(String),
    #[error("defect {tag} does not apply to a {kind} {role} endpoint")]
    NotApplicable { tag: &'static str, kind: &'static str, role: &'static str },
}

impl DefectSet {
    pub const NONE: DefectSet = DefectSet { d1: false, d2: false, d3: false, d4: false, d5: false };

    /// Parse a comma-separated tag list such as `"D1,D4"`. Case
    /// insensitive; empty input means no defects.
    pub fn parse(text: &str) -> Result<DefectSet, DefectError> {
        let mut set = DefectSet::NONE;
        for raw in text.split(',') {
            let tag = raw.trim();
            if tag.is_empty() {
                continue;
            }
            match tag.to_ascii_lowercase().as_str() {
                "d1" => set.d1 = true,
                "d2" => set.d2 = true,
                "d3" => set.d3 = true,
                "d4" => set.d4 = true,
                "d5" => set.d5 = true,
                _ => return Err(DefectError::UnknownTag(tag.to_string())),
            }
        }
        Ok(set)
    }

    pub fn is_empty(&self) -> bool {
        *self == DefectSet::NONE
    }

    pub fn tags(&self) -> Vec<&'static str> {
        let mut tags = Vec::new();
        if self.d1 {
            tags.push("d1");
        }
        if self.d2 {
            tags.push("d2");
        }
        if self.d3 {
            tags.push("d3");
        }
        if self.d4 {
            tags.push("d4");
        }
        if self.d5 {
            tags.push("d5");
        }
        tags
    }

    /// The subset applicable to one endpoint. D1, D2, D4, D5 live in
    /// the event-loop implementation (D1, D4, D5 in its server role);
    /// D3 lives in the pull client.
    pub fn restricted_to(&self, kind: ImplKind, role: Role) -> DefectSet {
        let server = role == Role::Server;
        match kind {
            ImplKind::Pull => DefectSet {
                d3: self.d3 && role == Role::Client,
                ..DefectSet::NONE
            },
            ImplKind::EventLoop => DefectSet {
                d1: self.d1 && server,
                d2: self.d2,
                d4: self.d4 && server,
                d5: self.d5 && server,
                ..DefectSet::NONE
            },
        }
    }

    /// Error when any armed defect cannot live in this endpoint.
    pub fn check_applicable(&self, kind: ImplKind, role: Role) -> Result<(), DefectError> {
        let allowed = self.restricted_to(kind, role);
        let not_applicable = |tag| DefectError::NotApplicable {
            tag,
            kind: kind.name(),
            role: match role {
                Role::Client => "client",
                Role::Server => "server",
            },
        };
        if self.d1 && !allowed.d1 {
            return Err(not_applicable("d1"));
        }
        if self.d2 && !allowed.d2 {
            return Err(not_applicable("d2"));
        }
        if self.d3 && !allowed.d3 {
            return Err(not_applicable("d3"));
        }
        if self.d4 && !allowed.d4 {
            return Err(not_applicable("d4"));
        }
        if self.d5 && !allowed.d5 {
            return Err(not_applicable("d5"));
        }
        Ok(())
    }

    /// Split a requested defect set over a client/server endpoint
    /// pair, erroring when some armed defect fits neither endpoint.
    pub fn split_for_pair(
        &self,
        client: ImplKind,
        server: ImplKind,
    ) -> Result<(DefectSet, DefectSet), DefectError> {
        let client_set = self.restricted_to(client, Role::Client);
        let server_set = self.restricted_to(server, Role::Server);
        let placed = |tag: &str| {
            client_set.tags().contains(&tag) || server_set.tags().contains(&tag)
        };
        for tag in self.tags() {
            if !placed(tag) {
                return Err(DefectError::NotApplicable {
                    tag: match tag {
                        "d1" => "d1",
                        "d2" => "d2",
                        "d3" => "d3",
                        "d4" => "d4",
                        _ => "d5",
                    },
                    kind: "this",
                    role: "endpoint pair",
                });
            }
        }
        Ok((client_set, server_set))
    }
}

impl fmt::Display for DefectSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", self.tags().join(","))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_accepts_mixed_case_and_spaces() {
        let set = DefectSet::parse("D1, d4 ,D5").expect("tags should parse");
        assert!(set.d1 && set.d4 && set.d5);
        assert!(!set.d2 && !set.d3);
        assert_eq!(set.to_string(), "d1,d4,d5");
    }

    #[test]
    fn parse_rejects_unknown_tags() {
        let err = DefectSet::parse("d9").expect_err("d9 is not a defect");
        assert_eq!(err, DefectError::UnknownTag("d9".to_string()));
    }

    #[test]
    fn d3_only_fits_pull_clients() {
        let set = DefectSet { d3: true, ..DefectSet::NONE };
        assert!(set.check_applicable(ImplKind::Pull, Role::Client).is_ok());
        assert!(set.check_applicable(ImplKind::Pull, Role::Server).is_err());
        assert!(set.check_applicable(ImplKind::EventLoop, Role::Client).is_err());
    }

    #[test]
    fn server_only_defects_reject_client_role() {
        for set in [
            DefectSet { d1: true, ..DefectSet::NONE },
            DefectSet { d4: true, ..DefectSet::NONE },
            DefectSet { d5: true, ..DefectSet::NONE },
        ] {
            assert!(set.check_applicable(ImplKind::EventLoop, Role::Server).is_ok());
            assert!(set.check_applicable(ImplKind::EventLoop, Role::Client).is_err());
            assert!(set.check_applicable(ImplKind::Pull, Role::Server).is_err());
        }
    }

    #[test]
    fn split_places_each_defect_once() {
        let set = DefectSet { d1: true, d2: true, d3: true, ..DefectSet::NONE };
        let (client, server) = set
            .split_for_pair(ImplKind::Pull, ImplKind::EventLoop)
            .expect("default pair hosts d1, d2, d3");
        assert_eq!(client, DefectSet { d3: true, ..DefectSet::NONE });
        assert_eq!(server, DefectSet { d1: true, d2: true, ..DefectSet::NONE });

        let err = set.split_for_pair(ImplKind::EventLoop, ImplKind::EventLoop);
        assert!(err.is_err(), "d3 needs a pull client somewhere");
    }
}
