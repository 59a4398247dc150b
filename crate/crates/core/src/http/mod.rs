//! HTTP front end for the transparency log and the verifier, and a blocking
//! client that speaks it.
//!
//! Every body is canonical JSON. Errors come back as a serialized
//! [`LogError`](crate::log::LogError) wrapped in `{"message", "error", "detail"}`
//! so a client can rebuild the exact error the server saw.

mod client;
mod server;

pub use client::HttpLogClient;
pub use server::{router, LogServer, ServiceState};

use serde::{Deserialize, Serialize};

use crate::log::{LogEntry, SignedRoot};
use crate::model::TransformationAttestation;
use crate::verifier::{Expectation, Subject, VerifyRequest};

pub const API_PREFIX: &str = "/api/v1";

/// Body of `POST /api/v1/entries`: a tagged log entry, or a bare attestation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntryBody {
    Entry(LogEntry),
    Attestation(TransformationAttestation),
}

impl EntryBody {
    pub fn into_entry(self) -> LogEntry {
        match self {
            EntryBody::Entry(e) => e,
            EntryBody::Attestation(a) => LogEntry::Attestation(a),
        }
    }
}

/// Body of the verify endpoints: a full request, or a bare expectation whose
/// artifact is named by digest only.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VerifyBody {
    Request(VerifyRequest),
    Expectation(Expectation),
}

impl VerifyBody {
    pub fn into_request(self) -> VerifyRequest {
        match self {
            VerifyBody::Request(r) => r,
            VerifyBody::Expectation(e) => VerifyRequest { subject: Subject::Digest(e.artifact_digest), expectation: e },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealResponse {
    pub sealed: SignedRoot,
    pub opened: SignedRoot,
}
