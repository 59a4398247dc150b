use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{SealResponse, API_PREFIX};
use crate::canonical::canonical_bytes;
use crate::crypto::PublicKey;
use crate::digest::Digest;
use crate::log::{LogEntry, LogError, LogReader, LogWriter, SignedRoot, StoredEntry, Submission};
use crate::merkle::{ConsistencyProof, InclusionProof};
use crate::model::GoldenValue;
use crate::verifier::{VerificationReport, VerifyRequest};

/// Blocking client for a remote log. Transport failures surface as
/// [`LogError::Unavailable`]; server-side errors are rebuilt as sent.
#[derive(Debug, Clone)]
pub struct HttpLogClient {
    base: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct KeyBody {
    public_key: PublicKey,
}

#[derive(Deserialize)]
struct ErrorBody {
    #[serde(flatten)]
    error: Option<LogError>,
    #[serde(default)]
    message: String,
}

impl HttpLogClient {
    pub fn new(base_url: &str) -> Self {
        let agent =
            ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(5)).timeout(Duration::from_secs(60)).build();
        HttpLogClient { base: base_url.trim_end_matches('/').to_string(), agent }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{API_PREFIX}{path}", self.base)
    }

    fn finish<T: DeserializeOwned>(&self, r: Result<ureq::Response, ureq::Error>) -> Result<T, LogError> {
        match r {
            Ok(resp) => resp.into_json().map_err(|e| LogError::Unavailable(format!("bad response body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                match serde_json::from_str::<ErrorBody>(&text) {
                    Ok(ErrorBody { error: Some(e), .. }) => Err(e),
                    Ok(ErrorBody { message, .. }) if !message.is_empty() => {
                        Err(LogError::Unavailable(format!("HTTP {code}: {message}")))
                    }
                    _ => Err(LogError::Unavailable(format!("HTTP {code}: {text}"))),
                }
            }
            Err(e) => Err(LogError::Unavailable(e.to_string())),
        }
    }

    fn get<T: DeserializeOwned>(&self, path: &str, query: &[(&str, String)]) -> Result<T, LogError> {
        let mut req = self.agent.get(&self.url(path));
        for (k, v) in query {
            req = req.query(k, v);
        }
        self.finish(req.call())
    }

    fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, LogError> {
        let bytes = canonical_bytes(body).map_err(|e| LogError::OutOfRange(format!("request encoding: {e}")))?;
        let req = self.agent.post(&self.url(path)).set("Content-Type", "application/json");
        self.finish(req.send_bytes(&bytes))
    }

    fn not_found_is_none<T>(r: Result<T, LogError>) -> Result<Option<T>, LogError> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(LogError::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn verify(&self, request: &VerifyRequest) -> Result<VerificationReport, LogError> {
        self.post("/verify", request)
    }

    pub fn verify_batch(&self, requests: &[VerifyRequest]) -> Result<Vec<VerificationReport>, LogError> {
        self.post("/verify/batch", requests)
    }
}

impl LogReader for HttpLogClient {
    fn log_public_key(&self) -> Result<PublicKey, LogError> {
        self.get::<KeyBody>("/log-key", &[]).map(|k| k.public_key)
    }

    fn signed_root(&self, tree_id: Option<u64>) -> Result<SignedRoot, LogError> {
        let q: Vec<(&str, String)> = tree_id.map(|t| ("tree", t.to_string())).into_iter().collect();
        self.get("/root", &q)
    }

    fn signed_roots(&self) -> Result<Vec<SignedRoot>, LogError> {
        self.get("/roots", &[])
    }

    fn entry(&self, digest: &Digest) -> Result<Option<StoredEntry>, LogError> {
        Self::not_found_is_none(self.get(&format!("/entries/{digest}"), &[]))
    }

    fn entry_at(&self, tree_id: u64, leaf_index: u64) -> Result<Option<LogEntry>, LogError> {
        Self::not_found_is_none(
            self.get("/entries", &[("tree", tree_id.to_string()), ("index", leaf_index.to_string())]),
        )
    }

    fn inclusion_proof(&self, tree_id: u64, leaf_index: u64, tree_size: u64) -> Result<InclusionProof, LogError> {
        self.get(
            "/proof/inclusion",
            &[("tree", tree_id.to_string()), ("index", leaf_index.to_string()), ("size", tree_size.to_string())],
        )
    }

    fn consistency_proof(&self, tree_id: u64, old_size: u64, new_size: u64) -> Result<ConsistencyProof, LogError> {
        self.get(
            "/proof/consistency",
            &[("tree", tree_id.to_string()), ("old", old_size.to_string()), ("new", new_size.to_string())],
        )
    }

    fn goldens_for_artifact_id(&self, artifact_id: &str) -> Result<Vec<GoldenValue>, LogError> {
        self.get("/goldens", &[("artifact_id", artifact_id.to_string())])
    }

    fn goldens_for_digest(&self, digest: &Digest) -> Result<Vec<GoldenValue>, LogError> {
        self.get("/goldens", &[("digest", digest.to_string())])
    }

    fn attestations_producing(&self, artifact: &Digest) -> Result<Vec<Digest>, LogError> {
        self.get(&format!("/producing/{artifact}"), &[])
    }
}

impl LogWriter for HttpLogClient {
    fn submit(&self, entry: LogEntry) -> Result<Submission, LogError> {
        self.post("/entries", &entry)
    }

    fn seal_and_chain(&self) -> Result<(SignedRoot, SignedRoot), LogError> {
        let r: SealResponse = self.post("/seal", &serde_json::Value::Null)?;
        Ok((r.sealed, r.opened))
    }
}
