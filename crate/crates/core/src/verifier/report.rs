use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;

/// What a verifier expects of an artifact and its history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub artifact_digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_pipeline_code_hash: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_precursor_digests: Option<Vec<Digest>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_stage_order: Option<Vec<String>>,
}

impl Expectation {
    pub fn for_digest(artifact_digest: Digest) -> Self {
        Expectation {
            artifact_digest,
            required_pipeline_code_hash: None,
            required_precursor_digests: None,
            required_stage_order: None,
        }
    }

    pub fn with_stage_order(mut self, stages: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.required_stage_order = Some(stages.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_code_hash(mut self, code_hash: Digest) -> Self {
        self.required_pipeline_code_hash = Some(code_hash);
        self
    }

    pub fn with_precursors(mut self, digests: Vec<Digest>) -> Self {
        self.required_precursor_digests = Some(digests);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

pub type Status = Verdict;

pub mod check_names {
    pub const LOG_AVAILABLE: &str = "log-available";
    pub const SIGNATURE: &str = "signature";
    pub const GOLDEN_VALUE: &str = "golden-value";
    pub const QUOTE: &str = "quote";
    pub const PIPELINE: &str = "pipeline";
    pub const STAGE_ORDER: &str = "stage-order";
    pub const LINEAGE: &str = "lineage";
    pub const INCLUSION: &str = "inclusion";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
    pub cache_hit: bool,
}

impl Check {
    pub fn new(name: &str, result: Result<String, String>, cache_hit: bool) -> Self {
        let (status, detail) = match result {
            Ok(d) => (Verdict::Pass, d),
            Err(d) => (Verdict::Fail, d),
        };
        Check { name: name.to_owned(), status, detail, cache_hit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub checks: Vec<Check>,
    pub chain_length: usize,
    #[serde(rename = "elapsed_us", with = "elapsed_us")]
    pub elapsed: Duration,
}

impl VerificationReport {
    pub(crate) fn from_checks(checks: Vec<Check>, chain_length: usize, elapsed: Duration) -> Self {
        let verdict = if checks.iter().all(|c| c.status == Verdict::Pass) { Verdict::Pass } else { Verdict::Fail };
        VerificationReport { verdict, checks, chain_length, elapsed }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// The earliest failing check in evaluation order.
    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| c.status == Verdict::Fail)
    }

    pub fn any_cache_hit(&self) -> bool {
        self.checks.iter().any(|c| c.cache_hit)
    }

    /// The report without cache flags and timing, for equivalence checks.
    pub fn outcome(&self) -> (Verdict, Vec<(String, Status, String)>, usize) {
        (
            self.verdict,
            self.checks.iter().map(|c| (c.name.clone(), c.status, c.detail.clone())).collect(),
            self.chain_length,
        )
    }
}

mod elapsed_us {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_micros() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_micros(u64::deserialize(d)?))
    }
}
