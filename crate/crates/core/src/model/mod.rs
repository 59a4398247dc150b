//! Domain types shared by every subsystem.

mod artifact;
mod attestation;
mod event;

pub use artifact::{measure, measure_file, ArtifactMeasurement, ArtifactRole, GoldenValue, HashAlg, MeasureError};
pub use attestation::{
    client_quote_nonce, system_quote_nonce, Assertion, Claim, ClaimError, ClaimSignature, OperationRecord,
    PipelineMetadata, SignatureAlg, TransformationAttestation,
};
pub use event::{validate_payload, EventKind, MonitorEvent, SchemaError};

/// Well-known artifact ids under which TEE register golden values are published.
pub mod register_ids {
    pub const CLIENT_ENVIRONMENT: &str = "tee://atlas-client/environment";
    pub const CLIENT_CODE: &str = "tee://atlas-client/code";
    pub const SYSTEM_ENVIRONMENT: &str = "tee://ml-system/environment";
    pub const SYSTEM_CODE: &str = "tee://ml-system/code";
}
