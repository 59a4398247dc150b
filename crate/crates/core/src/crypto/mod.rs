//! Key management and the simulated TEE.

pub mod keys;
pub mod tee;

pub use keys::{
    generate_identity, CryptoError, KeyDirectory, KeyId, KeyMaterial, KeyRecord, PublicKey, SignatureBytes,
    SigningIdentity,
};
pub use tee::{
    Enclave, QuoteRejection, QuoteVerdict, QuoteVerifier, ReportData, SimulatedPlatform, TeeQuote, REGISTER_CODE,
    REGISTER_ENVIRONMENT,
};
