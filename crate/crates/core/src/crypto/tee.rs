//! Simulated trusted execution environment.
//!
//! A [`SimulatedPlatform`] plays the role of TEE hardware: it holds a platform
//! signing key and issues quotes over two measurement registers
//! (register 0: environment, register 1: code image) plus 64 bytes of report
//! data `nonce ‖ SHA-256(attested public key)`. Verification follows the same
//! contract a hardware quote verifier would: platform signature, freshness
//! nonce, then each register against its golden value.

use std::fmt;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::keys::{CryptoError, KeyDirectory, KeyId, KeyRecord, PublicKey, SignatureBytes, SigningIdentity};
use crate::canonical::{canonical_bytes, decode};
use crate::digest::Digest;
use crate::model::GoldenValue;
use crate::time::{Clock, SystemClock, Timestamp};

pub const REGISTER_ENVIRONMENT: usize = 0;
pub const REGISTER_CODE: usize = 1;

/// `nonce ‖ SHA-256(attested public key)`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ReportData(pub [u8; 64]);

impl ReportData {
    pub fn new(nonce: &[u8; 32], attested_key: &PublicKey) -> Self {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(nonce);
        out[32..].copy_from_slice(&Digest::of(&attested_key.0).0);
        ReportData(out)
    }

    pub fn nonce(&self) -> &[u8] {
        &self.0[..32]
    }

    pub fn key_hash(&self) -> &[u8] {
        &self.0[32..]
    }
}

impl fmt::Debug for ReportData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ReportData({}…)", &hex::encode(self.0)[..16])
    }
}

impl Serialize for ReportData {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for ReportData {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let mut out = [0u8; 64];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(ReportData(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeeQuote {
    pub measurement_registers: Vec<Digest>,
    pub report_data: ReportData,
    pub platform_key_id: KeyId,
    pub platform_sig: SignatureBytes,
    pub issued_at: Timestamp,
}

#[derive(Serialize)]
struct QuoteBody<'a> {
    measurement_registers: &'a [Digest],
    report_data: &'a ReportData,
    platform_key_id: &'a KeyId,
    issued_at: &'a Timestamp,
}

impl TeeQuote {
    /// Canonical bytes covered by `platform_sig`.
    pub fn body_bytes(&self) -> Vec<u8> {
        let body = QuoteBody {
            measurement_registers: &self.measurement_registers,
            report_data: &self.report_data,
            platform_key_id: &self.platform_key_id,
            issued_at: &self.issued_at,
        };
        canonical_bytes(&body).expect("quote body contains no floats")
    }

    /// True iff report data binds exactly `key`.
    pub fn binds_key(&self, key: &PublicKey) -> bool {
        self.report_data.key_hash() == Digest::of(&key.0).0
    }

    pub fn register(&self, index: usize) -> Option<&Digest> {
        self.measurement_registers.get(index)
    }

    /// `base64:<canonical quote JSON>`, the form embedded in manifests.
    pub fn to_base64(&self) -> String {
        let bytes = canonical_bytes(self).expect("quote contains no floats");
        format!("base64:{}", B64.encode(bytes))
    }

    pub fn from_base64(s: &str) -> Result<Self, String> {
        let body = s.strip_prefix("base64:").ok_or("quote must start with `base64:`")?;
        let bytes = B64.decode(body).map_err(|e| e.to_string())?;
        decode(&bytes).map_err(|e| e.to_string())
    }
}

/// Serde adapter: quotes travel as `base64:` strings inside manifests.
pub mod quote_b64 {
    use super::TeeQuote;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(quote: &TeeQuote, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&quote.to_base64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<TeeQuote, D::Error> {
        let s = String::deserialize(deserializer)?;
        TeeQuote::from_base64(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuoteRejection {
    UnknownPlatform,
    BadPlatformSignature,
    NonceMismatch,
    RegisterCount,
    RegisterMismatch,
}

impl fmt::Display for QuoteRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuoteRejection::UnknownPlatform => "unknown-platform",
            QuoteRejection::BadPlatformSignature => "bad-platform-signature",
            QuoteRejection::NonceMismatch => "nonce-mismatch",
            QuoteRejection::RegisterCount => "register-count",
            QuoteRejection::RegisterMismatch => "register-mismatch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuoteVerdict {
    Accepted,
    Rejected(QuoteRejection),
}

impl QuoteVerdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, QuoteVerdict::Accepted)
    }
}

/// Verifies quotes against a set of known platform keys.
#[derive(Debug, Clone, Default)]
pub struct QuoteVerifier {
    platforms: Arc<KeyDirectory>,
}

impl QuoteVerifier {
    pub fn new(platforms: impl IntoIterator<Item = PublicKey>) -> Self {
        QuoteVerifier { platforms: Arc::new(KeyDirectory::with_keys(platforms)) }
    }

    pub fn add_platform(&self, key: PublicKey) {
        self.platforms.insert(key);
    }

    /// Platform signature check alone, for quotes whose nonce and golden
    /// registers were already checked by the party that requested them.
    pub fn verify_platform(&self, quote: &TeeQuote) -> Result<(), QuoteRejection> {
        let platform = self.platforms.get(&quote.platform_key_id).ok_or(QuoteRejection::UnknownPlatform)?;
        if platform.verify(&quote.body_bytes(), &quote.platform_sig) {
            Ok(())
        } else {
            Err(QuoteRejection::BadPlatformSignature)
        }
    }

    /// Accepted iff the platform signature is valid, the nonce matches the
    /// report-data prefix, and every register equals its golden value
    /// (`expected_registers[i]` pins register `i`).
    pub fn verify_quote(&self, quote: &TeeQuote, expected_registers: &[GoldenValue], nonce: &[u8; 32]) -> QuoteVerdict {
        use QuoteRejection::*;
        if let Err(r) = self.verify_platform(quote) {
            return QuoteVerdict::Rejected(r);
        }
        if quote.report_data.nonce() != nonce {
            return QuoteVerdict::Rejected(NonceMismatch);
        }
        if quote.measurement_registers.len() != expected_registers.len() {
            return QuoteVerdict::Rejected(RegisterCount);
        }
        let all_match = quote
            .measurement_registers
            .iter()
            .zip(expected_registers)
            .all(|(reg, golden)| *reg == golden.measurement.digest);
        if !all_match {
            return QuoteVerdict::Rejected(RegisterMismatch);
        }
        QuoteVerdict::Accepted
    }
}

/// Stand-in for TEE hardware with a locally provisioned platform key.
pub struct SimulatedPlatform {
    identity: SigningIdentity,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for SimulatedPlatform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimulatedPlatform").field("key_id", &self.identity.key_id()).finish()
    }
}

impl SimulatedPlatform {
    pub fn new(identity: SigningIdentity) -> Self {
        Self::with_clock(identity, Arc::new(SystemClock))
    }

    pub fn with_clock(identity: SigningIdentity, clock: Arc<dyn Clock>) -> Self {
        SimulatedPlatform { identity, clock }
    }

    pub fn public_key(&self) -> PublicKey {
        self.identity.public_key()
    }

    pub fn key_id(&self) -> KeyId {
        self.identity.key_id()
    }

    pub fn identity(&self) -> &SigningIdentity {
        &self.identity
    }

    /// Generates a keypair "inside" the enclave.
    pub fn generate_identity<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Result<SigningIdentity, CryptoError> {
        SigningIdentity::generate_with(rng, true)
    }

    pub fn issue_quote(
        &self,
        env_hash: Digest,
        code_hash: Digest,
        nonce: &[u8; 32],
        attested_key: &KeyRecord,
    ) -> TeeQuote {
        let mut quote = TeeQuote {
            measurement_registers: vec![env_hash, code_hash],
            report_data: ReportData::new(nonce, &attested_key.public_key),
            platform_key_id: self.identity.key_id(),
            platform_sig: SignatureBytes([0; 64]),
            issued_at: self.clock.now(),
        };
        quote.platform_sig = self.identity.sign(&quote.body_bytes());
        quote
    }
}

/// A program running inside a [`SimulatedPlatform`] with fixed measurements
/// and a keypair generated at launch.
#[derive(Debug, Clone)]
pub struct Enclave {
    platform: Arc<SimulatedPlatform>,
    env_hash: Digest,
    code_hash: Digest,
    identity: Arc<SigningIdentity>,
}

impl Enclave {
    pub fn launch<R: RngCore + CryptoRng>(
        platform: Arc<SimulatedPlatform>,
        env_hash: Digest,
        code_hash: Digest,
        rng: &mut R,
    ) -> Result<Self, CryptoError> {
        let identity = Arc::new(platform.generate_identity(rng)?);
        Ok(Enclave { platform, env_hash, code_hash, identity })
    }

    pub fn identity(&self) -> &SigningIdentity {
        &self.identity
    }

    pub fn env_hash(&self) -> Digest {
        self.env_hash
    }

    pub fn code_hash(&self) -> Digest {
        self.code_hash
    }

    pub fn platform(&self) -> &Arc<SimulatedPlatform> {
        &self.platform
    }

    /// Quote over this enclave's registers binding its own key.
    pub fn quote(&self, nonce: &[u8; 32]) -> TeeQuote {
        self.platform.issue_quote(self.env_hash, self.code_hash, nonce, self.identity.record())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArtifactMeasurement, ArtifactRole};
    use crate::time::SteppingClock;

    fn golden(producer: &SigningIdentity, id: &str, digest: Digest) -> GoldenValue {
        let m = ArtifactMeasurement::from_digest(id, ArtifactRole::Metadata, digest, 0);
        GoldenValue::issue(m, producer, Timestamp::EPOCH)
    }

    struct Fixture {
        platform: SimulatedPlatform,
        verifier: QuoteVerifier,
        goldens: Vec<GoldenValue>,
        key: KeyRecord,
        env: Digest,
        code: Digest,
    }

    fn fixture() -> Fixture {
        let platform = SimulatedPlatform::with_clock(
            SigningIdentity::from_seed([1; 32], false),
            Arc::new(SteppingClock::new(Timestamp::EPOCH, 1)),
        );
        let producer = SigningIdentity::from_seed([2; 32], false);
        let env = Digest::of(b"environment");
        let code = Digest::of(b"code");
        let goldens = vec![golden(&producer, "tee://x/environment", env), golden(&producer, "tee://x/code", code)];
        let verifier = QuoteVerifier::new([platform.public_key()]);
        let key = *SigningIdentity::from_seed([3; 32], true).record();
        Fixture { platform, verifier, goldens, key, env, code }
    }

    #[test]
    fn round_trip_accepts() {
        let f = fixture();
        let nonce = [5u8; 32];
        let q = f.platform.issue_quote(f.env, f.code, &nonce, &f.key);
        assert_eq!(q.measurement_registers, vec![f.env, f.code]);
        assert!(q.binds_key(&f.key.public_key));
        assert_eq!(f.verifier.verify_quote(&q, &f.goldens, &nonce), QuoteVerdict::Accepted);
    }

    #[test]
    fn tampered_signature_rejects() {
        let f = fixture();
        let nonce = [5u8; 32];
        let mut q = f.platform.issue_quote(f.env, f.code, &nonce, &f.key);
        q.platform_sig = q.platform_sig.with_bit_flipped(100);
        assert_eq!(
            f.verifier.verify_quote(&q, &f.goldens, &nonce),
            QuoteVerdict::Rejected(QuoteRejection::BadPlatformSignature)
        );
    }

    #[test]
    fn register_mismatch_rejects() {
        let f = fixture();
        let nonce = [5u8; 32];
        let q = f.platform.issue_quote(Digest::of(b"rootkit"), f.code, &nonce, &f.key);
        assert_eq!(
            f.verifier.verify_quote(&q, &f.goldens, &nonce),
            QuoteVerdict::Rejected(QuoteRejection::RegisterMismatch)
        );
    }

    #[test]
    fn replayed_quote_rejects_on_nonce() {
        let f = fixture();
        let old = f.platform.issue_quote(f.env, f.code, &[1u8; 32], &f.key);
        let fresh_nonce = [2u8; 32];
        assert_eq!(
            f.verifier.verify_quote(&old, &f.goldens, &fresh_nonce),
            QuoteVerdict::Rejected(QuoteRejection::NonceMismatch)
        );
    }

    #[test]
    fn unknown_platform_rejects() {
        let f = fixture();
        let nonce = [5u8; 32];
        let q = f.platform.issue_quote(f.env, f.code, &nonce, &f.key);
        let stranger = QuoteVerifier::new([PublicKey([7; 32])]);
        assert_eq!(
            stranger.verify_quote(&q, &f.goldens, &nonce),
            QuoteVerdict::Rejected(QuoteRejection::UnknownPlatform)
        );
    }

    #[test]
    fn binding_excludes_other_keys() {
        let f = fixture();
        let q = f.platform.issue_quote(f.env, f.code, &[0; 32], &f.key);
        let other = SigningIdentity::from_seed([4; 32], true);
        assert!(!q.binds_key(&other.public_key()));
    }

    #[test]
    fn base64_form_round_trips() {
        let f = fixture();
        let q = f.platform.issue_quote(f.env, f.code, &[0; 32], &f.key);
        let s = q.to_base64();
        assert!(s.starts_with("base64:"));
        assert_eq!(TeeQuote::from_base64(&s).unwrap(), q);
        assert!(TeeQuote::from_base64("nope").is_err());
    }
}
