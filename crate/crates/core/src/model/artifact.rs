use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::canonical::canonical_bytes;
use crate::crypto::{KeyDirectory, KeyId, SignatureBytes, SigningIdentity};
use crate::digest::Digest;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactRole {
    Dataset,
    ModelWeights,
    Checkpoint,
    Config,
    Code,
    Metadata,
}

impl ArtifactRole {
    pub const ALL: [ArtifactRole; 6] = [
        ArtifactRole::Dataset,
        ArtifactRole::ModelWeights,
        ArtifactRole::Checkpoint,
        ArtifactRole::Config,
        ArtifactRole::Code,
        ArtifactRole::Metadata,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactRole::Dataset => "dataset",
            ArtifactRole::ModelWeights => "model-weights",
            ArtifactRole::Checkpoint => "checkpoint",
            ArtifactRole::Config => "config",
            ArtifactRole::Code => "code",
            ArtifactRole::Metadata => "metadata",
        }
    }
}

impl fmt::Display for ArtifactRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArtifactRole::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown artifact role `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HashAlg {
    #[serde(rename = "sha-256")]
    Sha256,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArtifactMeasurement {
    pub artifact_id: String,
    pub role: ArtifactRole,
    pub hash_alg: HashAlg,
    pub digest: Digest,
    pub size_bytes: u64,
}

impl ArtifactMeasurement {
    pub fn from_digest(artifact_id: impl Into<String>, role: ArtifactRole, digest: Digest, size_bytes: u64) -> Self {
        ArtifactMeasurement { artifact_id: artifact_id.into(), role, hash_alg: HashAlg::Sha256, digest, size_bytes }
    }

    pub fn of_bytes(artifact_id: impl Into<String>, role: ArtifactRole, bytes: &[u8]) -> Self {
        Self::from_digest(artifact_id, role, Digest::of(bytes), bytes.len() as u64)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("measuring {artifact_id}: {source}")]
pub struct MeasureError {
    pub artifact_id: String,
    #[source]
    pub source: std::io::Error,
}

/// Streams `reader` to the end and records its SHA-256 and length.
pub fn measure<R: Read>(
    mut reader: R,
    artifact_id: &str,
    role: ArtifactRole,
) -> Result<ArtifactMeasurement, MeasureError> {
    let err = |source| MeasureError { artifact_id: artifact_id.to_owned(), source };
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut size = 0u64;
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(err(e)),
        };
        hasher.update(&buf[..n]);
        size += n as u64;
    }
    Ok(ArtifactMeasurement::from_digest(artifact_id, role, Digest(hasher.finalize().into()), size))
}

/// Measures a file; the artifact id is a `file://` URI of its path.
pub fn measure_file(path: &Path, role: ArtifactRole) -> Result<ArtifactMeasurement, MeasureError> {
    let artifact_id = format!("file://{}", path.display());
    let file = std::fs::File::open(path).map_err(|source| MeasureError { artifact_id: artifact_id.clone(), source })?;
    measure(std::io::BufReader::new(file), &artifact_id, role)
}

/// A producer-signed known-good measurement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenValue {
    pub measurement: ArtifactMeasurement,
    pub producer_key_id: KeyId,
    pub signature: SignatureBytes,
    pub issued_at: Timestamp,
}

impl GoldenValue {
    pub fn issue(measurement: ArtifactMeasurement, producer: &SigningIdentity, issued_at: Timestamp) -> Self {
        let signature = producer.sign(&canonical_bytes(&measurement).expect("measurement has no floats"));
        GoldenValue { measurement, producer_key_id: producer.key_id(), signature, issued_at }
    }

    /// Signature check against the producer's registered key.
    pub fn verify(&self, producers: &KeyDirectory) -> bool {
        let Some(key) = producers.get(&self.producer_key_id) else {
            return false;
        };
        match canonical_bytes(&self.measurement) {
            Ok(bytes) => key.verify(&bytes, &self.signature),
            Err(_) => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reader that hands out data in caller-chosen chunk sizes.
    struct Chunked<'a> {
        data: &'a [u8],
        sizes: Vec<usize>,
        i: usize,
    }

    impl Read for Chunked<'_> {
        fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
            if self.data.is_empty() {
                return Ok(0);
            }
            let want = self.sizes[self.i % self.sizes.len()].max(1);
            self.i += 1;
            let n = want.min(buf.len()).min(self.data.len());
            buf[..n].copy_from_slice(&self.data[..n]);
            self.data = &self.data[n..];
            Ok(n)
        }
    }

    #[test]
    fn empty_stream() {
        let m = measure(&b""[..], "urn:empty", ArtifactRole::Dataset).unwrap();
        assert_eq!(m.digest.to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(m.size_bytes, 0);
    }

    #[test]
    fn abc() {
        let m = measure(&b"abc"[..], "urn:abc", ArtifactRole::Config).unwrap();
        assert_eq!(m.digest.to_hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(m.size_bytes, 3);
    }

    #[test]
    fn deterministic() {
        let data = vec![7u8; 100_000];
        let a = measure(&data[..], "urn:x", ArtifactRole::ModelWeights).unwrap();
        let b = measure(&data[..], "urn:x", ArtifactRole::ModelWeights).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn io_failure_carries_artifact_id() {
        struct Broken;
        impl Read for Broken {
            fn read(&mut self, _: &mut [u8]) -> std::io::Result<usize> {
                Err(std::io::Error::other("disk gone"))
            }
        }
        let err = measure(Broken, "urn:broken", ArtifactRole::Dataset).unwrap_err();
        assert_eq!(err.artifact_id, "urn:broken");
    }

    proptest::proptest! {
        #[test]
        fn chunk_boundaries_do_not_matter(data in proptest::collection::vec(0u8..=255, 0..4096),
                                         sizes in proptest::collection::vec(1usize..700, 1..8)) {
            let whole = measure(&data[..], "urn:p", ArtifactRole::Dataset).unwrap();
            let chunked = measure(Chunked { data: &data, sizes, i: 0 }, "urn:p", ArtifactRole::Dataset).unwrap();
            proptest::prop_assert_eq!(whole, chunked);
        }
    }

    #[test]
    fn golden_value_signature() {
        let producer = SigningIdentity::from_seed([3; 32], false);
        let g = GoldenValue::issue(
            ArtifactMeasurement::of_bytes("urn:a", ArtifactRole::Dataset, b"a"),
            &producer,
            Timestamp::EPOCH,
        );
        let dir = KeyDirectory::with_keys([producer.public_key()]);
        assert!(g.verify(&dir));
        assert!(!g.verify(&KeyDirectory::new()));
        let mut forged = g.clone();
        forged.measurement.digest = Digest::of(b"b");
        assert!(!forged.verify(&dir));
    }

    #[test]
    fn role_text_forms() {
        for r in ArtifactRole::ALL {
            assert_eq!(r.as_str().parse::<ArtifactRole>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.as_str()));
        }
    }
}
