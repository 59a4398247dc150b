use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use parking_lot::RwLock;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::digest::Digest;

#[derive(Debug, thiserror::Error)]
pub enum CryptoError {
    #[error("entropy source failed: {0}")]
    Entropy(String),
    #[error("malformed key material: {0}")]
    MalformedKey(String),
    #[error("key file {path}: {source}")]
    KeyFile { path: String, source: std::io::Error },
    #[error("key file does not contain a private key")]
    NotPrivate,
}

/// Fingerprint of an Ed25519 public key: SHA-256 of the 32 key bytes, hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 32]);

impl KeyId {
    pub fn of(public_key: &PublicKey) -> Self {
        KeyId(Digest::of(&public_key.0).0)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({}…)", &hex::encode(self.0)[..12])
    }
}

impl FromStr for KeyId {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Digest::from_hex(s).map(|d| KeyId(d.0)).map_err(|e| CryptoError::MalformedKey(e.to_string()))
    }
}

impl Serialize for KeyId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KeyId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn key_id(&self) -> KeyId {
        KeyId::of(self)
    }

    pub fn verify(&self, msg: &[u8], sig: &SignatureBytes) -> bool {
        let Ok(vk) = VerifyingKey::from_bytes(&self.0) else {
            return false;
        };
        vk.verify(msg, &ed25519_dalek::Signature::from_bytes(&sig.0)).is_ok()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(self.0))
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(PublicKey(out))
    }
}

/// Raw 64-byte Ed25519 signature, base64 in text form.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SignatureBytes(pub [u8; 64]);

impl SignatureBytes {
    pub fn with_bit_flipped(mut self, bit: usize) -> Self {
        self.0[(bit / 8) % 64] ^= 1 << (bit % 8);
        self
    }
}

impl fmt::Debug for SignatureBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({}…)", &hex::encode(self.0)[..12])
    }
}

impl Serialize for SignatureBytes {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&B64.encode(self.0))
    }
}

impl<'de> Deserialize<'de> for SignatureBytes {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let bytes = B64.decode(s.as_bytes()).map_err(serde::de::Error::custom)?;
        let arr: [u8; 64] = bytes.try_into().map_err(|_| serde::de::Error::custom("signature must be 64 bytes"))?;
        Ok(SignatureBytes(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub key_id: KeyId,
    pub public_key: PublicKey,
    pub created_inside_tee: bool,
}

impl KeyRecord {
    pub fn is_consistent(&self) -> bool {
        self.key_id == self.public_key.key_id()
    }
}

/// An Ed25519 keypair. The private half never leaves this struct except
/// through [`SigningIdentity::to_private_pem`].
#[derive(Clone)]
pub struct SigningIdentity {
    key: SigningKey,
    record: KeyRecord,
}

impl fmt::Debug for SigningIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningIdentity").field("record", &self.record).finish_non_exhaustive()
    }
}

impl SigningIdentity {
    pub fn from_seed(seed: [u8; 32], created_inside_tee: bool) -> Self {
        let key = SigningKey::from_bytes(&seed);
        let public_key = PublicKey(key.verifying_key().to_bytes());
        SigningIdentity { key, record: KeyRecord { key_id: public_key.key_id(), public_key, created_inside_tee } }
    }

    pub fn generate_with<R: RngCore + CryptoRng>(rng: &mut R, created_inside_tee: bool) -> Result<Self, CryptoError> {
        let mut seed = [0u8; 32];
        rng.try_fill_bytes(&mut seed).map_err(|e| CryptoError::Entropy(e.to_string()))?;
        Ok(Self::from_seed(seed, created_inside_tee))
    }

    pub fn record(&self) -> &KeyRecord {
        &self.record
    }

    pub fn key_id(&self) -> KeyId {
        self.record.key_id
    }

    pub fn public_key(&self) -> PublicKey {
        self.record.public_key
    }

    pub fn sign(&self, msg: &[u8]) -> SignatureBytes {
        SignatureBytes(self.key.sign(msg).to_bytes())
    }

    pub fn to_private_pem(&self) -> String {
        pem_encode(PRIVATE_LABEL, &self.key.to_bytes())
    }

    pub fn to_public_pem(&self) -> String {
        pem_encode(PUBLIC_LABEL, &self.record.public_key.0)
    }
}

/// Fresh identity from the operating system's entropy source.
pub fn generate_identity() -> Result<SigningIdentity, CryptoError> {
    SigningIdentity::generate_with(&mut rand::rngs::OsRng, false)
}

const PRIVATE_LABEL: &str = "ATLAS ED25519 PRIVATE KEY";
const PUBLIC_LABEL: &str = "ATLAS ED25519 PUBLIC KEY";

fn pem_encode(label: &str, bytes: &[u8]) -> String {
    format!("-----BEGIN {label}-----\n{}\n-----END {label}-----\n", B64.encode(bytes))
}

/// Contents of a PEM-like key file.
#[derive(Debug, Clone)]
pub enum KeyMaterial {
    Private(SigningIdentity),
    Public(PublicKey),
}

impl KeyMaterial {
    pub fn public_key(&self) -> PublicKey {
        match self {
            KeyMaterial::Private(id) => id.public_key(),
            KeyMaterial::Public(pk) => *pk,
        }
    }

    pub fn into_identity(self) -> Result<SigningIdentity, CryptoError> {
        match self {
            KeyMaterial::Private(id) => Ok(id),
            KeyMaterial::Public(_) => Err(CryptoError::NotPrivate),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CryptoError> {
        let text = text.trim();
        for (label, private) in [(PRIVATE_LABEL, true), (PUBLIC_LABEL, false)] {
            let begin = format!("-----BEGIN {label}-----");
            let end = format!("-----END {label}-----");
            if let Some(rest) = text.strip_prefix(&begin) {
                let body =
                    rest.strip_suffix(&end).ok_or_else(|| CryptoError::MalformedKey(format!("missing `{end}`")))?;
                let body: String = body.split_whitespace().collect();
                let bytes = B64.decode(body).map_err(|e| CryptoError::MalformedKey(e.to_string()))?;
                let arr: [u8; 32] =
                    bytes.try_into().map_err(|_| CryptoError::MalformedKey("key must be 32 bytes".into()))?;
                return Ok(if private {
                    KeyMaterial::Private(SigningIdentity::from_seed(arr, false))
                } else {
                    KeyMaterial::Public(PublicKey(arr))
                });
            }
        }
        Err(CryptoError::MalformedKey("unrecognized key block".into()))
    }

    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CryptoError::KeyFile { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}

/// Thread-safe map from key fingerprints to public keys.
#[derive(Debug, Default)]
pub struct KeyDirectory {
    keys: RwLock<HashMap<KeyId, PublicKey>>,
}

impl Clone for KeyDirectory {
    fn clone(&self) -> Self {
        KeyDirectory { keys: RwLock::new(self.keys.read().clone()) }
    }
}

impl KeyDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_keys(keys: impl IntoIterator<Item = PublicKey>) -> Self {
        let dir = Self::new();
        for k in keys {
            dir.insert(k);
        }
        dir
    }

    pub fn insert(&self, key: PublicKey) -> KeyId {
        let id = key.key_id();
        self.keys.write().insert(id, key);
        id
    }

    pub fn get(&self, id: &KeyId) -> Option<PublicKey> {
        self.keys.read().get(id).copied()
    }

    pub fn contains(&self, id: &KeyId) -> bool {
        self.keys.read().contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.keys.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
