//! The deployment directory (`--home`). Holds the provisioning seed from
//! which the simulated platform, enclaves and producer key are derived, and
//! optionally a pinned log key.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use atlas_core::crypto::{KeyDirectory, KeyMaterial, PublicKey, QuoteVerifier};
use atlas_core::log::LogReader;
use atlas_core::scenario::{Deployment, EPOCH_START_MS};
use atlas_core::time::{SteppingClock, Timestamp};
use atlas_core::verifier::TrustAnchors;
use serde::{Deserialize, Serialize};

use crate::Usage;

const FILE: &str = "deployment.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomeConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_key: Option<PublicKey>,
}

#[derive(Debug, Clone)]
pub struct Home {
    pub dir: PathBuf,
    pub config: HomeConfig,
}

impl Home {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(FILE)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        if !path.exists() {
            return Err(Usage(format!(
                "{} is not provisioned; run `atlas provision --home {}`",
                dir.display(),
                dir.display()
            ))
            .into());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let config = serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        Ok(Home { dir: dir.to_path_buf(), config })
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let path = Self::path(&self.dir);
        let body = serde_json::to_string_pretty(&self.config)?;
        fs::write(&path, body + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Deterministic clock: identical commands produce identical documents.
    fn clock() -> Arc<SteppingClock> {
        Arc::new(SteppingClock::new(Timestamp::from_millis(EPOCH_START_MS), 1))
    }

    /// The deployment with a scratch in-memory log.
    pub fn deployment(&self) -> Result<Deployment> {
        Ok(Deployment::build(self.config.seed, Self::clock(), None)?)
    }

    /// The deployment whose log persists under `log_dir`.
    pub fn deployment_with_log(&self, log_dir: &Path) -> Result<Deployment> {
        Ok(Deployment::build(self.config.seed, Self::clock(), Some(log_dir))?)
    }

    /// Trust anchors for verifying against `reader`. The log key comes from
    /// `pinned`, else from the home directory, else from the log itself.
    pub fn trust(&self, reader: &dyn LogReader, pinned: Option<&Path>) -> Result<TrustAnchors> {
        let dep = self.deployment()?;
        let log_key = resolve_log_key(self.config.log_key, reader, pinned)?;
        Ok(TrustAnchors {
            log_key,
            producers: KeyDirectory::with_keys([dep.producer.public_key()]),
            platforms: QuoteVerifier::new([dep.platform.public_key()]),
        })
    }
}

pub fn resolve_log_key(stored: Option<PublicKey>, reader: &dyn LogReader, pinned: Option<&Path>) -> Result<PublicKey> {
    if let Some(path) = pinned {
        return Ok(KeyMaterial::load(path)?.public_key());
    }
    if let Some(k) = stored {
        return Ok(k);
    }
    let served = reader.log_public_key()?;
    log::warn!("no pinned log key; trusting the key the log serves ({})", served.key_id());
    Ok(served)
}

pub fn provision(dir: &Path, seed: u64, log_key: Option<PublicKey>) -> Result<(Home, bool)> {
    if Home::path(dir).exists() {
        let mut home = Home::load(dir)?;
        if home.config.seed != seed {
            bail!(Usage(format!("{} is already provisioned with a different seed", dir.display())));
        }
        let changed = log_key.is_some() && home.config.log_key != log_key;
        if changed {
            home.config.log_key = log_key;
            home.save()?;
        }
        return Ok((home, changed));
    }
    let home = Home { dir: dir.to_path_buf(), config: HomeConfig { seed, log_key } };
    home.save()?;
    Ok((home, true))
}
