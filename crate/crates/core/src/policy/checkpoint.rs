//! Policy checkpoints: an adapter-binding header followed by a weight
//! snapshot.
//!
//! Layout: `b"ASACKPT\0"`, version (u32 LE), header length (u32 LE), the
//! header as JSON, then the snapshot.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grad::{get_u32, put_u32, ParamStore};
use crate::scalar::Scalar;

use super::model::{Binding, Policy, PolicyConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// An adapter artifact (codec or vocabulary file) pinned by content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

impl ArtifactRef {
    pub fn for_bytes(path: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            path: path.into(),
            sha256: sha256_hex(bytes),
        }
    }

    /// Reads the artifact, checking it still matches its hash.
    pub fn load(&self) -> Result<Vec<u8>> {
        let bytes = std::fs::read(&self.path)
            .map_err(|e| Error::AdapterArtifactMissing(format!("{}: {e}", self.path)))?;
        let got = sha256_hex(&bytes);
        if got != self.sha256 {
            return Err(Error::AdapterArtifactMissing(format!(
                "{} has hash {got}, checkpoint expects {}",
                self.path, self.sha256
            )));
        }
        Ok(bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Adapter kind, e.g. `rvq` or `semlang`.
    pub asa: String,
    /// Adapter settings as given in the experiment config.
    pub asa_config: serde_json::Value,
    pub artifact: Option<ArtifactRef>,
    pub policy: PolicyConfig,
}

#[derive(Clone)]
pub struct PolicyCheckpoint<S: Scalar> {
    pub header: CheckpointHeader,
    pub params: ParamStore<S>,
}

impl<S: Scalar> PolicyCheckpoint<S> {
    pub fn new(header: CheckpointHeader, policy: &Policy<S>) -> Self {
        Self {
            header,
            params: policy.params().clone(),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_u32(w, header.len() as u32)?;
        w.write_all(&header)?;
        self.params.write_snapshot(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a policy checkpoint".into()));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = get_u32(r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Parse(e.to_string()))?;
        let params = ParamStore::read_snapshot(r)?;
        Ok(Self { header, params })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut &bytes[..])
    }

    /// Rebuilds the policy around `binding`; every parameter must be present
    /// with a matching shape.
    pub fn into_policy(self, binding: Binding<S>) -> Result<Policy<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut policy = Policy::new(self.header.policy.clone(), binding, &mut rng)?;
        policy.params_mut().load_from(&self.params)?;
        Ok(policy)
    }
}
