//! JSON artifact files. Each one records the SHA-256 of every file it was computed from;
//! reading an artifact re-hashes those files and refuses it when any has changed.

use std::path::{Path, PathBuf};

use nptc::NptcError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRef {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub kind: String,
    pub version: u32,
    pub inputs: Vec<InputRef>,
    pub params: serde_json::Value,
    pub payload: T,
}

impl<T> Envelope<T> {
    pub fn input(&self, role: &str) -> nptc::Result<&InputRef> {
        self.inputs.iter().find(|i| i.role == role).ok_or_else(|| {
            NptcError::CacheMiss(format!("{} artifact records no {role} input", self.kind))
        })
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Reads a cached file, reporting a missing one as a cache miss.
pub fn read_cached(path: &Path) -> nptc::Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            NptcError::CacheMiss(format!("{} does not exist", path.display()))
        }
        _ => NptcError::Io(e),
    })
}

pub fn sha256_file(path: &Path) -> nptc::Result<String> {
    Ok(hex::encode(sha256_bytes(&read_cached(path)?)))
}

/// Records `path` (made absolute) and its current hash.
pub fn input_ref(role: &str, path: &Path) -> nptc::Result<InputRef> {
    let sha256 = sha256_file(path)?;
    let path = std::path::absolute(path)?;
    Ok(InputRef {
        role: role.to_string(),
        path,
        sha256,
    })
}

/// Hash binding a binary cache to a set of inputs: SHA-256 over their hex digests in order.
pub fn combined_hash(inputs: &[InputRef]) -> [u8; 32] {
    let mut h = Sha256::new();
    for i in inputs {
        h.update(i.sha256.as_bytes());
    }
    h.finalize().into()
}

pub fn write_artifact<T: Serialize>(path: &Path, env: &Envelope<T>) -> nptc::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string(env).map_err(|e| NptcError::Internal(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads an artifact of the given kind and checks that none of its inputs changed.
pub fn read_artifact<T: DeserializeOwned>(path: &Path, kind: &str) -> nptc::Result<Envelope<T>> {
    let bytes = read_cached(path)?;
    let env: Envelope<T> = serde_json::from_slice(&bytes).map_err(|e| NptcError::Parse {
        line: e.line(),
        message: format!("{}: not a valid {kind} artifact: {e}", path.display()),
    })?;
    if env.kind != kind {
        return Err(NptcError::CacheMiss(format!(
            "{} holds a {} artifact, expected {kind}",
            path.display(),
            env.kind
        )));
    }
    if env.version != FORMAT_VERSION {
        return Err(NptcError::CacheMiss(format!(
            "{}: artifact version {} is not {FORMAT_VERSION}",
            path.display(),
            env.version
        )));
    }
    for input in &env.inputs {
        let now = sha256_file(&input.path).map_err(|e| match e {
            NptcError::CacheMiss(m) => NptcError::CacheMiss(format!(
                "{}: upstream {} input {m}",
                path.display(),
                input.role
            )),
            other => other,
        })?;
        if now != input.sha256 {
            return Err(NptcError::CacheMiss(format!(
                "{} is stale: its {} input {} changed since it was built",
                path.display(),
                input.role,
                input.path.display()
            )));
        }
    }
    Ok(env)
}
