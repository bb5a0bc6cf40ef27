//! Versioned JSON artifacts.
//!
//! Every file the planner reads or writes carries a `schema_version` tag and
//! is serialized with stable field order (structs and `BTreeMap`s only), so
//! identical runs produce byte-identical artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: schema_version {found} is not supported (expected {expected})")]
    SchemaMismatch { path: String, found: u32, expected: u32 },
}

/// Write `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let path_str = path.display().to_string();
    let file = File::create(path)
        .map_err(|source| ArtifactError::Io { path: path_str.clone(), source })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|source| ArtifactError::Json { path: path_str.clone(), source })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|source| ArtifactError::Io { path: path_str, source })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    let path_str = path.display().to_string();
    let file = File::open(path)
        .map_err(|source| ArtifactError::Io { path: path_str.clone(), source })?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|source| ArtifactError::Json { path: path_str, source })
}

/// Check an artifact's embedded schema version.
pub fn check_schema(path: &Path, found: u32) -> Result<(), ArtifactError> {
    if found != SCHEMA_VERSION {
        return Err(ArtifactError::SchemaMismatch {
            path: path.display().to_string(),
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}
