//! Provenance records written next to every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use dedr_core::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// File path (relative to the work directory when inside it) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Regular files under `path` (or `path` itself), sorted.
fn files(path: &Path) -> CliResult<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let entries =
        fs::read_dir(path).map_err(|e| Error::io(format!("listing {}", path.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", path.display()), e))?;
        out.extend(files(&entry.path())?);
    }
    out.sort();
    Ok(out)
}

fn digest_all(work: &Path, paths: &[PathBuf]) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for p in paths {
        for f in files(p)? {
            if f.to_string_lossy().ends_with(".manifest.json") {
                continue;
            }
            let key = f
                .strip_prefix(work)
                .unwrap_or(&f)
                .to_string_lossy()
                .replace('\\', "/");
            map.insert(key, sha256_file(&f)?);
        }
    }
    Ok(map)
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

pub struct ManifestWriter<'a> {
    pub work: &'a Path,
    pub cfg: &'a ExperimentConfig,
    pub command: &'a str,
    pub args: BTreeMap<String, String>,
    pub seed: u64,
}

impl ManifestWriter<'_> {
    /// Writes `<primary>.manifest.json` describing `inputs` and `outputs`.
    pub fn write(
        &self,
        primary: &Path,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> CliResult<Manifest> {
        let manifest = Manifest {
            command: self.command.to_string(),
            args: self.args.clone(),
            config_hash: self.cfg.hash(),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: digest_all(self.work, inputs)?,
            outputs: digest_all(self.work, outputs)?,
        };
        let path = manifest_path(primary);
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, body + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(manifest)
    }
}

pub fn read_manifest(artifact: &Path) -> CliResult<Manifest> {
    let path = manifest_path(artifact);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Parse {
            path,
            line: e.line(),
            message: e.to_string(),
        }
        .into()
    })
}
