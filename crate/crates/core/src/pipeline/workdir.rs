//! Work directory layout, the per-workdir lock, the artifact manifest and
//! lineage stamps.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SUBDIRS: [&str; 6] = ["tiles", "embeddings", "models", "pca", "repr", "reports"];
pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub producer: String,
    pub lineage: String,
    pub sha256: String,
    /// Lineage of each workdir input the producer read.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    /// Content hashes of external input files, keyed by config path.
    pub external: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Holds the workdir lock until dropped.
#[derive(Debug)]
pub struct Workdir {
    pub root: PathBuf,
    lock: PathBuf,
    pub manifest: Manifest,
}

impl Workdir {
    /// Creates the layout if needed and takes the lock.
    pub fn open(root: &Path, command: &str) -> Result<Workdir> {
        for d in SUBDIRS {
            let p = root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let lock = root.join(LOCK);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{command}");
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Data(format!(
                    "workdir {} is locked by another command; delete {} if no command is running",
                    root.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        let mpath = root.join(MANIFEST);
        let manifest = if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            serde_json::from_str(&text).map_err(|e| Error::parse(mpath.display().to_string(), e.to_string()))?
        } else {
            Manifest::default()
        };
        Ok(Workdir { root: root.to_path_buf(), lock, manifest })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Errors with the producing command when `rel` is missing.
    pub fn require(&self, rel: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, producer })
        }
    }

    /// Lineage recorded for `rel`, from the manifest.
    pub fn lineage_of(&self, rel: &str) -> Option<&str> {
        self.manifest.artifacts.get(rel).map(|a| a.lineage.as_str())
    }

    /// Writes `bytes` to `rel` and records it in the manifest.
    pub fn write_artifact(
        &mut self,
        rel: &str,
        bytes: &[u8],
        producer: &str,
        lineage: &str,
        inputs: &[&str],
    ) -> Result<()> {
        let p = self.path(rel);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let inputs = inputs
            .iter()
            .map(|i| (i.to_string(), self.lineage_of(i).unwrap_or("external").to_string()))
            .collect();
        self.manifest.artifacts.insert(
            rel.to_string(),
            ArtifactEntry {
                producer: producer.to_string(),
                lineage: lineage.to_string(),
                sha256: sha256_hex(bytes),
                inputs,
            },
        );
        self.save_manifest()
    }

    pub fn record_external(&mut self, key: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.manifest.external.insert(key.to_string(), sha256_hex(&bytes));
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<()> {
        let p = self.root.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    /// Refuses inputs whose lineages differ.
    pub fn check_same_lineage(&self, rels: &[&str]) -> Result<String> {
        let mut seen: Vec<(&str, String)> = Vec::new();
        for rel in rels {
            let l = match self.lineage_of(rel) {
                Some(l) => l.to_string(),
                None => read_lineage(&self.path(rel))?
                    .ok_or_else(|| Error::Data(format!("{rel} carries no lineage stamp")))?,
            };
            seen.push((rel, l));
        }
        if let Some((first, l0)) = seen.first() {
            if let Some((other, l)) = seen.iter().find(|(_, l)| l != l0) {
                return Err(Error::Data(format!(
                    "mixed lineage: {first} is {l0} but {other} is {l}; re-run the pipeline with one config"
                )));
            }
            return Ok(l0.clone());
        }
        Ok(String::new())
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

/// Value of the first `# lineage=` line among a text file's leading comments.
pub fn read_lineage(path: &Path) -> Result<Option<String>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        match line.strip_prefix('#') {
            Some(c) => {
                if let Some(v) = c.trim().strip_prefix("lineage=") {
                    return Ok(Some(v.trim().to_string()));
                }
            }
            None => break,
        }
    }
    Ok(None)
}

/// Prefixes CSV text with a lineage comment.
pub fn stamp(lineage: &str, body: &[u8]) -> Vec<u8> {
    let mut out = format!("# lineage={lineage}\n").into_bytes();
    out.extend_from_slice(body);
    out
}
