//! Stage manifests. Every command records the configuration hash it ran
//! under, the digests of the upstream stages it consumed and the SHA-256 of
//! every file it wrote, so later commands can tell missing outputs from
//! stale ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use privad::binio::{read_file, read_text, write_file};
use privad::models::checkpoint::sha256_hex;
use privad::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    /// Stage key, e.g. `extract-features/anon`.
    pub stage: String,
    /// Command line that produces this stage.
    pub command: String,
    pub config_hash: String,
    /// Upstream stage key to the digest it had when this stage ran.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory where possible) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Hash over `outputs`; what downstream stages record.
    pub digest: String,
}

pub fn manifest_path(run_dir: &Path, stage: &str) -> PathBuf {
    run_dir.join("manifests").join(format!("{}.json", stage.replace('/', "__")))
}

fn display_key(run_dir: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(run_dir).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn resolve(run_dir: &Path, key: &str) -> PathBuf {
    let p = Path::new(key);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        run_dir.join(p)
    }
}

fn walk(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        for e in entries {
            walk(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// SHA-256 of every file under `paths` (files or directories).
pub fn hash_outputs(run_dir: &Path, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::Dataset(format!("expected output {} was not written", p.display())));
        }
        walk(p, &mut files)?;
    }
    files
        .into_iter()
        .map(|f| Ok((display_key(run_dir, &f), sha256_hex(&read_file(&f)?))))
        .collect()
}

fn digest_of(outputs: &BTreeMap<String, String>) -> String {
    let listing: String = outputs.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
    sha256_hex(listing.as_bytes())
}

impl StageManifest {
    pub fn new(
        run_dir: &Path,
        stage: &str,
        command: &str,
        config_hash: &str,
        inputs: &[&StageManifest],
        outputs: &[PathBuf],
    ) -> Result<Self> {
        let outputs = hash_outputs(run_dir, outputs)?;
        Ok(Self {
            stage: stage.into(),
            command: command.into(),
            config_hash: config_hash.into(),
            inputs: inputs.iter().map(|m| (m.stage.clone(), m.digest.clone())).collect(),
            digest: digest_of(&outputs),
            outputs,
        })
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&manifest_path(run_dir, &self.stage), json.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Re-hashes every recorded output.
    pub fn verify_outputs(&self, run_dir: &Path) -> Result<()> {
        let stale = |path: PathBuf, detail: String| Error::StaleArtifact {
            path,
            producer: self.command.clone(),
            detail,
        };
        for (key, hash) in &self.outputs {
            let path = resolve(run_dir, key);
            if !path.exists() {
                return Err(stale(path, "output was deleted".into()));
            }
            if &sha256_hex(&read_file(&path)?) != hash {
                return Err(stale(path, "output was modified after it was written".into()));
            }
        }
        if digest_of(&self.outputs) != self.digest {
            return Err(stale(manifest_path(run_dir, &self.stage), "manifest digest does not match its outputs".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_track_contents() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("out/sub")).unwrap();
        std::fs::write(root.join("out/a.txt"), "a").unwrap();
        std::fs::write(root.join("out/sub/b.txt"), "b").unwrap();
        let m = StageManifest::new(root, "s/x", "privad s", "h", &[], &[root.join("out")]).unwrap();
        assert_eq!(m.outputs.keys().collect::<Vec<_>>(), ["out/a.txt", "out/sub/b.txt"]);
        m.write(root).unwrap();
        let back = StageManifest::read(&manifest_path(root, "s/x")).unwrap();
        assert_eq!(back, m);
        back.verify_outputs(root).unwrap();

        std::fs::write(root.join("out/a.txt"), "changed").unwrap();
        assert!(matches!(back.verify_outputs(root), Err(Error::StaleArtifact { .. })));
        let again = StageManifest::new(root, "s/x", "privad s", "h", &[&m], &[root.join("out")]).unwrap();
        assert_ne!(again.digest, m.digest);
        assert_eq!(again.inputs["s/x"], m.digest);
    }
}
