//! Stage inputs, their hashes, and the manifest each run leaves behind.
//!
//! A manifest is itself a run configuration: passing it back through
//! `--config` repeats the run on the same (hash-checked) inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ppa_core::numerics::{blob_path, manifest_path};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(2 * bytes.len());
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Hash over the files that make up an input. Encoder stems span three
/// files, which are hashed in a fixed order.
fn hash_input(files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = fs::read(f).with_context(|| format!("reading input {}", f.display()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    File,
    /// `<stem>.cfg`, `<stem>.manifest`, `<stem>.bin`.
    EncoderStem,
    /// A head tensor archive: `<stem>.manifest`, `<stem>.bin`.
    TensorStem,
}

fn files_of(path: &Path, kind: InputKind) -> Vec<PathBuf> {
    match kind {
        InputKind::File => vec![path.to_path_buf()],
        InputKind::EncoderStem => vec![path.with_extension("cfg"), manifest_path(path), blob_path(path)],
        InputKind::TensorStem => vec![manifest_path(path), blob_path(path)],
    }
}

/// One command's run: resolved configuration, output directory, and the
/// inputs consumed so far.
pub struct Run {
    pub command: &'static str,
    pub out: PathBuf,
    pub config: RunConfig,
    inputs: Vec<(String, PathBuf, String)>,
}

impl Run {
    pub fn new(command: &'static str, out: &Path, config: RunConfig) -> Result<Self> {
        if let Some(c) = &config.command {
            if c != command {
                bail!("configuration is a manifest of `{c}`, not `{command}`");
            }
        }
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            config,
            inputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Resolves input `name`: an `input.<name>` override, else `default`
    /// inside the output directory. The content hash is checked against an
    /// `input.<name>.sha256` entry when the configuration has one.
    pub fn input(&mut self, name: &str, default: &str, kind: InputKind) -> Result<PathBuf> {
        let path = match self.config.inputs.get(name) {
            Some(p) => p.clone(),
            None => self.out.join(default),
        };
        let files = files_of(&path, kind);
        for f in &files {
            if !f.exists() {
                bail!("input {name}: {} does not exist", f.display());
            }
        }
        let hash = hash_input(&files)?;
        if let Some(expected) = self.config.input_hashes.get(name) {
            if *expected != hash {
                bail!(
                    "input {name} ({}) has changed since the manifest was written: sha256 {hash}, expected {expected}",
                    path.display()
                );
            }
        }
        let abs = fs::canonicalize(files[0].parent().unwrap_or(Path::new(".")))
            .map(|dir| dir.join(path.file_name().unwrap_or_default()))
            .unwrap_or_else(|_| path.clone());
        self.inputs.retain(|(n, _, _)| n != name);
        self.inputs.push((name.to_string(), abs, hash));
        Ok(path)
    }

    pub fn manifest_text(&self) -> String {
        let mut s = format!(
            "# ppa {} run manifest; rerun with: ppa {} --config <this file> --out <dir>\ncommand={}\n",
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.command
        );
        s.push_str(&self.config.render());
        for (name, path, hash) in &self.inputs {
            s.push_str(&format!("input.{name}={}\n", path.display()));
            s.push_str(&format!("input.{name}.sha256={hash}\n"));
        }
        s
    }

    /// Written before the stage does any work, so a failed run still
    /// documents what was attempted.
    pub fn write_manifest(&self) -> Result<PathBuf> {
        let p = self.out.join(format!("{}.manifest", self.command));
        fs::write(&p, self.manifest_text()).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ppa_core::kv::KvMap;

    #[test]
    fn known_digest() {
        assert_eq!(
            hex(&Sha256::digest(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trips_and_checks_hashes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("vocab.txt"), "x\n").unwrap();
        let mut run = Run::new("preprocess", dir.path(), RunConfig::toy()).unwrap();
        run.input("vocab", "vocab.txt", InputKind::File).unwrap();
        let p = run.write_manifest().unwrap();

        let cfg = RunConfig::from_kv(&KvMap::load(&p).unwrap(), false).unwrap();
        assert_eq!(cfg.command.as_deref(), Some("preprocess"));
        let other = dir.path().join("elsewhere");
        let mut again = Run::new("preprocess", &other, cfg.clone()).unwrap();
        again.input("vocab", "vocab.txt", InputKind::File).unwrap();

        fs::write(dir.path().join("vocab.txt"), "y\n").unwrap();
        let mut changed = Run::new("preprocess", &other, cfg.clone()).unwrap();
        assert!(changed.input("vocab", "vocab.txt", InputKind::File).is_err());
        assert!(Run::new("finetune", &other, cfg).is_err());
    }
}
