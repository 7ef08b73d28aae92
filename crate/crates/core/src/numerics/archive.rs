//! Named-tensor archive: a textual manifest next to a raw little-endian
//! `f32` blob.
//!
//! ```text
//! ppa-tensors 1
//! <name>\t<d0>x<d1>...\t<byte offset>\t<byte length>
//! ...
//! end\t<total bytes>
//! ```
//!
//! The manifest is fully validated against the blob before any tensor is
//! materialized, so a corrupt archive never loads partially.

use std::fs;
use std::path::{Path, PathBuf};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "ppa-tensors 1";

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn write_tensors<'a, I>(stem: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut manifest = String::from(MAGIC);
    manifest.push('\n');
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in entries {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::Data(format!("invalid tensor name {name:?}")));
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let nbytes = t.len() * 4;
        manifest.push_str(&format!(
            "{name}\t{}\t{}\t{nbytes}\n",
            shape.join("x"),
            blob.len()
        ));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.push_str(&format!("end\t{}\n", blob.len()));
    let mp = manifest_path(stem);
    let bp = blob_path(stem);
    fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

fn parse_manifest(path: &Path, text: &str) -> Result<(Vec<Entry>, usize)> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, MAGIC)) => {}
        Some((_, other)) => return Err(bad(1, format!("unknown header {other:?}"))),
        None => return Err(bad(1, "empty manifest".into())),
    }
    let mut entries = Vec::new();
    let mut expected_offset = 0usize;
    for (i, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.first() == Some(&"end") {
            let total = fields
                .get(1)
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| bad(i + 1, "malformed end line".into()))?;
            if total != expected_offset {
                return Err(bad(
                    i + 1,
                    format!("total {total} disagrees with entries ({expected_offset})"),
                ));
            }
            return Ok((entries, total));
        }
        if fields.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let shape: Vec<usize> = fields[1]
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(i + 1, format!("bad shape {:?}", fields[1])))?;
        let offset: usize = fields[2]
            .parse()
            .map_err(|_| bad(i + 1, "bad offset".into()))?;
        let nbytes: usize = fields[3]
            .parse()
            .map_err(|_| bad(i + 1, "bad length".into()))?;
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() * 4 != nbytes {
            return Err(bad(i + 1, format!("shape {shape:?} does not match {nbytes} bytes")));
        }
        if offset != expected_offset {
            return Err(bad(i + 1, format!("offset {offset}, expected {expected_offset}")));
        }
        expected_offset += nbytes;
        entries.push(Entry {
            name: fields[0].to_string(),
            shape,
            offset,
            nbytes,
        });
    }
    Err(bad(text.lines().count(), "missing end line".into()))
}

pub fn read_tensors(stem: &Path) -> Result<Vec<(String, Tensor)>> {
    let mp = manifest_path(stem);
    let bp = blob_path(stem);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let (entries, total) = parse_manifest(&mp, &text)?;
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if blob.len() != total {
        return Err(Error::Data(format!(
            "{}: blob has {} bytes, manifest declares {total}",
            bp.display(),
            blob.len()
        )));
    }
    entries
        .into_iter()
        .map(|e| {
            let data = blob[e.offset..e.offset + e.nbytes]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok((e.name, Tensor::new(e.shape, data)?))
        })
        .collect()
}
