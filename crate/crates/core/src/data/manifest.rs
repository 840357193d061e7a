//! Preference-pair manifests: JSON lines of
//! `{"id", "domain", "chosen", "rejected", "magnitude"?}`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub domain: String,
    pub chosen: u64,
    pub rejected: u64,
    /// Preference strength; 0 means not annotated.
    #[serde(default)]
    pub magnitude: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    domain: String,
    chosen: u64,
    rejected: u64,
    #[serde(default)]
    magnitude: Option<i64>,
}

/// Parses and validates a manifest. Line numbers in errors are 1-based.
pub fn parse_pairs(text: &str) -> Result<Vec<PreferencePair>> {
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Data {
            line: Some(line_no),
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let magnitude = rec.magnitude.unwrap_or(0);
        if magnitude < 0 {
            return Err(err(format!("negative magnitude {magnitude}")));
        }
        if rec.chosen == rec.rejected {
            return Err(err(format!("pair `{}` uses sequence {} twice", rec.id, rec.chosen)));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id `{}`", rec.id)));
        }
        pairs.push(PreferencePair {
            id: rec.id,
            domain: rec.domain,
            chosen: rec.chosen,
            rejected: rec.rejected,
            magnitude,
        });
    }
    Ok(pairs)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[PreferencePair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p).expect("in-memory write");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Checks that every pair resolves against `store`.
pub fn resolve(pairs: &[PreferencePair], store: &EmbeddingStore) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        for id in [p.chosen, p.rejected] {
            if store.get(id).is_none() {
                return Err(Error::Data {
                    line: Some(i + 1),
                    msg: format!("pair `{}` references missing sequence {id}", p.id),
                });
            }
        }
    }
    Ok(())
}
