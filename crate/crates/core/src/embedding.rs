//! Token embedding tables and the LUME v1 binary format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LUME" | u32 version = 1 | u32 dim | u64 count |
//! count × (u32 token_id | dim × f32)
//! ```
//!
//! No padding and no trailing bytes. Components are widened to `f64` on load.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};

use indexmap::IndexMap;
use thiserror::Error;

use crate::trace::{ResponseTrace, TokenId};

pub const MAGIC: &[u8; 4] = b"LUME";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("bad magic {0:?}, expected \"LUME\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("stream truncated while reading {0}")]
    Truncated(String),
    #[error("trailing bytes after {0} declared records")]
    TrailingBytes(u64),
    #[error("token {token_id}: component {component} is not finite")]
    NonFinite { token_id: TokenId, component: usize },
    #[error("token {0}: zero-norm vector")]
    ZeroNorm(TokenId),
    #[error("duplicate token id {0}")]
    DuplicateTokenId(TokenId),
    #[error("token {token_id}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        token_id: TokenId,
        expected: usize,
        got: usize,
    },
    #[error("read error: {0}")]
    Io(io::Error),
}

/// Token id → embedding vector, all of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: IndexMap<TokenId, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entries: IndexMap::new(),
        }
    }

    /// Adds a vector, rejecting duplicates, wrong dimensions, non-finite
    /// components and zero vectors.
    pub fn insert(&mut self, token_id: TokenId, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                token_id,
                expected: self.dim,
                got: vector.len(),
            });
        }
        if let Some(component) = vector.iter().position(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite { token_id, component });
        }
        if vector.iter().all(|&x| x == 0.0) {
            return Err(EmbeddingError::ZeroNorm(token_id));
        }
        if self.entries.contains_key(&token_id) {
            return Err(EmbeddingError::DuplicateTokenId(token_id));
        }
        self.entries.insert(token_id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token_id: TokenId) -> Option<&[f64]> {
        self.entries.get(&token_id).map(Vec::as_slice)
    }

    pub fn contains(&self, token_id: TokenId) -> bool {
        self.entries.contains_key(&token_id)
    }

    /// Entries in insertion (file) order.
    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &[f64])> {
        self.entries.iter().map(|(&id, v)| (id, v.as_slice()))
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: impl FnOnce() -> String) -> Result<(), EmbeddingError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EmbeddingError::Truncated(what()),
        _ => EmbeddingError::Io(e),
    })
}

/// Reads a LUME v1 stream, consuming exactly the declared records.
pub fn parse_embeddings<R: Read>(reader: R) -> Result<EmbeddingTable, EmbeddingError> {
    let mut r = io::BufReader::new(reader);

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, || "magic".into())?;
    if &magic != MAGIC {
        return Err(EmbeddingError::BadMagic(magic));
    }
    let mut word = [0u8; 4];
    read_exact_or(&mut r, &mut word, || "version".into())?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(EmbeddingError::UnsupportedVersion(version));
    }
    read_exact_or(&mut r, &mut word, || "dim".into())?;
    let dim = u32::from_le_bytes(word) as usize;
    let mut long = [0u8; 8];
    read_exact_or(&mut r, &mut long, || "count".into())?;
    let count = u64::from_le_bytes(long);

    let mut table = EmbeddingTable::new(dim);
    table.entries.reserve(count.min(1 << 20) as usize);
    let mut components = vec![0u8; dim * 4];
    for record in 0..count {
        read_exact_or(&mut r, &mut word, || format!("token id of record {record}"))?;
        let token_id = u32::from_le_bytes(word);
        read_exact_or(&mut r, &mut components, || {
            format!("vector of record {record} (token {token_id})")
        })?;
        let vector: Vec<f64> = components
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        table.insert(token_id, vector)?;
    }

    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(table),
        Ok(_) => Err(EmbeddingError::TrailingBytes(count)),
        Err(e) => Err(EmbeddingError::Io(e)),
    }
}

/// Writes a table in LUME v1. Components are narrowed to `f32`.
pub fn write_embeddings<W: Write>(mut writer: W, table: &EmbeddingTable) -> io::Result<()> {
    writer.write_all(MAGIC)?;
    writer.write_all(&VERSION.to_le_bytes())?;
    writer.write_all(&(table.dim as u32).to_le_bytes())?;
    writer.write_all(&(table.len() as u64).to_le_bytes())?;
    for (id, v) in table.iter() {
        writer.write_all(&id.to_le_bytes())?;
        for &x in v {
            writer.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Every token id referenced by a top-K distribution but absent from the
/// table, ascending and deduplicated.
pub fn validate_coverage(traces: &[ResponseTrace], table: &EmbeddingTable) -> Vec<TokenId> {
    let mut missing = BTreeSet::new();
    for token in traces.iter().flat_map(|r| &r.tokens) {
        let rand_ids = token.dist_rand.iter().flat_map(|d| d.ids());
        for id in token.dist_ctx.ids().chain(rand_ids) {
            if !table.contains(id) {
                missing.insert(id);
            }
        }
    }
    missing.into_iter().collect()
}
