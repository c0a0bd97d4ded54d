//! Weight files on disk. The byte layout is documented in
//! [`oatrack_core::weights`] and in `docs/weight-format.md`.

use std::path::Path;

pub use oatrack_core::weights::{bundled_embedding, BUNDLED_EMBEDDING};
use oatrack_core::weights::{decode, encode};
use oatrack_core::{load_named, Embedding, EmbeddingArch, Parameters, Tensor};

use crate::error::{io_err, Error, Result};

pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|e| Error::Ingest(format!("{}: {}", path.display(), e)))
}

pub fn write_weights(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(io_err(path))
}

/// Entries of any parameter set, cloned, in the set's own order.
pub fn entries_of<P: Parameters + ?Sized>(p: &P) -> Vec<(String, Tensor)> {
    p.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

pub fn embedding_from_entries(arch: &EmbeddingArch, entries: &[(String, Tensor)]) -> Result<Embedding> {
    let mut e = Embedding::zeros(arch.clone())?;
    load_named(&mut e, entries)?;
    Ok(e)
}

pub fn load_embedding(path: &Path, arch: &EmbeddingArch) -> Result<Embedding> {
    embedding_from_entries(arch, &read_weights(path)?)
}
