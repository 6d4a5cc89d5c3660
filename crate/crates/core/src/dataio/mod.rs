//! File formats, synthetic corpora and checkpoint serialization.
//!
//! Binary payloads are little-endian. Text files are UTF-8, one record per
//! line, whitespace-separated.

mod archive;
mod checkpoint;
mod synth;
mod text;

use std::io::Write;
use std::path::Path;

pub use archive::{EmbeddingArchive, FeatureArchive, ARCHIVE_VERSION, EMBEDDING_MAGIC, FEATURE_MAGIC};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use synth::{
    gen_retrieval, gen_synthetic, gen_trials, original_speaker, synth_features, Enrollment,
    RetrievalManifest, Split, SynthCorpus, SynthCorpusSpec, TrialSet, Utterance, CNCELEB_GENRES,
    SPEED_SUFFIXES,
};
pub use text::{
    format_score, parse_enrollments, parse_genre_table, parse_key_values, parse_scores, parse_trials,
    parse_two_column, write_enrollments, write_genre_table, write_scores, write_trials, write_two_column,
    GenreTable,
};

use crate::error::Result;

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// then renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
