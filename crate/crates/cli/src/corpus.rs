//! On-disk layout of a synthetic corpus directory.

use std::collections::BTreeMap;
use std::path::Path;

use svkit::dataio::{
    parse_two_column, write_atomic, write_two_column, EmbeddingArchive, Split, SynthCorpus, Utterance,
};
use svkit::{Error, Result};

pub const UTTS: &str = "utts.sveb";
pub const UTT2SPK: &str = "utt2spk";
pub const UTT2GENRE: &str = "utt2genre";
pub const UTT2SPLIT: &str = "utt2split";
pub const FEATS: &str = "feats.svfm";

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_corpus(dir: &Path, corpus: &SynthCorpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dim = corpus.utterances.first().map_or(0, |u| u.vec.len());
    let mut archive = EmbeddingArchive::new(dim);
    let mut spk = Vec::new();
    let mut genre = Vec::new();
    let mut split = Vec::new();
    for u in &corpus.utterances {
        archive.push(u.id.clone(), u.vec.iter().map(|&x| x as f32).collect())?;
        spk.push((u.id.clone(), u.speaker.clone()));
        genre.push((u.id.clone(), u.genre.clone()));
        split.push((u.id.clone(), u.split.as_str().to_string()));
    }
    archive.save(dir.join(UTTS))?;
    write_atomic(dir.join(UTT2SPK), write_two_column(&spk).as_bytes())?;
    write_atomic(dir.join(UTT2GENRE), write_two_column(&genre).as_bytes())?;
    write_atomic(dir.join(UTT2SPLIT), write_two_column(&split).as_bytes())?;
    Ok(())
}

fn column_map(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(parse_two_column(&read_text(path)?)?.into_iter().collect())
}

fn field<'a>(map: &'a BTreeMap<String, String>, id: &str, file: &str) -> Result<&'a str> {
    map.get(id).map(String::as_str).ok_or_else(|| Error::NoData(format!("{id} missing from {file}")))
}

/// Reads a directory written by [`write_corpus`]; utterance order is the archive order.
pub fn load_corpus(dir: &Path) -> Result<SynthCorpus> {
    let archive = EmbeddingArchive::load(dir.join(UTTS))?;
    let spk = column_map(&dir.join(UTT2SPK))?;
    let genre = column_map(&dir.join(UTT2GENRE))?;
    let split = column_map(&dir.join(UTT2SPLIT))?;
    let mut utterances = Vec::with_capacity(archive.len());
    let mut train_classes: Vec<String> = Vec::new();
    let mut eval_speakers: Vec<String> = Vec::new();
    for (id, vec) in archive.records {
        let speaker = field(&spk, &id, UTT2SPK)?.to_string();
        let split = Split::parse(field(&split, &id, UTT2SPLIT)?)?;
        let list = if split == Split::Train { &mut train_classes } else { &mut eval_speakers };
        if list.last() != Some(&speaker) && !list.contains(&speaker) {
            list.push(speaker.clone());
        }
        utterances.push(Utterance {
            genre: field(&genre, &id, UTT2GENRE)?.to_string(),
            id,
            speaker,
            split,
            vec: vec.into_iter().map(f64::from).collect(),
        });
    }
    Ok(SynthCorpus { utterances, train_classes, eval_speakers, genre_offsets: BTreeMap::new() })
}
