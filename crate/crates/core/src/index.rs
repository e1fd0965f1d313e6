//! Flat on-disk passage store.
//!
//! An index directory holds exactly two files:
//!
//! - `passages.bin`: concatenated passage blobs, each `id_len u32 | id | embedding record`
//!   where the embedding record uses the `FGRE` layout from [`crate::embedder`];
//! - `manifest.json`: the [`IndexManifest`], written last via rename so a
//!   crash mid-build leaves no manifest and the directory reads as absent.
//!
//! Only encoder output is stored. The relevance head is applied at query time
//! and adds nothing to the index.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{decode_embeddings, encode_embeddings, EmbedderConfig, Encoder, TokenizedText};
use crate::error::{Error, FormatError, Result};
use crate::io::{read_json, read_jsonl, write_u32};
use crate::tensor::EmbeddingMatrix;

pub const BLOB_FILE: &str = "passages.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_VERSION: u32 = 1;

/// One line of a corpus or queries file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEntry {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassageRecord {
    pub id: String,
    pub tok: TokenizedText,
    pub emb: EmbeddingMatrix,
}

impl PassageRecord {
    pub fn text(&self) -> &str {
        &self.tok.text
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub version: u32,
    pub dim: usize,
    pub embedder: EmbedderConfig,
    pub encoder_digest: String,
    pub projected: bool,
    pub passages: usize,
    pub blob_bytes: u64,
    pub entries: Vec<ManifestEntry>,
    pub created_unix: u64,
}

impl IndexManifest {
    fn validate(&self) -> Result<()> {
        if self.version != INDEX_VERSION {
            return Err(FormatError::UnsupportedVersion {
                expected: INDEX_VERSION,
                found: self.version,
            }
            .into());
        }
        if self.entries.len() != self.passages {
            return Err(FormatError::Corrupt(format!(
                "manifest lists {} entries but declares {} passages",
                self.entries.len(),
                self.passages
            ))
            .into());
        }
        let mut expected_offset = 0;
        for e in &self.entries {
            if e.offset != expected_offset || e.len == 0 {
                return Err(FormatError::Corrupt(format!("bad offset for passage {:?}", e.id)).into());
            }
            expected_offset += e.len;
        }
        if expected_offset != self.blob_bytes {
            return Err(FormatError::Corrupt("entry lengths do not cover the blob".into()).into());
        }
        Ok(())
    }
}

fn encode_passage(encoder: &Encoder, entry: &TextEntry) -> Result<Vec<u8>> {
    let (tok, emb) = encoder.encode(&entry.text)?;
    let mut buf = Vec::new();
    write_u32(&mut buf, entry.id.len() as u32).expect("vec write");
    buf.extend_from_slice(entry.id.as_bytes());
    encode_embeddings(&mut buf, &emb, &tok)?;
    Ok(buf)
}

fn decode_passage(bytes: &[u8]) -> Result<PassageRecord> {
    let mut r = bytes;
    let id_len = crate::io::read_u32(&mut r, "passage id length")? as usize;
    if r.len() < id_len {
        return Err(FormatError::Truncated { what: "passage id" }.into());
    }
    let id = std::str::from_utf8(&r[..id_len])
        .map_err(|e| FormatError::Corrupt(format!("passage id: {e}")))?
        .to_string();
    r = &r[id_len..];
    let (emb, tok) = decode_embeddings(&mut r)?;
    if !r.is_empty() {
        return Err(FormatError::Corrupt(format!("trailing bytes after passage {id:?}")).into());
    }
    Ok(PassageRecord { id, tok, emb })
}

pub fn read_corpus(path: &Path) -> Result<Vec<TextEntry>> {
    read_jsonl(path)
}

/// Builds an index with an unprojected encoder.
pub fn build_index(corpus_path: &Path, cfg: &EmbedderConfig, out_dir: &Path) -> Result<IndexManifest> {
    build_index_with(corpus_path, &Encoder::new(cfg.clone()), out_dir)
}

pub fn build_index_with(corpus_path: &Path, encoder: &Encoder, out_dir: &Path) -> Result<IndexManifest> {
    let corpus = read_corpus(corpus_path)?;
    for (i, entry) in corpus.iter().enumerate() {
        if entry.text.trim().is_empty() {
            return Err(Error::Malformed {
                path: corpus_path.to_path_buf(),
                line: i + 1,
                reason: format!("passage {:?} has empty text", entry.id),
            });
        }
    }
    build_index_from_entries(&corpus, encoder, out_dir)
}

pub fn build_index_from_entries(corpus: &[TextEntry], encoder: &Encoder, out_dir: &Path) -> Result<IndexManifest> {
    encoder.config.validate()?;
    let mut seen = HashMap::with_capacity(corpus.len());
    for entry in corpus {
        if seen.insert(entry.id.as_str(), ()).is_some() {
            return Err(Error::DuplicateId(entry.id.clone()));
        }
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    // Invalidate any previous index before touching the blob.
    match fs::remove_file(&manifest_path) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(&manifest_path, e)),
    }

    let blobs: Vec<Vec<u8>> = corpus
        .par_iter()
        .map(|entry| encode_passage(encoder, entry))
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(blobs.len());
    let mut offset = 0u64;
    for (entry, blob) in corpus.iter().zip(&blobs) {
        entries.push(ManifestEntry {
            id: entry.id.clone(),
            offset,
            len: blob.len() as u64,
        });
        offset += blob.len() as u64;
    }

    let blob_path = out_dir.join(BLOB_FILE);
    let mut file = File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    for blob in &blobs {
        file.write_all(blob).map_err(|e| Error::io(&blob_path, e))?;
    }
    file.sync_all().map_err(|e| Error::io(&blob_path, e))?;

    let manifest = IndexManifest {
        version: INDEX_VERSION,
        dim: encoder.dim(),
        embedder: encoder.config.clone(),
        encoder_digest: encoder.digest(),
        projected: encoder.projection.is_some(),
        passages: entries.len(),
        blob_bytes: offset,
        entries,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    let json = serde_json::to_vec_pretty(&manifest).expect("serializable");
    fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// A loaded, immutable index.
#[derive(Debug)]
pub struct Index {
    dir: PathBuf,
    manifest: IndexManifest,
    encoder: Encoder,
    records: Vec<PassageRecord>,
    by_id: HashMap<String, usize>,
}

pub fn read_manifest(dir: &Path) -> Result<IndexManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::IndexAbsent(dir.to_path_buf()));
    }
    let manifest: IndexManifest = read_json(&path)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads an index, checking it was built by an unprojected encoder with `cfg`.
pub fn load_index(dir: &Path, cfg: &EmbedderConfig) -> Result<Index> {
    Index::open_with(dir, Encoder::new(cfg.clone()))
}

pub fn get_passage<'a>(ix: &'a Index, id: &str) -> Result<&'a PassageRecord> {
    ix.get(id)
}

impl Index {
    /// Opens an index using the embedder configuration recorded in its manifest.
    /// Indexes built with a projection must be opened with [`Index::open_with`].
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.projected {
            return Err(Error::StaleIndex {
                expected: "unprojected encoder".into(),
                found: manifest.encoder_digest,
            });
        }
        let encoder = Encoder::new(manifest.embedder.clone());
        Self::load(dir, manifest, encoder)
    }

    pub fn open_with(dir: &Path, encoder: Encoder) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let expected = encoder.digest();
        if manifest.encoder_digest != expected {
            return Err(Error::StaleIndex {
                expected,
                found: manifest.encoder_digest,
            });
        }
        Self::load(dir, manifest, encoder)
    }

    fn load(dir: &Path, manifest: IndexManifest, encoder: Encoder) -> Result<Self> {
        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(FormatError::Corrupt(format!(
                "{} is {} bytes, manifest expects {}",
                blob_path.display(),
                blob.len(),
                manifest.blob_bytes
            ))
            .into());
        }
        let records: Vec<PassageRecord> = manifest
            .entries
            .par_iter()
            .map(|e| {
                let rec = decode_passage(&blob[e.offset as usize..(e.offset + e.len) as usize])?;
                if rec.id != e.id {
                    return Err(FormatError::Corrupt(format!("blob holds {:?} where manifest lists {:?}", rec.id, e.id)).into());
                }
                if rec.emb.cols() != manifest.dim {
                    return Err(Error::Shape {
                        op: "load passage",
                        left: (rec.emb.rows(), manifest.dim),
                        right: rec.emb.shape(),
                    });
                }
                Ok(rec)
            })
            .collect::<Result<_>>()?;
        let by_id = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            encoder,
            records,
            by_id,
        })
    }

    pub fn get(&self, id: &str) -> Result<&PassageRecord> {
        self.by_id
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::NotFound(id.to_string()))
    }

    pub fn passages(&self) -> &[PassageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_jsonl;

    fn cfg() -> EmbedderConfig {
        EmbedderConfig {
            dim: 8,
            ..EmbedderConfig::default()
        }
    }

    fn entries() -> Vec<TextEntry> {
        ["The cat sat on the mat.", "Dogs bark at night.", "Größe matters, naïvely."]
            .iter()
            .enumerate()
            .map(|(i, t)| TextEntry {
                id: format!("p{i}"),
                text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn build_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        write_jsonl(&corpus, &entries()).unwrap();
        let out = dir.path().join("idx");
        let manifest = build_index(&corpus, &cfg(), &out).unwrap();
        assert_eq!(manifest.passages, 3);

        let ix = load_index(&out, &cfg()).unwrap();
        for e in entries() {
            let rec = get_passage(&ix, &e.id).unwrap();
            assert_eq!(rec.text(), e.text);
            let (tok, emb) = Encoder::new(cfg()).encode(&e.text).unwrap();
            assert_eq!(rec.tok, tok);
            assert_eq!(rec.emb.as_slice(), emb.as_slice());
        }
        assert!(matches!(ix.get("nope"), Err(Error::NotFound(id)) if id == "nope"));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut e = entries();
        e[2].id = "p0".into();
        let dir = tempfile::tempdir().unwrap();
        let err = build_index_from_entries(&e, &Encoder::new(cfg()), dir.path()).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "p0"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        fs::write(&corpus, "{\"id\":\"a\",\"text\":\"x\"}\n\n{\"id\": 3}\n").unwrap();
        match build_index(&corpus, &cfg(), &dir.path().join("idx")) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = build_index_from_entries(&entries(), &Encoder::new(cfg()), &blocker.join("idx")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn different_seed_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        build_index_from_entries(&entries(), &Encoder::new(cfg()), dir.path()).unwrap();
        let other = EmbedderConfig { seed: 99, ..cfg() };
        assert!(matches!(load_index(dir.path(), &other), Err(Error::StaleIndex { .. })));
    }

    #[test]
    fn missing_manifest_means_absent() {
        let dir = tempfile::tempdir().unwrap();
        build_index_from_entries(&entries(), &Encoder::new(cfg()), dir.path()).unwrap();
        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(matches!(Index::open(dir.path()), Err(Error::IndexAbsent(_))));
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_index_from_entries(&entries(), &Encoder::new(cfg()), a.path()).unwrap();
        build_index_from_entries(&entries(), &Encoder::new(cfg()), b.path()).unwrap();
        assert_eq!(
            fs::read(a.path().join(BLOB_FILE)).unwrap(),
            fs::read(b.path().join(BLOB_FILE)).unwrap()
        );
    }

    #[test]
    fn projected_index_requires_matching_projection() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = crate::tensor::Matrix::identity(8);
        p.set(0, 1, 0.5);
        let enc = Encoder::new(cfg()).with_projection(p).unwrap();
        build_index_from_entries(&entries(), &enc, dir.path()).unwrap();
        assert!(matches!(Index::open(dir.path()), Err(Error::StaleIndex { .. })));
        let ix = Index::open_with(dir.path(), enc.clone()).unwrap();
        let (_, emb) = enc.encode(&entries()[0].text).unwrap();
        assert_eq!(ix.get("p0").unwrap().emb, emb);
    }
}
