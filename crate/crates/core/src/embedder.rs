//! Word-level tokenizer, a deterministic toy contextual embedder, and the
//! binary embedding file format.
//!
//! The embedder stands in for a frozen transformer encoder: every lowercased
//! surface form gets a pseudo-random base vector derived from a ChaCha stream
//! keyed by `(seed, surface)`, and each token is then mixed with the mean of
//! its neighbours inside a window before L2 normalization. Outputs depend only
//! on the text and the configuration.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! "FGRE" | version u32 = 1 | h u32 | n u32 | n*h f32 row-major | len u32 | JSON
//! ```
//!
//! where the JSON block is the tokenized text `{"text", "tokens": [{"s","b","e"}]}`.
//! Offsets are half-open and count Unicode scalar values, not bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::io::{expect_magic, expect_version, read_exact, read_f32_matrix, read_u32, write_f32_matrix, write_u32};
use crate::tensor::{l2_normalize_rows, matmul, EmbeddingMatrix, Matrix, OpCounter};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"FGRE";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    #[serde(rename = "s")]
    pub surface: String,
    #[serde(rename = "b")]
    pub start: usize,
    #[serde(rename = "e")]
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub text: String,
    pub tokens: Vec<Token>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.surface.as_str())
    }

    /// Keeps the first `max` tokens; the text itself is left intact.
    pub fn truncate(&mut self, max: usize) {
        self.tokens.truncate(max);
    }

    /// Checks offsets are increasing, in bounds, and agree with the surfaces.
    pub fn validate(&self) -> Result<()> {
        let chars: Vec<char> = self.text.chars().collect();
        let mut prev_end = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            let ok = t.start >= prev_end
                && t.start < t.end
                && t.end <= chars.len()
                && chars[t.start..t.end].iter().copied().eq(t.surface.chars());
            if !ok {
                return Err(FormatError::Corrupt(format!(
                    "token {i} {:?} at {}..{} does not match the text",
                    t.surface, t.start, t.end
                ))
                .into());
            }
            prev_end = t.end;
        }
        Ok(())
    }
}

/// Slice of `text` between two character offsets (half-open).
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut idx = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let b = idx.nth(start).unwrap_or(text.len());
    let e = if end > start {
        idx.nth(end - start - 1).unwrap_or(text.len())
    } else {
        b
    };
    &text[b..e]
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '\u{2010}'..='\u{205E}' | '\u{3000}'..='\u{303F}' | '«' | '»' | '¡' | '¿' | '·')
}

/// Splits on whitespace and detaches every punctuation character as its own
/// token. Surfaces keep their original case.
pub fn tokenize(text: &str) -> Result<TokenizedText> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;

    let flush = |current: &mut String, start: usize, end: usize, tokens: &mut Vec<Token>| {
        if !current.is_empty() {
            tokens.push(Token {
                surface: std::mem::take(current),
                start,
                end,
            });
        }
    };

    let mut pos = 0;
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut current, start, pos, &mut tokens);
        } else if is_punctuation(c) {
            flush(&mut current, start, pos, &mut tokens);
            tokens.push(Token {
                surface: c.to_string(),
                start: pos,
                end: pos + 1,
            });
        } else {
            if current.is_empty() {
                start = pos;
            }
            current.push(c);
        }
        pos += 1;
    }
    flush(&mut current, start, pos, &mut tokens);

    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(TokenizedText {
        text: text.to_string(),
        tokens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub seed: u64,
    pub context_window: usize,
    pub mix_weight: f32,
    pub max_tokens: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            seed: 0,
            context_window: 2,
            mix_weight: 0.5,
            max_tokens: 180,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidParameter(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.max_tokens < 1 {
            return Err(Error::InvalidParameter("max_tokens must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::InvalidParameter(format!(
                "mix_weight must lie in [0, 1], got {}",
                self.mix_weight
            )));
        }
        Ok(())
    }
}

fn base_vector(surface: &str, cfg: &EmbedderConfig) -> Vec<f32> {
    let mut hasher = Sha256::new();
    hasher.update(cfg.seed.to_le_bytes());
    hasher.update(surface.to_lowercase().as_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
    let mut v: Vec<f32> = (0..cfg.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Embeds the tokens of `tok`. Inputs longer than `cfg.max_tokens` are
/// truncated (with a warning) so the result may have fewer rows than tokens;
/// [`Encoder::encode`] truncates the tokenization to match.
pub fn embed(tok: &TokenizedText, cfg: &EmbedderConfig) -> Result<EmbeddingMatrix> {
    cfg.validate()?;
    let n = tok.len().min(cfg.max_tokens);
    if tok.len() > cfg.max_tokens {
        log::warn!(
            "truncating input from {} to {} tokens",
            tok.len(),
            cfg.max_tokens
        );
    }
    let h = cfg.dim;
    let base: Vec<Vec<f32>> = tok.tokens[..n]
        .iter()
        .map(|t| base_vector(&t.surface, cfg))
        .collect();

    let w = cfg.context_window;
    let alpha = cfg.mix_weight;
    let mut out = Matrix::zeros(n, h);
    for i in 0..n {
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(n - 1);
        let count = (hi - lo + 1) as f32;
        let row = out.row_mut(i);
        row.copy_from_slice(&base[i]);
        if alpha > 0.0 {
            let mut mean = vec![0.0f32; h];
            for b in &base[lo..=hi] {
                for (m, x) in mean.iter_mut().zip(b) {
                    *m += x;
                }
            }
            for (r, m) in row.iter_mut().zip(&mean) {
                *r += alpha * (m / count);
            }
        }
    }
    l2_normalize_rows(&out)
}

/// Text encoder used for both indexing and querying: the toy embedder
/// followed by an optional learned `h x h` projection and renormalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EmbedderConfig,
    pub projection: Option<Matrix>,
}

impl Encoder {
    pub fn new(config: EmbedderConfig) -> Self {
        Self {
            config,
            projection: None,
        }
    }

    /// Attaches a projection. An exact identity is dropped so that it digests
    /// the same as no projection.
    pub fn with_projection(mut self, projection: Matrix) -> Result<Self> {
        let h = self.config.dim;
        if projection.shape() != (h, h) {
            return Err(Error::Shape {
                op: "projection",
                left: (h, h),
                right: projection.shape(),
            });
        }
        self.projection = (projection != Matrix::identity(h)).then_some(projection);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn encode(&self, text: &str) -> Result<(TokenizedText, EmbeddingMatrix)> {
        let mut tok = tokenize(text)?;
        let x = embed(&tok, &self.config)?;
        tok.truncate(x.rows());
        Ok((tok, self.project(x)?))
    }

    pub fn project(&self, x: EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        match &self.projection {
            None => Ok(x),
            Some(p) => l2_normalize_rows(&matmul(&x, p, &mut OpCounter::new())?),
        }
    }

    /// Hex SHA-256 over the embedder configuration and projection weights.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("serializable"));
        if let Some(p) = &self.projection {
            hasher.update(b"projection");
            for v in p.as_slice() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

pub fn encode_embeddings(w: &mut impl Write, matrix: &EmbeddingMatrix, tok: &TokenizedText) -> Result<()> {
    if matrix.rows() != tok.len() {
        return Err(Error::LengthMismatch {
            what: "embedding rows vs tokens",
            expected: tok.len(),
            found: matrix.rows(),
        });
    }
    let json = serde_json::to_vec(tok).expect("serializable");
    let mut buf = Vec::with_capacity(20 + matrix.as_slice().len() * 4 + json.len());
    buf.extend_from_slice(&EMBEDDING_MAGIC);
    write_u32(&mut buf, EMBEDDING_VERSION).expect("vec write");
    write_u32(&mut buf, matrix.cols() as u32).expect("vec write");
    write_u32(&mut buf, matrix.rows() as u32).expect("vec write");
    write_f32_matrix(&mut buf, matrix).expect("vec write");
    write_u32(&mut buf, json.len() as u32).expect("vec write");
    buf.extend_from_slice(&json);
    w.write_all(&buf).map_err(|e| Error::io("<stream>", e))
}

pub fn decode_embeddings(r: &mut impl Read) -> Result<(EmbeddingMatrix, TokenizedText)> {
    expect_magic(r, EMBEDDING_MAGIC)?;
    expect_version(r, EMBEDDING_VERSION)?;
    let h = read_u32(r, "dim")? as usize;
    let n = read_u32(r, "rows")? as usize;
    let matrix = read_f32_matrix(r, n, h, "embeddings")?;
    let len = read_u32(r, "text length")? as usize;
    let mut json = vec![0u8; len];
    read_exact(r, &mut json, "tokenized text")?;
    let tok: TokenizedText =
        serde_json::from_slice(&json).map_err(|e| FormatError::Corrupt(format!("tokenized text: {e}")))?;
    tok.validate()?;
    if tok.len() != n {
        return Err(FormatError::Corrupt(format!("{n} embedding rows but {} tokens", tok.len())).into());
    }
    Ok((matrix, tok))
}

pub fn write_embeddings(path: &Path, matrix: &EmbeddingMatrix, tok: &TokenizedText) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_embeddings(&mut w, matrix, tok)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingMatrix, TokenizedText)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use proptest::prelude::*;

    fn spans(tok: &TokenizedText) -> Vec<(&str, usize, usize)> {
        tok.tokens.iter().map(|t| (t.surface.as_str(), t.start, t.end)).collect()
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        let tok = tokenize("The cat sat.").unwrap();
        assert_eq!(
            spans(&tok),
            vec![("The", 0, 3), ("cat", 4, 7), ("sat", 8, 11), (".", 11, 12)]
        );
        assert_eq!(spans(&tokenize("a").unwrap()), vec![("a", 0, 1)]);
        assert!(matches!(tokenize("  "), Err(Error::EmptyInput)));
        assert!(matches!(tokenize(""), Err(Error::EmptyInput)));
    }

    #[test]
    fn offsets_count_characters() {
        let tok = tokenize("café, naïve").unwrap();
        assert_eq!(spans(&tok), vec![("café", 0, 4), (",", 4, 5), ("naïve", 6, 11)]);
        tok.validate().unwrap();
        assert_eq!(char_slice(&tok.text, 6, 11), "naïve");
    }

    fn small_cfg(alpha: f32) -> EmbedderConfig {
        EmbedderConfig {
            dim: 16,
            seed: 3,
            context_window: 2,
            mix_weight: alpha,
            max_tokens: 180,
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let tok = tokenize("late interaction keeps token vectors").unwrap();
        let cfg = EmbedderConfig::default();
        let a = embed(&tok, &cfg).unwrap();
        let b = embed(&tok, &cfg).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(a.shape(), (5, 128));
    }

    #[test]
    fn no_mixing_gives_identical_rows_for_repeats() {
        let tok = tokenize("red fish blue fish RED").unwrap();
        let e = embed(&tok, &small_cfg(0.0)).unwrap();
        assert_eq!(e.row(1), e.row(3));
        // lowercased surface keys the base vector
        assert_eq!(e.row(0), e.row(4));
        assert_eq!(e.row(0), base_vector("red", &small_cfg(0.0)).as_slice());
    }

    #[test]
    fn mixing_separates_repeats_in_different_contexts() {
        let tok = tokenize("fish swim fish swim deep").unwrap();
        let e = embed(&tok, &small_cfg(0.5)).unwrap();
        assert_ne!(e.row(0), e.row(2));
        assert_ne!(e.row(1), e.row(3));
    }

    #[test]
    fn different_seed_changes_vectors() {
        let tok = tokenize("word").unwrap();
        let mut cfg = small_cfg(0.5);
        let a = embed(&tok, &cfg).unwrap();
        cfg.seed = 4;
        assert_ne!(a, embed(&tok, &cfg).unwrap());
    }

    #[test]
    fn truncation_keeps_prefix() {
        let mut cfg = small_cfg(0.5);
        cfg.max_tokens = 3;
        let enc = Encoder::new(cfg);
        let (tok, e) = enc.encode("one two three four five").unwrap();
        assert_eq!(tok.len(), 3);
        assert_eq!(e.rows(), 3);
    }

    #[test]
    fn identity_projection_is_dropped() {
        let enc = Encoder::new(small_cfg(0.5));
        let digest = enc.digest();
        let enc = enc.with_projection(Matrix::identity(16)).unwrap();
        assert!(enc.projection.is_none());
        assert_eq!(enc.digest(), digest);
        let mut p = Matrix::identity(16);
        p.set(0, 1, 0.25);
        let enc = enc.with_projection(p).unwrap();
        assert_ne!(enc.digest(), digest);
        assert!(enc.clone().with_projection(Matrix::identity(3)).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.fgre");
        let (tok, e) = Encoder::new(small_cfg(0.5)).encode("Round trip, exactly.").unwrap();
        write_embeddings(&path, &e, &tok).unwrap();
        let (e2, tok2) = read_embeddings(&path).unwrap();
        assert_eq!(e.as_slice(), e2.as_slice());
        assert_eq!(tok, tok2);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));

        bytes[0] = b'F';
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 2, .. }))
        ));

        bytes[4] = 1;
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn externally_written_file_loads_with_declared_shape() {
        // Assemble the file by hand from the documented layout.
        let text = "a b c d e f g";
        let tok = tokenize(text).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FGRE");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&128u32.to_le_bytes());
        bytes.extend_from_slice(&7u32.to_le_bytes());
        for i in 0..7 * 128 {
            bytes.extend_from_slice(&(i as f32 * 0.001).to_le_bytes());
        }
        let json = serde_json::to_vec(&tok).unwrap();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);

        let (m, t) = decode_embeddings(&mut bytes.as_slice()).unwrap();
        assert_eq!(m.shape(), (7, 128));
        assert_eq!(m.get(6, 127), (7 * 128 - 1) as f32 * 0.001);
        assert_eq!(t, tok);
    }

    proptest! {
        #[test]
        fn tokens_reconstruct_text(text in "[a-zA-Z .,!?'\\-é\\t\\n]{1,60}") {
            match tokenize(&text) {
                Err(Error::EmptyInput) => prop_assert!(text.trim().is_empty()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
                Ok(tok) => {
                    tok.validate().unwrap();
                    // Rebuild from slices and the gaps between them.
                    let mut rebuilt = String::new();
                    let mut last = 0;
                    let n_chars = text.chars().count();
                    for t in &tok.tokens {
                        let gap = char_slice(&text, last, t.start);
                        prop_assert!(gap.chars().all(char::is_whitespace));
                        rebuilt.push_str(gap);
                        rebuilt.push_str(&t.surface);
                        last = t.end;
                    }
                    rebuilt.push_str(char_slice(&text, last, n_chars));
                    prop_assert_eq!(rebuilt, text);
                }
            }
        }

        #[test]
        fn rows_are_unit_norm(text in "[a-z]{1,6}( [a-z]{1,6}){0,12}", alpha in 0.0f32..=1.0, w in 0usize..4) {
            let cfg = EmbedderConfig { dim: 24, seed: 9, context_window: w, mix_weight: alpha, max_tokens: 180 };
            let e = embed(&tokenize(&text).unwrap(), &cfg).unwrap();
            for row in e.iter_rows() {
                prop_assert!((dot(row, row).sqrt() - 1.0).abs() <= 1e-5);
            }
        }
    }
}
