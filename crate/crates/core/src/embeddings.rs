//! Token vocabularies, dense embedding matrices and the portable bundle format.
//!
//! A bundle is a directory holding three files:
//!
//! - `vocab.tsv`: `<id>\t<token>` per line, ids ascending from 0
//! - `matrix.bin`: `R2DLEMB1` magic, u32 LE version (1), u64 LE rows,
//!   u64 LE dim, then `rows * dim` little-endian f32 values, row-major
//! - `meta.json`: provenance plus the sha256 of `matrix.bin`
//!
//! Values are held as f64 in memory; the file stores f32.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MATRIX_MAGIC: &[u8; 8] = b"R2DLEMB1";
pub const MATRIX_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8;

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const MATRIX_FILE: &str = "matrix.bin";
pub const META_FILE: &str = "meta.json";

/// The 20 canonical residues in their fixed id order.
pub const AMINO_ACIDS: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W',
    'Y',
];
pub const PAD_TOKEN: &str = "<pad>";
pub const PAD_ID: usize = 20;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("missing bundle file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: bad magic bytes, expected R2DLEMB1")]
    BadMagic { file: String },
    #[error("{file}: unsupported version {version}")]
    UnsupportedVersion { file: String, version: u32 },
    #[error("{file}: header truncated ({len} bytes)")]
    TruncatedHeader { file: String, len: usize },
    #[error("{file}: dimension header declares rows={rows} dim={dim} ({expected} payload bytes) but payload has {actual} bytes")]
    DimensionMismatch {
        file: String,
        rows: u64,
        dim: u64,
        expected: u64,
        actual: u64,
    },
    #[error("matrix data length {len} does not equal rows {rows} x dim {dim}")]
    ShapeMismatch { rows: usize, dim: usize, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("duplicate token {token:?} at id {id}")]
    DuplicateToken { token: String, id: usize },
    #[error("vocab.tsv line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error("vocabulary size {vocab} does not match matrix rows {rows}")]
    SizeMismatch { vocab: usize, rows: usize },
    #[error("meta.json sha256 {recorded} does not match matrix.bin sha256 {actual}")]
    HashMismatch { recorded: String, actual: String },
    #[error("meta.json: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
}

pub type Result<T, E = EmbeddingError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbeddingError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            EmbeddingError::MissingFile(path.to_path_buf())
        } else {
            EmbeddingError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Ordered set of unique tokens with contiguous ids from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(EmbeddingError::DuplicateToken {
                    token: tok.clone(),
                    id,
                });
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| EmbeddingError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{id}\t{tok}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| EmbeddingError::VocabFormat {
                    line: line_no,
                    reason: "expected <id>\\t<token>".into(),
                })?;
            let id: usize = id.parse().map_err(|_| EmbeddingError::VocabFormat {
                line: line_no,
                reason: format!("id {id:?} is not an integer"),
            })?;
            if id != tokens.len() {
                return Err(EmbeddingError::VocabFormat {
                    line: line_no,
                    reason: format!("id {id} out of order, expected {}", tokens.len()),
                });
            }
            tokens.push(tok.to_string());
        }
        Self::new(tokens)
    }
}

/// The 20 canonical amino acids (ids 0..20) followed by the padding token at id 20.
pub fn amino_acid_vocabulary() -> Vocabulary {
    let tokens = AMINO_ACIDS
        .iter()
        .map(|c| c.to_string())
        .chain(std::iter::once(PAD_TOKEN.to_string()));
    Vocabulary::new(tokens).expect("amino-acid tokens are unique")
}

/// Dense row-major matrix, one token embedding per row.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    hash: OnceLock<String>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.dim == other.dim && self.data == other.data
    }
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows * dim != data.len() {
            return Err(EmbeddingError::ShapeMismatch {
                rows,
                dim,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index });
        }
        Ok(Self {
            rows,
            dim,
            data,
            hash: OnceLock::new(),
        })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self::new(rows, dim, vec![0.0; rows * dim]).expect("zeros are finite")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(EmbeddingError::ShapeMismatch {
                    rows: rows.len(),
                    dim,
                    len: data.len() + r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    /// Serialized `matrix.bin` bytes (values rounded to f32).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Parses `matrix.bin` bytes; `file` names the source in errors.
    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 8 && &bytes[..8] != MATRIX_MAGIC {
                return Err(EmbeddingError::BadMagic { file: file.into() });
            }
            return Err(EmbeddingError::TruncatedHeader {
                file: file.into(),
                len: bytes.len(),
            });
        }
        if &bytes[..8] != MATRIX_MAGIC {
            return Err(EmbeddingError::BadMagic { file: file.into() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MATRIX_VERSION {
            return Err(EmbeddingError::UnsupportedVersion {
                file: file.into(),
                version,
            });
        }
        let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let dim = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        let expected = rows.checked_mul(dim).and_then(|n| n.checked_mul(4));
        if expected != Some(payload.len() as u64) {
            return Err(EmbeddingError::DimensionMismatch {
                file: file.into(),
                rows,
                dim,
                expected: expected.unwrap_or(u64::MAX),
                actual: payload.len() as u64,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(rows as usize, dim as usize, data)
    }

    /// Hex sha256 of [`Self::to_bytes`]; equals the sha256 of the bundle's `matrix.bin`.
    pub fn content_hash(&self) -> &str {
        self.hash.get_or_init(|| sha256_hex(&self.to_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub source_model: String,
    /// Which layer the rows were taken from; the input embedding table by default.
    pub layer: String,
    #[serde(default)]
    pub sha256: String,
}

impl Default for BundleMeta {
    fn default() -> Self {
        Self {
            source_model: "unknown".into(),
            layer: "input_embeddings".into(),
            sha256: String::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub vocab: Vocabulary,
    pub matrix: EmbeddingMatrix,
    pub meta: BundleMeta,
}

impl Bundle {
    pub fn hash(&self) -> &str {
        self.matrix.content_hash()
    }
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let vocab_path = dir.join(VOCAB_FILE);
    let matrix_path = dir.join(MATRIX_FILE);
    let meta_path = dir.join(META_FILE);

    let vocab_text = fs::read_to_string(&vocab_path).map_err(io_err(&vocab_path))?;
    let vocab = Vocabulary::from_tsv(&vocab_text)?;
    let bytes = fs::read(&matrix_path).map_err(io_err(&matrix_path))?;
    let matrix = EmbeddingMatrix::from_bytes(&bytes, MATRIX_FILE)?;
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: BundleMeta = serde_json::from_str(&meta_text)?;

    if vocab.len() != matrix.rows() {
        return Err(EmbeddingError::SizeMismatch {
            vocab: vocab.len(),
            rows: matrix.rows(),
        });
    }
    let actual = sha256_hex(&bytes);
    if meta.sha256 != actual {
        return Err(EmbeddingError::HashMismatch {
            recorded: meta.sha256,
            actual,
        });
    }
    Ok(Bundle {
        vocab,
        matrix,
        meta,
    })
}

pub fn save_bundle(
    vocab: &Vocabulary,
    matrix: &EmbeddingMatrix,
    dir: impl AsRef<Path>,
) -> Result<()> {
    save_bundle_with_meta(vocab, matrix, &BundleMeta::default(), dir)
}

pub fn save_bundle_with_meta(
    vocab: &Vocabulary,
    matrix: &EmbeddingMatrix,
    meta: &BundleMeta,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    if vocab.len() != matrix.rows() {
        return Err(EmbeddingError::SizeMismatch {
            vocab: vocab.len(),
            rows: matrix.rows(),
        });
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bytes = matrix.to_bytes();
    let meta = BundleMeta {
        sha256: sha256_hex(&bytes),
        ..meta.clone()
    };
    let write = |name: &str, contents: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(io_err(&path))
    };
    write(VOCAB_FILE, vocab.to_tsv().as_bytes())?;
    write(MATRIX_FILE, &bytes)?;
    let mut meta_json = serde_json::to_string_pretty(&meta)?;
    meta_json.push('\n');
    write(META_FILE, meta_json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(rows: u64, dim: u64) -> Vec<u8> {
        let mut b = MATRIX_MAGIC.to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&rows.to_le_bytes());
        b.extend_from_slice(&dim.to_le_bytes());
        b
    }

    #[test]
    fn header_arithmetic() {
        let mut b = header(3, 4);
        b.extend(std::iter::repeat_n(0u8, 48));
        let m = EmbeddingMatrix::from_bytes(&b, "matrix.bin").unwrap();
        assert_eq!((m.rows(), m.dim()), (3, 4));
    }

    #[test]
    fn short_payload_is_dimension_mismatch() {
        let mut b = header(3, 4);
        b.extend(std::iter::repeat_n(0u8, 40));
        match EmbeddingMatrix::from_bytes(&b, "matrix.bin") {
            Err(EmbeddingError::DimensionMismatch {
                actual: 40,
                expected: 48,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = header(1, 1);
        b.extend_from_slice(&1f32.to_le_bytes());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bad, "m"),
            Err(EmbeddingError::BadMagic { .. })
        ));
        let mut v2 = b.clone();
        v2[8] = 2;
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&v2, "m"),
            Err(EmbeddingError::UnsupportedVersion { version: 2, .. })
        ));
    }

    #[test]
    fn amino_acids() {
        let v = amino_acid_vocabulary();
        assert_eq!(v.len(), 21);
        assert_eq!(v.id("A").unwrap(), 0);
        assert_eq!(v.id(PAD_TOKEN).unwrap(), PAD_ID);
        assert!(matches!(v.id("B"), Err(EmbeddingError::UnknownToken(_))));
        assert_eq!(v, amino_acid_vocabulary());
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let err = Vocabulary::from_tsv("0\tA\n1\tR\n2\tA\n").unwrap_err();
        assert!(matches!(err, EmbeddingError::DuplicateToken { id: 2, .. }));
    }

    #[test]
    fn save_writes_all_files_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::new(["A", "R"]).unwrap();
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_bundle(&vocab, &m, dir.path()).unwrap();
        for f in [VOCAB_FILE, MATRIX_FILE, META_FILE] {
            assert!(dir.path().join(f).exists());
        }
        let first = fs::read(dir.path().join(MATRIX_FILE)).unwrap();
        let b = load_bundle(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_bundle(&b.vocab, &b.matrix, dir2.path()).unwrap();
        assert_eq!(first, fs::read(dir2.path().join(MATRIX_FILE)).unwrap());
        assert_eq!(b.hash(), b.meta.sha256);
    }

    #[test]
    fn size_mismatch_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::new(["A"]).unwrap();
        let m = EmbeddingMatrix::zeros(2, 2);
        assert!(matches!(
            save_bundle(&vocab, &m, dir.path()),
            Err(EmbeddingError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn missing_file_named() {
        let dir = tempfile::tempdir().unwrap();
        match load_bundle(dir.path()) {
            Err(EmbeddingError::MissingFile(p)) => assert!(p.ends_with(VOCAB_FILE)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tampered_matrix_fails_hash() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::new(["A"]).unwrap();
        save_bundle(&vocab, &EmbeddingMatrix::zeros(1, 2), dir.path()).unwrap();
        let p = dir.path().join(MATRIX_FILE);
        let mut b = fs::read(&p).unwrap();
        let n = b.len();
        b[n - 1] ^= 0x01;
        fs::write(&p, b).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(EmbeddingError::HashMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn bundle_round_trip(rows in 1usize..64, dim in 1usize..64, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-3.0f32..3.0) as f64).collect();
            let m = EmbeddingMatrix::new(rows, dim, data).unwrap();
            let vocab = Vocabulary::new((0..rows).map(|i| format!("tok{i}"))).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_bundle(&vocab, &m, dir.path()).unwrap();
            let b = load_bundle(dir.path()).unwrap();
            prop_assert_eq!(&b.vocab, &vocab);
            prop_assert!(b.matrix.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
