//! Pre-trained word embedding table: plain-text loader plus a binary
//! sidecar it generates for fast startup.
//!
//! Text format: one line per token, the token followed by `dim`
//! space-separated decimal floats. A leading `count dim` header line (as
//! shipped by common embedding releases) is detected and skipped. The
//! sidecar keeps the vector block memory-mapped and copies 8*dim bytes per
//! lookup.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayViewMut1};

use crate::error::{Error, Result};
use crate::text::{TokenMatrix, TokenSequence};

const SIDECAR_MAGIC: &[u8; 4] = b"STEV";
const SIDECAR_VERSION: u32 = 1;

/// What to do with a token absent from the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OovPolicy {
    /// Substitute the zero vector and count the miss.
    #[default]
    Zero,
    /// Fail with `MissingToken`.
    Strict,
}

enum Storage {
    Owned(Array2<f64>),
    Mapped { map: memmap2::Mmap, data_offset: usize },
}

impl std::fmt::Debug for Storage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Storage::Owned(a) => write!(f, "Owned({} vectors)", a.nrows()),
            Storage::Mapped { .. } => write!(f, "Mapped"),
        }
    }
}

/// Token -> fixed-width vector lookup with a recorded source identifier.
#[derive(Debug)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    storage: Storage,
    /// Identifier recorded in run manifests and checkpoints.
    pub source: String,
}

impl EmbeddingTable {
    /// Builds a table from in-memory pairs; used by tests and synthetic runs.
    pub fn from_pairs(pairs: Vec<(String, Vec<f64>)>, dim: usize, source: &str) -> Result<Self> {
        let mut index = HashMap::with_capacity(pairs.len());
        let mut vectors = Array2::zeros((pairs.len(), dim));
        for (i, (token, values)) in pairs.into_iter().enumerate() {
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: values.len(),
                    context: "embedding vector",
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    path: source.into(),
                    message: format!("non-finite embedding for token {token:?}"),
                });
            }
            for (j, v) in values.iter().enumerate() {
                vectors[[i, j]] = *v;
            }
            index.insert(token, i);
        }
        Ok(Self {
            dim,
            index,
            storage: Storage::Owned(vectors),
            source: source.to_string(),
        })
    }

    /// Loads the plain-text format. `expected_dim` of `None` infers the
    /// width from the first data line.
    pub fn load_text(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut dim = expected_dim;
        let mut index = HashMap::new();
        let mut flat: Vec<f64> = Vec::new();
        let mut count = 0usize;

        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap().to_string();
            let values: Vec<f64> = fields
                .map(|s| {
                    s.parse::<f64>().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        message: format!("line {}: bad float {s:?}", lineno + 1),
                    })
                })
                .collect::<Result<_>>()?;
            // Header line "count dim" shipped by common releases.
            if lineno == 0 && values.len() == 1 && token.chars().all(|c| c.is_ascii_digit()) {
                continue;
            }
            let d = *dim.get_or_insert(values.len());
            if values.len() != d {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!(
                        "line {}: expected {} values, got {}",
                        lineno + 1,
                        d,
                        values.len()
                    ),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("line {}: non-finite value", lineno + 1),
                });
            }
            index.insert(token, count);
            flat.extend_from_slice(&values);
            count += 1;
        }
        let dim = dim.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: "no embedding lines".into(),
        })?;
        let vectors = Array2::from_shape_vec((count, dim), flat).expect("consistent row width");
        Ok(Self {
            dim,
            index,
            storage: Storage::Owned(vectors),
            source: path.display().to_string(),
        })
    }

    /// Writes the binary sidecar next to the original file. Layout: magic,
    /// version, dim, count, source string, token strings, then the raw
    /// little-endian f64 block.
    pub fn save_sidecar(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(SIDECAR_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(SIDECAR_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(self.dim as u32).map_err(io)?;
        w.write_u64::<LittleEndian>(self.index.len() as u64)
            .map_err(io)?;
        w.write_u32::<LittleEndian>(self.source.len() as u32)
            .map_err(io)?;
        w.write_all(self.source.as_bytes()).map_err(io)?;
        // Tokens in row order so indices survive the round trip.
        let mut ordered: Vec<(&String, &usize)> = self.index.iter().collect();
        ordered.sort_by_key(|(_, &i)| i);
        for (token, _) in &ordered {
            w.write_u32::<LittleEndian>(token.len() as u32).map_err(io)?;
            w.write_all(token.as_bytes()).map_err(io)?;
        }
        let mut row = vec![0u8; 8 * self.dim];
        for (_, &i) in &ordered {
            let mut buf = Array1::zeros(self.dim);
            self.vector_into(i, &mut buf.view_mut());
            for (chunk, v) in row.chunks_exact_mut(8).zip(buf.iter()) {
                LittleEndian::write_f64(chunk, *v);
            }
            w.write_all(&row).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Opens a sidecar produced by [`save_sidecar`], keeping the vector
    /// block memory-mapped.
    pub fn load_sidecar(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let map = unsafe { memmap2::Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        if map.len() < 20 || &map[0..4] != SIDECAR_MAGIC {
            return Err(parse("not an embedding sidecar".into()));
        }
        let version = LittleEndian::read_u32(&map[4..8]);
        if version != SIDECAR_VERSION {
            return Err(parse(format!("unsupported sidecar version {version}")));
        }
        let dim = LittleEndian::read_u32(&map[8..12]) as usize;
        let count = LittleEndian::read_u64(&map[12..20]) as usize;
        let mut pos = 20usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > map.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: "truncated sidecar".into(),
                });
            }
            let s = &map[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let src_len = LittleEndian::read_u32(take(&mut pos, 4)?) as usize;
        let source = String::from_utf8(take(&mut pos, src_len)?.to_vec())
            .map_err(|_| parse("sidecar source not UTF-8".into()))?;
        let mut index = HashMap::with_capacity(count);
        for i in 0..count {
            let len = LittleEndian::read_u32(take(&mut pos, 4)?) as usize;
            let token = String::from_utf8(take(&mut pos, len)?.to_vec())
                .map_err(|_| parse(format!("token {i} not UTF-8")))?;
            index.insert(token, i);
        }
        let data_offset = pos;
        if data_offset + count * dim * 8 > map.len() {
            return Err(parse("sidecar data block truncated".into()));
        }
        Ok(Self {
            dim,
            index,
            storage: Storage::Mapped { map, data_offset },
            source,
        })
    }

    /// Loads `path`, preferring `path.bin` when present and newer; otherwise
    /// parses the text and writes the sidecar for the next startup.
    pub fn load_with_sidecar(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            let fresh = match (path.metadata(), sidecar.metadata()) {
                (Ok(a), Ok(b)) => match (a.modified(), b.modified()) {
                    (Ok(ta), Ok(tb)) => tb >= ta,
                    _ => true,
                },
                _ => true,
            };
            if fresh {
                return Self::load_sidecar(&sidecar);
            }
        }
        let table = Self::load_text(path, None)?;
        // Best effort: a read-only corpus directory is not an error.
        let _ = table.save_sidecar(&sidecar);
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    fn vector_into(&self, row: usize, out: &mut ArrayViewMut1<'_, f64>) {
        match &self.storage {
            Storage::Owned(vectors) => out.assign(&vectors.row(row)),
            Storage::Mapped { map, data_offset } => {
                let start = data_offset + row * self.dim * 8;
                let bytes = &map[start..start + self.dim * 8];
                for (j, chunk) in bytes.chunks_exact(8).enumerate() {
                    out[j] = LittleEndian::read_f64(chunk);
                }
            }
        }
    }

    pub fn get(&self, token: &str) -> Option<Array1<f64>> {
        self.index.get(token).map(|&row| {
            let mut v = Array1::zeros(self.dim);
            self.vector_into(row, &mut v.view_mut());
            v
        })
    }

    /// Embeds a token sequence into a `max_tokens` x `dim` matrix. Row i is
    /// the vector of token i; tokens past `max_tokens` are dropped (head
    /// truncation); remaining rows stay zero. Returns the matrix and the
    /// number of out-of-vocabulary substitutions.
    pub fn embed(
        &self,
        tokens: &TokenSequence,
        max_tokens: usize,
        policy: OovPolicy,
    ) -> Result<(TokenMatrix, usize)> {
        let mut rows = Array2::zeros((max_tokens, self.dim));
        let true_length = tokens.len().min(max_tokens);
        let mut oov = 0usize;
        for (i, token) in tokens.tokens().iter().take(max_tokens).enumerate() {
            match self.index.get(token) {
                Some(&row) => self.vector_into(row, &mut rows.row_mut(i)),
                None => match policy {
                    OovPolicy::Zero => oov += 1,
                    OovPolicy::Strict => return Err(Error::MissingToken(token.clone())),
                },
            }
        }
        Ok((
            TokenMatrix::new(rows, true_length).expect("padding rows are zero by construction"),
            oov,
        ))
    }
}

/// Sidecar path: the text path with `.bin` appended.
pub fn sidecar_path(text_path: &Path) -> std::path::PathBuf {
    let mut os = text_path.as_os_str().to_os_string();
    os.push(".bin");
    std::path::PathBuf::from(os)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn toy_table() -> EmbeddingTable {
        EmbeddingTable::from_pairs(
            vec![
                ("alpha".into(), vec![1.0, 2.0, 3.0]),
                ("beta".into(), vec![-1.0, 0.5, 0.25]),
                ("gamma,".into(), vec![0.0, 0.0, 9.0]),
            ],
            3,
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn embed_places_rows_and_pads() {
        let table = toy_table();
        let (m, oov) = table
            .embed(&tokenize("alpha beta gamma,"), 10, OovPolicy::Zero)
            .unwrap();
        assert_eq!(oov, 0);
        assert_eq!(m.true_length(), 3);
        assert_eq!(m.rows()[[0, 0]], 1.0);
        assert_eq!(m.rows()[[2, 2]], 9.0);
        for i in 3..10 {
            assert!(m.rows().row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn embed_truncates_long_documents() {
        let table = toy_table();
        let text = vec!["alpha"; 600].join(" ");
        let (m, _) = table.embed(&tokenize(&text), 500, OovPolicy::Zero).unwrap();
        assert_eq!(m.true_length(), 500);
        assert_eq!(m.rows().nrows(), 500);
        assert_eq!(m.rows()[[499, 0]], 1.0);
    }

    #[test]
    fn embed_empty_document_is_all_zero() {
        let table = toy_table();
        let (m, oov) = table.embed(&tokenize(""), 8, OovPolicy::Zero).unwrap();
        assert_eq!(m.true_length(), 0);
        assert_eq!(oov, 0);
        assert!(m.rows().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oov_policies() {
        let table = toy_table();
        let (m, oov) = table
            .embed(&tokenize("alpha unknown beta"), 10, OovPolicy::Zero)
            .unwrap();
        assert_eq!(oov, 1);
        assert_eq!(m.true_length(), 3);
        assert!(m.rows().row(1).iter().all(|&v| v == 0.0));
        let err = table
            .embed(&tokenize("alpha unknown"), 10, OovPolicy::Strict)
            .unwrap_err();
        assert_eq!(err.class(), "MissingToken");
    }

    #[test]
    fn text_roundtrip_with_header_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.vec");
        std::fs::write(&path, "2 3\nalpha 1.0 2.0 3.0\nbeta -1 0.5 0.25\n").unwrap();
        let table = EmbeddingTable::load_text(&path, None).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.dim(), 3);
        assert_eq!(table.get("beta").unwrap()[0], -1.0);
    }

    #[test]
    fn sidecar_roundtrip_preserves_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.vec");
        std::fs::write(
            &path,
            "alpha 1.0 2.0 3.0\nbeta -1 0.5 0.25\ngamma, 0 0 9.0\n",
        )
        .unwrap();
        let table = EmbeddingTable::load_with_sidecar(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        let mapped = EmbeddingTable::load_with_sidecar(&path).unwrap();
        assert!(matches!(mapped.storage, Storage::Mapped { .. }));
        for token in ["alpha", "beta", "gamma,"] {
            assert_eq!(table.get(token).unwrap(), mapped.get(token).unwrap());
        }
        assert_eq!(mapped.dim(), 3);
        assert_eq!(mapped.get("missing"), None);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.vec");
        std::fs::write(&path, "alpha 1.0 2.0\nbeta 1.0\n").unwrap();
        assert!(EmbeddingTable::load_text(&path, None).is_err());
        std::fs::write(&path, "alpha 1.0 nope\n").unwrap();
        assert!(EmbeddingTable::load_text(&path, None).is_err());
    }
}
