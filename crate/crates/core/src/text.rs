//! Vocabulary handling and the text-embedding interface: a deterministic
//! hash embedder for tests and a file provider for externally computed
//! embeddings (OVEMB format).

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Case-fold and trim a vocabulary entry before lookup or comparison.
pub fn normalize_word(word: &str) -> String {
    word.trim().to_lowercase()
}

/// Ordered, duplicate-free list of words/phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<String>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut entries = Vec::new();
        for w in words {
            let norm = normalize_word(w.as_ref());
            if norm.is_empty() {
                return Err(Error::Config("vocabulary entries must be non-empty".into()));
            }
            if entries.contains(&norm) {
                return Err(Error::DuplicateWord(norm));
            }
            entries.push(norm);
        }
        if entries.is_empty() {
            return Err(Error::Config("vocabulary must be non-empty".into()));
        }
        Ok(Vocabulary { entries })
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        let norm = normalize_word(word);
        self.entries.iter().position(|e| *e == norm)
    }
}

/// The `m×d` embedding matrix for a vocabulary, row `j` embedding entry `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabEmbeddings {
    pub vocab: Vocabulary,
    pub matrix: Tensor,
    pub normalized: bool,
}

impl VocabEmbeddings {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.matrix.data()[j * d..(j + 1) * d]
    }
}

/// Source of embeddings for single words.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, word: &str) -> Result<Vec<f64>>;
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic pseudo-random unit vector for `(word, seed)`: a 64-bit hash
/// seeds a ChaCha stream of standard normals, normalized to length 1.
/// Identical inputs give identical vectors on every platform.
pub fn hash_embed(word: &str, d: usize, seed: u64) -> Vec<f64> {
    let norm_word = normalize_word(word);
    let mut key = seed.to_le_bytes().to_vec();
    key.extend_from_slice(norm_word.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&key));
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Test-friendly provider backed by [`hash_embed`].
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, word: &str) -> Result<Vec<f64>> {
        Ok(hash_embed(word, self.dim, self.seed))
    }
}

/// Provider backed by previously loaded embeddings; unknown words error.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    source: VocabEmbeddings,
}

impl FileEmbedder {
    pub fn new(source: VocabEmbeddings) -> Self {
        FileEmbedder { source }
    }
}

impl EmbeddingProvider for FileEmbedder {
    fn dim(&self) -> usize {
        self.source.dim()
    }

    fn embed(&self, word: &str) -> Result<Vec<f64>> {
        match self.source.vocab.index_of(word) {
            Some(j) => Ok(self.source.row(j).to_vec()),
            None => Err(Error::UnknownWord(normalize_word(word))),
        }
    }
}

/// Embed every vocabulary entry in order. Appending a word later appends a
/// row without touching existing rows.
pub fn embed_vocabulary(
    vocab: &Vocabulary,
    provider: &dyn EmbeddingProvider,
) -> Result<VocabEmbeddings> {
    let d = provider.dim();
    let mut data = Vec::with_capacity(vocab.len() * d);
    for word in vocab.entries() {
        let row = provider.embed(word)?;
        if row.len() != d {
            return Err(Error::ShapeMismatch {
                op: "embed_vocabulary",
                details: format!("provider returned {} dims, expected {}", row.len(), d),
            });
        }
        data.extend_from_slice(&row);
    }
    Ok(VocabEmbeddings {
        vocab: vocab.clone(),
        matrix: Tensor::new(vec![vocab.len(), d], data)?,
        normalized: false,
    })
}

/// Scale each row to unit L2 norm.
pub fn l2_normalize_rows(emb: &mut VocabEmbeddings) -> Result<()> {
    let (m, d) = (emb.len(), emb.dim());
    let data = emb.matrix.data_mut();
    for i in 0..m {
        let row = &mut data[i * d..(i + 1) * d];
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(Error::Config(format!("embedding row {} has near-zero norm", i)));
        }
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    emb.normalized = true;
    Ok(())
}

/// Parse the OVEMB text format:
/// line 1 `OVEMB 1 <m> <d>`, then `m` lines `<word>\t<d floats>`; UTF-8, LF.
pub fn parse_embeddings(content: &str, normalize: bool) -> Result<VocabEmbeddings> {
    let mut lines = content.split('\n');
    let header = lines.next().unwrap_or("");
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "OVEMB" {
        return Err(Error::Parse { line: 1, msg: "expected header `OVEMB 1 <m> <d>`".into() });
    }
    if fields[1] != "1" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported OVEMB version {}", fields[1]),
        });
    }
    let m: usize = fields[2]
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: format!("bad row count {}", fields[2]) })?;
    let d: usize = fields[3]
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: format!("bad dimension {}", fields[3]) })?;

    let mut words = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m * d);
    let mut rows = 0usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        if rows == m {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("more than {} declared rows", m),
            });
        }
        let (word, rest) = line.split_once('\t').ok_or(Error::Parse {
            line: line_no,
            msg: "expected `<word><TAB><floats>`".into(),
        })?;
        let values: Vec<&str> = rest.split_whitespace().collect();
        if values.len() != d {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} values, got {}", d, values.len()),
            });
        }
        for v in values {
            let f: f64 = v.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad float {:?}", v),
            })?;
            if !f.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value {:?}", v),
                });
            }
            data.push(f);
        }
        words.push(word.to_string());
        rows += 1;
    }
    if rows != m {
        return Err(Error::Parse {
            line: rows + 1,
            msg: format!("header declares {} rows, file has {}", m, rows),
        });
    }
    let vocab = Vocabulary::new(words)?;
    let mut emb = VocabEmbeddings { vocab, matrix: Tensor::new(vec![m, d], data)?, normalized: false };
    if normalize {
        l2_normalize_rows(&mut emb)?;
    }
    Ok(emb)
}

pub fn load_embeddings(path: &Path, normalize: bool) -> Result<VocabEmbeddings> {
    let content = std::fs::read_to_string(path)?;
    parse_embeddings(&content, normalize)
}

/// Serialize to OVEMB; floats use the shortest round-trip representation so
/// save/load is bit-exact.
pub fn format_embeddings(emb: &VocabEmbeddings) -> String {
    let (m, d) = (emb.len(), emb.dim());
    let mut out = format!("OVEMB 1 {} {}\n", m, d);
    for (j, word) in emb.vocab.entries().iter().enumerate() {
        out.push_str(word);
        out.push('\t');
        for (k, v) in emb.row(j).iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", v);
        }
        out.push('\n');
    }
    out
}

pub fn save_embeddings(emb: &VocabEmbeddings, path: &Path) -> Result<()> {
    std::fs::write(path, format_embeddings(emb))?;
    Ok(())
}
