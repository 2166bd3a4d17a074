//! Frozen pretrained word vectors.
//!
//! Text format: one `word v1 … vd` entry per line, whitespace separated.
//! Binary cache: `EMB1`, `u32` dim, `u64` entry count, then per entry a
//! `u32` byte length, the UTF-8 word and `dim` little-endian `f64`s.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::corpus::{PAD, PAD_INDEX, UNK, UNK_INDEX};
use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    vectors: Vec<f64>,
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Only the `<unk>` and `<pad>` rows, both zero.
    pub fn empty(dim: usize) -> Self {
        let words = vec![UNK.to_string(), PAD.to_string()];
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        EmbeddingMatrix {
            dim,
            vectors: vec![0.0; 2 * dim],
            words,
            index,
        }
    }

    /// Adds or replaces the vector for `word` (lowercased).
    pub fn insert(&mut self, word: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dim("embedding row", &[self.dim], &[vector.len()]));
        }
        let key = word.to_lowercase();
        match self.index.get(&key) {
            Some(&row) => {
                log::warn!("duplicate embedding for {key:?}; keeping the last one");
                self.vectors[row * self.dim..(row + 1) * self.dim].copy_from_slice(vector);
            }
            None => {
                self.index.insert(key.clone(), self.words.len());
                self.words.push(key);
                self.vectors.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    /// Seeded uniform vectors in `[-scale, scale)` for `words`.
    pub fn random<S: AsRef<str>>(words: &[S], dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut emb = Self::empty(dim);
        for w in words {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-scale..scale)).collect();
            emb.insert(w.as_ref(), &v).expect("row has dim entries");
        }
        emb
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows including `<unk>` and `<pad>`.
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, token: &str) -> usize {
        if token == PAD {
            return PAD_INDEX;
        }
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK_INDEX)
    }

    /// Vector for `token`, matched case-insensitively; unknown tokens map to
    /// the zero `<unk>` row.
    pub fn lookup(&self, token: &str) -> &[f64] {
        self.row(self.index_of(token))
    }

    /// Stacks the vectors of `tokens` into a `T×dim` tensor.
    pub fn sentence_matrix<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Domain("empty sentence".into()));
        }
        let mut values = Vec::with_capacity(tokens.len() * self.dim);
        for t in tokens {
            values.extend_from_slice(self.lookup(t.as_ref()));
        }
        Tensor::matrix(tokens.len(), self.dim, values)
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, w) in self.words.iter().enumerate().skip(2) {
            write!(out, "{w}")?;
            for v in self.row(i) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn write_cache<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        out.write_all(CACHE_MAGIC)?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&((self.words.len() - 2) as u64).to_le_bytes())?;
        for (i, w) in self.words.iter().enumerate().skip(2) {
            out.write_all(&(w.len() as u32).to_le_bytes())?;
            out.write_all(w.as_bytes())?;
            for v in self.row(i) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_cache<R: Read>(input: R) -> Result<Self> {
        let mut input = BufReader::new(input);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Parse {
                line: 0,
                msg: "not an EMB1 embedding cache".into(),
            });
        }
        let dim = read_u32(&mut input)? as usize;
        let count = read_u64(&mut input)?;
        let mut emb = Self::empty(dim);
        let mut row = vec![0.0; dim];
        for _ in 0..count {
            let len = read_u32(&mut input)? as usize;
            let mut bytes = vec![0u8; len];
            input.read_exact(&mut bytes)?;
            let word = String::from_utf8(bytes).map_err(|e| Error::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
            for v in row.iter_mut() {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            emb.insert(&word, &row)?;
        }
        Ok(emb)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads `word v1 … vd` lines. Paths ending in `.emb1` are read as a binary
/// cache instead.
pub fn load_pretrained(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "emb1") {
        let emb = EmbeddingMatrix::read_cache(file)?;
        if emb.dim() != dim {
            return Err(Error::dim("embedding cache", &[emb.dim()], &[dim]));
        }
        return Ok(emb);
    }
    read_pretrained(BufReader::new(file), dim)
}

pub fn read_pretrained<R: BufRead>(reader: R, dim: usize) -> Result<EmbeddingMatrix> {
    let mut emb = EmbeddingMatrix::empty(dim);
    let mut row = Vec::with_capacity(dim);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().unwrap_or_default();
        if is_comment(word, &line) {
            continue;
        }
        row.clear();
        for f in fields {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("not a number: {f:?}"),
            })?;
            row.push(v);
        }
        if row.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {} fields, found {}", dim + 1, row.len() + 1),
            });
        }
        emb.insert(word, &row)?;
    }
    Ok(emb)
}

/// A `#` line whose next field is not a number is a header comment; `#` with
/// numbers after it is an ordinary vocabulary entry.
fn is_comment(word: &str, line: &str) -> bool {
    word == "#" && line.split_whitespace().nth(1).map_or(true, |f| f.parse::<f64>().is_err())
}

/// Infers the dimension from the first non-empty line of a text file.
pub fn sniff_dim(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "emb1") {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        return Ok(read_u32(&mut f)? as usize);
    }
    let reader = BufReader::new(File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        let n = line.split_whitespace().count();
        if n > 0 && !is_comment(line.split_whitespace().next().unwrap_or_default(), &line) {
            return Ok(n - 1);
        }
    }
    Err(Error::Parse {
        line: 1,
        msg: "empty embedding file".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_comment_is_skipped_but_hash_word_is_kept() {
        let emb = read_pretrained("# seqtag 0.1.0 seed=0\n# 1.0 2.0\n".as_bytes(), 2).unwrap();
        assert_eq!(emb.vocab_size(), 3);
        assert_eq!(emb.lookup("#"), &[1.0, 2.0]);
    }

    #[test]
    fn single_entry_file() {
        let emb = read_pretrained("cat 1.0 2.0\n".as_bytes(), 2).unwrap();
        assert_eq!(emb.vocab_size(), 3);
        assert_eq!(emb.lookup("cat"), &[1.0, 2.0]);
        assert_eq!(emb.lookup("dog"), &[0.0, 0.0]);
        assert_eq!(emb.lookup(PAD), &[0.0, 0.0]);
    }

    #[test]
    fn empty_file_has_sentinel_rows_only() {
        let emb = read_pretrained("".as_bytes(), 4).unwrap();
        assert_eq!(emb.vocab_size(), 2);
    }

    #[test]
    fn wrong_field_count_reports_line() {
        match read_pretrained("a 1 2\nb 1\n".as_bytes(), 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicates_keep_the_last_row() {
        let emb = read_pretrained("a 1 1\na 2 2\n".as_bytes(), 2).unwrap();
        assert_eq!(emb.vocab_size(), 3);
        assert_eq!(emb.lookup("a"), &[2.0, 2.0]);
    }

    #[test]
    fn lookup_is_case_insensitive() {
        let emb = read_pretrained("the 0.5 -0.5\n".as_bytes(), 2).unwrap();
        assert_eq!(emb.lookup("The"), emb.lookup("the"));
        assert_eq!(emb.sentence_matrix(&["The", "zzz"]).unwrap().values(), &[0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn cache_round_trip() {
        let emb = EmbeddingMatrix::random(&["x", "y", "zeta"], 5, 0.5, 3);
        let mut buf = Vec::new();
        emb.write_cache(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"EMB1");
        assert_eq!(EmbeddingMatrix::read_cache(buf.as_slice()).unwrap(), emb);

        let mut text = Vec::new();
        emb.write_text(&mut text).unwrap();
        assert_eq!(read_pretrained(text.as_slice(), 5).unwrap(), emb);
    }
}
