use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rngutil;

use super::{Vocabulary, PAD};

/// Word-embedding matrix, one row per vocabulary identifier.
///
/// Row 0 (PAD) is all zeros and is never written by training: PAD is never
/// looked up, so no gradient ever reaches it.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }
}

/// Load text embeddings ("token v1 ... v_dim" per line) for `vocab`.
///
/// Tokens present in the file keep their file vectors; absent tokens are
/// drawn uniformly from [-0.1, 0.1] using the run seed; the PAD row is
/// forced to zero.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut file_rows: std::collections::HashMap<String, Vec<f64>> =
        std::collections::HashMap::new();
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| Error::parse(&display, lineno + 1, "missing token"))?;
        let values: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let values = values
            .map_err(|e| Error::parse(&display, lineno + 1, format!("bad number: {}", e)))?;
        if values.len() != dim {
            return Err(Error::parse(
                &display,
                lineno + 1,
                format!("expected {} values, found {}", dim, values.len()),
            ));
        }
        file_rows.insert(token.to_string(), values);
    }
    Ok(init_table(vocab, dim, seed, &file_rows))
}

/// Build an embedding table without a vector file: every non-PAD row is
/// drawn uniformly from [-0.1, 0.1].
pub(crate) fn random_embedding(vocab_size: usize, dim: usize, seed: u64, tag: &str) -> Tensor {
    let mut rng = rngutil::stream(seed, tag);
    let mut m = Tensor::zeros(&[vocab_size, dim]);
    for r in 1..vocab_size {
        for c in 0..dim {
            m.data_mut()[r * dim + c] = rng.gen_range(-0.1..0.1);
        }
    }
    m
}

fn init_table(
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
    file_rows: &std::collections::HashMap<String, Vec<f64>>,
) -> EmbeddingTable {
    let mut rng = rngutil::stream(seed, "embed-init");
    let mut m = Tensor::zeros(&[vocab.len(), dim]);
    for id in 0..vocab.len() as u32 {
        if id == PAD {
            continue; // PAD row stays zero regardless of file contents
        }
        let row = id as usize * dim;
        match file_rows.get(vocab.token(id)) {
            Some(values) => m.data_mut()[row..row + dim].copy_from_slice(values),
            None => {
                for c in 0..dim {
                    m.data_mut()[row + c] = rng.gen_range(-0.1..0.1);
                }
            }
        }
    }
    EmbeddingTable { matrix: m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vocab_with(words: &[&str]) -> Vocabulary {
        let mut v = Vocabulary::new();
        for w in words {
            v.add_or_get(w);
        }
        v
    }

    #[test]
    fn present_token_copied_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        writeln!(File::create(&path).unwrap(), "apple 0.5 -0.5 0.25").unwrap();
        let vocab = vocab_with(&["apple"]);
        let table = load_embeddings(&path, &vocab, 3, 1).unwrap();
        let id = vocab.get("apple").unwrap() as usize;
        assert_eq!(table.matrix.row(id), &[0.5, -0.5, 0.25]);
    }

    #[test]
    fn pad_row_is_zero_even_if_file_defines_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        writeln!(File::create(&path).unwrap(), "<pad> 9.0 9.0").unwrap();
        let vocab = vocab_with(&["x"]);
        let table = load_embeddings(&path, &vocab, 2, 1).unwrap();
        assert_eq!(table.matrix.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn absent_token_rows_reproduce_under_fixed_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        File::create(&path).unwrap();
        let vocab = vocab_with(&["novel", "words"]);
        let a = load_embeddings(&path, &vocab, 4, 42).unwrap();
        let b = load_embeddings(&path, &vocab, 4, 42).unwrap();
        assert_eq!(a.matrix, b.matrix);
        let c = load_embeddings(&path, &vocab, 4, 43).unwrap();
        assert_ne!(a.matrix, c.matrix);
        // all within the stated range
        assert!(a.matrix.data()[4..].iter().all(|v| (-0.1..0.1).contains(v)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "good 1.0 2.0").unwrap();
        writeln!(f, "bad 1.0").unwrap();
        let vocab = vocab_with(&["good", "bad"]);
        match load_embeddings(&path, &vocab, 2, 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other),
        }
    }
}
