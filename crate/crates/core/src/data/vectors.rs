use super::vocab::WordVocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Word-vector table aligned to a vocabulary.
#[derive(Debug, Clone)]
pub struct PretrainedVectors {
    pub table: Tensor,
    pub matched: usize,
    /// `matched / vocab size`.
    pub coverage: f64,
}

/// Reads `token v1 ... vE` lines. Rows of vocabulary tokens found in the
/// file are copied; every other row is drawn uniformly from `[-0.01, 0.01]`.
pub fn load_pretrained_vectors<R: Rng + ?Sized>(
    path: &Path,
    vocab: &WordVocab,
    dim: usize,
    rng: &mut R,
) -> Result<PretrainedVectors> {
    let mut table = Tensor::uniform(&[vocab.len(), dim], 0.01, rng);
    let mut seen = vec![false; vocab.len()];
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else {
            continue;
        };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("vector has {} values, expected {dim}", values.len()),
            });
        }
        if let Some(id) = vocab.get(token) {
            table.row_mut(id).copy_from_slice(&values);
            seen[id] = true;
        }
    }
    let matched = seen.iter().filter(|s| **s).count();
    Ok(PretrainedVectors {
        table,
        matched,
        coverage: matched as f64 / vocab.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    #[test]
    fn coverage_and_fallback() {
        let vocab = WordVocab::from_tokens(vec!["<pad>".into(), "good".into(), "bad".into()], 1);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "good 0.5 -1.25").unwrap();
        writeln!(f, "bad 2 3").unwrap();
        writeln!(f, "other 9 9").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = load_pretrained_vectors(f.path(), &vocab, 2, &mut rng).unwrap();
        assert_eq!(v.table.row(1), &[0.5, -1.25]);
        assert_eq!(v.table.row(2), &[2.0, 3.0]);
        assert!(v.table.row(0).iter().all(|x| x.abs() <= 0.01));
        assert_eq!(v.matched, 2);
        assert!((v.coverage - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let vocab = WordVocab::from_tokens(vec!["<pad>".into(), "a".into()], 1);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a 1 2 3").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = load_pretrained_vectors(f.path(), &vocab, 2, &mut rng).unwrap_err();
        assert!(err.to_string().contains("expected 2"), "{err}");
    }
}
