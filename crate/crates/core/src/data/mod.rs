//! Corpus files, vocabularies and dataset construction.
//!
//! A corpus file holds one review per line with four tab-separated fields:
//!
//! ```text
//! user \t product \t label \t text
//! ```
//!
//! `text` is whitespace-tokenized, with sentences separated by the literal
//! token `<sssss>`. Labels are 1-based in files and 0-based in memory.
//! Runs of tabs are treated as one separator, so the double-tab layout of
//! the widely distributed review corpora loads unchanged.

mod split;
mod synthetic;
mod vectors;
mod vocab;

pub use split::{make_disjoint_entity_split, make_twenty_core_split, SplitRatios};
pub use synthetic::{generate_synthetic, generate_transfer_synthetic, SyntheticSpec, TransferSpec, MARKER};
pub use vectors::{load_pretrained_vectors, PretrainedVectors};
pub use vocab::{EntityVocab, WordVocab, PAD, UNK};

use crate::error::{Error, Result};
use serde::Serialize;
use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Token that separates sentences inside review text.
pub const SENTENCE_SEPARATOR: &str = "<sssss>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Review {
    pub user: String,
    pub product: String,
    /// 0-based class index.
    pub label: usize,
    pub tokens: Vec<String>,
}

/// How labels are stored in a corpus file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusFormat {
    pub num_classes: usize,
    /// Value of the lowest label in the file (1 for star ratings).
    pub label_base: usize,
}

impl CorpusFormat {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            label_base: 1,
        }
    }
}

/// Train, dev and test reviews plus class metadata.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Review>,
    pub dev: Vec<Review>,
    pub test: Vec<Review>,
    pub num_classes: usize,
    /// Offset subtracted from file labels on load.
    pub label_offset: usize,
}

/// Parses one corpus file.
pub fn load_reviews(path: &Path, format: CorpusFormat) -> Result<Vec<Review>> {
    let text = fs::read_to_string(path)?;
    parse_reviews(&text, &path.display().to_string(), format)
}

pub fn parse_reviews(text: &str, source: &str, format: CorpusFormat) -> Result<Vec<Review>> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').filter(|f| !f.is_empty()).collect();
        if fields.len() != 4 {
            return Err(err(
                lineno,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let raw: usize = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(lineno, format!("label `{}` is not an integer", fields[2])))?;
        let top = format.label_base + format.num_classes;
        if raw < format.label_base || raw >= top {
            return Err(err(
                lineno,
                format!(
                    "label {raw} outside [{}..{}]",
                    format.label_base,
                    top - 1
                ),
            ));
        }
        let tokens: Vec<String> = fields[3].split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(err(lineno, "empty review text".to_string()));
        }
        out.push(Review {
            user: fields[0].trim().to_string(),
            product: fields[1].trim().to_string(),
            label: raw - format.label_base,
            tokens,
        });
    }
    if out.is_empty() {
        return Err(Error::data(format!("{source}: no reviews")));
    }
    Ok(out)
}

pub fn write_reviews(path: &Path, reviews: &[Review], label_base: usize) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in reviews {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.user,
            r.product,
            r.label + label_base,
            r.tokens.join(" ")
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Locations of the three split files.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

impl CorpusPaths {
    /// `train.tsv`, `dev.tsv` and `test.tsv` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.tsv"),
            dev: dir.join("dev.tsv"),
            test: dir.join("test.tsv"),
        }
    }
}

pub fn load_corpus(paths: &CorpusPaths, format: CorpusFormat) -> Result<Corpus> {
    Ok(Corpus {
        train: load_reviews(&paths.train, format)?,
        dev: load_reviews(&paths.dev, format)?,
        test: load_reviews(&paths.test, format)?,
        num_classes: format.num_classes,
        label_offset: format.label_base,
    })
}

pub fn write_corpus(paths: &CorpusPaths, corpus: &Corpus) -> Result<()> {
    write_reviews(&paths.train, &corpus.train, corpus.label_offset)?;
    write_reviews(&paths.dev, &corpus.dev, corpus.label_offset)?;
    write_reviews(&paths.test, &corpus.test, corpus.label_offset)?;
    Ok(())
}

/// Sizes and per-entity document counts over all splits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub classes: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub users: usize,
    pub products: usize,
    pub docs_per_user: f64,
    pub docs_per_product: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let all = || corpus.train.iter().chain(&corpus.dev).chain(&corpus.test);
    let users: HashSet<&str> = all().map(|r| r.user.as_str()).collect();
    let products: HashSet<&str> = all().map(|r| r.product.as_str()).collect();
    let docs = all().count() as f64;
    let ratio = |n: usize| if n == 0 { 0.0 } else { docs / n as f64 };
    CorpusStats {
        classes: corpus.num_classes,
        train: corpus.train.len(),
        dev: corpus.dev.len(),
        test: corpus.test.len(),
        users: users.len(),
        products: products.len(),
        docs_per_user: ratio(users.len()),
        docs_per_product: ratio(products.len()),
    }
}

/// A review mapped to integer ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub tokens: Vec<usize>,
    pub user: usize,
    pub product: usize,
    pub label: usize,
}

/// Vocabularies and encoded splits ready for training.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub words: WordVocab,
    pub users: EntityVocab,
    pub products: EntityVocab,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
    pub num_classes: usize,
}

impl EncodedCorpus {
    /// Builds vocabularies from the training split and encodes every split.
    pub fn build(corpus: &Corpus, min_count: usize) -> Self {
        let words = WordVocab::build(corpus.train.iter().map(|r| r.tokens.as_slice()), min_count);
        let users = EntityVocab::build(corpus.train.iter().map(|r| r.user.as_str()));
        let products = EntityVocab::build(corpus.train.iter().map(|r| r.product.as_str()));
        Self::with_vocabs(corpus, words, users, products)
    }

    pub fn with_vocabs(
        corpus: &Corpus,
        words: WordVocab,
        users: EntityVocab,
        products: EntityVocab,
    ) -> Self {
        let enc = |rs: &[Review]| {
            rs.iter()
                .map(|r| Instance {
                    tokens: words.encode(&r.tokens),
                    user: users.id(&r.user),
                    product: products.id(&r.product),
                    label: r.label,
                })
                .collect()
        };
        Self {
            train: enc(&corpus.train),
            dev: enc(&corpus.dev),
            test: enc(&corpus.test),
            words,
            users,
            products,
            num_classes: corpus.num_classes,
        }
    }
}

/// One row of the transfer sidecar file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferRecord {
    pub user: String,
    pub product: String,
    pub category: usize,
    /// Subword ids, without begin/end markers.
    pub headline: Vec<usize>,
}

/// Parses `user \t product \t category \t ids` lines.
pub fn load_transfer_records(path: &Path) -> Result<Vec<TransferRecord>> {
    let text = fs::read_to_string(path)?;
    let source = path.display().to_string();
    let err = |line: usize, message: String| Error::Parse {
        path: source.clone(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(i + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        let category = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(i + 1, format!("category `{}` is not an integer", fields[2])))?;
        let headline = fields[3]
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err(i + 1, "headline ids must be integers".to_string()))?;
        out.push(TransferRecord {
            user: fields[0].trim().to_string(),
            product: fields[1].trim().to_string(),
            category,
            headline,
        });
    }
    if out.is_empty() {
        return Err(Error::data(format!("{source}: no transfer records")));
    }
    Ok(out)
}

pub fn write_transfer_records(path: &Path, records: &[TransferRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let ids: Vec<String> = r.headline.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}\t{}\t{}\t{}", r.user, r.product, r.category, ids.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_and_double_tabs() {
        let text = "u1\tp1\t5\tgreat food <sssss> nice\nu2\t\tp1\t\t1\t\tbad\n";
        let rs = parse_reviews(text, "mem", CorpusFormat::new(5)).unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs[0].label, 4);
        assert_eq!(rs[0].tokens, vec!["great", "food", "<sssss>", "nice"]);
        assert_eq!(rs[1].user, "u2");
        assert_eq!(rs[1].label, 0);
    }

    #[test]
    fn reports_line_numbers() {
        let text = "u1\tp1\t3\tok\nu1\tp1\t6\tout of range\n";
        let err = parse_reviews(text, "f.tsv", CorpusFormat::new(5)).unwrap_err();
        assert!(err.to_string().starts_with("f.tsv:2:"), "{err}");
        let err = parse_reviews("u\tp\t1\n", "g.tsv", CorpusFormat::new(5)).unwrap_err();
        assert!(err.to_string().contains("g.tsv:1"), "{err}");
        let err = parse_reviews("u\tp\t0\tzero\n", "h.tsv", CorpusFormat::new(5)).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(parse_reviews("", "empty", CorpusFormat::new(5)).is_err());
        assert!(parse_reviews("\n\n", "blank", CorpusFormat::new(5)).is_err());
    }

    #[test]
    fn single_review_stats() {
        let r = Review {
            user: "u".into(),
            product: "p".into(),
            label: 0,
            tokens: vec!["x".into()],
        };
        let c = Corpus {
            train: vec![r],
            dev: vec![],
            test: vec![],
            num_classes: 2,
            label_offset: 1,
        };
        let s = corpus_stats(&c);
        assert_eq!((s.users, s.products), (1, 1));
        assert_eq!((s.docs_per_user, s.docs_per_product), (1.0, 1.0));
    }
}
