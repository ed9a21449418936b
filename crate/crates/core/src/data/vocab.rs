use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Token to id map with reserved padding (0) and unknown (1) ids.
///
/// Ids are assigned by descending frequency, ties broken lexically, so the
/// mapping is stable for a given corpus and threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordVocab {
    tokens: Vec<String>,
    min_count: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl WordVocab {
    pub fn build<'a>(docs: impl Iterator<Item = &'a [String]>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for t in doc {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens, min_count)
    }

    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            min_count,
            index,
        }
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// User or product names to table rows; row 0 is the unknown entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityVocab {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl EntityVocab {
    /// Rows in order of first appearance.
    pub fn build<'a>(names: impl Iterator<Item = &'a str>) -> Self {
        let mut v = Self::from_names(vec!["<unk>".to_string()]);
        for n in names {
            if !v.index.contains_key(n) {
                v.index.insert(n.to_string(), v.names.len());
                v.names.push(n.to_string());
            }
        }
        v
    }

    pub fn from_names(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self { names, index }
    }

    pub fn reindex(&mut self) {
        *self = Self::from_names(std::mem::take(&mut self.names));
    }

    /// Table rows, including the unknown row.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.len() <= 1
    }

    /// Row for `name`, or 0 when unseen.
    pub fn id(&self, name: &str) -> usize {
        self.index.get(name).copied().unwrap_or(0)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(texts: &[&str]) -> Vec<Vec<String>> {
        texts
            .iter()
            .map(|t| t.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn threshold_and_reserved_ids() {
        let d = docs(&["a b b c", "b c d"]);
        let v = WordVocab::build(d.iter().map(|x| x.as_slice()), 2);
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "b", "c"]);
        assert_eq!(v.id("a"), UNK);
        assert_eq!(v.id("b"), 2);
        assert_eq!(v.encode(&d[1]), vec![2, 3, UNK]);
    }

    #[test]
    fn stable_across_builds() {
        let d = docs(&["x y z y", "z z q"]);
        let a = WordVocab::build(d.iter().map(|x| x.as_slice()), 1);
        let b = WordVocab::build(d.iter().rev().map(|x| x.as_slice()), 1);
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn entities_reserve_row_zero() {
        let v = EntityVocab::build(["u1", "u2", "u1"].into_iter());
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("u2"), 2);
        assert_eq!(v.id("never"), 0);
        let mut round: EntityVocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        round.reindex();
        assert_eq!(round.id("u2"), 2);
    }
}
