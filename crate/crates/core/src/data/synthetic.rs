//! Generated corpora whose labels depend on who wrote the review.

use super::{Corpus, Review, SplitRatios, TransferRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Token whose presence interacts with the author attribute.
pub const MARKER: &str = "MARK";

/// Shape of an interaction corpus.
///
/// Each review is filler tokens plus, in exactly half of every user's
/// reviews per split, the [`MARKER`] token. The binary label is
/// `(user index mod 2) XOR (marker present)`. With an even number of
/// users the label is independent of the text alone, so an attribute-blind
/// classifier cannot beat 0.5, while `(user, text)` determines it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub users: usize,
    pub products: usize,
    /// Filler vocabulary size (the marker is extra).
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_per_user: usize,
    pub dev_per_user: usize,
    pub test_per_user: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 4,
            products: 1,
            vocab_size: 30,
            min_len: 3,
            max_len: 6,
            train_per_user: 96,
            dev_per_user: 16,
            test_per_user: 16,
        }
    }
}

impl SyntheticSpec {
    pub fn label(user: usize, marked: bool) -> usize {
        (user % 2) ^ usize::from(marked)
    }

    pub fn user_name(i: usize) -> String {
        format!("u{i:03}")
    }

    pub fn product_name(i: usize) -> String {
        format!("p{i:03}")
    }
}

/// Filler tokens, with the marker inserted at a random position when `marked`.
fn marked_filler<R: Rng>(rng: &mut R, vocab: usize, min_len: usize, max_len: usize, marked: bool) -> Vec<String> {
    let len = rng.gen_range(min_len..=max_len.max(min_len));
    let mut tokens: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect();
    if marked {
        let at = rng.gen_range(0..=tokens.len());
        tokens.insert(at, MARKER.to_string());
    }
    tokens
}

/// Deterministic interaction corpus for `spec` and `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: [Vec<Review>; 3] = Default::default();
    let per = [spec.train_per_user, spec.dev_per_user, spec.test_per_user];
    for user in 0..spec.users {
        for (split, &n) in per.iter().enumerate() {
            let mut marks: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            marks.shuffle(&mut rng);
            for marked in marks {
                let product = SyntheticSpec::product_name(rng.gen_range(0..spec.products.max(1)));
                let tokens = marked_filler(&mut rng, spec.vocab_size, spec.min_len, spec.max_len, marked);
                splits[split].push(Review {
                    user: SyntheticSpec::user_name(user),
                    product,
                    label: SyntheticSpec::label(user, marked),
                    tokens,
                });
            }
        }
    }
    for s in &mut splits {
        s.shuffle(&mut rng);
    }
    let [train, dev, test] = splits;
    Corpus {
        train,
        dev,
        test,
        num_classes: 2,
        label_offset: 1,
    }
}

/// Shape of a corpus for the attribute transfer experiment.
///
/// Every product carries a hidden binary factor, which is also its
/// category. The sentiment label is `factor(product) XOR marker`, so a
/// sentiment model can only succeed by encoding the factor in the product
/// embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSpec {
    pub users: usize,
    pub products: usize,
    pub reviews: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub headline_vocab: usize,
    pub headline_len: usize,
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            users: 12,
            products: 24,
            reviews: 2400,
            vocab_size: 30,
            min_len: 3,
            max_len: 6,
            headline_vocab: 40,
            headline_len: 4,
        }
    }
}

/// Sentiment corpus (8:1:1 random split) plus one transfer record per
/// review, and the per-product factors.
pub fn generate_transfer_synthetic(
    spec: &TransferSpec,
    seed: u64,
) -> (Corpus, Vec<TransferRecord>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors: Vec<usize> = (0..spec.products).map(|i| i % 2).collect();
    factors.shuffle(&mut rng);
    let mut reviews = Vec::with_capacity(spec.reviews);
    let mut records = Vec::with_capacity(spec.reviews);
    let half = (spec.headline_vocab / 2).max(1);
    for i in 0..spec.reviews {
        let user = i % spec.users;
        let product = rng.gen_range(0..spec.products);
        let marked = rng.gen_bool(0.5);
        let factor = factors[product];
        reviews.push(Review {
            user: SyntheticSpec::user_name(user),
            product: SyntheticSpec::product_name(product),
            label: factor ^ usize::from(marked),
            tokens: marked_filler(&mut rng, spec.vocab_size, spec.min_len, spec.max_len, marked),
        });
        let mut headline = vec![factor * half + rng.gen_range(0..half)];
        headline.extend((1..spec.headline_len).map(|_| rng.gen_range(0..spec.headline_vocab)));
        records.push(TransferRecord {
            user: SyntheticSpec::user_name(user),
            product: SyntheticSpec::product_name(product),
            category: factor,
            headline,
        });
    }
    let mut order: Vec<usize> = (0..reviews.len()).collect();
    order.shuffle(&mut rng);
    let [n_train, n_dev, _] = SplitRatios::default().allocate(order.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| reviews[i].clone()).collect::<Vec<_>>();
    let corpus = Corpus {
        train: pick(&order[..n_train]),
        dev: pick(&order[n_train..n_train + n_dev]),
        test: pick(&order[n_train + n_dev..]),
        num_classes: 2,
        label_offset: 1,
    };
    (corpus, records, factors)
}
