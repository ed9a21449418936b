use super::{Corpus, Review};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap};

/// Relative sizes of train, dev and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 8.0,
            dev: 1.0,
            test: 1.0,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, dev: f64, test: f64) -> Self {
        Self { train, dev, test }
    }

    /// Largest-remainder allocation of `n` units; the counts sum to `n`.
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let w = [self.train, self.dev, self.test];
        let total: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| x / total * n as f64).collect();
        let mut counts: [usize; 3] = [0; 3];
        for i in 0..3 {
            counts[i] = exact[i].floor() as usize;
        }
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut left = n - counts.iter().sum::<usize>();
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }

    fn validate(&self) -> Result<()> {
        let w = [self.train, self.dev, self.test];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(format!("invalid split ratios {self:?}")));
        }
        Ok(())
    }
}

/// Drops reviews of users or products with fewer than `k` reviews, repeating
/// until nothing changes, then shuffles and splits by `ratios`.
pub fn make_twenty_core_split(
    raw: Vec<Review>,
    k: usize,
    ratios: SplitRatios,
    num_classes: usize,
    seed: u64,
) -> Result<Corpus> {
    ratios.validate()?;
    let mut reviews = raw;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut products: HashMap<&str, usize> = HashMap::new();
        for r in &reviews {
            *users.entry(&r.user).or_default() += 1;
            *products.entry(&r.product).or_default() += 1;
        }
        let keep: Vec<bool> = reviews
            .iter()
            .map(|r| users[r.user.as_str()] >= k && products[r.product.as_str()] >= k)
            .collect();
        if keep.iter().all(|k| *k) {
            break;
        }
        let mut it = keep.into_iter();
        reviews.retain(|_| it.next().unwrap());
    }
    if reviews.is_empty() {
        return Err(Error::data(format!("no reviews survive the {k}-core filter")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reviews.shuffle(&mut rng);
    let [n_train, n_dev, _] = ratios.allocate(reviews.len());
    let test = reviews.split_off(n_train + n_dev);
    let dev = reviews.split_off(n_train);
    Ok(Corpus {
        train: reviews,
        dev,
        test,
        num_classes,
        label_offset: 1,
    })
}

/// Splits items so that no user and no product occurs in two splits.
///
/// Users and products are each shuffled and allocated to splits by
/// `ratios`; an item survives only when its user and product landed in the
/// same split. Fails when the training split comes out empty.
pub fn make_disjoint_entity_split<T: Clone>(
    items: &[T],
    key: impl Fn(&T) -> (&str, &str),
    ratios: SplitRatios,
    seed: u64,
) -> Result<[Vec<T>; 3]> {
    ratios.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = |names: BTreeSet<&str>| -> HashMap<String, usize> {
        let mut names: Vec<&str> = names.into_iter().collect();
        names.shuffle(&mut rng);
        let counts = ratios.allocate(names.len());
        let mut out = HashMap::new();
        let mut it = names.into_iter();
        for (split, c) in counts.iter().enumerate() {
            for name in it.by_ref().take(*c) {
                out.insert(name.to_string(), split);
            }
        }
        out
    };
    let users = assign(items.iter().map(|i| key(i).0).collect());
    let products = assign(items.iter().map(|i| key(i).1).collect());
    let mut splits: [Vec<T>; 3] = Default::default();
    for item in items {
        let (u, p) = key(item);
        if users[u] == products[p] {
            splits[users[u]].push(item.clone());
        }
    }
    if splits[0].is_empty() {
        return Err(Error::data(
            "entity-disjoint split left the training split empty",
        ));
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn review(user: &str, product: &str) -> Review {
        Review {
            user: user.into(),
            product: product.into(),
            label: 0,
            tokens: vec!["t".into()],
        }
    }

    #[test]
    fn allocation_sums() {
        for n in 0..50 {
            let c = SplitRatios::default().allocate(n);
            assert_eq!(c.iter().sum::<usize>(), n);
            assert!((c[0] as f64 - 0.8 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn core_filter_keeps_dense_corpus() {
        let mut raw = Vec::new();
        for u in 0..4 {
            for p in 0..4 {
                for _ in 0..5 {
                    raw.push(review(&format!("u{u}"), &format!("p{p}")));
                }
            }
        }
        let c = make_twenty_core_split(raw, 20, SplitRatios::default(), 2, 1).unwrap();
        assert_eq!(c.train.len() + c.dev.len() + c.test.len(), 80);
        assert_eq!(c.train.len(), 64);
    }

    #[test]
    fn core_filter_cascades() {
        // u0 has 19 reviews, all of p_only; removing u0 leaves p_only with
        // 0 reviews. u1 has 20 on p0, p0 has 20.
        let mut raw = Vec::new();
        for _ in 0..19 {
            raw.push(review("u0", "p_only"));
        }
        for _ in 0..20 {
            raw.push(review("u1", "p0"));
        }
        // u2 reviews p0 once and pushes nothing below the threshold.
        raw.push(review("u2", "p0"));
        let c = make_twenty_core_split(raw, 20, SplitRatios::default(), 2, 1).unwrap();
        let all: Vec<&Review> = c.train.iter().chain(&c.dev).chain(&c.test).collect();
        assert_eq!(all.len(), 20);
        assert!(all.iter().all(|r| r.user == "u1" && r.product == "p0"));
    }

    #[test]
    fn core_filter_can_empty_corpus() {
        let raw = vec![review("a", "b")];
        assert!(make_twenty_core_split(raw, 20, SplitRatios::default(), 2, 0).is_err());
    }

    #[test]
    fn two_by_two_pairs_split_at_most_one_per_split() {
        let mut items = Vec::new();
        for u in ["u1", "u2"] {
            for p in ["p1", "p2"] {
                items.push((u.to_string(), p.to_string()));
            }
        }
        for seed in 0..64 {
            let r = make_disjoint_entity_split(
                &items,
                |(u, p)| (u.as_str(), p.as_str()),
                SplitRatios::new(1.0, 1.0, 1.0),
                seed,
            );
            let Ok(splits) = r else { continue };
            for s in &splits {
                assert!(s.len() <= 1, "seed {seed}: {splits:?}");
            }
        }
    }
}
