use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Catalog, DataError, PromptTemplate};

/// One positive and its sampled negatives, as indices into whatever pool
/// they were drawn from (items, users, or templates).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub seed: u64,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.negatives.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All candidates with the positive at a seed-determined slot, and that slot.
    pub fn ordered(&self) -> (Vec<usize>, usize) {
        let slot = (self.seed % self.len() as u64) as usize;
        let mut all = self.negatives.clone();
        all.insert(slot, self.positive);
        (all, slot)
    }
}

fn draw(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, DataError> {
    if pool.len() < k {
        return Err(DataError::Insufficient {
            wanted: k,
            available: pool.len(),
        });
    }
    Ok(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
}

/// Anchor of a feature-matching pair.
#[derive(Clone, Copy, Debug)]
pub enum HfmPositive<'a> {
    /// An item's ID matched with its description.
    Item(u32),
    /// A user's history matched with the description of `next_items[user]`.
    Sequence { user: usize, next_items: &'a [u32] },
}

/// Candidate sets for both directions of one pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HfmCandidates {
    /// Item ids whose descriptions compete with the positive description.
    pub nl: CandidateSet,
    /// Item ids (item task) or user indices (sequence task) competing with
    /// the positive ID sequence.
    pub id: CandidateSet,
}

/// Uniform sampling without replacement, excluding the positive.
pub fn sample_hfm_candidates(
    catalog: &Catalog,
    positive: HfmPositive<'_>,
    k: usize,
    seed: u64,
) -> Result<HfmCandidates, DataError> {
    if k == 0 {
        return Err(DataError::Precondition("K must be at least 1".into()));
    }
    let n_items = catalog.n_items();
    let nl_seed = derive_seed(seed, &[0]);
    let id_seed = derive_seed(seed, &[1]);
    match positive {
        HfmPositive::Item(item) => {
            let item = item as usize;
            if item >= n_items {
                return Err(DataError::Precondition(format!("unknown item {item}")));
            }
            let pool: Vec<usize> = (0..n_items).filter(|&i| i != item).collect();
            let nl = draw(&pool, k, &mut ChaCha8Rng::seed_from_u64(nl_seed))?;
            let id = draw(&pool, k, &mut ChaCha8Rng::seed_from_u64(id_seed))?;
            Ok(HfmCandidates {
                nl: CandidateSet {
                    positive: item,
                    negatives: nl,
                    seed: nl_seed,
                },
                id: CandidateSet {
                    positive: item,
                    negatives: id,
                    seed: id_seed,
                },
            })
        }
        HfmPositive::Sequence { user, next_items } => {
            if next_items.len() != catalog.n_users() || user >= next_items.len() {
                return Err(DataError::Precondition(format!(
                    "user {user} outside the {} next-item targets",
                    next_items.len()
                )));
            }
            let next = next_items[user] as usize;
            let items: Vec<usize> = (0..n_items).filter(|&i| i != next).collect();
            let users: Vec<usize> = (0..next_items.len())
                .filter(|&u| u != user && next_items[u] as usize != next)
                .collect();
            let nl = draw(&items, k, &mut ChaCha8Rng::seed_from_u64(nl_seed))?;
            let id = draw(&users, k, &mut ChaCha8Rng::seed_from_u64(id_seed))?;
            Ok(HfmCandidates {
                nl: CandidateSet {
                    positive: next,
                    negatives: nl,
                    seed: nl_seed,
                },
                id: CandidateSet {
                    positive: user,
                    negatives: id,
                    seed: id_seed,
                },
            })
        }
    }
}

/// Positive from the target's group, `m` negatives from other groups of the
/// same family (so the same bindings render every candidate).
pub fn sample_icl_candidates(
    templates: &[PromptTemplate],
    target: usize,
    m: usize,
    seed: u64,
) -> Result<CandidateSet, DataError> {
    let t = templates
        .get(target)
        .ok_or_else(|| DataError::Precondition(format!("template index {target} out of range")))?;
    if m == 0 {
        return Err(DataError::Precondition("M must be at least 1".into()));
    }
    let same: Vec<usize> = (0..templates.len())
        .filter(|&i| i != target && templates[i].family == t.family && templates[i].group == t.group)
        .collect();
    if same.is_empty() {
        return Err(DataError::Precondition(format!(
            "group {}/{} has no template besides {}",
            t.family, t.group, t.id
        )));
    }
    let others: Vec<usize> = (0..templates.len())
        .filter(|&i| templates[i].family == t.family && templates[i].group != t.group)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive = same[rng.random_range(0..same.len())];
    let negatives = draw(&others, m, &mut rng)?;
    Ok(CandidateSet {
        positive,
        negatives,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_catalog, CatalogConfig, Family, Origin};
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn catalog() -> Catalog {
        generate_catalog(&CatalogConfig::default(), 5).unwrap()
    }

    fn assert_valid(c: &CandidateSet) {
        let set: HashSet<usize> = c.negatives.iter().copied().collect();
        assert_eq!(set.len(), c.negatives.len(), "distinct");
        assert!(!set.contains(&c.positive), "positive excluded");
    }

    #[test]
    fn item_sets_have_k_distinct_negatives() {
        let c = catalog();
        let h = sample_hfm_candidates(&c, HfmPositive::Item(7), 10, 1).unwrap();
        assert_eq!(h.nl.negatives.len(), 10);
        assert_eq!(h.id.negatives.len(), 10);
        assert_valid(&h.nl);
        assert_valid(&h.id);
        assert_eq!(h, sample_hfm_candidates(&c, HfmPositive::Item(7), 10, 1).unwrap());
        let (all, slot) = h.nl.ordered();
        assert_eq!(all[slot], 7);
        assert_eq!(all.len(), 11);
    }

    #[test]
    fn sequence_negatives_have_different_next_items() {
        let c = catalog();
        let next: Vec<u32> = c.interactions.iter().map(|h| h.last().unwrap().item).collect();
        let h = sample_hfm_candidates(
            &c,
            HfmPositive::Sequence {
                user: 3,
                next_items: &next,
            },
            5,
            9,
        )
        .unwrap();
        assert_valid(&h.id);
        assert_valid(&h.nl);
        assert!(h.id.negatives.iter().all(|&u| next[u] != next[3]));
        assert_eq!(h.nl.positive, next[3] as usize);
    }

    #[test]
    fn insufficient_pool_is_rejected() {
        let c = catalog();
        assert!(matches!(
            sample_hfm_candidates(&c, HfmPositive::Item(0), 50, 0),
            Err(DataError::Insufficient { .. })
        ));
    }

    #[test]
    fn negative_frequencies_are_uniform() {
        // 10^5 draws of K=10 from the 49 non-positive items
        let c = catalog();
        let draws = 100_000u64;
        let mut counts = [0u64; 50];
        for s in 0..draws {
            let h = sample_hfm_candidates(&c, HfmPositive::Item(0), 10, s).unwrap();
            for &n in &h.nl.negatives {
                counts[n] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        let p = 10.0 / 49.0;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for &c in &counts[1..] {
            let d = c as f64 - expected;
            assert!(d.abs() <= 3.0 * sigma, "count {c} vs {expected} ± {sigma}");
            chi2 += d * d / expected;
        }
        // chi-square, 48 degrees of freedom, p = 0.001
        assert!(chi2 < 84.04, "chi2 = {chi2}");
    }

    fn registry(sizes: &[usize]) -> Vec<PromptTemplate> {
        let mut out = Vec::new();
        for (g, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                out.push(PromptTemplate {
                    id: format!("rating/{g}/g{i}"),
                    family: Family::Rating,
                    group: g as u32,
                    text: format!("g{g} v{i} {{user}} {{item}}"),
                    origin: Origin::Generated,
                    split: None,
                });
            }
        }
        out
    }

    #[test]
    fn icl_rule() {
        let r = registry(&[4, 6, 6]);
        let c = sample_icl_candidates(&r, 2, 5, 11).unwrap();
        assert_eq!(r[c.positive].group, 0);
        assert_ne!(c.positive, 2);
        assert!(c.negatives.iter().all(|&n| r[n].group != 0));
        assert_valid(&c);
        assert_eq!(c, sample_icl_candidates(&r, 2, 5, 11).unwrap());
    }

    #[test]
    fn icl_singleton_group_is_rejected() {
        let r = registry(&[1, 6]);
        assert!(sample_icl_candidates(&r, 0, 5, 0).is_err());
        let r = registry(&[3, 2]);
        assert!(matches!(
            sample_icl_candidates(&r, 0, 5, 0),
            Err(DataError::Insufficient { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn candidate_sets_always_valid(seed in any::<u64>(), item in 0u32..50, target in 0usize..16) {
            let c = catalog();
            for s in 0..150u64 {
                let seed = derive_seed(seed, &[s]);
                let h = sample_hfm_candidates(&c, HfmPositive::Item(item), 10, seed).unwrap();
                assert_valid(&h.nl);
                assert_valid(&h.id);
                let r = registry(&[4, 6, 6]);
                let i = sample_icl_candidates(&r, target, 5, seed).unwrap();
                assert_valid(&i);
                prop_assert_eq!(r[i.positive].group, r[target].group);
            }
        }
    }
}
