use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DataError;

const CATEGORIES: [(&str, [&str; 3]); 8] = [
    ("t-shirt", ["fabric", "fit", "collar"]),
    ("sneakers", ["sole", "grip", "laces"]),
    ("backpack", ["zipper", "straps", "pockets"]),
    ("headphones", ["sound", "bass", "battery"]),
    ("lamp", ["brightness", "switch", "shade"]),
    ("mug", ["handle", "glaze", "size"]),
    ("jacket", ["hood", "lining", "warmth"]),
    ("watch", ["strap", "dial", "clasp"]),
];

const BRANDS: [&str; 10] = [
    "nike", "adidas", "puma", "sony", "ikea", "muji", "casio", "zara", "uniqlo", "bose",
];

const COLORS: [&str; 10] = [
    "red", "blue", "green", "black", "white", "gray", "yellow", "orange", "purple", "brown",
];

const SENTIMENT: [&str; 5] = ["terrible", "poor", "okay", "good", "excellent"];

const CLOSING: [&str; 5] = [
    "i want a refund",
    "not worth the price",
    "it does the job",
    "i would buy it again",
    "highly recommended",
];

/// Knobs for [`generate_catalog`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions_per_user: usize,
    /// Negatives per feature-matching candidate set; the catalog must hold
    /// more than `hfm_negatives + 1` items.
    pub hfm_negatives: usize,
    pub latent_dim: usize,
    /// Inverse temperature of the affinity-driven item choice.
    pub choice_sharpness: f64,
    /// Probability that the next interaction stays in the previous category.
    pub category_stickiness: f64,
    pub rating_noise: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            n_users: 20,
            n_items: 50,
            interactions_per_user: 8,
            hfm_negatives: 10,
            latent_dim: 4,
            choice_sharpness: 1.5,
            category_stickiness: 0.5,
            rating_noise: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub id: u32,
    pub name: String,
    pub brand: String,
    pub category: String,
    pub color: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub item: u32,
    pub timestamp: u64,
    pub rating: u8,
    pub feature: String,
    pub review: String,
    pub explanation: String,
    pub summary: String,
}

/// Users, items, and each user's interactions in timestamp order.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub items: Vec<Item>,
    /// `interactions[u]` belongs to user `u`.
    pub interactions: Vec<Vec<Interaction>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Item(Item),
    User { id: u32, interactions: Vec<Interaction> },
}

pub fn item_description(category: &str, brand: &str, color: &str) -> String {
    format!("Category: {category}. Brand: {brand}. Color: {color}.")
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn softmax_pick(rng: &mut ChaCha8Rng, weights: &[(usize, f64)], sharpness: f64) -> usize {
    let max = weights.iter().map(|w| w.1).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = weights.iter().map(|w| ((w.1 - max) * sharpness).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (w, e) in weights.iter().zip(&exps) {
        if r < *e {
            return w.0;
        }
        r -= e;
    }
    weights[weights.len() - 1].0
}

/// Builds a seeded catalog whose ratings and item choices follow a low-rank
/// user × item affinity plus noise.
pub fn generate_catalog(config: &CatalogConfig, seed: u64) -> Result<Catalog, DataError> {
    let c = config;
    if c.n_users == 0 {
        return Err(DataError::Config("n_users must be positive".into()));
    }
    if c.n_items <= c.hfm_negatives + 1 {
        return Err(DataError::Config(format!(
            "n_items = {} but feature matching needs more than K+1 = {} items to draw negatives",
            c.n_items,
            c.hfm_negatives + 1
        )));
    }
    if c.interactions_per_user < 3 {
        return Err(DataError::Config("each user needs at least 3 interactions".into()));
    }
    if c.interactions_per_user > c.n_items {
        return Err(DataError::Config(format!(
            "{} interactions per user exceed the {} available items",
            c.interactions_per_user, c.n_items
        )));
    }
    if c.latent_dim == 0 {
        return Err(DataError::Config("latent_dim must be positive".into()));
    }
    let unique_limit = CATEGORIES.len() * BRANDS.len() * COLORS.len();
    if c.n_items > unique_limit {
        return Err(DataError::Config(format!(
            "at most {unique_limit} distinct items are supported"
        )));
    }
    if !(0.0..=1.0).contains(&c.category_stickiness) || !c.choice_sharpness.is_finite() || c.rating_noise < 0.0 {
        return Err(DataError::Config("sampling parameters out of range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = c.latent_dim;
    let cat_latent: Vec<Vec<f64>> = (0..CATEGORIES.len()).map(|_| normal_vec(&mut rng, r, 1.0)).collect();
    let brand_latent: Vec<Vec<f64>> = (0..BRANDS.len()).map(|_| normal_vec(&mut rng, r, 0.7)).collect();

    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(c.n_items);
    let mut item_cat = Vec::with_capacity(c.n_items);
    let mut item_latent = Vec::with_capacity(c.n_items);
    while items.len() < c.n_items {
        let (ci, bi, co) = (
            rng.random_range(0..CATEGORIES.len()),
            rng.random_range(0..BRANDS.len()),
            rng.random_range(0..COLORS.len()),
        );
        if !seen.insert((ci, bi, co)) {
            continue;
        }
        let (category, brand, color) = (CATEGORIES[ci].0, BRANDS[bi], COLORS[co]);
        let noise = normal_vec(&mut rng, r, 0.3);
        item_latent.push(
            (0..r)
                .map(|k| cat_latent[ci][k] + brand_latent[bi][k] + noise[k])
                .collect::<Vec<_>>(),
        );
        item_cat.push(ci);
        items.push(Item {
            id: items.len() as u32,
            name: format!("{color} {brand} {category}"),
            brand: brand.into(),
            category: category.into(),
            color: color.into(),
            description: item_description(category, brand, color),
        });
    }

    let norm = (r as f64).sqrt();
    let mut interactions = Vec::with_capacity(c.n_users);
    for _ in 0..c.n_users {
        let u = normal_vec(&mut rng, r, 1.0);
        let affinity: Vec<f64> = item_latent
            .iter()
            .map(|v| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / norm)
            .collect();
        let mut used = vec![false; c.n_items];
        let mut history = Vec::with_capacity(c.interactions_per_user);
        let mut t: u64 = rng.random_range(0..1000);
        let mut prev_cat: Option<usize> = None;
        for _ in 0..c.interactions_per_user {
            let sticky = prev_cat.filter(|_| rng.random::<f64>() < c.category_stickiness);
            let mut pool: Vec<(usize, f64)> = (0..c.n_items)
                .filter(|&i| !used[i] && sticky.is_none_or(|pc| item_cat[i] == pc))
                .map(|i| (i, affinity[i]))
                .collect();
            if pool.is_empty() {
                pool = (0..c.n_items).filter(|&i| !used[i]).map(|i| (i, affinity[i])).collect();
            }
            let i = softmax_pick(&mut rng, &pool, c.choice_sharpness);
            used[i] = true;
            prev_cat = Some(item_cat[i]);
            let z: f64 = StandardNormal.sample(&mut rng);
            let rating = (3.0 + affinity[i] + c.rating_noise * z).round().clamp(1.0, 5.0) as u8;
            let features = CATEGORIES[item_cat[i]].1;
            let feature = features[rng.random_range(0..features.len())];
            let item = &items[i];
            let sent = SENTIMENT[rating as usize - 1];
            t += rng.random_range(1..30);
            history.push(Interaction {
                item: i as u32,
                timestamp: t,
                rating,
                feature: feature.into(),
                review: format!(
                    "the {feature} of this {} {} is {sent}. {}.",
                    item.brand,
                    item.category,
                    CLOSING[rating as usize - 1]
                ),
                explanation: format!("the {feature} is {sent}"),
                summary: format!("{sent} {}", item.category),
            });
        }
        interactions.push(history);
    }
    Ok(Catalog { items, interactions })
}

impl Catalog {
    pub fn n_users(&self) -> usize {
        self.interactions.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.interactions.iter().map(Vec::len).sum()
    }

    pub fn item(&self, id: u32) -> Option<&Item> {
        self.items.get(id as usize)
    }

    /// All text the tokenizer vocabulary should cover.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.items
            .iter()
            .flat_map(|i| [i.name.as_str(), i.description.as_str()])
            .chain(self.interactions.iter().flatten().flat_map(|x| {
                [
                    x.feature.as_str(),
                    x.review.as_str(),
                    x.explanation.as_str(),
                    x.summary.as_str(),
                ]
            }))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (i, item) in self.items.iter().enumerate() {
            if item.id as usize != i {
                return Err(DataError::Catalog(format!("item at position {i} has id {}", item.id)));
            }
        }
        for (u, history) in self.interactions.iter().enumerate() {
            if history.len() < 3 {
                return Err(DataError::Catalog(format!(
                    "user {u} has {} interactions; at least 3 are required",
                    history.len()
                )));
            }
            let mut prev = None;
            for x in history {
                if x.item as usize >= self.items.len() {
                    return Err(DataError::Catalog(format!(
                        "user {u} references unknown item {}",
                        x.item
                    )));
                }
                if !(1..=5).contains(&x.rating) {
                    return Err(DataError::Catalog(format!(
                        "user {u}: rating {} outside 1..=5",
                        x.rating
                    )));
                }
                if prev.is_some_and(|p| x.timestamp < p) {
                    return Err(DataError::Catalog(format!(
                        "user {u}: interactions out of timestamp order"
                    )));
                }
                prev = Some(x.timestamp);
            }
        }
        Ok(())
    }

    /// Writes one JSON record per line: items first, then users.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for item in &self.items {
            serde_json::to_writer(&mut w, &Record::Item(item.clone()))?;
            w.write_all(b"\n")?;
        }
        for (u, history) in self.interactions.iter().enumerate() {
            let rec = Record::User {
                id: u as u32,
                interactions: history.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DataError> {
        let mut items = Vec::new();
        let mut interactions = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| DataError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            match rec {
                Record::Item(item) => {
                    if !interactions.is_empty() || item.id as usize != items.len() {
                        return Err(DataError::Parse {
                            line: n + 1,
                            message: format!("item {} out of order", item.id),
                        });
                    }
                    items.push(item);
                }
                Record::User { id, interactions: h } => {
                    if id as usize != interactions.len() {
                        return Err(DataError::Parse {
                            line: n + 1,
                            message: format!("user {id} out of order"),
                        });
                    }
                    interactions.push(h);
                }
            }
        }
        let catalog = Catalog { items, interactions };
        catalog.validate()?;
        Ok(catalog)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_users: usize, n_items: usize, per_user: usize) -> CatalogConfig {
        CatalogConfig {
            n_users,
            n_items,
            interactions_per_user: per_user,
            ..CatalogConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_catalog(&CatalogConfig::default(), 7).unwrap();
        let b = generate_catalog(&CatalogConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_catalog(&CatalogConfig::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_and_references() {
        let c = generate_catalog(&cfg(20, 50, 8), 1).unwrap();
        assert_eq!(c.n_users(), 20);
        assert_eq!(c.n_items(), 50);
        assert_eq!(c.n_interactions(), 160);
        c.validate().unwrap();
        for h in &c.interactions {
            let distinct: HashSet<u32> = h.iter().map(|x| x.item).collect();
            assert_eq!(distinct.len(), h.len());
            assert!(h.iter().all(|x| (1..=5).contains(&x.rating)));
        }
    }

    #[test]
    fn descriptions_follow_attributes() {
        let c = generate_catalog(&CatalogConfig::default(), 3).unwrap();
        for item in &c.items {
            assert_eq!(
                item.description,
                item_description(&item.category, &item.brand, &item.color)
            );
        }
        assert_eq!(
            item_description("t-shirt", "nike", "red"),
            "Category: t-shirt. Brand: nike. Color: red."
        );
    }

    #[test]
    fn rejects_too_few_items() {
        let err = generate_catalog(&cfg(5, 11, 3), 0).unwrap_err();
        assert!(err.to_string().contains("K+1"), "{err}");
        assert!(generate_catalog(&cfg(5, 12, 3), 0).is_ok());
        assert!(generate_catalog(&cfg(5, 50, 2), 0).is_err());
    }

    #[test]
    fn ratings_track_affinity() {
        // choice favours high-affinity items, so ratings skew positive
        let c = generate_catalog(&cfg(200, 50, 8), 11).unwrap();
        let mean = |xs: &mut dyn Iterator<Item = u8>| {
            let v: Vec<f64> = xs.map(f64::from).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let all = mean(&mut c.interactions.iter().flatten().map(|x| x.rating));
        assert!(all > 3.0, "chosen items skew positive: {all}");
        let spread: HashSet<u8> = c.interactions.iter().flatten().map(|x| x.rating).collect();
        assert!(spread.len() >= 4);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = generate_catalog(&cfg(4, 20, 3), 2).unwrap();
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        let back = Catalog::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let c = generate_catalog(&cfg(4, 20, 3), 2).unwrap();
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{not json\n");
        match Catalog::read_jsonl(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 25),
            other => panic!("{other:?}"),
        }
    }
}
