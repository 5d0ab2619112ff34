//! Demonstration selection for dynamic in-context prompting.
//!
//! Two retrieval routes over an [`ExampleBank`]: keyword rules that put a
//! sentence into a category, and k-means over embeddings supplied with the
//! bank. Ties are always broken by the lowest index.

use std::io::BufRead;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_SEED: u64 = 17;
pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(rename = "src")]
    pub source: String,
    #[serde(rename = "tgt")]
    pub target: String,
    #[serde(rename = "cat", default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(rename = "emb", default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExampleBank {
    examples: Vec<Example>,
    dim: Option<usize>,
}

impl ExampleBank {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let mut dim = None;
        for e in &examples {
            if let Some(v) = &e.embedding {
                match dim {
                    None => dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(Error::DimensionMismatch { expected: d, found: v.len() })
                    }
                    _ => {}
                }
            }
        }
        Ok(ExampleBank { examples, dim })
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let rows = jsonl::parse_lines::<Example>(reader)?;
        ExampleBank::new(rows.into_iter().map(|(_, e)| e).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file)).map_err(|e| e.with_path(path))
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Bank indices of examples that carry an embedding, in bank order.
    fn embedded(&self) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.embedding.is_some())
            .map(|(i, _)| i)
            .collect()
    }
}

// ---- keyword classification -----------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRule {
    #[serde(rename = "cat")]
    pub category: String,
    pub keywords: Vec<String>,
}

/// Ordered rules; the first rule with a hit wins, otherwise the fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordRules {
    pub rules: Vec<KeywordRule>,
    pub fallback: String,
}

impl KeywordRules {
    pub fn new(rules: Vec<KeywordRule>, fallback: impl Into<String>) -> Self {
        KeywordRules { rules, fallback: fallback.into() }
    }

    /// Parses the rules file: a JSON list whose last entry has no keywords
    /// and names the fallback category.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut rules: Vec<KeywordRule> = serde_json::from_str(text)?;
        let fallback = match rules.last() {
            None => return Err(Error::EmptyRules),
            Some(last) if last.keywords.is_empty() => rules.pop().expect("non-empty").category,
            Some(_) => {
                return Err(Error::Config(
                    "rules file must end with a fallback entry without keywords".into(),
                ))
            }
        };
        Ok(KeywordRules { rules, fallback })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Lower-cased alphanumeric words joined by single spaces and padded, so a
/// keyword phrase matches only on word boundaries.
fn normalize_words(text: &str) -> String {
    let mut out = String::from(" ");
    for word in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        out.push_str(&word.to_lowercase());
        out.push(' ');
    }
    out
}

pub fn classify_by_keywords(text: &str, rules: &KeywordRules) -> Result<String> {
    if rules.rules.is_empty() && rules.fallback.is_empty() {
        return Err(Error::EmptyRules);
    }
    let hay = normalize_words(text);
    for rule in &rules.rules {
        let hit = rule.keywords.iter().any(|k| {
            let needle = normalize_words(k);
            needle.len() > 2 && hay.contains(&needle)
        });
        if hit {
            return Ok(rule.category.clone());
        }
    }
    Ok(rules.fallback.clone())
}

// ---- k-means --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    /// (example id, cluster id) for every embedded example, in bank order.
    pub assignments: Vec<(String, usize)>,
    pub iterations: usize,
    /// Sum of squared distances to assigned centroids after each assignment
    /// pass.
    pub distortion_history: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.assignments.iter().find(|(i, _)| i == id).map(|(_, c)| *c)
    }

    pub fn nearest_centroid(&self, query: &[f64]) -> Result<usize> {
        nearest(&self.centroids, query)
    }

    pub fn distortion(&self) -> f64 {
        self.distortion_history.last().copied().unwrap_or(0.0)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the centroid closest to `v`; ties go to the lowest index.
fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in centroids.iter().enumerate() {
        if c.len() != v.len() {
            return Err(Error::DimensionMismatch { expected: c.len(), found: v.len() });
        }
        let d = squared_distance(c, v);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoEmbeddings)
}

/// k-means++ seeding from a seeded ChaCha stream.
fn init_centroids(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // All remaining points coincide with a centroid.
            Err(_) => (0..points.len())
                .find(|i| !chosen.contains(i))
                .expect("k <= number of points"),
        };
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

/// Lloyd's algorithm from seeded k-means++ initialization, until the
/// assignment stops changing or [`MAX_ITERATIONS`] passes.
pub fn kmeans_fit(bank: &ExampleBank, k: usize, seed: u64) -> Result<ClusterModel> {
    let idx = bank.embedded();
    if k == 0 || idx.len() < k {
        return Err(Error::TooFewEmbeddings { k, found: idx.len() });
    }
    let points: Vec<&[f64]> = idx
        .iter()
        .map(|&i| bank.examples[i].embedding.as_deref().expect("embedded"))
        .collect();
    let dim = points[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_centroids(&points, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let next: Vec<usize> = points
            .iter()
            .map(|p| nearest(&centroids, p))
            .collect::<Result<_>>()?;
        history.push(
            points
                .iter()
                .zip(&next)
                .map(|(p, &c)| squared_distance(p, &centroids[c]))
                .sum(),
        );
        if next == labels {
            break;
        }
        labels = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for c in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }

    Ok(ClusterModel {
        k,
        seed,
        centroids,
        assignments: idx
            .iter()
            .zip(&labels)
            .map(|(&i, &c)| (bank.examples[i].id.clone(), c))
            .collect(),
        iterations,
        distortion_history: history,
    })
}

// ---- retrieval ------------------------------------------------------------

/// The `n` bank examples nearest to `query` inside the cluster whose centroid
/// is nearest to `query`.
pub fn retrieve_by_embedding<'b>(
    query: &[f64],
    model: &ClusterModel,
    bank: &'b ExampleBank,
    n: usize,
) -> Result<Vec<&'b Example>> {
    if n == 0 {
        return Err(Error::Config("retrieval count must be at least 1".into()));
    }
    if bank.dim().is_none() {
        return Err(Error::NoEmbeddings);
    }
    let cluster = model.nearest_centroid(query)?;
    let mut pool: Vec<(f64, usize)> = Vec::new();
    for (i, e) in bank.examples().iter().enumerate() {
        if let Some(v) = &e.embedding {
            if model.cluster_of(&e.id) == Some(cluster) {
                pool.push((squared_distance(v, query), i));
            }
        }
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(pool
        .into_iter()
        .take(n)
        .map(|(_, i)| &bank.examples()[i])
        .collect())
}

/// Up to `n` examples of the query's keyword category, in bank order. An
/// example without a stored category is classified from its source text.
pub fn retrieve_by_keywords<'b>(
    text: &str,
    rules: &KeywordRules,
    bank: &'b ExampleBank,
    n: usize,
) -> Result<Vec<&'b Example>> {
    if n == 0 {
        return Err(Error::Config("retrieval count must be at least 1".into()));
    }
    let category = classify_by_keywords(text, rules)?;
    let mut out = Vec::new();
    for e in bank.examples() {
        let cat = match &e.category {
            Some(c) => c.clone(),
            None => classify_by_keywords(&e.source, rules)?,
        };
        if cat == category {
            out.push(e);
            if out.len() == n {
                break;
            }
        }
    }
    Ok(out)
}

pub enum Query<'a> {
    Embedding(&'a [f64]),
    Text(&'a str),
}

pub enum Selector<'a> {
    Clusters(&'a ClusterModel),
    Keywords(&'a KeywordRules),
}

/// Dispatches to the embedding or keyword route.
pub fn retrieve<'b>(
    query: Query<'_>,
    selector: Selector<'_>,
    bank: &'b ExampleBank,
    n: usize,
) -> Result<Vec<&'b Example>> {
    match (query, selector) {
        (Query::Embedding(v), Selector::Clusters(m)) => retrieve_by_embedding(v, m, bank, n),
        (Query::Text(t), Selector::Keywords(r)) => retrieve_by_keywords(t, r, bank, n),
        (Query::Text(_), Selector::Clusters(_)) => Err(Error::NoEmbeddings),
        (Query::Embedding(_), Selector::Keywords(_)) => Err(Error::Config(
            "keyword retrieval needs a text query".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(id: &str, src: &str, cat: Option<&str>, emb: Option<Vec<f64>>) -> Example {
        Example {
            id: id.into(),
            source: src.into(),
            target: format!("<{src}>"),
            category: cat.map(str::to_owned),
            embedding: emb,
        }
    }

    fn rules() -> KeywordRules {
        KeywordRules::new(
            vec![
                KeywordRule { category: "experiment".into(), keywords: vec!["dataset".into(), "train".into()] },
                KeywordRule { category: "model".into(), keywords: vec!["language model".into()] },
            ],
            "general",
        )
    }

    #[test]
    fn first_matching_rule_wins() {
        let c = classify_by_keywords("We train the Language Model", &rules()).unwrap();
        assert_eq!(c, "experiment");
    }

    #[test]
    fn unmatched_text_falls_back() {
        assert_eq!(classify_by_keywords("Good morning", &rules()).unwrap(), "general");
        // "training" is not the keyword "train"
        assert_eq!(classify_by_keywords("training", &rules()).unwrap(), "general");
    }

    #[test]
    fn empty_rules_are_rejected() {
        assert!(matches!(KeywordRules::from_json("[]"), Err(Error::EmptyRules)));
        let none = KeywordRules::new(vec![], "");
        assert!(matches!(classify_by_keywords("x", &none), Err(Error::EmptyRules)));
    }

    #[test]
    fn rules_file_needs_fallback_last() {
        let ok = r#"[{"cat":"a","keywords":["x"]},{"cat":"other","keywords":[]}]"#;
        let r = KeywordRules::from_json(ok).unwrap();
        assert_eq!(r.fallback, "other");
        assert_eq!(r.rules.len(), 1);
        assert!(KeywordRules::from_json(r#"[{"cat":"a","keywords":["x"]}]"#).is_err());
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let err = ExampleBank::new(vec![
            ex("a", "x", None, Some(vec![0.0, 1.0])),
            ex("b", "y", None, Some(vec![0.0])),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, found: 1 }));
    }

    #[test]
    fn k_equal_to_n_gives_singletons() {
        let bank = ExampleBank::new(
            (0..5)
                .map(|i| ex(&format!("e{i}"), "s", None, Some(vec![i as f64, (i * i) as f64])))
                .collect(),
        )
        .unwrap();
        let m = kmeans_fit(&bank, 5, DEFAULT_SEED).unwrap();
        let mut clusters: Vec<usize> = m.assignments.iter().map(|(_, c)| *c).collect();
        clusters.sort();
        assert_eq!(clusters, vec![0, 1, 2, 3, 4]);
        assert_eq!(m.distortion(), 0.0);
    }

    #[test]
    fn too_few_embeddings() {
        let bank = ExampleBank::new(vec![ex("a", "s", None, Some(vec![0.0])), ex("b", "s", None, None)]).unwrap();
        assert!(matches!(kmeans_fit(&bank, 2, 1), Err(Error::TooFewEmbeddings { k: 2, found: 1 })));
    }

    #[test]
    fn exact_query_ranks_its_example_first() {
        let bank = ExampleBank::new(vec![
            ex("a", "s", None, Some(vec![0.0, 0.0])),
            ex("b", "s", None, Some(vec![0.1, 0.0])),
            ex("c", "s", None, Some(vec![5.0, 5.0])),
        ])
        .unwrap();
        let m = kmeans_fit(&bank, 2, 3).unwrap();
        let got = retrieve_by_embedding(&[0.1, 0.0], &m, &bank, 2).unwrap();
        assert_eq!(got[0].id, "b");
    }

    #[test]
    fn keyword_pool_exhaustion_returns_fewer() {
        let bank = ExampleBank::new(vec![
            ex("1", "we train it", Some("experiment"), None),
            ex("2", "hello", Some("general"), None),
            ex("3", "more data", Some("experiment"), None),
        ])
        .unwrap();
        let got = retrieve_by_keywords("train on the dataset", &rules(), &bank, 5).unwrap();
        let ids: Vec<&str> = got.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["1", "3"]);
    }

    #[test]
    fn keyword_route_classifies_uncategorized_examples() {
        let bank = ExampleBank::new(vec![ex("1", "a new dataset", None, None)]).unwrap();
        let got = retrieve_by_keywords("train", &rules(), &bank, 1).unwrap();
        assert_eq!(got.len(), 1);
    }

    #[test]
    fn text_query_against_clusters_is_an_error() {
        let bank = ExampleBank::new(vec![ex("a", "s", None, Some(vec![1.0]))]).unwrap();
        let m = kmeans_fit(&bank, 1, 0).unwrap();
        assert!(matches!(
            retrieve(Query::Text("x"), Selector::Clusters(&m), &bank, 1),
            Err(Error::NoEmbeddings)
        ));
        let no_emb = ExampleBank::new(vec![ex("a", "s", None, None)]).unwrap();
        assert!(matches!(
            retrieve_by_embedding(&[1.0], &m, &no_emb, 1),
            Err(Error::NoEmbeddings)
        ));
    }

    fn random_bank(points: Vec<Vec<f64>>) -> ExampleBank {
        ExampleBank::new(
            points
                .into_iter()
                .enumerate()
                .map(|(i, p)| ex(&format!("p{i}"), "s", None, Some(p)))
                .collect(),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn distortion_never_increases(
            points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 4..40),
            k in 1usize..4,
            seed in any::<u64>(),
        ) {
            let bank = random_bank(points);
            let m = kmeans_fit(&bank, k, seed).unwrap();
            for pair in m.distortion_history.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-9);
            }
        }

        #[test]
        fn assignments_are_argmin(
            points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 3..30),
            k in 1usize..4,
            seed in any::<u64>(),
        ) {
            let bank = random_bank(points);
            let m = kmeans_fit(&bank, k, seed).unwrap();
            for (e, (_, c)) in bank.examples().iter().zip(&m.assignments) {
                let v = e.embedding.as_ref().unwrap();
                if m.iterations < MAX_ITERATIONS {
                    prop_assert_eq!(nearest(&m.centroids, v).unwrap(), *c);
                }
            }
            prop_assert_eq!(&kmeans_fit(&bank, k, seed).unwrap(), &m);
        }
    }
}
