//! Maximum-inner-product search over store keys.
//!
//! [`FlatIndex`] scans every key and is the ground truth. [`IvfIndex`]
//! clusters keys into inverted lists and scans only the `n_probe` lists
//! whose centroids sit closest to the query; probing every list makes it
//! equivalent to the flat scan because both rank candidates with the same
//! scoring loop and the same tie-break (higher score first, then lower
//! entry id).

pub mod kmeans;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::{par_map, seq_map};
use crate::types::{dot_f32, Embedding};

/// One retrieval hit: position of the key in the index plus its similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hit {
    pub entry: usize,
    pub score: f32,
}

/// Similarity used for ranking. `Dot` is the raw inner product; `Cosine`
/// divides by both norms (zero-norm vectors are rejected).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cosine,
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity::Dot
    }
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Similarity::Dot),
            "cosine" => Ok(Similarity::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown similarity {other:?} (expected dot or cosine)"
            ))),
        }
    }
}

/// Shared key storage: a row-major f32 matrix plus cached norms when cosine
/// scoring is active.
#[derive(Debug, Clone)]
struct KeyMatrix {
    data: Vec<f32>,
    n: usize,
    d: usize,
    norms: Option<Vec<f32>>,
    sim: Similarity,
}

impl KeyMatrix {
    fn build(keys: &[Embedding], sim: Similarity) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let d = keys[0].dim();
        let mut data = Vec::with_capacity(keys.len() * d);
        for key in keys {
            if key.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: key.dim(),
                });
            }
            data.extend_from_slice(key.values());
        }
        let norms = match sim {
            Similarity::Dot => None,
            Similarity::Cosine => {
                let norms: Vec<f32> = keys.iter().map(Embedding::norm).collect();
                if norms.iter().any(|n| *n == 0.0) {
                    return Err(Error::ZeroNorm);
                }
                Some(norms)
            }
        };
        Ok(KeyMatrix {
            data,
            n: keys.len(),
            d,
            norms,
            sim,
        })
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn check_query(&self, query: &Embedding) -> Result<f32> {
        if query.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: query.dim(),
            });
        }
        match self.sim {
            Similarity::Dot => Ok(1.0),
            Similarity::Cosine => {
                let n = query.norm();
                if n == 0.0 {
                    Err(Error::ZeroNorm)
                } else {
                    Ok(n)
                }
            }
        }
    }

    /// Score one entry. `query_norm` is ignored for dot similarity.
    fn score(&self, query: &Embedding, query_norm: f32, entry: usize) -> f32 {
        let dot = dot_f32(query.values(), self.row(entry));
        match self.sim {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                dot / (query_norm * self.norms.as_ref().expect("cosine norms cached")[entry])
            }
        }
    }
}

/// Keep the `k` best hits: descending score, ascending entry id on exact
/// score ties. Negative zero is folded into positive zero first so that the
/// two orderings agree with the `==` the tie-break is specified against.
pub(crate) fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    for h in hits.iter_mut() {
        if h.score == 0.0 {
            h.score = 0.0;
        }
    }
    hits.sort_unstable_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.entry.cmp(&b.entry))
    });
    hits.truncate(k);
    hits
}

// ---------------------------------------------------------------------------
// Flat index

/// Exact retrieval by full scan.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    keys: KeyMatrix,
}

impl FlatIndex {
    pub fn build(keys: &[Embedding], sim: Similarity) -> Result<Self> {
        Ok(FlatIndex {
            keys: KeyMatrix::build(keys, sim)?,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.n
    }

    pub fn is_empty(&self) -> bool {
        self.keys.n == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.d
    }

    pub fn similarity(&self) -> Similarity {
        self.keys.sim
    }

    /// Top-`k` entries for a query, optionally excluding one entry id. Fewer
    /// than `k` candidates simply returns them all.
    pub fn search(&self, query: &Embedding, k: usize, exclude: Option<usize>) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidK);
        }
        let qn = self.keys.check_query(query)?;
        let mut hits = Vec::with_capacity(self.keys.n);
        for entry in 0..self.keys.n {
            if exclude == Some(entry) {
                continue;
            }
            hits.push(Hit {
                entry,
                score: self.keys.score(query, qn, entry),
            });
        }
        Ok(top_k(hits, k))
    }

    /// Batched [`FlatIndex::search`] without exclusion, parallel over
    /// queries when the `parallel` feature is on.
    pub fn search_batch(&self, queries: &[Embedding], k: usize) -> Result<Vec<Vec<Hit>>> {
        par_map(queries, |q| self.search(q, k, None))
            .into_iter()
            .collect()
    }

    /// Single-threaded twin of [`FlatIndex::search_batch`].
    pub fn search_batch_seq(&self, queries: &[Embedding], k: usize) -> Result<Vec<Vec<Hit>>> {
        seq_map(queries, |q| self.search(q, k, None))
            .into_iter()
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Inverted-file index

/// Approximate retrieval through k-means posting lists.
#[derive(Debug, Clone)]
pub struct IvfIndex {
    keys: KeyMatrix,
    /// `n_list * d` row-major centroid matrix (f64: centroids are means).
    centroids: Vec<f64>,
    /// Entry ids grouped by nearest centroid.
    lists: Vec<Vec<usize>>,
    n_list: usize,
    n_probe: usize,
}

/// Default list count for an `n`-key store.
pub fn default_n_list(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}

/// Default probe count for a given list count.
pub fn default_n_probe(n_list: usize) -> usize {
    (n_list / 8).max(1)
}

impl IvfIndex {
    /// Cluster the keys into `n_list` posting lists (`iters` Lloyd rounds,
    /// seeded) and keep `n_probe` as the default probe width.
    pub fn train(
        keys: &[Embedding],
        n_list: usize,
        iters: usize,
        n_probe: usize,
        seed: u64,
        sim: Similarity,
    ) -> Result<Self> {
        let matrix = KeyMatrix::build(keys, sim)?;
        if n_list == 0 || n_probe == 0 {
            return Err(Error::InvalidConfig(
                "n_list and n_probe must be at least 1".into(),
            ));
        }
        if n_list > matrix.n {
            return Err(Error::TooManyLists {
                n_list,
                keys: matrix.n,
            });
        }
        let km = kmeans::lloyd(&matrix.data, matrix.n, matrix.d, n_list, iters, seed);
        let mut lists = vec![Vec::new(); n_list];
        for (entry, cluster) in km.assignments.iter().enumerate() {
            lists[*cluster].push(entry);
        }
        Ok(IvfIndex {
            keys: matrix,
            centroids: km.centroids,
            lists,
            n_list,
            n_probe: n_probe.min(n_list),
        })
    }

    pub fn len(&self) -> usize {
        self.keys.n
    }

    pub fn is_empty(&self) -> bool {
        self.keys.n == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.d
    }

    pub fn n_list(&self) -> usize {
        self.n_list
    }

    pub fn n_probe(&self) -> usize {
        self.n_probe
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    /// Probe order: ascending Euclidean distance between the query and each
    /// centroid, ties to the lower list id (the same metric that assigned
    /// keys to lists).
    fn probe_order(&self, query: &Embedding) -> Vec<usize> {
        let d = self.keys.d;
        let mut ranked: Vec<(usize, f64)> = (0..self.n_list)
            .map(|c| {
                (
                    c,
                    kmeans::squared_distance(query.values(), &self.centroids[c * d..(c + 1) * d]),
                )
            })
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        ranked.into_iter().map(|(c, _)| c).collect()
    }

    /// Search with the index's default probe width.
    pub fn search(&self, query: &Embedding, k: usize, exclude: Option<usize>) -> Result<Vec<Hit>> {
        self.search_with_probe(query, k, exclude, self.n_probe)
    }

    /// Search visiting the `n_probe` nearest posting lists.
    pub fn search_with_probe(
        &self,
        query: &Embedding,
        k: usize,
        exclude: Option<usize>,
        n_probe: usize,
    ) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidK);
        }
        if n_probe == 0 {
            return Err(Error::InvalidConfig("n_probe must be at least 1".into()));
        }
        let qn = self.keys.check_query(query)?;
        let probes = self.probe_order(query);
        let mut hits = Vec::new();
        for list in probes.into_iter().take(n_probe.min(self.n_list)) {
            for &entry in &self.lists[list] {
                if exclude == Some(entry) {
                    continue;
                }
                hits.push(Hit {
                    entry,
                    score: self.keys.score(query, qn, entry),
                });
            }
        }
        Ok(top_k(hits, k))
    }

    /// Batched [`IvfIndex::search`], parallel over queries when the
    /// `parallel` feature is on.
    pub fn search_batch(&self, queries: &[Embedding], k: usize) -> Result<Vec<Vec<Hit>>> {
        par_map(queries, |q| self.search(q, k, None))
            .into_iter()
            .collect()
    }

    /// Single-threaded twin of [`IvfIndex::search_batch`].
    pub fn search_batch_seq(&self, queries: &[Embedding], k: usize) -> Result<Vec<Vec<Hit>>> {
        seq_map(queries, |q| self.search(q, k, None))
            .into_iter()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn emb(values: &[f32]) -> Embedding {
        Embedding::new(values.to_vec()).unwrap()
    }

    fn random_keys(n: usize, d: usize, seed: u64) -> Vec<Embedding> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| emb(&(0..d).map(|_| rng.random::<f32>() - 0.5).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn flat_orders_by_dot_product() {
        let keys = vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0]), emb(&[0.7, 0.7])];
        let index = FlatIndex::build(&keys, Similarity::Dot).unwrap();
        let hits = index.search(&emb(&[1.0, 0.1]), 3, None).unwrap();
        assert_eq!(
            hits.iter().map(|h| h.entry).collect::<Vec<_>>(),
            vec![0, 2, 1]
        );
        assert_eq!(hits[0].score, 1.0);
        // Hand-checked: 0.7 * 1.0 + 0.7 * 0.1
        assert!((hits[1].score - 0.77).abs() < 1e-6);
    }

    #[test]
    fn ties_break_toward_lower_entry_id() {
        let keys = vec![emb(&[0.5, 0.5]), emb(&[0.5, 0.5]), emb(&[0.5, 0.5])];
        let index = FlatIndex::build(&keys, Similarity::Dot).unwrap();
        let hits = index.search(&emb(&[1.0, 1.0]), 2, None).unwrap();
        assert_eq!(
            hits.iter().map(|h| h.entry).collect::<Vec<_>>(),
            vec![0, 1]
        );
    }

    #[test]
    fn exclusion_and_small_candidate_sets() {
        let keys = vec![emb(&[1.0]), emb(&[2.0])];
        let index = FlatIndex::build(&keys, Similarity::Dot).unwrap();
        let hits = index.search(&emb(&[1.0]), 5, Some(1)).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entry, 0);
        assert!(matches!(
            index.search(&emb(&[1.0]), 0, None),
            Err(Error::InvalidK)
        ));
    }

    #[test]
    fn cosine_normalizes_and_rejects_zero_vectors() {
        let keys = vec![emb(&[10.0, 0.0]), emb(&[0.0, 0.1])];
        let index = FlatIndex::build(&keys, Similarity::Cosine).unwrap();
        let hits = index.search(&emb(&[0.0, 5.0]), 2, None).unwrap();
        // Direction wins despite the tiny magnitude of key 1.
        assert_eq!(hits[0].entry, 1);
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert!(matches!(
            index.search(&emb(&[0.0, 0.0]), 1, None),
            Err(Error::ZeroNorm)
        ));
        assert!(matches!(
            FlatIndex::build(&[emb(&[0.0, 0.0])], Similarity::Cosine),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn dimension_mismatches_are_refused() {
        let index = FlatIndex::build(&random_keys(4, 3, 1), Similarity::Dot).unwrap();
        assert!(matches!(
            index.search(&emb(&[1.0, 2.0]), 1, None),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(FlatIndex::build(
            &[emb(&[1.0, 2.0]), emb(&[1.0])],
            Similarity::Dot
        )
        .is_err());
    }

    #[test]
    fn ivf_full_probe_matches_flat_exactly() {
        let keys = random_keys(400, 8, 42);
        let flat = FlatIndex::build(&keys, Similarity::Dot).unwrap();
        let ivf = IvfIndex::train(&keys, 20, 15, 4, 42, Similarity::Dot).unwrap();
        let queries = random_keys(50, 8, 7);
        for q in &queries {
            let exact = flat.search(q, 10, None).unwrap();
            let full = ivf.search_with_probe(q, 10, None, 20).unwrap();
            assert_eq!(exact, full);
        }
    }

    #[test]
    fn ivf_respects_exclusion() {
        let keys = random_keys(100, 4, 3);
        let ivf = IvfIndex::train(&keys, 10, 10, 10, 1, Similarity::Dot).unwrap();
        for entry in [0usize, 17, 99] {
            let hits = ivf
                .search_with_probe(&keys[entry], 100, Some(entry), 10)
                .unwrap();
            assert!(hits.iter().all(|h| h.entry != entry));
            assert_eq!(hits.len(), 99);
        }
    }

    #[test]
    fn ivf_posting_lists_partition_the_keys() {
        let keys = random_keys(128, 6, 9);
        let ivf = IvfIndex::train(&keys, 12, 10, 2, 9, Similarity::Dot).unwrap();
        let mut seen: Vec<usize> = ivf.lists().iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..128).collect::<Vec<_>>());
    }

    #[test]
    fn ivf_rejects_more_lists_than_keys() {
        let keys = random_keys(5, 2, 0);
        assert!(matches!(
            IvfIndex::train(&keys, 6, 5, 1, 0, Similarity::Dot),
            Err(Error::TooManyLists { n_list: 6, keys: 5 })
        ));
    }

    #[test]
    fn batch_parallel_equals_batch_sequential() {
        let keys = random_keys(300, 16, 21);
        let queries = random_keys(64, 16, 22);
        let flat = FlatIndex::build(&keys, Similarity::Dot).unwrap();
        assert_eq!(
            flat.search_batch(&queries, 5).unwrap(),
            flat.search_batch_seq(&queries, 5).unwrap()
        );
        let ivf = IvfIndex::train(&keys, 17, 10, 3, 21, Similarity::Dot).unwrap();
        assert_eq!(
            ivf.search_batch(&queries, 5).unwrap(),
            ivf.search_batch_seq(&queries, 5).unwrap()
        );
    }

    proptest! {
        /// Recall against the flat oracle never decreases as n_probe grows,
        /// and hits the full set at n_probe = n_list.
        #[test]
        fn recall_monotone_in_probe_width(seed in 0u64..500) {
            let keys = random_keys(120, 5, seed);
            let flat = FlatIndex::build(&keys, Similarity::Dot).unwrap();
            let ivf = IvfIndex::train(&keys, 8, 10, 1, seed, Similarity::Dot).unwrap();
            let query = &random_keys(1, 5, seed ^ 0xabcd)[0];
            let exact: Vec<usize> = flat
                .search(query, 10, None)
                .unwrap()
                .iter()
                .map(|h| h.entry)
                .collect();
            let mut prev = 0usize;
            for n_probe in 1..=8usize {
                let got = ivf.search_with_probe(query, 10, None, n_probe).unwrap();
                let overlap = got
                    .iter()
                    .filter(|h| exact.contains(&h.entry))
                    .count();
                prop_assert!(overlap >= prev, "recall dropped as probes widened");
                prev = overlap;
            }
            prop_assert_eq!(prev, exact.len());
        }

        /// Scores returned by search are exactly the dot products of the
        /// query with the returned entries, in non-increasing order.
        #[test]
        fn flat_scores_are_true_dots(seed in 0u64..500) {
            let keys = random_keys(40, 3, seed);
            let flat = FlatIndex::build(&keys, Similarity::Dot).unwrap();
            let query = &random_keys(1, 3, seed ^ 0x77)[0];
            let hits = flat.search(query, 40, None).unwrap();
            for pair in hits.windows(2) {
                prop_assert!(pair[0].score >= pair[1].score);
            }
            for h in &hits {
                prop_assert_eq!(h.score, query.dot(&keys[h.entry]));
            }
        }
    }
}
