//! The open-book side of the model: every training example becomes a
//! (key, value) entry where the key is the example's pooled embedding under
//! the current encoder and the value is its class's canonical label word.
//!
//! The store owns a retrieval index and a generation counter. Parameter
//! updates leave entries stale until [`KnowledgeStore::refresh`] re-encodes
//! the source corpus in place and bumps the generation; every query reports
//! which generation served it.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::binfmt::{Reader, Writer};
use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::index::{
    self, default_n_list, default_n_probe, FlatIndex, Hit, IvfIndex, Similarity,
};
use crate::par::par_map;
use crate::types::{
    ClassId, Embedding, Example, ExampleId, LabelSpace, Template, WordId,
};

const STORE_MAGIC: &[u8; 4] = b"RKNN";
const STORE_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Encoding handles

/// Anything that can turn an example into a key embedding.
pub trait StoreEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode_example(&self, example: &Example) -> Result<Embedding>;
}

/// Text-mode handle: wrap the tokens in the template and pool with the toy
/// encoder. Keys are always encoded without demonstration fusion.
pub struct PromptEncoder<'a> {
    pub encoder: &'a ToyEncoder,
    pub template: &'a Template,
}

impl StoreEncoder for PromptEncoder<'_> {
    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn encode_example(&self, example: &Example) -> Result<Embedding> {
        let tokens = example.tokens().ok_or(Error::MixedModes(0))?;
        self.encoder.encode(&self.template.apply(tokens), None)
    }
}

/// Feature-mode handle: the example's vector is its own key.
pub struct FeatureEncoder {
    pub d: usize,
}

impl StoreEncoder for FeatureEncoder {
    fn dim(&self) -> usize {
        self.d
    }

    fn encode_example(&self, example: &Example) -> Result<Embedding> {
        let feat = example.feature_vec().ok_or(Error::MixedModes(0))?;
        if feat.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: feat.dim(),
            });
        }
        Ok(feat.clone())
    }
}

// ---------------------------------------------------------------------------
// Store

#[derive(Debug, Clone)]
pub struct StoreEntry {
    pub key: Embedding,
    /// Canonical label word of the class, `f(y)`.
    pub value: WordId,
    pub class: ClassId,
    pub example: ExampleId,
    /// Set when the encoder has moved since this key was computed.
    pub stale: bool,
}

/// Which index structure serves queries. `Ivf` fields left `None` resolve
/// to `ceil(sqrt(n))` lists and `max(1, n_list / 8)` probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IndexChoice {
    Flat,
    Ivf {
        n_list: Option<usize>,
        n_probe: Option<usize>,
        iters: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoreConfig {
    pub similarity: Similarity,
    pub index: IndexChoice,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            similarity: Similarity::Dot,
            index: IndexChoice::Flat,
        }
    }
}

#[derive(Debug, Clone)]
enum IndexKind {
    Flat(FlatIndex),
    Ivf(IvfIndex),
}

/// Hits plus the store generation that produced them.
#[derive(Debug, Clone)]
pub struct Retrieved {
    pub hits: Vec<Hit>,
    pub generation: u64,
}

#[derive(Debug, Clone)]
pub struct KnowledgeStore {
    entries: Vec<StoreEntry>,
    d: usize,
    generation: u64,
    class_count: usize,
    index: IndexKind,
    by_class: Vec<Vec<usize>>,
    by_example: HashMap<ExampleId, usize>,
    /// Source examples, kept so refresh can re-encode. Stores loaded from
    /// disk have none and cannot refresh.
    corpus: Option<Vec<Example>>,
    config: StoreConfig,
}

impl KnowledgeStore {
    /// Encode every labeled example and index the keys. One entry per
    /// example, in corpus order.
    pub fn build(
        corpus: &[Example],
        encoder: &dyn StoreEncoder,
        labels: &LabelSpace,
        config: StoreConfig,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut by_example = HashMap::with_capacity(corpus.len());
        for (i, ex) in corpus.iter().enumerate() {
            let gold = ex.gold()?;
            if gold as usize >= labels.class_count() {
                return Err(Error::DimensionMismatch {
                    expected: labels.class_count(),
                    got: gold as usize + 1,
                });
            }
            if by_example.insert(ex.id, i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate example id {} in store corpus",
                    ex.id
                )));
            }
        }

        let keys = encode_all(corpus, encoder)?;
        let entries: Vec<StoreEntry> = corpus
            .iter()
            .zip(keys)
            .map(|(ex, key)| {
                let class = ex.label.expect("validated above");
                StoreEntry {
                    key,
                    value: labels.canonical_word(class),
                    class,
                    example: ex.id,
                    stale: false,
                }
            })
            .collect();

        let class_count = labels.class_count();
        let by_class = group_by_class(&entries, class_count);
        let index = build_index(&entries, &config)?;
        Ok(KnowledgeStore {
            entries,
            d: encoder.dim(),
            generation: 0,
            class_count,
            index,
            by_class,
            by_example,
            corpus: Some(corpus.to_vec()),
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn config(&self) -> StoreConfig {
        self.config
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &StoreEntry {
        &self.entries[i]
    }

    /// Whether refresh is possible (the source corpus is attached).
    pub fn has_corpus(&self) -> bool {
        self.corpus.is_some()
    }

    /// Mark every key stale; called after each parameter update.
    pub fn mark_stale(&mut self) {
        for e in self.entries.iter_mut() {
            e.stale = true;
        }
    }

    pub fn any_stale(&self) -> bool {
        self.entries.iter().any(|e| e.stale)
    }

    /// Re-encode every key under the (presumably updated) encoder, rebuild
    /// the index, clear staleness, and bump the generation. Values, classes
    /// and example ids are untouched. The exclusive borrow is the write
    /// lock: no query can observe a half-refreshed store.
    pub fn refresh(&mut self, encoder: &dyn StoreEncoder) -> Result<()> {
        let corpus = self.corpus.as_ref().ok_or(Error::MissingCorpus)?;
        if encoder.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: encoder.dim(),
            });
        }
        let keys = encode_all(corpus, encoder)?;
        for (entry, key) in self.entries.iter_mut().zip(keys) {
            entry.key = key;
            entry.stale = false;
        }
        self.index = build_index(&self.entries, &self.config)?;
        self.generation += 1;
        Ok(())
    }

    /// Top-`k` entries for a query. `exclude` removes one source example by
    /// id (leave-one-out during training); an id not present in the store
    /// excludes nothing.
    pub fn search(
        &self,
        query: &Embedding,
        k: usize,
        exclude: Option<ExampleId>,
    ) -> Result<Retrieved> {
        let excluded_entry = exclude.and_then(|id| self.by_example.get(&id).copied());
        let hits = match &self.index {
            IndexKind::Flat(ix) => ix.search(query, k, excluded_entry)?,
            IndexKind::Ivf(ix) => ix.search(query, k, excluded_entry)?,
        };
        Ok(Retrieved {
            hits,
            generation: self.generation,
        })
    }

    /// Top-`m` entries of one class (for demonstration retrieval). A class
    /// with no entries yields an empty hit list.
    pub fn search_class(
        &self,
        query: &Embedding,
        m: usize,
        class: ClassId,
        exclude: Option<ExampleId>,
    ) -> Result<Retrieved> {
        if m == 0 {
            return Err(Error::InvalidK);
        }
        if query.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: query.dim(),
            });
        }
        let excluded_entry = exclude.and_then(|id| self.by_example.get(&id).copied());
        let members: &[usize] = self
            .by_class
            .get(class as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let mut hits = Vec::with_capacity(members.len());
        for &entry in members {
            if excluded_entry == Some(entry) {
                continue;
            }
            hits.push(Hit {
                entry,
                score: self.score(query, entry)?,
            });
        }
        Ok(Retrieved {
            hits: index::top_k(hits, m),
            generation: self.generation,
        })
    }

    fn score(&self, query: &Embedding, entry: usize) -> Result<f32> {
        let key = &self.entries[entry].key;
        match self.config.similarity {
            Similarity::Dot => Ok(query.dot(key)),
            Similarity::Cosine => {
                let qn = query.norm();
                let kn = key.norm();
                if qn == 0.0 || kn == 0.0 {
                    return Err(Error::ZeroNorm);
                }
                Ok(query.dot(key) / (qn * kn))
            }
        }
    }

    /// Classes of the given hits, in hit order — the inputs the neighbor
    /// distribution needs.
    pub fn hit_classes(&self, hits: &[Hit]) -> Vec<ClassId> {
        hits.iter().map(|h| self.entries[h.entry].class).collect()
    }

    // -- persistence ---------------------------------------------------------

    /// Serialize to the `RKNN` store format: magic, version, dim, entry
    /// count, generation, one record per entry (example id, class, label
    /// word, key as little-endian f32), and a trailing CRC32 over every
    /// preceding byte.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut w = Writer::new();
        w.push_bytes(STORE_MAGIC);
        w.push_u32(STORE_VERSION);
        w.push_u32(self.d as u32);
        w.push_u64(self.entries.len() as u64);
        w.push_u64(self.generation);
        for entry in &self.entries {
            w.push_u64(entry.example);
            w.push_u32(entry.class);
            w.push_u32(entry.value);
            for v in entry.key.values() {
                w.push_f32(*v);
            }
        }
        fs::write(path, w.finish_with_crc()).map_err(|e| Error::io(path, e))
    }

    /// Load with the default flat/dot configuration.
    pub fn load(path: &Path) -> Result<Self> {
        KnowledgeStore::load_with(path, StoreConfig::default())
    }

    /// Load and rebuild the requested index over the stored keys. The
    /// loaded store has no corpus attached, so it can serve queries but not
    /// refresh.
    pub fn load_with(path: &Path, config: StoreConfig) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::CorruptStore(msg.to_string());

        if data.len() < 4 + 4 + 4 + 8 + 8 + 4 {
            return Err(bad("file too short"));
        }
        let (body, crc_bytes) = data.split_at(data.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return Err(bad("checksum mismatch"));
        }

        let mut r = Reader::new(body);
        if r.take_bytes(4) != Some(STORE_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let version = r.take_u32().ok_or_else(|| bad("missing version"))?;
        if version != STORE_VERSION {
            return Err(Error::CorruptStore(format!("unsupported version {version}")));
        }
        let d = r.take_u32().ok_or_else(|| bad("missing dim"))? as usize;
        let count = r.take_u64().ok_or_else(|| bad("missing count"))? as usize;
        let generation = r.take_u64().ok_or_else(|| bad("missing generation"))?;
        if d == 0 || count == 0 {
            return Err(bad("empty store"));
        }
        let record = 8 + 4 + 4 + 4 * d;
        if r.remaining() != record * count {
            return Err(Error::CorruptStore(format!(
                "expected {} payload bytes for {count} entries, found {}",
                record * count,
                r.remaining()
            )));
        }

        let mut entries = Vec::with_capacity(count);
        let mut by_example = HashMap::with_capacity(count);
        let mut max_class = 0u32;
        for i in 0..count {
            let example = r.take_u64().expect("length pre-validated");
            let class = r.take_u32().expect("length pre-validated");
            let value = r.take_u32().expect("length pre-validated");
            let mut key = Vec::with_capacity(d);
            for _ in 0..d {
                key.push(r.take_f32().expect("length pre-validated"));
            }
            let key = Embedding::new(key)
                .map_err(|_| bad("non-finite key"))?;
            if by_example.insert(example, i).is_some() {
                return Err(Error::CorruptStore(format!(
                    "duplicate example id {example}"
                )));
            }
            max_class = max_class.max(class);
            entries.push(StoreEntry {
                key,
                value,
                class,
                example,
                stale: false,
            });
        }

        let class_count = max_class as usize + 1;
        let by_class = group_by_class(&entries, class_count);
        let index = build_index(&entries, &config)?;
        Ok(KnowledgeStore {
            entries,
            d,
            generation,
            class_count,
            index,
            by_class,
            by_example,
            corpus: None,
            config,
        })
    }
}

fn encode_all(corpus: &[Example], encoder: &dyn StoreEncoder) -> Result<Vec<Embedding>> {
    let keys: Result<Vec<Embedding>> = par_map(corpus, |ex| {
        let key = encoder.encode_example(ex)?;
        if key.dim() != encoder.dim() {
            return Err(Error::DimensionMismatch {
                expected: encoder.dim(),
                got: key.dim(),
            });
        }
        Ok(key)
    })
    .into_iter()
    .collect();
    keys
}

fn group_by_class(entries: &[StoreEntry], class_count: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); class_count];
    for (i, e) in entries.iter().enumerate() {
        by_class[e.class as usize].push(i);
    }
    by_class
}

fn build_index(entries: &[StoreEntry], config: &StoreConfig) -> Result<IndexKind> {
    let keys: Vec<Embedding> = entries.iter().map(|e| e.key.clone()).collect();
    match config.index {
        IndexChoice::Flat => Ok(IndexKind::Flat(FlatIndex::build(&keys, config.similarity)?)),
        IndexChoice::Ivf {
            n_list,
            n_probe,
            iters,
            seed,
        } => {
            let n_list = n_list.unwrap_or_else(|| default_n_list(keys.len()));
            let n_probe = n_probe.unwrap_or_else(|| default_n_probe(n_list));
            Ok(IndexKind::Ivf(IvfIndex::train(
                &keys,
                n_list,
                iters,
                n_probe,
                seed,
                config.similarity,
            )?))
        }
    }
}
