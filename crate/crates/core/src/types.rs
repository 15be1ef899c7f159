//! Shared data types: examples, vocabularies, templates, label spaces,
//! embeddings and class distributions.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::Serialize;

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type ClassId = u32;
/// Dense index of a label word within a [`LabelSpace`] (a row of the
/// prediction head), not to be confused with its [`TokenId`] in the
/// vocabulary.
pub type WordId = u32;
pub type ExampleId = u64;

/// The literal mask marker recognized in templates and vocabularies.
pub const MASK_TOKEN: &str = "[MASK]";

// ---------------------------------------------------------------------------
// Examples

/// Payload of one example: either a token sequence (text mode) or a
/// precomputed feature vector (feature mode). A dataset must be homogeneous.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleBody {
    Tokens(Vec<TokenId>),
    Feature(Embedding),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: ExampleId,
    pub body: ExampleBody,
    pub label: Option<ClassId>,
}

impl Example {
    pub fn text(id: ExampleId, tokens: Vec<TokenId>, label: Option<ClassId>) -> Self {
        Example {
            id,
            body: ExampleBody::Tokens(tokens),
            label,
        }
    }

    pub fn feature(id: ExampleId, feature: Embedding, label: Option<ClassId>) -> Self {
        Example {
            id,
            body: ExampleBody::Feature(feature),
            label,
        }
    }

    pub fn tokens(&self) -> Option<&[TokenId]> {
        match &self.body {
            ExampleBody::Tokens(t) => Some(t),
            ExampleBody::Feature(_) => None,
        }
    }

    pub fn feature_vec(&self) -> Option<&Embedding> {
        match &self.body {
            ExampleBody::Feature(f) => Some(f),
            ExampleBody::Tokens(_) => None,
        }
    }

    /// Gold label, or [`Error::MissingLabel`] when absent.
    pub fn gold(&self) -> Result<ClassId> {
        self.label.ok_or(Error::MissingLabel(self.id))
    }
}

// ---------------------------------------------------------------------------
// Embeddings

/// A dense f32 vector with finite entries. The Euclidean norm is computed
/// lazily and cached since cosine scoring asks for it repeatedly.
#[derive(Debug, Clone)]
pub struct Embedding {
    values: Vec<f32>,
    norm: OnceLock<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        Ok(Embedding {
            values,
            norm: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Euclidean norm, accumulated in f64 for stability then rounded once.
    pub fn norm(&self) -> f32 {
        *self.norm.get_or_init(|| {
            self.values
                .iter()
                .map(|v| *v as f64 * *v as f64)
                .sum::<f64>()
                .sqrt() as f32
        })
    }

    /// Inner product in f32, accumulated left to right. Every similarity in
    /// the crate goes through this one loop so that exact and clustered
    /// retrieval agree bit for bit.
    pub fn dot(&self, other: &Embedding) -> f32 {
        dot_f32(&self.values, &other.values)
    }
}

impl PartialEq for Embedding {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

// ---------------------------------------------------------------------------
// Distributions

/// A probability vector over classes: non-negative, finite, sums to one
/// within 1e-6.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Accept an already-normalized vector, verifying the invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::DegenerateDistribution);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateDistribution);
        }
        Ok(Distribution(probs))
    }

    /// Normalize non-negative weights. All-zero (or otherwise invalid) input
    /// is refused rather than silently mapped to uniform.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::DegenerateDistribution);
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::DegenerateDistribution);
        }
        Ok(Distribution(weights.into_iter().map(|w| w / sum).collect()))
    }

    pub fn uniform(classes: usize) -> Self {
        assert!(classes > 0, "uniform distribution needs at least one class");
        Distribution(vec![1.0 / classes as f64; classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: ClassId) -> f64 {
        self.0.get(class as usize).copied().unwrap_or(0.0)
    }

    /// Most probable class; ties resolve to the lower id.
    pub fn argmax(&self) -> ClassId {
        let mut best = 0usize;
        for (i, p) in self.0.iter().enumerate().skip(1) {
            if *p > self.0[best] {
                best = i;
            }
        }
        best as ClassId
    }
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Whitespace-token vocabulary: one token per line, line number = id.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid vocabulary token {tok:?}"),
                });
            }
            if lookup.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate vocabulary token {tok:?}"),
                });
            }
        }
        Ok(Vocab { tokens, lookup })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokenize by whitespace, reporting every unknown word with the given
    /// source line so callers can aggregate misses across a whole file.
    pub fn encode_line(&self, text: &str, line: usize) -> std::result::Result<Vec<TokenId>, Vec<(usize, String)>> {
        let mut ids = Vec::new();
        let mut misses = Vec::new();
        for word in text.split_whitespace() {
            match self.id(word) {
                Some(id) => ids.push(id),
                None => misses.push((line, word.to_string())),
            }
        }
        if misses.is_empty() {
            Ok(ids)
        } else {
            Err(misses)
        }
    }
}

// ---------------------------------------------------------------------------
// Templates

/// Tokens wrapped around an input: `prefix ++ x ++ infix ++ [MASK] ++ suffix`.
/// Exactly one mask slot, always after the input slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    prefix: Vec<TokenId>,
    infix: Vec<TokenId>,
    suffix: Vec<TokenId>,
    mask: TokenId,
}

/// Result of wrapping an input sequence in a template.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplatedTokens {
    pub tokens: Vec<TokenId>,
    pub mask_pos: usize,
}

impl Template {
    pub fn new(
        prefix: Vec<TokenId>,
        infix: Vec<TokenId>,
        suffix: Vec<TokenId>,
        mask: TokenId,
    ) -> Self {
        Template {
            prefix,
            infix,
            suffix,
            mask,
        }
    }

    /// Parse the one-line `prefix|infix|suffix` form. Segments are
    /// whitespace-tokenized; the literal `[MASK]` must appear exactly once,
    /// in the infix or suffix segment (never before the input slot).
    pub fn parse(line: &str, vocab: &Vocab) -> Result<Self> {
        let segments: Vec<&str> = line.split('|').collect();
        if segments.len() != 3 {
            return Err(Error::InvalidTemplate(format!(
                "expected 3 |-separated segments, got {}",
                segments.len()
            )));
        }
        let words: Vec<Vec<&str>> = segments
            .iter()
            .map(|s| s.split_whitespace().collect())
            .collect();

        let mask_count: usize = words
            .iter()
            .map(|seg| seg.iter().filter(|w| **w == MASK_TOKEN).count())
            .sum();
        if mask_count != 1 {
            return Err(Error::InvalidTemplate(format!(
                "expected exactly one {MASK_TOKEN}, found {mask_count}"
            )));
        }
        if words[0].contains(&MASK_TOKEN) {
            return Err(Error::InvalidTemplate(format!(
                "{MASK_TOKEN} must come after the input slot"
            )));
        }

        let resolve = |seg: &[&str]| -> Result<Vec<TokenId>> {
            let mut out = Vec::with_capacity(seg.len());
            let mut misses = Vec::new();
            for w in seg {
                match vocab.id(w) {
                    Some(id) => out.push(id),
                    None => misses.push((1usize, w.to_string())),
                }
            }
            if misses.is_empty() {
                Ok(out)
            } else {
                Err(Error::UnknownWords(misses))
            }
        };

        let mask = vocab
            .id(MASK_TOKEN)
            .ok_or_else(|| Error::UnknownWords(vec![(1, MASK_TOKEN.to_string())]))?;

        let prefix = resolve(&words[0])?;
        let (infix_words, suffix_words): (Vec<&str>, Vec<&str>) =
            if let Some(p) = words[1].iter().position(|w| *w == MASK_TOKEN) {
                let mut suffix: Vec<&str> = words[1][p + 1..].to_vec();
                suffix.extend_from_slice(&words[2]);
                (words[1][..p].to_vec(), suffix)
            } else {
                let p = words[2]
                    .iter()
                    .position(|w| *w == MASK_TOKEN)
                    .expect("mask located in one of the segments");
                let mut infix = words[1].clone();
                infix.extend_from_slice(&words[2][..p]);
                (infix, words[2][p + 1..].to_vec())
            };
        let infix = resolve(&infix_words)?;
        let suffix = resolve(&suffix_words)?;

        Ok(Template::new(prefix, infix, suffix, mask))
    }

    pub fn from_path(path: &Path, vocab: &Vocab) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let line = text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty() && !l.starts_with('#'))
            .ok_or_else(|| Error::InvalidTemplate("template file is empty".into()))?;
        Template::parse(line, vocab)
    }

    pub fn mask_token(&self) -> TokenId {
        self.mask
    }

    pub fn apply(&self, input: &[TokenId]) -> TemplatedTokens {
        apply_template(input, self)
    }
}

/// Wrap an input token sequence in the template. Infallible: templates are
/// validated at construction, so this is pure concatenation.
pub fn apply_template(input: &[TokenId], template: &Template) -> TemplatedTokens {
    let len =
        template.prefix.len() + input.len() + template.infix.len() + 1 + template.suffix.len();
    let mut tokens = Vec::with_capacity(len);
    tokens.extend_from_slice(&template.prefix);
    tokens.extend_from_slice(input);
    tokens.extend_from_slice(&template.infix);
    let mask_pos = tokens.len();
    tokens.push(template.mask);
    tokens.extend_from_slice(&template.suffix);
    TemplatedTokens { tokens, mask_pos }
}

// ---------------------------------------------------------------------------
// Label space

/// How multiple label words belonging to one class are folded into a class
/// score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Max,
}

impl Default for Aggregation {
    fn default() -> Self {
        Aggregation::Sum
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "max" => Ok(Aggregation::Max),
            other => Err(Error::InvalidConfig(format!(
                "unknown aggregation {other:?} (expected sum or max)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
struct LabelWord {
    name: String,
    token: TokenId,
    class: ClassId,
}

/// Classes, their label words, and the word-to-class map. Word ids are dense
/// (0..word_count) in file order, grouped by class.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    classes: Vec<String>,
    words: Vec<LabelWord>,
    class_words: Vec<Vec<WordId>>,
    aggregation: Aggregation,
}

impl LabelSpace {
    /// Parse the tab-separated `class<TAB>word1,word2,...` form. In text
    /// mode a vocabulary is required and every label word must resolve; in
    /// feature mode (`vocab = None`) words are nominal and token ids are
    /// synthesized.
    pub fn parse(text: &str, vocab: Option<&Vocab>, aggregation: Aggregation) -> Result<Self> {
        let mut classes = Vec::new();
        let mut words: Vec<LabelWord> = Vec::new();
        let mut class_words = Vec::new();
        let mut misses = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let (class_name, word_list) = line.split_once('\t').ok_or(Error::Parse {
                line: lineno,
                msg: "expected class<TAB>word1,word2,...".into(),
            })?;
            let class_name = class_name.trim();
            if class_name.is_empty() || classes.iter().any(|c| c == class_name) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("empty or duplicate class name {class_name:?}"),
                });
            }
            let class_id = classes.len() as ClassId;
            classes.push(class_name.to_string());

            let mut ids = Vec::new();
            for word in word_list.split(',').map(str::trim).filter(|w| !w.is_empty()) {
                if let Some(prev) = words.iter().find(|lw| lw.name == word) {
                    let _ = prev;
                    return Err(Error::DuplicateLabelWord(word.to_string()));
                }
                let token = match vocab {
                    Some(v) => match v.id(word) {
                        Some(t) => t,
                        None => {
                            misses.push((lineno, word.to_string()));
                            continue;
                        }
                    },
                    None => words.len() as TokenId,
                };
                let word_id = words.len() as WordId;
                words.push(LabelWord {
                    name: word.to_string(),
                    token,
                    class: class_id,
                });
                ids.push(word_id);
            }
            class_words.push(ids);
        }

        if !misses.is_empty() {
            return Err(Error::UnknownWords(misses));
        }
        if classes.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: "no classes defined".into(),
            });
        }
        if let Some(empty) = class_words.iter().position(Vec::is_empty) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("class {:?} has no label words", classes[empty]),
            });
        }

        Ok(LabelSpace {
            classes,
            words,
            class_words,
            aggregation,
        })
    }

    pub fn from_path(path: &Path, vocab: Option<&Vocab>, aggregation: Aggregation) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LabelSpace::parse(&text, vocab, aggregation)
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn class_name(&self, class: ClassId) -> Option<&str> {
        self.classes.get(class as usize).map(String::as_str)
    }

    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().position(|c| c == name).map(|i| i as ClassId)
    }

    pub fn class_of_word(&self, word: WordId) -> ClassId {
        self.words[word as usize].class
    }

    pub fn words_of_class(&self, class: ClassId) -> &[WordId] {
        &self.class_words[class as usize]
    }

    pub fn token_of_word(&self, word: WordId) -> TokenId {
        self.words[word as usize].token
    }

    pub fn word_name(&self, word: WordId) -> &str {
        &self.words[word as usize].name
    }

    /// The canonical label word for a class (first in file order) — the
    /// value written into store entries.
    pub fn canonical_word(&self, class: ClassId) -> WordId {
        self.class_words[class as usize][0]
    }
}

/// Fold a probability vector over label words into a class distribution
/// using the label space's aggregation, then renormalize.
pub fn verbalize(word_probs: &[f64], labels: &LabelSpace) -> Result<Distribution> {
    if word_probs.len() != labels.word_count() {
        return Err(Error::DimensionMismatch {
            expected: labels.word_count(),
            got: word_probs.len(),
        });
    }
    if word_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::DegenerateDistribution);
    }
    let mut mass = vec![0.0f64; labels.class_count()];
    for (class, word_ids) in labels.class_words.iter().enumerate() {
        mass[class] = match labels.aggregation {
            Aggregation::Sum => word_ids.iter().map(|w| word_probs[*w as usize]).sum(),
            Aggregation::Max => word_ids
                .iter()
                .map(|w| word_probs[*w as usize])
                .fold(0.0f64, f64::max),
        };
    }
    Distribution::from_weights(mass)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocab {
        Vocab::from_tokens([
            "[CLS]", "[MASK]", ".", "it", "was", "great", "terrible", "movie", "fun",
        ])
        .unwrap()
    }

    #[test]
    fn template_wraps_input_and_tracks_mask() {
        let vocab = toy_vocab();
        let template = Template::parse("[CLS] | it was [MASK] .|", &vocab).unwrap();
        let out = apply_template(&[7, 8], &template);
        // [CLS] movie fun it was [MASK] .
        assert_eq!(out.tokens, vec![0, 7, 8, 3, 4, 1, 2]);
        assert_eq!(out.mask_pos, 5);
        assert_eq!(out.tokens[out.mask_pos], vocab.id(MASK_TOKEN).unwrap());
        assert_eq!(out.tokens.len(), 2 + 5);
    }

    #[test]
    fn template_empty_input_still_wraps() {
        let vocab = toy_vocab();
        let template = Template::parse("[CLS] | it was [MASK] .|", &vocab).unwrap();
        let out = apply_template(&[], &template);
        assert_eq!(out.tokens, vec![0, 3, 4, 1, 2]);
        assert_eq!(out.mask_pos, 3);
    }

    #[test]
    fn template_mask_in_suffix_segment() {
        let vocab = toy_vocab();
        let template = Template::parse("[CLS] | it was | [MASK] .", &vocab).unwrap();
        let out = apply_template(&[5], &template);
        assert_eq!(out.tokens, vec![0, 5, 3, 4, 1, 2]);
        assert_eq!(out.mask_pos, 4);
    }

    #[test]
    fn template_rejects_missing_double_or_leading_mask() {
        let vocab = toy_vocab();
        for bad in [
            "[CLS] | it was . |",
            "[CLS] | [MASK] it [MASK] |",
            "[MASK] | it was |",
            "only two segments | here",
        ] {
            assert!(matches!(
                Template::parse(bad, &vocab),
                Err(Error::InvalidTemplate(_))
            ));
        }
    }

    #[test]
    fn template_reports_unknown_words() {
        let vocab = toy_vocab();
        match Template::parse("[CLS] | unknownword [MASK] |", &vocab) {
            Err(Error::UnknownWords(misses)) => {
                assert_eq!(misses[0].1, "unknownword");
            }
            other => panic!("expected unknown-word error, got {other:?}"),
        }
    }

    fn sentiment_labels(vocab: &Vocab) -> LabelSpace {
        LabelSpace::parse(
            "positive\tgreat\nnegative\tterrible\n",
            Some(vocab),
            Aggregation::Sum,
        )
        .unwrap()
    }

    #[test]
    fn label_space_maps_words_to_classes() {
        let vocab = toy_vocab();
        let labels = sentiment_labels(&vocab);
        assert_eq!(labels.class_count(), 2);
        assert_eq!(labels.word_count(), 2);
        assert_eq!(labels.class_id("negative"), Some(1));
        assert_eq!(labels.class_of_word(0), 0);
        assert_eq!(labels.token_of_word(0), vocab.id("great").unwrap());
        assert_eq!(labels.canonical_word(1), 1);
    }

    #[test]
    fn label_space_rejects_word_in_two_classes() {
        let vocab = toy_vocab();
        let res = LabelSpace::parse(
            "positive\tgreat\nnegative\tgreat\n",
            Some(&vocab),
            Aggregation::Sum,
        );
        assert!(matches!(res, Err(Error::DuplicateLabelWord(w)) if w == "great"));
    }

    #[test]
    fn verbalize_sums_multiword_classes_and_renormalizes() {
        let vocab = Vocab::from_tokens(["[MASK]", "good", "great", "bad"]).unwrap();
        let labels = LabelSpace::parse(
            "positive\tgood,great\nnegative\tbad\n",
            Some(&vocab),
            Aggregation::Sum,
        )
        .unwrap();
        // word probs: good 0.3, great 0.3, bad 0.2 (0.2 of mass elsewhere)
        let dist = verbalize(&[0.3, 0.3, 0.2], &labels).unwrap();
        assert!((dist.get(0) - 0.75).abs() < 1e-12);
        assert!((dist.get(1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn verbalize_max_takes_the_best_word_per_class() {
        let vocab = Vocab::from_tokens(["[MASK]", "good", "great", "bad"]).unwrap();
        let labels = LabelSpace::parse(
            "positive\tgood,great\nnegative\tbad\n",
            Some(&vocab),
            Aggregation::Max,
        )
        .unwrap();
        let dist = verbalize(&[0.5, 0.1, 0.25], &labels).unwrap();
        assert!((dist.get(0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((dist.get(1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn verbalize_refuses_zero_mass() {
        let vocab = Vocab::from_tokens(["[MASK]", "good", "bad"]).unwrap();
        let labels = LabelSpace::parse(
            "positive\tgood\nnegative\tbad\n",
            Some(&vocab),
            Aggregation::Sum,
        )
        .unwrap();
        assert!(matches!(
            verbalize(&[0.0, 0.0], &labels),
            Err(Error::DegenerateDistribution)
        ));
        assert!(matches!(
            verbalize(&[0.1], &labels),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn distribution_invariants() {
        assert!(Distribution::new(vec![0.5, 0.5]).is_ok());
        assert!(Distribution::new(vec![0.6, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::from_weights(vec![0.0, 0.0]).is_err());
        assert!(Distribution::from_weights(vec![f64::NAN, 1.0]).is_err());

        let d = Distribution::from_weights(vec![1.0, 3.0]).unwrap();
        assert!((d.get(1) - 0.75).abs() < 1e-12);
        assert_eq!(d.argmax(), 1);
        // argmax tie resolves to the lower class id
        let tie = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(tie.argmax(), 0);
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(Embedding::new(vec![0.0, f32::NAN]).is_err());
        assert!(Embedding::new(vec![0.0, f32::INFINITY]).is_err());
        let e = Embedding::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(e.norm(), 5.0);
        assert_eq!(e.dot(&e), 25.0);
    }

    #[test]
    fn vocab_round_trips_and_flags_misses() {
        let vocab = toy_vocab();
        assert_eq!(vocab.token(vocab.id("movie").unwrap()), Some("movie"));
        let misses = vocab.encode_line("movie xyzzy fun qwerty", 7).unwrap_err();
        assert_eq!(
            misses,
            vec![(7, "xyzzy".to_string()), (7, "qwerty".to_string())]
        );
        assert!(Vocab::from_tokens(["dup", "dup"]).is_err());
    }
}
