//! JSONL datasets: one record per line, either
//! `{"id": 7, "text": "raw tokens", "label": "positive"}` or
//! `{"id": 7, "feature": [0.1, -0.2], "label": "positive"}`.
//! `label` is optional; a file must stick to one of text or feature mode.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::types::{Embedding, Example, ExampleBody, ExampleId, LabelSpace, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    Text,
    Feature(usize),
}

#[derive(Deserialize)]
struct RawRecord {
    id: ExampleId,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    feature: Option<Vec<f32>>,
    #[serde(default)]
    label: Option<String>,
}

/// Parse a JSONL dataset. Text records are tokenized against `vocab`
/// (required for text mode); labels are resolved against the label space.
/// Vocabulary misses are collected across the whole file and reported
/// together, each with its line number.
pub fn load_examples(
    path: &Path,
    vocab: Option<&Vocab>,
    labels: &LabelSpace,
) -> Result<(Vec<Example>, DataMode)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_examples(&text, vocab, labels)
}

pub fn parse_examples(
    text: &str,
    vocab: Option<&Vocab>,
    labels: &LabelSpace,
) -> Result<(Vec<Example>, DataMode)> {
    let mut examples = Vec::new();
    let mut mode: Option<DataMode> = None;
    let mut misses: Vec<(usize, String)> = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if !seen_ids.insert(record.id) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate example id {}", record.id),
            });
        }
        let label = match record.label.as_deref() {
            Some(name) => Some(labels.class_id(name).ok_or_else(|| Error::UnknownLabel {
                label: name.to_string(),
                line,
            })?),
            None => None,
        };
        let body = match (record.text, record.feature) {
            (Some(_), Some(_)) => {
                return Err(Error::Parse {
                    line,
                    msg: "record has both text and feature".into(),
                })
            }
            (None, None) => {
                return Err(Error::Parse {
                    line,
                    msg: "record has neither text nor feature".into(),
                })
            }
            (Some(t), None) => {
                match mode {
                    None => mode = Some(DataMode::Text),
                    Some(DataMode::Text) => {}
                    Some(DataMode::Feature(_)) => return Err(Error::MixedModes(line)),
                }
                let vocab = vocab.ok_or_else(|| {
                    Error::InvalidConfig("text dataset requires a vocabulary".into())
                })?;
                match vocab.encode_line(&t, line) {
                    Ok(tokens) => ExampleBody::Tokens(tokens),
                    Err(mut m) => {
                        misses.append(&mut m);
                        continue;
                    }
                }
            }
            (None, Some(f)) => {
                let d = f.len();
                match mode {
                    None => mode = Some(DataMode::Feature(d)),
                    Some(DataMode::Feature(expected)) if expected == d => {}
                    Some(DataMode::Feature(expected)) => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("feature dimension {d} != {expected}"),
                        })
                    }
                    Some(DataMode::Text) => return Err(Error::MixedModes(line)),
                }
                let emb = Embedding::new(f).map_err(|_| Error::Parse {
                    line,
                    msg: "feature contains non-finite values".into(),
                })?;
                ExampleBody::Feature(emb)
            }
        };
        examples.push(Example {
            id: record.id,
            body,
            label,
        });
    }

    if !misses.is_empty() {
        return Err(Error::UnknownWords(misses));
    }
    let mode = mode.ok_or(Error::EmptyCorpus)?;
    Ok((examples, mode))
}

/// Serialize examples back to JSONL. Text mode needs the vocabulary to spell
/// tokens out; labels are written as class names when present.
pub fn write_jsonl(
    path: &Path,
    examples: &[Example],
    labels: &LabelSpace,
    vocab: Option<&Vocab>,
) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        let _ = write!(out, "{{\"id\":{}", ex.id);
        match &ex.body {
            ExampleBody::Tokens(tokens) => {
                let vocab = vocab.ok_or_else(|| {
                    Error::InvalidConfig("writing text examples requires a vocabulary".into())
                })?;
                let words: Vec<&str> = tokens
                    .iter()
                    .map(|t| vocab.token(*t).ok_or(Error::UnknownToken(*t)))
                    .collect::<Result<_>>()?;
                let text = serde_json::to_string(&words.join(" ")).expect("string serializes");
                let _ = write!(out, ",\"text\":{text}");
            }
            ExampleBody::Feature(f) => {
                let values = serde_json::to_string(f.values()).expect("floats serialize");
                let _ = write!(out, ",\"feature\":{values}");
            }
        }
        if let Some(class) = ex.label {
            let name = labels.class_name(class).ok_or(Error::DimensionMismatch {
                expected: labels.class_count(),
                got: class as usize + 1,
            })?;
            let name = serde_json::to_string(name).expect("string serializes");
            let _ = write!(out, ",\"label\":{name}");
        }
        out.push_str("}\n");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Aggregation;

    fn vocab() -> Vocab {
        Vocab::from_tokens(["[MASK]", "good", "bad", "fun", "dull"]).unwrap()
    }

    fn labels(vocab: &Vocab) -> LabelSpace {
        LabelSpace::parse("pos\tgood\nneg\tbad\n", Some(vocab), Aggregation::Sum).unwrap()
    }

    #[test]
    fn parses_text_records() {
        let v = vocab();
        let l = labels(&v);
        let (examples, mode) = parse_examples(
            "{\"id\":1,\"text\":\"fun good\",\"label\":\"pos\"}\n\n{\"id\":2,\"text\":\"dull\"}\n",
            Some(&v),
            &l,
        )
        .unwrap();
        assert_eq!(mode, DataMode::Text);
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].tokens().unwrap(), &[3, 1]);
        assert_eq!(examples[0].label, Some(0));
        assert_eq!(examples[1].label, None);
    }

    #[test]
    fn parses_feature_records() {
        let v = vocab();
        let l = labels(&v);
        let (examples, mode) = parse_examples(
            "{\"id\":5,\"feature\":[0.5,-1.0],\"label\":\"neg\"}\n",
            None,
            &l,
        )
        .unwrap();
        assert_eq!(mode, DataMode::Feature(2));
        assert_eq!(examples[0].feature_vec().unwrap().values(), &[0.5, -1.0]);
    }

    #[test]
    fn rejects_mode_mixing_and_oddballs() {
        let v = vocab();
        let l = labels(&v);
        let mixed = "{\"id\":1,\"text\":\"good\"}\n{\"id\":2,\"feature\":[1.0]}\n";
        assert!(matches!(
            parse_examples(mixed, Some(&v), &l),
            Err(Error::MixedModes(2))
        ));
        let both = "{\"id\":1,\"text\":\"good\",\"feature\":[1.0]}\n";
        assert!(matches!(
            parse_examples(both, Some(&v), &l),
            Err(Error::Parse { line: 1, .. })
        ));
        let neither = "{\"id\":1}\n";
        assert!(parse_examples(neither, Some(&v), &l).is_err());
        let dims = "{\"id\":1,\"feature\":[1.0,2.0]}\n{\"id\":2,\"feature\":[1.0]}\n";
        assert!(matches!(
            parse_examples(dims, None, &l),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_examples("", Some(&v), &l),
            Err(Error::EmptyCorpus)
        ));
        let dup = "{\"id\":1,\"text\":\"good\"}\n{\"id\":1,\"text\":\"bad\"}\n";
        assert!(parse_examples(dup, Some(&v), &l).is_err());
    }

    #[test]
    fn unknown_labels_and_words_carry_line_numbers() {
        let v = vocab();
        let l = labels(&v);
        let badlabel = "{\"id\":1,\"text\":\"good\",\"label\":\"meh\"}\n";
        assert!(matches!(
            parse_examples(badlabel, Some(&v), &l),
            Err(Error::UnknownLabel { line: 1, .. })
        ));
        // Misses from every line are aggregated, not just the first.
        let misses = "{\"id\":1,\"text\":\"good zig\"}\n{\"id\":2,\"text\":\"zag bad\"}\n";
        match parse_examples(misses, Some(&v), &l) {
            Err(Error::UnknownWords(m)) => {
                assert_eq!(
                    m,
                    vec![(1, "zig".to_string()), (2, "zag".to_string())]
                );
            }
            other => panic!("expected unknown words, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let v = vocab();
        let l = labels(&v);
        let examples = vec![
            Example::text(1, vec![3, 1], Some(0)),
            Example::text(2, vec![4], None),
        ];
        write_jsonl(&path, &examples, &l, Some(&v)).unwrap();
        let (back, mode) = load_examples(&path, Some(&v), &l).unwrap();
        assert_eq!(mode, DataMode::Text);
        assert_eq!(back, examples);

        let feats = vec![Example::feature(
            9,
            Embedding::new(vec![1.5, -0.25]).unwrap(),
            Some(1),
        )];
        write_jsonl(&path, &feats, &l, None).unwrap();
        let (back, _) = load_examples(&path, None, &l).unwrap();
        assert_eq!(back, feats);
    }
}
