//! Datasets, the label set, and the BIO tag scheme.
//!
//! Tag ids are laid out as `O = 0`, then `B-y = 1 + 2k` and `I-y = 2 + 2k`
//! for the label at index `k`. Checkpoints store the label set, so these ids
//! stay stable across runs.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six entity types of the optimization-word-problem NER task.
pub const DEFAULT_LABELS: [&str; 6] = ["LIMIT", "CONST_DIR", "VAR", "PARAM", "OBJ_NAME", "OBJ_DIR"];

pub type TagId = usize;

/// Ordered, duplicate-free list of entity types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidLabelSet("label set is empty".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() || label.contains(char::is_whitespace) {
                return Err(Error::InvalidLabelSet(format!("bad label name `{label}`")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::InvalidLabelSet(format!("duplicate label `{label}`")));
            }
        }
        Ok(Self { labels, index })
    }

    /// Parses a comma-separated list such as `"VAR,PARAM"`.
    pub fn parse_list(list: &str) -> Result<Self> {
        Self::new(list.split(',').map(str::trim).filter(|s| !s.is_empty()))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Size of the induced tag vocabulary, `2·|labels| + 1`.
    pub fn num_tags(&self) -> usize {
        2 * self.labels.len() + 1
    }

    pub fn begin_tag(&self, label: usize) -> TagId {
        1 + 2 * label
    }

    pub fn inside_tag(&self, label: usize) -> TagId {
        2 + 2 * label
    }

    pub fn decode_tag(&self, id: TagId) -> Result<Tag> {
        match id {
            0 => Ok(Tag::Outside),
            id if id < self.num_tags() => {
                let label = (id - 1) / 2;
                if id % 2 == 1 {
                    Ok(Tag::Begin(label))
                } else {
                    Ok(Tag::Inside(label))
                }
            }
            id => Err(Error::UnknownTag(id)),
        }
    }

    pub fn encode_tag(&self, tag: Tag) -> TagId {
        match tag {
            Tag::Outside => 0,
            Tag::Begin(k) => self.begin_tag(k),
            Tag::Inside(k) => self.inside_tag(k),
        }
    }

    /// Human-readable tag name (`O`, `B-VAR`, ...).
    pub fn tag_name(&self, id: TagId) -> Result<String> {
        Ok(match self.decode_tag(id)? {
            Tag::Outside => "O".to_string(),
            Tag::Begin(k) => format!("B-{}", self.labels[k]),
            Tag::Inside(k) => format!("I-{}", self.labels[k]),
        })
    }

    pub fn parse_tag_name(&self, name: &str) -> Result<TagId> {
        if name == "O" {
            return Ok(0);
        }
        let (prefix, label) = name
            .split_once('-')
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))?;
        let k = self
            .index_of(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        match prefix {
            "B" => Ok(self.begin_tag(k)),
            "I" => Ok(self.inside_tag(k)),
            _ => Err(Error::UnknownLabel(name.to_string())),
        }
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::new(DEFAULT_LABELS).expect("default labels are valid")
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.labels.join(","))
    }
}

/// A decoded tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            label: label.into(),
            start,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub words: Vec<String>,
    #[serde(default)]
    pub spans: Vec<EntitySpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Checks word and span invariants against `labels`.
    pub fn validate(&self, labels: &LabelSet) -> Result<()> {
        if self.words.is_empty() {
            return Err(Error::InvalidSentence {
                id: self.id.clone(),
                message: "no words".into(),
            });
        }
        if let Some(pos) = self.words.iter().position(String::is_empty) {
            return Err(Error::InvalidSentence {
                id: self.id.clone(),
                message: format!("word {pos} is empty"),
            });
        }
        check_spans(&self.id, &self.spans, self.words.len(), labels)
    }
}

/// Per-word tag ids over a label set's tag vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TagSequence(pub Vec<TagId>);

impl TagSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TagId] {
        &self.0
    }

    /// True when every `I-y` follows `B-y` or `I-y`.
    pub fn is_valid_bio(&self, labels: &LabelSet) -> bool {
        let mut prev = Tag::Outside;
        for &id in &self.0 {
            let Ok(tag) = labels.decode_tag(id) else {
                return false;
            };
            if let Tag::Inside(k) = tag {
                match prev {
                    Tag::Begin(p) | Tag::Inside(p) if p == k => {}
                    _ => return false,
                }
            }
            prev = tag;
        }
        true
    }

    pub fn render(&self, labels: &LabelSet) -> Result<Vec<String>> {
        self.0.iter().map(|&id| labels.tag_name(id)).collect()
    }
}

/// How `bio_to_spans` treats an `I-y` that does not continue a `y` entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BioMode {
    /// Treat the dangling `I-y` as `B-y`.
    #[default]
    Repair,
    Strict,
}

fn check_spans(id: &str, spans: &[EntitySpan], len: usize, labels: &LabelSet) -> Result<()> {
    for span in spans {
        if labels.index_of(&span.label).is_none() {
            return Err(Error::UnknownLabel(span.label.clone()));
        }
        if span.start >= span.end || span.end > len {
            return Err(Error::SpanOutOfBounds {
                id: id.to_string(),
                label: span.label.clone(),
                start: span.start,
                end: span.end,
                len,
            });
        }
    }
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::OverlappingSpans {
                id: id.to_string(),
                first_start: pair[0].start,
                first_end: pair[0].end,
                second_start: pair[1].start,
                second_end: pair[1].end,
            });
        }
    }
    Ok(())
}

pub fn spans_to_bio(spans: &[EntitySpan], n: usize, labels: &LabelSet) -> Result<TagSequence> {
    check_spans("<spans>", spans, n, labels)?;
    let mut tags = vec![0; n];
    for span in spans {
        let k = labels.index_of(&span.label).expect("checked above");
        tags[span.start] = labels.begin_tag(k);
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = labels.inside_tag(k);
        }
    }
    Ok(TagSequence(tags))
}

pub fn bio_to_spans(tags: &TagSequence, labels: &LabelSet, mode: BioMode) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    // (label index, start) of the entity being extended
    let mut open: Option<(usize, usize)> = None;
    for (i, &id) in tags.0.iter().enumerate() {
        match labels.decode_tag(id)? {
            Tag::Outside => {
                if let Some((k, s)) = open.take() {
                    spans.push(EntitySpan::new(labels.labels()[k].clone(), s, i));
                }
            }
            Tag::Begin(k) => {
                if let Some((p, s)) = open.replace((k, i)) {
                    spans.push(EntitySpan::new(labels.labels()[p].clone(), s, i));
                }
            }
            Tag::Inside(k) => match open {
                Some((p, _)) if p == k => {}
                _ => {
                    if mode == BioMode::Strict {
                        return Err(Error::DanglingInside { position: i });
                    }
                    if let Some((p, s)) = open.replace((k, i)) {
                        spans.push(EntitySpan::new(labels.labels()[p].clone(), s, i));
                    }
                }
            },
        }
    }
    if let Some((k, s)) = open {
        spans.push(EntitySpan::new(labels.labels()[k].clone(), s, tags.len()));
    }
    Ok(spans)
}

/// Reads one JSON sentence per line. Blank lines are skipped.
pub fn parse_dataset<R: BufRead>(reader: R, labels: &LabelSet) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: Sentence = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        sentence.validate(labels)?;
        sentences.push(sentence);
    }
    Ok(sentences)
}

pub fn write_dataset<W: Write>(mut writer: W, sentences: &[Sentence]) -> std::io::Result<()> {
    for sentence in sentences {
        serde_json::to_writer(&mut writer, sentence)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}
