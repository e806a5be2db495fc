//! Corpus parsing and example types for the TOWE and review-sentiment
//! datasets, plus vocabulary construction and batch assembly.

mod batch;
mod vocab;

pub use batch::{
    make_review_batches, make_towe_batches, split_validation, ReviewBatch, ToweBatch,
    IGNORE_LABEL,
};
pub use vocab::{load_embeddings, Vocab, PAD_ID, UNK_ID};

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// BIO tag. Numeric labels follow the {O=0, B=1, I=2} convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bio {
    O = 0,
    B = 1,
    I = 2,
}

impl Bio {
    pub fn from_label(label: usize) -> Option<Bio> {
        match label {
            0 => Some(Bio::O),
            1 => Some(Bio::B),
            2 => Some(Bio::I),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bio::O => "O",
            Bio::B => "B",
            Bio::I => "I",
        }
    }

    fn parse(s: &str) -> Option<Bio> {
        match s {
            "O" => Some(Bio::O),
            "B" => Some(Bio::B),
            "I" => Some(Bio::I),
            _ => None,
        }
    }
}

impl fmt::Display for Bio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One (sentence, target) instance of the extraction task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToweExample {
    pub tokens: Vec<String>,
    /// Inclusive token indices of the opinion target.
    pub target_span: (usize, usize),
    /// Gold opinion tags, one per token.
    pub bio_labels: Vec<Bio>,
    /// Clipped distance to the nearest target token; 0 exactly on the target.
    pub position_indices: Vec<usize>,
    /// Part-of-speech tags when the file carries a fourth column.
    pub pos_tags: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewExample {
    pub tokens: Vec<String>,
    /// 0 = negative, 1 = positive.
    pub polarity: usize,
}

/// l_i = distance from token i to the nearest token of the target span
/// (0 inside the span), clipped to l_cap - 1 so it can index a table of
/// l_cap position embeddings.
pub fn positions(n: usize, target_span: (usize, usize), l_cap: usize) -> Vec<usize> {
    let (start, end) = target_span;
    (0..n)
        .map(|i| {
            let d = if i < start {
                start - i
            } else if i > end {
                i - end
            } else {
                0
            };
            d.min(l_cap - 1)
        })
        .collect()
}

fn parse_tag_field(
    path: &Path,
    line_no: usize,
    field: &str,
    n_tokens: usize,
    what: &str,
) -> Result<Vec<Bio>, CorpusError> {
    let tags: Option<Vec<Bio>> = field.split(' ').map(Bio::parse).collect();
    let tags = tags.ok_or_else(|| malformed(path, line_no, format!("bad {what} tag in {field:?}")))?;
    if tags.len() != n_tokens {
        return Err(malformed(
            path,
            line_no,
            format!("{} {what} tags for {n_tokens} tokens", tags.len()),
        ));
    }
    Ok(tags)
}

/// Recovers the single contiguous B I* group from a target tag field.
fn target_span_of(path: &Path, line_no: usize, tags: &[Bio]) -> Result<(usize, usize), CorpusError> {
    let start = tags.iter().position(|&t| t == Bio::B).ok_or_else(|| {
        malformed(path, line_no, "target field has no B tag")
    })?;
    let mut end = start;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Bio::B if i != start => {
                return Err(malformed(path, line_no, "multiple target groups"));
            }
            Bio::I => {
                if i != end + 1 {
                    return Err(malformed(path, line_no, "discontiguous target group"));
                }
                end = i;
            }
            _ => {}
        }
    }
    Ok((start, end))
}

/// Parses the TAB-separated TOWE format: tokens, target tags, opinion
/// tags, and optionally a fourth part-of-speech column. `l_cap` bounds the
/// stored position indices (the position-embedding table size).
pub fn parse_towe_file(path: &Path, l_cap: usize) -> Result<Vec<ToweExample>, CorpusError> {
    assert!(l_cap >= 2, "position table needs at least the 0 and 1 rows");
    let text = read_file(path)?;
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(malformed(
                path,
                line_no,
                format!("expected 3 or 4 TAB-separated fields, found {}", fields.len()),
            ));
        }
        let tokens: Vec<String> = fields[0].split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
        if tokens.is_empty() {
            return Err(malformed(path, line_no, "empty token field"));
        }
        let target_tags = parse_tag_field(path, line_no, fields[1], tokens.len(), "target")?;
        let target_span = target_span_of(path, line_no, &target_tags)?;
        let bio_labels = parse_tag_field(path, line_no, fields[2], tokens.len(), "opinion")?;
        for i in 0..bio_labels.len() {
            if bio_labels[i] == Bio::I && (i == 0 || bio_labels[i - 1] == Bio::O) {
                return Err(malformed(path, line_no, format!("opinion I after O at token {i}")));
            }
        }
        let pos_tags = if fields.len() == 4 {
            let tags: Vec<String> = fields[3].split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
            if tags.len() != tokens.len() {
                return Err(malformed(
                    path,
                    line_no,
                    format!("{} POS tags for {} tokens", tags.len(), tokens.len()),
                ));
            }
            Some(tags)
        } else {
            None
        };
        let position_indices = positions(tokens.len(), target_span, l_cap);
        examples.push(ToweExample {
            tokens,
            target_span,
            bio_labels,
            position_indices,
            pos_tags,
        });
    }
    Ok(examples)
}

/// Parses prediction input: the TOWE format, except the opinion column may
/// be absent (tokens + target tags only). Returns each example with a flag
/// for whether gold tags were present; absent gold parses as all-O.
pub fn parse_predict_file(
    path: &Path,
    l_cap: usize,
) -> Result<Vec<(ToweExample, bool)>, CorpusError> {
    assert!(l_cap >= 2, "position table needs at least the 0 and 1 rows");
    let text = read_file(path)?;
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=4).contains(&fields.len()) {
            return Err(malformed(
                path,
                line_no,
                format!("expected 2 to 4 TAB-separated fields, found {}", fields.len()),
            ));
        }
        let tokens: Vec<String> =
            fields[0].split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
        if tokens.is_empty() {
            return Err(malformed(path, line_no, "empty token field"));
        }
        let target_tags = parse_tag_field(path, line_no, fields[1], tokens.len(), "target")?;
        let target_span = target_span_of(path, line_no, &target_tags)?;
        let has_gold = fields.len() >= 3;
        let bio_labels = if has_gold {
            let tags = parse_tag_field(path, line_no, fields[2], tokens.len(), "opinion")?;
            for i in 0..tags.len() {
                if tags[i] == Bio::I && (i == 0 || tags[i - 1] == Bio::O) {
                    return Err(malformed(path, line_no, format!("opinion I after O at token {i}")));
                }
            }
            tags
        } else {
            vec![Bio::O; tokens.len()]
        };
        let pos_tags = if fields.len() == 4 {
            let tags: Vec<String> =
                fields[3].split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
            if tags.len() != tokens.len() {
                return Err(malformed(
                    path,
                    line_no,
                    format!("{} POS tags for {} tokens", tags.len(), tokens.len()),
                ));
            }
            Some(tags)
        } else {
            None
        };
        let position_indices = positions(tokens.len(), target_span, l_cap);
        let example = ToweExample {
            tokens,
            target_span,
            bio_labels,
            position_indices,
            pos_tags,
        };
        examples.push((example, has_gold));
    }
    Ok(examples)
}

impl ToweExample {
    /// Serializes back to the line format parsed by `parse_towe_file`.
    pub fn to_line(&self) -> String {
        let (start, end) = self.target_span;
        let target: Vec<&str> = (0..self.tokens.len())
            .map(|i| {
                if i == start {
                    "B"
                } else if i > start && i <= end {
                    "I"
                } else {
                    "O"
                }
            })
            .collect();
        let opinion: Vec<&str> = self.bio_labels.iter().map(|b| b.as_str()).collect();
        let mut line = format!(
            "{}\t{}\t{}",
            self.tokens.join(" "),
            target.join(" "),
            opinion.join(" ")
        );
        if let Some(pos) = &self.pos_tags {
            line.push('\t');
            line.push_str(&pos.join(" "));
        }
        line
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Parses "label<TAB>text" review lines; tokens are lowercased and
/// truncated to `max_len`.
pub fn parse_review_file(path: &Path, max_len: usize) -> Result<Vec<ReviewExample>, CorpusError> {
    let text = read_file(path)?;
    let mut reviews = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| {
            malformed(path, line_no, "expected label<TAB>text")
        })?;
        let polarity = match label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(malformed(path, line_no, format!("label {other:?} is not 0 or 1")));
            }
        };
        let tokens: Vec<String> = body
            .split_whitespace()
            .take(max_len)
            .map(|t| t.to_lowercase())
            .collect();
        if tokens.is_empty() {
            return Err(malformed(path, line_no, "empty review text"));
        }
        reviews.push(ReviewExample { tokens, polarity });
    }
    Ok(reviews)
}
