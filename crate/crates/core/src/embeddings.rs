//! Precomputed text and image embeddings in JSONL form.
//!
//! One object per line:
//!
//! ```text
//! {"key": "Apple", "kind": "text", "vector": [0.1, ...]}
//! {"key": "Apple", "kind": "text", "tokens": [[...], [...]]}
//! {"key": "img-17", "kind": "image", "vector": [...]}
//! ```
//!
//! Lines starting with `#` are comments. Producers record their pooling and
//! preprocessing policy in such a header line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numeric::Tensor2;
use crate::taxonomy::normalize_term;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(Error::Config(format!("unknown embedding kind {other:?}"))),
        }
    }
}

/// A text entry is either an already pooled term vector or the raw token
/// matrix (one row per token) from the encoder's last hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub enum TextEntry {
    Pooled(Vec<f64>),
    Tokens(Tensor2),
}

impl TextEntry {
    pub fn dim(&self) -> usize {
        match self {
            TextEntry::Pooled(v) => v.len(),
            TextEntry::Tokens(t) => t.cols(),
        }
    }

    /// Mean over tokens; pooled entries are returned as-is.
    pub fn pooled(&self) -> Result<Vec<f64>> {
        match self {
            TextEntry::Pooled(v) => Ok(v.clone()),
            TextEntry::Tokens(t) => t.mean_rows(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    text_dim: Option<usize>,
    image_dim: Option<usize>,
    text: BTreeMap<String, TextEntry>,
    image: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct Record {
    key: String,
    kind: String,
    #[serde(default)]
    vector: Option<Vec<Option<f64>>>,
    #[serde(default)]
    tokens: Option<Vec<Vec<Option<f64>>>>,
}

/// Rewrites bare `NaN` / `Infinity` / `-Infinity` tokens (which some JSON
/// writers emit) to `null` so they surface as non-finite values rather than
/// generic syntax errors.
fn neutralize_non_finite(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = line;
    while let Some(c) = rest.chars().next() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if c == '"' {
            in_string = true;
        } else {
            let mut matched = None;
            for token in ["-Infinity", "Infinity", "NaN"] {
                if rest.starts_with(token) {
                    matched = Some(token.len());
                    break;
                }
            }
            if let Some(len) = matched {
                out.push_str("null");
                rest = &rest[len..];
                continue;
            }
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

fn finite_row(values: Vec<Option<f64>>, line: usize) -> Result<Vec<f64>> {
    values
        .into_iter()
        .map(|v| match v {
            Some(x) if x.is_finite() => Ok(x),
            _ => Err(Error::NonFinite {
                context: format!("line {line}"),
            }),
        })
        .collect()
}

fn check_dim(slot: &mut Option<usize>, found: usize, line: usize) -> Result<()> {
    if found == 0 {
        return Err(Error::parse(line, "empty vector"));
    }
    match *slot {
        None => {
            *slot = Some(found);
            Ok(())
        }
        Some(expected) if expected == found => Ok(()),
        Some(expected) => Err(Error::DimensionMismatch {
            line,
            expected,
            found,
        }),
    }
}

/// Outcome of loading one JSONL file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub table: EmbeddingTable,
    /// Records whose key had already been seen; the later record wins.
    pub duplicates: usize,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.text_dim
    }

    pub fn image_dim(&self) -> Option<usize> {
        self.image_dim
    }

    pub fn text_len(&self) -> usize {
        self.text.len()
    }

    pub fn image_len(&self) -> usize {
        self.image.len()
    }

    pub fn text(&self, key: &str) -> Option<&TextEntry> {
        self.text.get(&normalize_term(key))
    }

    pub fn image(&self, key: &str) -> Option<&[f64]> {
        self.image.get(&normalize_term(key)).map(Vec::as_slice)
    }

    pub fn text_entries(&self) -> impl Iterator<Item = (&str, &TextEntry)> {
        self.text.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn image_entries(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.image.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Insert a text entry; returns true if it replaced an existing key.
    pub fn insert_text(&mut self, key: &str, entry: TextEntry) -> Result<bool> {
        if let TextEntry::Tokens(t) = &entry {
            if t.rows() == 0 {
                return Err(Error::Shape(format!("token matrix for {key:?} has no rows")));
            }
        }
        check_dim(&mut self.text_dim, entry.dim(), 0).map_err(strip_line)?;
        let finite = match &entry {
            TextEntry::Pooled(v) => v.iter().all(|x| x.is_finite()),
            TextEntry::Tokens(t) => t.is_finite(),
        };
        if !finite {
            return Err(Error::NonFinite {
                context: format!("text entry {key:?}"),
            });
        }
        Ok(self.text.insert(normalize_term(key), entry).is_some())
    }

    pub fn insert_image(&mut self, key: &str, vector: Vec<f64>) -> Result<bool> {
        check_dim(&mut self.image_dim, vector.len(), 0).map_err(strip_line)?;
        if !vector.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("image entry {key:?}"),
            });
        }
        Ok(self.image.insert(normalize_term(key), vector).is_some())
    }

    /// Parse JSONL text holding records of a single `kind`.
    pub fn parse_jsonl(text: &str, kind: Modality) -> Result<LoadReport> {
        let mut table = EmbeddingTable::new();
        let mut duplicates = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let record: Record = serde_json::from_str(&neutralize_non_finite(trimmed))
                .map_err(|e| Error::parse(line, e.to_string()))?;
            if record.kind != kind.as_str() {
                return Err(Error::parse(
                    line,
                    format!("expected kind {:?}, found {:?}", kind.as_str(), record.kind),
                ));
            }
            let replaced = match (kind, record.vector, record.tokens) {
                (_, Some(_), Some(_)) => {
                    return Err(Error::parse(line, "record has both `vector` and `tokens`"))
                }
                (_, None, None) => {
                    return Err(Error::parse(line, "record has neither `vector` nor `tokens`"))
                }
                (Modality::Image, None, Some(_)) => {
                    return Err(Error::parse(line, "image records take a `vector`"))
                }
                (Modality::Image, Some(v), None) => {
                    let v = finite_row(v, line)?;
                    check_dim(&mut table.image_dim, v.len(), line)?;
                    table.image.insert(normalize_term(&record.key), v).is_some()
                }
                (Modality::Text, Some(v), None) => {
                    let v = finite_row(v, line)?;
                    check_dim(&mut table.text_dim, v.len(), line)?;
                    table
                        .text
                        .insert(normalize_term(&record.key), TextEntry::Pooled(v))
                        .is_some()
                }
                (Modality::Text, None, Some(rows)) => {
                    if rows.is_empty() {
                        return Err(Error::parse(line, "empty token matrix"));
                    }
                    let rows = rows
                        .into_iter()
                        .map(|r| finite_row(r, line))
                        .collect::<Result<Vec<_>>>()?;
                    for r in &rows {
                        check_dim(&mut table.text_dim, r.len(), line)?;
                    }
                    let m = Tensor2::from_rows(&rows).map_err(|e| Error::parse(line, e.to_string()))?;
                    table
                        .text
                        .insert(normalize_term(&record.key), TextEntry::Tokens(m))
                        .is_some()
                }
            };
            if replaced {
                duplicates += 1;
            }
        }
        Ok(LoadReport { table, duplicates })
    }

    /// Merge another fragment into this table. Dimensions must agree.
    pub fn merge(&mut self, other: EmbeddingTable) -> Result<usize> {
        let mut duplicates = 0;
        for (k, v) in other.text {
            duplicates += usize::from(self.insert_text(&k, v)?);
        }
        for (k, v) in other.image {
            duplicates += usize::from(self.insert_image(&k, v)?);
        }
        Ok(duplicates)
    }

    /// Serialize entries of one modality, 17 significant digits per value.
    pub fn to_jsonl(&self, kind: Modality) -> String {
        let mut out = String::new();
        match kind {
            Modality::Text => {
                for (k, entry) in &self.text {
                    match entry {
                        TextEntry::Pooled(v) => out.push_str(&vector_record(k, kind, v)),
                        TextEntry::Tokens(t) => out.push_str(&token_record(k, t)),
                    }
                }
            }
            Modality::Image => {
                for (k, v) in &self.image {
                    out.push_str(&vector_record(k, kind, v));
                }
            }
        }
        out
    }
}

fn strip_line(e: Error) -> Error {
    match e {
        Error::DimensionMismatch { expected, found, .. } => {
            Error::Shape(format!("expected dimension {expected}, found {found}"))
        }
        other => other,
    }
}

/// Decimal with 17 significant digits; parses back to the identical `f64`.
pub fn format_value(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_value(*v));
    }
    out.push(']');
}

/// One JSONL line (with trailing LF) for a pooled vector record.
pub fn vector_record(key: &str, kind: Modality, values: &[f64]) -> String {
    let mut out = String::new();
    let key = serde_json::to_string(key).expect("string serialization");
    let _ = write!(out, "{{\"key\":{key},\"kind\":\"{}\",\"vector\":", kind.as_str());
    push_array(&mut out, values);
    out.push_str("}\n");
    out
}

/// One JSONL line (with trailing LF) for a token-matrix text record.
pub fn token_record(key: &str, tokens: &Tensor2) -> String {
    let mut out = String::new();
    let key = serde_json::to_string(key).expect("string serialization");
    let _ = write!(out, "{{\"key\":{key},\"kind\":\"text\",\"tokens\":[");
    for r in 0..tokens.rows() {
        if r > 0 {
            out.push(',');
        }
        push_array(&mut out, tokens.row(r));
    }
    out.push_str("]}\n");
    out
}

pub fn load_embeddings(path: impl AsRef<Path>, kind: Modality) -> Result<LoadReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::parse_jsonl(&text, kind).map_err(|e| e.with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_two_records() {
        let src = "{\"key\":\"a\",\"kind\":\"text\",\"vector\":[1,2,3,4]}\n\
                   {\"key\":\"b\",\"kind\":\"text\",\"vector\":[5,6,7,8]}\n";
        let r = EmbeddingTable::parse_jsonl(src, Modality::Text).unwrap();
        assert_eq!(r.table.text_len(), 2);
        assert_eq!(r.table.text_dim(), Some(4));
        assert_eq!(r.duplicates, 0);
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let src = "{\"key\":\"a\",\"kind\":\"image\",\"vector\":[1,2,3,4]}\n\
                   {\"key\":\"b\",\"kind\":\"image\",\"vector\":[5,6,7]}\n";
        match EmbeddingTable::parse_jsonl(src, Modality::Image) {
            Err(Error::DimensionMismatch { line, expected, found }) => {
                assert_eq!((line, expected, found), (2, 4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_is_non_finite() {
        let src = "{\"key\":\"a\",\"kind\":\"text\",\"vector\":[1.0,NaN]}\n";
        assert!(matches!(
            EmbeddingTable::parse_jsonl(src, Modality::Text),
            Err(Error::NonFinite { .. })
        ));
        let inf = "{\"key\":\"a\",\"kind\":\"text\",\"tokens\":[[1.0,-Infinity]]}\n";
        assert!(matches!(
            EmbeddingTable::parse_jsonl(inf, Modality::Text),
            Err(Error::NonFinite { .. })
        ));
        // The literal text inside a key is untouched.
        let key = "{\"key\":\"NaN bread\",\"kind\":\"text\",\"vector\":[1.0]}\n";
        let r = EmbeddingTable::parse_jsonl(key, Modality::Text).unwrap();
        assert!(r.table.text("NaN bread").is_some());
    }

    #[test]
    fn malformed_json_is_parse_error() {
        match EmbeddingTable::parse_jsonl("# header\n{\"key\": 1", Modality::Text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let wrong_kind = "{\"key\":\"a\",\"kind\":\"image\",\"vector\":[1]}\n";
        assert!(matches!(
            EmbeddingTable::parse_jsonl(wrong_kind, Modality::Text),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn duplicates_last_wins() {
        let src = "{\"key\":\"a\",\"kind\":\"image\",\"vector\":[1,2]}\n\
                   {\"key\":\"a\",\"kind\":\"image\",\"vector\":[3,4]}\n";
        let r = EmbeddingTable::parse_jsonl(src, Modality::Image).unwrap();
        assert_eq!(r.duplicates, 1);
        assert_eq!(r.table.image("a").unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn lookup() {
        let src = "{\"key\":\"a\",\"kind\":\"text\",\"vector\":[0.1,0.30000000000000004]}\n\
                   {\"key\":\"m\",\"kind\":\"text\",\"tokens\":[[1,2],[3,4],[5,6]]}\n";
        let t = EmbeddingTable::parse_jsonl(src, Modality::Text).unwrap().table;
        match t.text("a").unwrap() {
            TextEntry::Pooled(v) => {
                assert_eq!(v[0].to_bits(), 0.1f64.to_bits());
                assert_eq!(v[1].to_bits(), (0.1f64 + 0.2).to_bits());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(t.text("zzz").is_none());
        match t.text("m").unwrap() {
            TextEntry::Tokens(m) => assert_eq!((m.rows(), m.cols()), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.text("m").unwrap().pooled().unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn writer_round_trip() {
        let mut t = EmbeddingTable::new();
        t.insert_text("Äpfel", TextEntry::Pooled(vec![1.0 / 3.0, -2.5e-300, 7.0]))
            .unwrap();
        t.insert_text(
            "tok",
            TextEntry::Tokens(Tensor2::from_rows(&[vec![0.1, 0.2, 0.3], vec![1e10, -1e-10, 0.0]]).unwrap()),
        )
        .unwrap();
        t.insert_image("img\"1", vec![std::f64::consts::PI, 0.0]).unwrap();
        let text = EmbeddingTable::parse_jsonl(&t.to_jsonl(Modality::Text), Modality::Text).unwrap();
        let image =
            EmbeddingTable::parse_jsonl(&t.to_jsonl(Modality::Image), Modality::Image).unwrap();
        let mut merged = text.table;
        merged.merge(image.table).unwrap();
        assert_eq!(merged, t);
    }
}
