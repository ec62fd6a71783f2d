//! Sectioned key-value documents.
//!
//! The plain-text format shared by model documents, scenario files, result
//! documents, and config files: `[section]` headers, `key = value` pairs,
//! and bare comma-separated rows (used for grids and tables). Lines starting
//! with `#` and blank lines are ignored.

use std::fmt::Write as _;

/// A single line inside a section.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    /// `key = value`
    Pair(String, String),
    /// A bare comma-separated row.
    Row(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn new(name: &str) -> Self {
        Section { name: name.to_string(), entries: Vec::new() }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find_map(|e| match e {
            Entry::Pair(k, v) if k == key => Some(v.as_str()),
            _ => None,
        })
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Pair(k, v) => Some((k.as_str(), v.as_str())),
            _ => None,
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = &[String]> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Row(cells) => Some(cells.as_slice()),
            _ => None,
        })
    }

    pub fn push_pair(&mut self, key: &str, value: impl ToString) {
        self.entries.push(Entry::Pair(key.to_string(), value.to_string()));
    }

    pub fn push_row(&mut self, cells: Vec<String>) {
        self.entries.push(Entry::Row(cells));
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn new() -> Self {
        Document::default()
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    /// Parse a document. Fails on content before the first section header
    /// or an unterminated `[` line.
    pub fn parse(text: &str) -> Result<Document, ParseError> {
        let mut doc = Document::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(ParseError {
                    line: idx + 1,
                    message: "unterminated section header".to_string(),
                })?;
                doc.sections.push(Section::new(name.trim()));
                continue;
            }
            let section = doc.sections.last_mut().ok_or(ParseError {
                line: idx + 1,
                message: "content before first [section] header".to_string(),
            })?;
            if let Some((k, v)) = line.split_once('=') {
                section.entries.push(Entry::Pair(k.trim().to_string(), v.trim().to_string()));
            } else {
                let cells = line.split(',').map(|c| c.trim().to_string()).collect();
                section.entries.push(Entry::Row(cells));
            }
        }
        Ok(doc)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, section) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", section.name);
            for entry in &section.entries {
                match entry {
                    Entry::Pair(k, v) => {
                        let _ = writeln!(out, "{} = {}", k, v);
                    }
                    Entry::Row(cells) => {
                        let _ = writeln!(out, "{}", cells.join(", "));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_pairs_and_rows() {
        let text = "# comment\n[model]\nfamily = bernoulli\n\n[grid]\n0, 0.5, 1.5\n1, 0.5, 2.0\n";
        let doc = Document::parse(text).unwrap();
        assert_eq!(doc.sections.len(), 2);
        assert_eq!(doc.section("model").unwrap().get("family"), Some("bernoulli"));
        let rows: Vec<_> = doc.section("grid").unwrap().rows().collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], &["1".to_string(), "0.5".to_string(), "2.0".to_string()]);
    }

    #[test]
    fn render_parse_round_trip() {
        let mut doc = Document::new();
        let mut s = Section::new("result");
        s.push_pair("point", 1.625_f64);
        s.push_row(vec!["a".into(), "b".into()]);
        doc.push(s);
        let text = doc.render();
        assert_eq!(Document::parse(&text).unwrap(), doc);
    }

    #[test]
    fn content_before_section_is_an_error() {
        assert!(Document::parse("key = value\n").is_err());
    }
}
