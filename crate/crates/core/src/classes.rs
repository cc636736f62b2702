//! Object class vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BODY_TEXT: &str = "Body Text";
pub const EQUATION: &str = "Equation";
pub const FIGURE: &str = "Figure";
pub const FIGURE_CAPTION: &str = "Figure Caption";
pub const OTHER: &str = "Other";
pub const PAGE_FOOTER: &str = "Page Footer";
pub const PAGE_HEADER: &str = "Page Header";
pub const REFERENCE_TEXT: &str = "Reference Text";
pub const SECTION_HEADER: &str = "Section Header";
pub const TABLE: &str = "Table";
pub const TABLE_CAPTION: &str = "Table Caption";

/// The eleven default classes with their training-set instance counts from
/// the geoscience page collection; used as default generator weights.
pub const DEFAULT_CLASS_COUNTS: [(&str, u32); 11] = [
    (BODY_TEXT, 6578),
    (EQUATION, 1115),
    (FIGURE, 1384),
    (FIGURE_CAPTION, 1285),
    (OTHER, 359),
    (PAGE_FOOTER, 907),
    (PAGE_HEADER, 2765),
    (REFERENCE_TEXT, 496),
    (SECTION_HEADER, 3227),
    (TABLE, 767),
    (TABLE_CAPTION, 763),
];

/// Ordered list of class names; a class's index is its output unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassVocab {
    names: Vec<String>,
}

impl Default for ClassVocab {
    fn default() -> Self {
        Self {
            names: DEFAULT_CLASS_COUNTS
                .iter()
                .map(|(n, _)| n.to_string())
                .collect(),
        }
    }
}

impl ClassVocab {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("class vocabulary is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocabulary() {
        let v = ClassVocab::default();
        assert_eq!(v.len(), 11);
        assert_eq!(v.index_of(TABLE).unwrap(), 9);
        assert_eq!(v.name(0), BODY_TEXT);
        assert!(v.index_of("Chart").is_err());
        let total: u32 = DEFAULT_CLASS_COUNTS.iter().map(|(_, c)| c).sum();
        assert_eq!(total, 19_646);
    }

    #[test]
    fn rejects_duplicates() {
        assert!(ClassVocab::new(["Table", "Figure", "Table"]).is_err());
        assert!(ClassVocab::new(Vec::<String>::new()).is_err());
        assert_eq!(
            ClassVocab::new(["Table", "Figure", "Equation"])
                .unwrap()
                .len(),
            3
        );
    }
}
