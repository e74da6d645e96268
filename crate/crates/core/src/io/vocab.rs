use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub seen: bool,
}

/// Ordered class names with seen/unseen flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassVocabulary {
    classes: Vec<ClassEntry>,
}

impl ClassVocabulary {
    /// Requires unique, non-empty names and at least one seen class.
    pub fn new(classes: impl IntoIterator<Item = (String, bool)>) -> Result<Self> {
        let classes: Vec<ClassEntry> = classes
            .into_iter()
            .map(|(name, seen)| ClassEntry { name, seen })
            .collect();
        Self::try_from(classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index].name
    }

    pub fn is_seen(&self, index: usize) -> bool {
        self.classes[index].seen
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Fails unless the vocabulary has at least one unseen class.
    pub fn require_unseen(&self) -> Result<()> {
        if self.classes.iter().all(|c| c.seen) {
            return Err(Error::Config("zero-shot evaluation needs at least one unseen class".into()));
        }
        Ok(())
    }
}

impl TryFrom<Vec<ClassEntry>> for ClassVocabulary {
    type Error = Error;

    fn try_from(classes: Vec<ClassEntry>) -> Result<Self> {
        let mut names = HashSet::new();
        for c in &classes {
            if c.name.trim().is_empty() {
                return Err(Error::Config("class names must be non-empty".into()));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate class name {:?}", c.name)));
            }
        }
        if !classes.iter().any(|c| c.seen) {
            return Err(Error::Config("vocabulary needs at least one seen class".into()));
        }
        Ok(Self { classes })
    }
}

impl From<ClassVocabulary> for Vec<ClassEntry> {
    fn from(v: ClassVocabulary) -> Self {
        v.classes
    }
}

/// Seen and unseen class indices, each in vocabulary order.
pub fn split_seen_unseen(vocab: &ClassVocabulary) -> (Vec<usize>, Vec<usize>) {
    (0..vocab.len()).partition(|&i| vocab.is_seen(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(flags: &[bool]) -> ClassVocabulary {
        ClassVocabulary::new(flags.iter().enumerate().map(|(i, &s)| (format!("c{i}"), s))).unwrap()
    }

    #[test]
    fn all_seen_split() {
        assert_eq!(split_seen_unseen(&vocab(&[true; 3])), (vec![0, 1, 2], vec![]));
        assert!(vocab(&[true; 3]).require_unseen().is_err());
    }

    #[test]
    fn alternating_split() {
        let v = vocab(&[true, false, true, false]);
        assert_eq!(split_seen_unseen(&v), (vec![0, 2], vec![1, 3]));
        assert!(v.require_unseen().is_ok());
    }

    #[test]
    fn rejects_duplicates_and_all_unseen() {
        assert!(ClassVocabulary::new([("a".into(), true), ("a".into(), false)]).is_err());
        assert!(ClassVocabulary::new([("a".into(), false)]).is_err());
        assert!(ClassVocabulary::new([(" ".into(), true)]).is_err());
    }

    #[test]
    fn json_roundtrip_revalidates() {
        let v = vocab(&[true, false]);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<ClassVocabulary>(&s).unwrap(), v);
        let dup = r#"[{"name":"x","seen":true},{"name":"x","seen":true}]"#;
        assert!(serde_json::from_str::<ClassVocabulary>(dup).is_err());
    }
}
