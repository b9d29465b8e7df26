//! Name-keyed registries of interchangeable implementations.

use crate::error::{MlrError, Result};

/// Ordered map from a name to a constructor (or any other value).
pub struct Registry<T> {
    kind: &'static str,
    entries: Vec<(&'static str, T)>,
}

impl<T> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: Vec::new() }
    }

    pub fn register(&mut self, name: &'static str, value: T) -> &mut Self {
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "{} `{name}` registered twice",
            self.kind
        );
        self.entries.push((name, value));
        self
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v)
            .ok_or_else(|| MlrError::UnknownName {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_ok()
    }
}
