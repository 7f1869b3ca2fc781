//! Name-keyed registries for interchangeable strategies.

use crate::error::{Error, Result};

/// A static table of named constructors producing trait objects. `C` is the
/// construction context a family needs (use `()` when none).
pub struct Registry<T: ?Sized + 'static, C: ?Sized + 'static = ()> {
    kind: &'static str,
    entries: &'static [(&'static str, fn(&C) -> Box<T>)],
}

impl<T: ?Sized + 'static, C: ?Sized + 'static> Registry<T, C> {
    pub const fn new(kind: &'static str, entries: &'static [(&'static str, fn(&C) -> Box<T>)]) -> Self {
        Registry { kind, entries }
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    /// The first entry is the default.
    pub fn default_name(&self) -> &'static str {
        self.entries[0].0
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(n, _)| *n)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn create(&self, name: &str, ctx: &C) -> Result<Box<T>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, make)| make(ctx))
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().collect::<Vec<_>>().join(", "),
            })
    }
}
