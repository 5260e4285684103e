//! Name → factory registries for interchangeable strategies.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<T, S> = Box<dyn Fn(&S) -> Result<Box<T>> + Send + Sync>;

/// Builds strategy objects of type `T` by name from settings `S`.
pub struct Registry<T: ?Sized, S> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T, S>>,
}

impl<T: ?Sized, S> Registry<T, S> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Registers (or replaces) a factory.
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&S) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, name: &str, settings: &S) -> Result<Box<T>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownName {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().collect::<Vec<_>>().join(", "),
        })?;
        factory(settings)
    }
}
