//! Name-keyed registries for interchangeable strategies.
//!
//! Split rules, perturbations and window fusion modes each implement a
//! common trait and are looked up by the name used in config files and on
//! the command line.

use std::collections::BTreeMap;
use std::fmt;

pub struct Registry<T: ?Sized> {
    what: &'static str,
    entries: BTreeMap<&'static str, Box<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(what: &'static str) -> Self {
        Registry {
            what,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `item` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: &'static str, item: Box<T>) -> &mut Self {
        self.entries.insert(name, item);
        self
    }

    pub fn get(&self, name: &str) -> Option<&T> {
        self.entries.get(name).map(|b| b.as_ref())
    }

    pub fn lookup(&self, name: &str) -> Result<&T, UnknownName> {
        self.get(name).ok_or_else(|| UnknownName {
            what: self.what,
            name: name.to_string(),
            known: self.names(),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownName {
    pub what: &'static str,
    pub name: String,
    pub known: Vec<&'static str>,
}

impl fmt::Display for UnknownName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown {} '{}' (known: {})",
            self.what,
            self.name,
            self.known.join(", ")
        )
    }
}

impl std::error::Error for UnknownName {}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greet {
        fn hello(&self) -> String;
    }

    struct En;
    impl Greet for En {
        fn hello(&self) -> String {
            "hello".into()
        }
    }

    #[test]
    fn lookup_by_name() {
        let mut r: Registry<dyn Greet> = Registry::new("greeter");
        r.register("en", Box::new(En));
        assert_eq!(r.lookup("en").unwrap().hello(), "hello");
        let err = r.lookup("fr").err().unwrap();
        assert_eq!(err.to_string(), "unknown greeter 'fr' (known: en)");
    }
}
