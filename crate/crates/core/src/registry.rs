//! Name-keyed factories for interchangeable strategies.
//!
//! Noise-level rules and optimizers are selected at runtime from config
//! or CLI flags by looking their names up here.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::optim::{Adam, Optimizer, OptimizerConfig, Sgd};
use crate::schedule::{Anisotropic, Isotropic, NoiseLevel};

type Factory<T, A> = Box<dyn Fn(&A) -> Box<T> + Send + Sync>;

pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&A) -> Box<T> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<T>> {
        self.factories
            .get(name)
            .map(|f| f(args))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown {} '{}' (available: {})",
                    self.kind,
                    name,
                    self.names().join(", ")
                ))
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }
}

/// Built-in noise-level rules: `anisotropic` and `isotropic`.
pub fn noise_levels() -> Registry<dyn NoiseLevel> {
    let mut r: Registry<dyn NoiseLevel> = Registry::new("noise level");
    r.register("anisotropic", |_| Box::new(Anisotropic));
    r.register("isotropic", |_| Box::new(Isotropic));
    r
}

/// Built-in optimizers: `adam` and `sgd`.
pub fn optimizers() -> Registry<dyn Optimizer, OptimizerConfig> {
    let mut r: Registry<dyn Optimizer, OptimizerConfig> = Registry::new("optimizer");
    r.register("adam", |cfg| Box::new(Adam::new(cfg)));
    r.register("sgd", |_| Box::new(Sgd::default()));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_resolve_by_name() {
        let levels = noise_levels();
        assert_eq!(levels.names(), vec!["anisotropic", "isotropic"]);
        assert_eq!(levels.create("isotropic", &()).unwrap().name(), "isotropic");
        let opts = optimizers();
        let adam = opts.create("adam", &OptimizerConfig::default()).unwrap();
        assert_eq!(adam.name(), "adam");
    }

    #[test]
    fn unknown_name_lists_choices() {
        let err = noise_levels().create("cosine", &()).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("cosine") && msg.contains("anisotropic"));
    }
}
