use indexmap::IndexMap;

use super::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array,
    pub frozen: bool,
}

/// Named, ordered collection of network parameters with per-entry freeze flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).map(|p| p.frozen).unwrap_or(false)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        p.frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
        }
    }

    /// Freeze every entry whose name starts with one of `prefixes`; unfreeze the rest.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        for (name, p) in self.entries.iter_mut() {
            p.frozen = prefixes.iter().any(|pre| name.starts_with(pre));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Same names, shapes and freeze flags, all values zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Array::zeros(p.value.shape()),
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|p| p.value.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn quantize_f32(&mut self) {
        for p in self.entries.values_mut() {
            p.value.quantize_f32();
        }
    }

    /// Check that `other` has exactly the same names and shapes, in order.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape("parameter sets differ in entry count"));
        }
        for ((ka, pa), (kb, pb)) in self.entries.iter().zip(other.entries.iter()) {
            if ka != kb || pa.value.shape() != pb.value.shape() {
                return Err(Error::shape(format!(
                    "parameter mismatch: `{ka}` {:?} vs `{kb}` {:?}",
                    pa.value.shape(),
                    pb.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Union of several sets, each entry renamed to `prefix` + name.
    pub fn merged(parts: &[(&str, &ParamSet)]) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (prefix, set) in parts {
            for (k, p) in set.entries.iter() {
                let name = format!("{prefix}{k}");
                if out.entries.contains_key(&name) {
                    return Err(Error::config(format!("duplicate parameter name `{name}`")));
                }
                out.entries.insert(name, p.clone());
            }
        }
        Ok(out)
    }

    /// The entries named `prefix` + rest, renamed to rest.
    pub fn extract(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, p)| k.strip_prefix(prefix).map(|r| (r.to_string(), p.clone())))
                .collect(),
        }
    }
}
