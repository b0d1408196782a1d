//! Flat `key = value` configuration text. Files are parsed with the TOML
//! reader but nested tables are rejected; every value sits at the top level.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{Error, Result};

/// Ordered key/value pairs, rendered one per line.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct KvList(pub Vec<(String, String)>);

impl KvList {
    pub fn f64(&mut self, key: &str, v: f64) {
        self.0.push((key.to_string(), format!("{v:?}")));
    }

    pub fn int(&mut self, key: &str, v: impl Into<u64>) {
        self.0.push((key.to_string(), v.into().to_string()));
    }

    pub fn usize(&mut self, key: &str, v: usize) {
        self.0.push((key.to_string(), v.to_string()));
    }

    pub fn bool(&mut self, key: &str, v: bool) {
        self.0.push((key.to_string(), v.to_string()));
    }

    pub fn str(&mut self, key: &str, v: &str) {
        self.0
            .push((key.to_string(), Value::String(v.to_string()).to_string()));
    }

    pub fn f64_list(&mut self, key: &str, v: &[f64]) {
        let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        self.0
            .push((key.to_string(), format!("[{}]", items.join(", "))));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of the rendered text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}

/// Parsed flat configuration. Getters remove the keys they consume so that
/// leftovers can be reported as unknown.
#[derive(Debug, Default, Clone)]
pub struct KvMap {
    values: BTreeMap<String, Value>,
}

fn bad(key: &str, want: &str, got: &Value) -> Error {
    Error::InvalidConfig(format!("key `{key}` expects {want}, got `{got}`"))
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        let mut values = BTreeMap::new();
        for (k, v) in table {
            if v.is_table() {
                return Err(Error::InvalidConfig(format!(
                    "nested table `{k}` not allowed; use flat keys"
                )));
            }
            values.insert(k, v);
        }
        Ok(Self { values })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Sets `key` from a command-line `key=value` override; the value is
    /// parsed as a TOML value, falling back to a bare string.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override `{assignment}` is not key=value"))
        })?;
        let k = k.trim();
        let v = v.trim();
        let value = format!("x = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("x"))
            .unwrap_or_else(|| Value::String(v.to_string()));
        self.values.insert(k.to_string(), value);
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: Value) {
        self.values.insert(key.to_string(), value);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn take_f64(&mut self, key: &str, slot: &mut f64) -> Result<()> {
        if let Some(v) = self.values.remove(key) {
            *slot = match v {
                Value::Float(f) => f,
                Value::Integer(i) => i as f64,
                other => return Err(bad(key, "a number", &other)),
            };
        }
        Ok(())
    }

    pub fn take_u64(&mut self, key: &str, slot: &mut u64) -> Result<()> {
        if let Some(v) = self.values.remove(key) {
            *slot = match v {
                Value::Integer(i) if i >= 0 => i as u64,
                other => return Err(bad(key, "a non-negative integer", &other)),
            };
        }
        Ok(())
    }

    pub fn take_usize(&mut self, key: &str, slot: &mut usize) -> Result<()> {
        let mut v = *slot as u64;
        self.take_u64(key, &mut v)?;
        *slot = v as usize;
        Ok(())
    }

    pub fn take_bool(&mut self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.values.remove(key) {
            *slot = match v {
                Value::Boolean(b) => b,
                other => return Err(bad(key, "true or false", &other)),
            };
        }
        Ok(())
    }

    pub fn take_string(&mut self, key: &str, slot: &mut String) -> Result<()> {
        if let Some(v) = self.values.remove(key) {
            *slot = match v {
                Value::String(s) => s,
                other => return Err(bad(key, "a string", &other)),
            };
        }
        Ok(())
    }

    pub fn take_f64_list(&mut self, key: &str, slot: &mut Vec<f64>) -> Result<()> {
        if let Some(v) = self.values.remove(key) {
            let Value::Array(items) = &v else {
                return Err(bad(key, "a list of numbers", &v));
            };
            *slot = items
                .iter()
                .map(|x| match x {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    _ => Err(bad(key, "a list of numbers", &v)),
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.values.keys().next() {
            None => Ok(()),
            Some(_) => Err(Error::InvalidConfig(format!(
                "unknown keys: {}",
                self.values.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}
