//! TOML config files whose keys override command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct ConfigOverrides {
    table: toml::Table,
}

impl ConfigOverrides {
    pub fn load(path: Option<&Path>) -> Result<Option<ConfigOverrides>> {
        let Some(path) = path else {
            return Ok(None);
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = text
            .parse()
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(Some(ConfigOverrides { table }))
    }

    fn get(&self, key: &str) -> Option<&toml::Value> {
        self.table.get(key)
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.get(key).and_then(|v| v.as_str()).map(str::to_string)
    }

    pub fn string_opt(&self, key: &str, target: &mut Option<String>) {
        if let Some(s) = self.string(key) {
            *target = Some(s);
        }
    }

    pub fn path(&self, key: &str, target: &mut PathBuf) {
        if let Some(s) = self.string(key) {
            *target = PathBuf::from(s);
        }
    }

    pub fn usize(&self, key: &str, target: &mut usize) {
        if let Some(v) = self.get(key).and_then(|v| v.as_integer()) {
            if v >= 0 {
                *target = v as usize;
            }
        }
    }

    pub fn u64(&self, key: &str, target: &mut u64) {
        if let Some(v) = self.get(key).and_then(|v| v.as_integer()) {
            if v >= 0 {
                *target = v as u64;
            }
        }
    }

    fn number(&self, key: &str) -> Option<f64> {
        match self.get(key) {
            Some(toml::Value::Float(f)) => Some(*f),
            Some(toml::Value::Integer(i)) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn f32(&self, key: &str, target: &mut f32) {
        if let Some(v) = self.number(key) {
            *target = v as f32;
        }
    }

    pub fn f64(&self, key: &str, target: &mut f64) {
        if let Some(v) = self.number(key) {
            *target = v;
        }
    }

    pub fn f32_opt(&self, key: &str, target: &mut Option<f32>) {
        if let Some(v) = self.number(key) {
            *target = Some(v as f32);
        }
    }

    pub fn bool(&self, key: &str, target: &mut bool) {
        if let Some(v) = self.get(key).and_then(|v| v.as_bool()) {
            *target = v;
        }
    }

    pub fn usize_list(&self, key: &str, target: &mut Vec<usize>) {
        if let Some(arr) = self.get(key).and_then(|v| v.as_array()) {
            let parsed: Vec<usize> = arr
                .iter()
                .filter_map(|v| v.as_integer())
                .filter(|&v| v >= 0)
                .map(|v| v as usize)
                .collect();
            if !parsed.is_empty() {
                *target = parsed;
            }
        }
    }
}
