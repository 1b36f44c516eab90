//! JSON-lines metric emission. Every row carries the hash of the canonical
//! configuration so any metric can be traced to the run that produced it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::Config;

/// Hex SHA-256 of the canonical configuration text.
pub fn config_hash(cfg: &Config) -> String {
    let digest = Sha256::digest(cfg.canonical_text().as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Appends JSON rows to a `.jsonl` file, stamping each with the config hash.
pub struct MetricsWriter {
    out: BufWriter<File>,
    hash: String,
}

impl MetricsWriter {
    /// Creates (truncates) the metrics file.
    pub fn create(path: &Path, cfg: &Config) -> std::io::Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?), hash: config_hash(cfg) })
    }

    /// Writes one row; `row` must be a JSON object.
    pub fn row(&mut self, mut row: Map<String, Value>) -> std::io::Result<()> {
        row.insert(String::from("config_hash"), Value::String(self.hash.clone()));
        serde_json::to_writer(&mut self.out, &Value::Object(row))?;
        self.out.write_all(b"\n")
    }

    /// Flushes buffered rows to disk.
    pub fn finish(mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Builds a JSON object from key/value pairs.
#[macro_export]
macro_rules! metric_row {
    ($($key:literal : $value:expr),* $(,)?) => {{
        let mut map = serde_json::Map::new();
        $(map.insert(String::from($key), serde_json::json!($value));)*
        map
    }};
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_order_independent() {
        let a = Config::parse("model.layers = 2\nmodel.heads = 4\n").unwrap();
        let b = Config::parse("model.heads = 4\nmodel.layers = 2\n").unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);

        let c = Config::parse("model.heads = 4\nmodel.layers = 3\n").unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn rows_carry_the_hash() {
        let cfg = Config::parse("model.layers = 2\n").unwrap();
        let dir = std::env::temp_dir().join(format!("stpyr-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rows.jsonl");
        let mut writer = MetricsWriter::create(&path, &cfg).unwrap();
        writer.row(metric_row! { "step": 1, "loss": 0.5 }).unwrap();
        writer.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let row: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(row["step"], 1);
        assert_eq!(row["config_hash"], serde_json::json!(config_hash(&cfg)));
        std::fs::remove_dir_all(&dir).ok();
    }
}
