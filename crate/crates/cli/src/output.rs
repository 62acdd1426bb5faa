use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// Run identity written at the top of every artifact.
#[derive(Clone, Debug)]
pub struct Header {
    pub command: &'static str,
    pub seed: u64,
    pub config_hash: String,
}

impl Header {
    pub fn new(command: &'static str, seed: u64, config: &Value) -> Self {
        let canonical = json!({ "command": command, "seed": seed, "config": config });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        let config_hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        Self { command, seed, config_hash }
    }

    pub fn json(&self) -> Value {
        json!({
            "tool": "qfif",
            "version": env!("CARGO_PKG_VERSION"),
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.config_hash,
        })
    }

    pub fn csv_comment(&self) -> String {
        format!(
            "# qfif {} schema_version={} command={} seed={} config_hash={}\n",
            env!("CARGO_PKG_VERSION"),
            SCHEMA_VERSION,
            self.command,
            self.seed,
            self.config_hash
        )
    }

    /// `{"header": …}` merged with the fields of `body`.
    pub fn document(&self, body: Value) -> Value {
        let mut doc = Map::new();
        doc.insert("header".into(), self.json());
        match body {
            Value::Object(m) => doc.extend(m),
            other => {
                doc.insert("result".into(), other);
            }
        }
        Value::Object(doc)
    }
}

pub fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

/// Writes to `path`, or to stdout when `path` is `None`.
pub fn write(path: Option<&Path>, text: &str) -> std::io::Result<()> {
    match path {
        Some(p) => fs::write(p, text),
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()
        }
    }
}

/// `base` with `suffix` appended to its file name.
pub fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

pub fn csv_number(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.17e}")
    } else {
        "nan".into()
    }
}
