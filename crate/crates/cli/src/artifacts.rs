//! Artifact files. Each one carries the run config: JSON documents under a
//! `config` key, CSV tables in a leading `# config: {...}` comment line and
//! binary containers in a `<file>.json` sidecar.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::CliError;

pub struct Artifacts {
    dir: PathBuf,
    config: Value,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(cfg: &RunConfig) -> Result<Artifacts, CliError> {
        std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", cfg.out.display())))?;
        Ok(Artifacts {
            dir: cfg.out.clone(),
            config: serde_json::to_value(cfg.for_artifact())?,
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(path);
        Ok(BufWriter::new(f))
    }

    /// JSON document `{config, ...body}`; `body` must serialize to an object.
    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<(), CliError> {
        let mut doc = match serde_json::to_value(body)? {
            Value::Object(m) => m,
            other => {
                let mut m = serde_json::Map::new();
                m.insert("result".into(), other);
                m
            }
        };
        doc.insert("config".into(), self.config.clone());
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &Value::Object(doc))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// CSV table; `body` writes the header row and the data rows.
    pub fn csv<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
    {
        let line = format!("# config: {}\n", serde_json::to_string(&self.config)?);
        let mut w = self.create(name)?;
        w.write_all(line.as_bytes())?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Binary container plus its config sidecar.
    pub fn bin<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
    {
        let mut w = self.create(name)?;
        body(&mut w)?;
        w.flush()?;
        self.json(&format!("{name}.json"), &serde_json::json!({ "file": name }))
    }
}

/// Strips the leading config comment of a CSV artifact.
pub fn csv_body(text: &str) -> &str {
    match text.strip_prefix("# config: ") {
        Some(rest) => rest.split_once('\n').map_or("", |(_, b)| b),
        None => text,
    }
}

/// Reads the config embedded in any artifact.
pub fn embedded_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = if let Some(rest) = text.strip_prefix("# config: ") {
        serde_json::from_str(rest.lines().next().unwrap_or_default())
    } else {
        serde_json::from_str::<Value>(&text).map(|v| v.get("config").cloned().unwrap_or(Value::Null))
    }
    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: no embedded config ({e})", path.display())))
}
