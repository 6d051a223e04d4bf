//! Run manifests: enough to relaunch an invocation and find its outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use caphdr2ir::{Error, RunConfig};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;
use toml::{Table, Value};

pub const REVISION: &str = env!("CAPHDR2IR_REVISION");

#[derive(Clone, Debug)]
pub struct RunManifest {
    pub argv: Vec<String>,
    pub revision: String,
    pub started_at: String,
    pub config_hash: Option<String>,
    pub config_toml: Option<String>,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> String {
    OffsetDateTime::now_utc()
        .format(&Rfc3339)
        .unwrap_or_else(|_| "unknown".into())
}

impl RunManifest {
    pub fn start(argv: &[OsString]) -> Self {
        RunManifest {
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            revision: REVISION.to_string(),
            started_at: now(),
            config_hash: None,
            config_toml: None,
            seed: None,
            artifacts: Vec::new(),
        }
    }

    pub fn config(&mut self, cfg: &RunConfig) {
        self.config_hash = Some(cfg.hash());
        self.config_toml = Some(cfg.to_toml());
        self.seed.get_or_insert(cfg.train.seed);
    }

    pub fn artifact(&mut self, p: &Path) {
        self.artifacts.push(p.to_path_buf());
    }

    pub fn render(&self) -> String {
        let mut t = Table::new();
        if let Some(cmd) = self.argv.get(1) {
            t.insert("command".into(), Value::String(cmd.clone()));
        }
        t.insert(
            "argv".into(),
            Value::Array(self.argv.iter().cloned().map(Value::String).collect()),
        );
        t.insert("revision".into(), Value::String(self.revision.clone()));
        t.insert("started_at".into(), Value::String(self.started_at.clone()));
        t.insert("finished_at".into(), Value::String(now()));
        if let Some(h) = &self.config_hash {
            t.insert("config_hash".into(), Value::String(h.clone()));
        }
        if let Some(s) = self.seed {
            t.insert("seed".into(), Value::Integer(s as i64));
        }
        t.insert(
            "artifacts".into(),
            Value::Array(
                self.artifacts
                    .iter()
                    .map(|p| Value::String(p.display().to_string()))
                    .collect(),
            ),
        );
        if let Some(c) = &self.config_toml {
            t.insert("config".into(), Value::String(c.clone()));
        }
        toml::to_string(&t).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.render()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
