use std::collections::BTreeMap;
use std::env;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Overrides the default output root.
pub const OUT_ENV: &str = "FE2E_LAB_OUT";
pub const DEFAULT_ROOT: &str = "runs";
pub const MANIFEST: &str = "run.json";

/// `--out` as given, else `$FE2E_LAB_OUT/<command>`, else `runs/<command>`.
pub fn run_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    match out {
        Some(p) => p,
        None => {
            let root = env::var_os(OUT_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
            root.join(command)
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    settings: &'a BTreeMap<String, String>,
    outputs: &'a [String],
    warnings: &'a [String],
    results: &'a serde_json::Value,
}

/// One command's output directory and the files written into it.
#[derive(Debug)]
pub struct Run {
    dir: PathBuf,
    command: String,
    outputs: Vec<String>,
    warnings: Vec<String>,
}

impl Run {
    pub fn create(dir: PathBuf, command: &str) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            command: command.to_string(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path for `name` inside the run directory, recorded as an output.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write_csv<T: Serialize>(
        &mut self,
        name: &str,
        rows: impl IntoIterator<Item = T>,
    ) -> Result<()> {
        let path = self.file(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        depthflow_core::io::write_csv(BufWriter::new(f), rows)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Prints to stderr and keeps the message for the manifest.
    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("warning: {msg}");
        self.warnings.push(msg);
    }

    /// Writes `run.json` and returns its path.
    pub fn finish(
        self,
        settings: &BTreeMap<String, String>,
        results: serde_json::Value,
    ) -> Result<PathBuf> {
        let manifest = Manifest {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            settings,
            outputs: &self.outputs,
            warnings: &self.warnings,
            results: &results,
        };
        let path = self.dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
