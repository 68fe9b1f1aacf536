use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::Failure;

pub const MANIFEST: &str = "manifest.json";

/// An output directory collecting the files one command produces.
pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(root).map_err(|e| Failure::Data(format!("{}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    /// Path of `name` under the root, recorded as produced.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.root.join(name)
    }

    pub fn dir(&self, name: &str) -> Result<PathBuf, Failure> {
        let p = self.root.join(name);
        std::fs::create_dir_all(&p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    pub fn write(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let p = self.file(name);
        std::fs::write(&p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
    }

    pub fn write_json(&mut self, name: &str, v: &Value) -> Result<(), Failure> {
        self.write(name, &(serde_json::to_string_pretty(v).expect("json value serializes") + "\n"))
    }

    /// Records every file under `sub` (relative names) as produced.
    pub fn record_tree(&mut self, sub: &str) {
        let mut found = Vec::new();
        collect(&self.root.join(sub), sub, &mut found);
        found.sort();
        for f in found {
            self.file(&f);
        }
    }

    /// Appends this run to `manifest.json`.
    pub fn finish(self, command: &str, seed: Option<u64>, config_hash: Option<String>) -> Result<(), Failure> {
        let path = self.root.join(MANIFEST);
        let mut doc = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?,
            Err(_) => json!({ "runs": [] }),
        };
        let runs = doc
            .get_mut("runs")
            .and_then(Value::as_array_mut)
            .ok_or_else(|| Failure::Data(format!("{}: missing runs array", path.display())))?;
        runs.push(json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config_hash": config_hash,
            "files": self.files,
        }));
        let text = serde_json::to_string_pretty(&doc).expect("json value serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
    }
}

fn collect(dir: &Path, prefix: &str, out: &mut Vec<String>) {
    let Ok(entries) = std::fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let name = format!("{prefix}/{}", e.file_name().to_string_lossy());
        if e.path().is_dir() {
            collect(&e.path(), &name, out);
        } else {
            out.push(name);
        }
    }
}
